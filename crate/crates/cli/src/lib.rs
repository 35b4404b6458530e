//! Command-line orchestration of the beamlab experiment pipeline.
//!
//! Stages exchange files in one output directory and record their outputs in
//! a content-addressed manifest, so reruns only execute what changed.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod stages;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::{ExperimentConfig, Method, Seeds};
pub use error::{CliError, Result};
pub use manifest::Manifest;
pub use pipeline::{Overrides, Pipeline, RunSummary};
pub use stages::Stage;

pub const DEFAULT_OUTPUT_DIR: &str = "beamlab-out";

#[derive(Debug, Parser)]
#[command(name = "beamlab", version, about = "Digital-twin beam alignment experiments")]
pub struct Cli {
    /// Experiment config (JSON); defaults apply when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory [default: config `output_dir`, else beamlab-out].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Root seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every stage, skipping those already up to date.
    Run {
        /// Run only this stage.
        #[arg(long, value_enum)]
        stage: Option<Stage>,
    },
    /// Scenes and the twin, real and augmented datasets.
    Generate,
    /// Train on twin data.
    Pretrain,
    /// Fine-tune on the augmented set; also trains the real-only reference.
    Finetune,
    /// Shapley values of the sensing beams.
    Shap,
    /// Select sensing beams and retrain on them.
    Select,
    /// Conformal credibility on clean and FGSM inputs.
    Dknn {
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Learned policies against the search baselines.
    Eval {
        /// Restrict to these methods (repeatable).
        #[arg(long = "method", value_enum)]
        methods: Vec<Method>,
    },
    /// Collect figure data under report/.
    Report,
    /// Print the resolved config.
    Config,
}

impl Cli {
    pub fn load_config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.threads.is_some() {
            cfg.threads = self.threads;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn output_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }
}

/// Executes a parsed command line.
pub fn run(cli: &Cli) -> Result<Option<RunSummary>> {
    let cfg = cli.load_config()?;
    let dir = cli.output_dir(&cfg);
    let mut ov = Overrides::default();
    let stage = match &cli.command {
        Command::Config => {
            // a closed pipe (`beamlab config | head`) is not an error
            let _ = writeln!(std::io::stdout().lock(), "{}", cfg.resolved_json());
            return Ok(None);
        }
        Command::Run { stage } => *stage,
        Command::Generate => Some(Stage::Generate),
        Command::Pretrain => Some(Stage::Pretrain),
        Command::Finetune => Some(Stage::Finetune),
        Command::Shap => Some(Stage::Shap),
        Command::Select => Some(Stage::Select),
        Command::Dknn { epsilon } => {
            ov.epsilon = *epsilon;
            Some(Stage::Dknn)
        }
        Command::Eval { methods } => {
            if !methods.is_empty() {
                ov.methods = Some(methods.clone());
            }
            Some(Stage::Eval)
        }
        Command::Report => Some(Stage::Report),
    };
    let p = Pipeline::new(cfg, dir, &ov)?;
    let summary = match stage {
        Some(s) => p.run_stage(s)?,
        None => p.run_all()?,
    };
    Ok(Some(summary))
}
