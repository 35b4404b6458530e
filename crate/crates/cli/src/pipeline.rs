//! Runs stages in order, skipping those whose fingerprint and outputs are unchanged.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::config::{ExperimentConfig, Method, Seeds, SCHEMA_VERSION};
use crate::error::{CliError, Result};
use crate::manifest::{hash_file, sha256_hex, Manifest, StageRecord};
use crate::stages::{self, Outputs, Stage, StageContext};

pub const RESOLVED_CONFIG: &str = "config.resolved.json";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub executed: Vec<Stage>,
    pub skipped: Vec<Stage>,
}

/// Overrides for a single invocation; they enter the fingerprint like config values.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub epsilon: Option<f64>,
    pub methods: Option<Vec<Method>>,
}

pub struct Pipeline {
    cfg: ExperimentConfig,
    dir: PathBuf,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, dir: impl Into<PathBuf>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = cfg;
        if let Some(eps) = overrides.epsilon {
            cfg.dknn.epsilon = eps;
        }
        if let Some(m) = &overrides.methods {
            cfg.eval.methods = m.clone();
        }
        cfg.validate()?;
        Ok(Self { cfg, dir: dir.into() })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Runs every stage; stages already up to date are skipped.
    pub fn run_all(&self) -> Result<RunSummary> {
        self.in_pool(|| {
            let mut summary = RunSummary::default();
            for stage in Stage::ALL {
                if self.run(stage, false)? {
                    summary.executed.push(stage);
                } else {
                    summary.skipped.push(stage);
                }
            }
            Ok(summary)
        })
    }

    /// Runs one stage unconditionally once its inputs exist.
    pub fn run_stage(&self, stage: Stage) -> Result<RunSummary> {
        self.in_pool(|| {
            self.run(stage, true)?;
            Ok(RunSummary {
                executed: vec![stage],
                skipped: vec![],
            })
        })
    }

    fn in_pool<T: Send>(&self, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
        match self.cfg.threads {
            Some(n) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| CliError::artifact(&self.dir, format!("thread pool: {e}")))?;
                pool.install(f)
            }
            None => f(),
        }
    }

    /// Input artifact hashes, or the first missing input as a dependency error.
    fn input_hashes(&self, stage: Stage, manifest: Option<&Manifest>) -> Result<BTreeMap<String, String>> {
        let names: Vec<String> = if stage == Stage::Report {
            // whatever figure sources earlier stages recorded
            let Some(m) = manifest else {
                return Err(CliError::EmptyReport(self.dir.clone()));
            };
            let mut v: Vec<String> = stages::FIGURES
                .iter()
                .map(|f| f.1.to_string())
                .filter(|src| m.producer_of(src).is_some() && self.dir.join(src).is_file())
                .collect();
            v.sort_unstable();
            v.dedup();
            v
        } else {
            stages::inputs(stage, &self.cfg).into_iter().map(String::from).collect()
        };
        let mut out = BTreeMap::new();
        for name in names {
            let path = self.dir.join(&name);
            if !path.is_file() {
                return Err(CliError::Dependency {
                    stage: stage.name(),
                    producer: stages::producer(&name).name(),
                    artifact: name,
                });
            }
            out.insert(name, hash_file(&path)?);
        }
        Ok(out)
    }

    fn fingerprint(&self, stage: Stage, inputs: &BTreeMap<String, String>) -> String {
        let doc = serde_json::json!({
            "stage": stage.name(),
            "settings": stages::stage_settings(stage, &self.cfg),
            "inputs": inputs,
        });
        sha256_hex(doc.to_string().as_bytes())
    }

    /// Returns whether the stage executed.
    fn run(&self, stage: Stage, force: bool) -> Result<bool> {
        let manifest = Manifest::load(&self.dir)?;
        let inputs = self.input_hashes(stage, manifest.as_ref())?;
        let fp = self.fingerprint(stage, &inputs);
        if !force {
            if let Some(m) = &manifest {
                let current = m.stages.get(stage.name()).is_some_and(|r| r.fingerprint == fp);
                if current && m.outputs_intact(stage.name(), &self.dir) {
                    log::info!("{}: up to date", stage.name());
                    return Ok(false);
                }
            }
        }

        log::info!("{}: running", stage.name());
        let outputs = if stage == Stage::Report {
            stages::report(&self.dir, &inputs)?
        } else {
            std::fs::create_dir_all(&self.dir).map_err(|e| CliError::io(&self.dir, e))?;
            let ctx = StageContext {
                cfg: &self.cfg,
                seeds: Seeds::new(self.cfg.seed),
                dir: &self.dir,
            };
            stages::execute(stage, &ctx)?
        };
        self.commit(stage, fp, outputs, manifest)?;
        Ok(true)
    }

    fn commit(&self, stage: Stage, fingerprint: String, outputs: Outputs, manifest: Option<Manifest>) -> Result<()> {
        write_atomic(&self.dir.join(RESOLVED_CONFIG), (self.cfg.resolved_json() + "\n").as_bytes())?;
        let mut manifest = manifest.unwrap_or_default();
        manifest.schema_version = SCHEMA_VERSION;
        manifest.config_sha256 = self.cfg.hash();
        let mut record = StageRecord {
            fingerprint,
            outputs: BTreeMap::new(),
        };
        for (name, bytes) in &outputs.0 {
            write_atomic(&self.dir.join(name), bytes)?;
            record.outputs.insert(name.clone(), sha256_hex(bytes));
        }
        if let Some(old) = manifest.stages.get(stage.name()) {
            for stale in old.outputs.keys().filter(|k| !record.outputs.contains_key(*k)) {
                let p = self.dir.join(stale);
                if p.is_file() {
                    std::fs::remove_file(&p).map_err(|e| CliError::io(&p, e))?;
                }
            }
        }
        manifest.stages.insert(stage.name().to_string(), record);
        manifest.save(&self.dir)
    }
}

/// Rows of a comma-separated file keyed by header.
pub fn read_csv(path: &Path) -> Result<Vec<BTreeMap<String, String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().map(|h| h.split(',').collect()).unwrap_or_default();
    Ok(lines
        .filter(|l| !l.is_empty())
        .map(|l| header.iter().map(|h| h.to_string()).zip(l.split(',').map(String::from)).collect())
        .collect())
}

/// The report's figure sources, for callers that want to check a finished run.
pub fn report_sources() -> Vec<&'static str> {
    let mut v: Vec<&str> = stages::FIGURES.iter().map(|f| f.1).collect();
    v.sort_unstable();
    v.dedup();
    v
}
