//! Experiment configuration: one JSON document with a versioned schema.
//!
//! Every section falls back to its defaults when absent, unknown keys are
//! rejected, and errors carry the JSON pointer of the offending value.

use std::path::{Path, PathBuf};

use beamlab::dknn::LshParams;
use beamlab::shap::{Estimator, ShapTarget};
use beamlab::{ArrayConfig, DknnConfig, MeasurementConfig, SceneParams, ShapConfig, TimingConfig, TrainConfig, TwinPerturbation};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Root of every named sub-seed.
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; results do not depend on it.
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub array: ArrayConfig,
    #[serde(default)]
    pub scene: SceneParams,
    #[serde(default)]
    pub twin: TwinPerturbation,
    #[serde(default)]
    pub measurement: MeasurementConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub pretrain: TrainSection,
    #[serde(default)]
    pub finetune: TrainSection,
    #[serde(default)]
    pub shap: ShapSection,
    #[serde(default)]
    pub dknn: DknnSection,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub timing: TimingConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            threads: None,
            output_dir: None,
            array: ArrayConfig::default(),
            scene: SceneParams::default(),
            twin: TwinPerturbation::default(),
            measurement: MeasurementConfig::default(),
            data: DataConfig::default(),
            pretrain: TrainSection::default(),
            finetune: TrainSection::default(),
            shap: ShapSection::default(),
            dknn: DknnSection::default(),
            eval: EvalConfig::default(),
            timing: TimingConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_twin: usize,
    pub n_real: usize,
    /// Share of the real train split mixed into the fine-tuning set.
    pub real_fraction: f64,
    /// Oversampling of the narrow candidate codebook.
    pub candidate_oversampling: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_twin: 8000,
            n_real: 3000,
            real_fraction: 0.3,
            candidate_oversampling: 4,
        }
    }
}

/// Optimizer settings; the shuffle seed comes from the root seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            epochs: t.epochs,
            batch_size: t.batch_size,
        }
    }
}

impl TrainSection {
    pub fn with_seed(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapSection {
    /// Real test rows explained.
    pub n_explain: usize,
    pub delta: f64,
    pub n_background_refs: usize,
    pub estimator: Estimator,
    pub n_permutations: usize,
    pub antithetic: bool,
    pub target: ShapTarget,
}

impl Default for ShapSection {
    fn default() -> Self {
        // 32 features rule out enumeration; these sizes keep the stage near ten seconds.
        Self {
            n_explain: 150,
            delta: 0.96,
            n_background_refs: 16,
            estimator: Estimator::Auto,
            n_permutations: 32,
            antithetic: true,
            target: ShapTarget::Logits,
        }
    }
}

impl ShapSection {
    pub fn with_seed(&self, seed: u64) -> ShapConfig {
        ShapConfig {
            n_background_refs: self.n_background_refs,
            estimator: self.estimator,
            n_permutations: self.n_permutations,
            antithetic: self.antithetic,
            target: self.target,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DknnSection {
    pub k: usize,
    pub lsh: LshParams,
    pub exact: bool,
    /// FGSM step in standardized feature units.
    pub epsilon: f64,
    pub thresholds: Vec<f64>,
    pub n_bins: usize,
    /// Cap on evaluated test rows (all when absent).
    pub max_rows: Option<usize>,
}

impl Default for DknnSection {
    fn default() -> Self {
        Self {
            k: 10,
            lsh: LshParams::default(),
            exact: false,
            epsilon: 0.5,
            thresholds: vec![0.2, 0.4],
            n_bins: 10,
            max_rows: None,
        }
    }
}

impl DknnSection {
    pub fn with_seed(&self, seed: u64) -> DknnConfig {
        DknnConfig {
            k: self.k,
            lsh: self.lsh.clone(),
            exact: self.exact,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Twin-only, fine-tuned and real-only accuracy.
    Transfer,
    /// Accuracy and SE over the number of sensing beams, SHAP vs fixed subsets.
    Subsets,
    Exhaustive,
    Hierarchical,
    Binary,
    /// Quantized matched filter with perfect channel knowledge.
    Svd,
    /// Learned policies at their configured sizes.
    Learned,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Transfer,
        Method::Subsets,
        Method::Exhaustive,
        Method::Hierarchical,
        Method::Binary,
        Method::Svd,
        Method::Learned,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Transfer => "transfer",
            Method::Subsets => "subsets",
            Method::Exhaustive => "exhaustive",
            Method::Hierarchical => "hierarchical",
            Method::Binary => "binary",
            Method::Svd => "svd",
            Method::Learned => "learned",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub methods: Vec<Method>,
    /// Sensing-beam counts for the subset sweep.
    pub subset_sizes: Vec<usize>,
    pub ks: Vec<usize>,
    /// Subset size of the paired SHAP-vs-fixed comparison.
    pub paired_size: usize,
    /// Training seeds of the paired comparison.
    pub paired_seeds: Vec<u64>,
    /// Wide beams of the hierarchical baseline.
    pub n_wide: usize,
    pub mrt_bits: u32,
    /// Cap on evaluated test rows (all when absent).
    pub max_rows: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            subset_sizes: vec![2, 4, 8, 12, 16, 24, 32],
            ks: vec![1, 2, 3],
            paired_size: 8,
            paired_seeds: vec![1, 2, 3],
            n_wide: 32,
            mrt_bits: 3,
            max_rows: None,
        }
    }
}

fn pointer_of(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } | Segment::Enum { variant: key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

fn invalid(pointer: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        pointer: pointer.to_string(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let msg = e.inner().to_string();
            invalid(&pointer_of(e.path()), msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(
                "/schema_version",
                format!("unsupported schema version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        if self.threads == Some(0) {
            return Err(invalid("/threads", "must be >= 1"));
        }
        let core = |pointer: &str, r: beamlab::Result<()>| r.map_err(|e| invalid(pointer, e.to_string()));
        core("/array", self.array.validate())?;
        core("/scene", self.scene.validate())?;
        core("/twin", self.twin.validate())?;
        core("/measurement", self.measurement.validate())?;
        core("/pretrain", self.pretrain.with_seed(0).validate())?;
        core("/finetune", self.finetune.with_seed(0).validate())?;
        core("/dknn/lsh", self.dknn.lsh.validate())?;
        core("/timing", self.timing.validate())?;

        let d = &self.data;
        if d.n_twin < 10 || d.n_real < 10 {
            return Err(invalid("/data", "n_twin and n_real must be >= 10 so every split is populated"));
        }
        if !(0.0..=1.0).contains(&d.real_fraction) {
            return Err(invalid("/data/real_fraction", "must lie in [0, 1]"));
        }
        if d.candidate_oversampling == 0 {
            return Err(invalid("/data/candidate_oversampling", "must be >= 1"));
        }
        let n_bs = self.array.n_bs;
        let q = n_bs * d.candidate_oversampling;
        if q > usize::from(u16::MAX) {
            return Err(invalid("/data/candidate_oversampling", "too many candidate beams"));
        }

        let s = &self.shap;
        if s.n_explain == 0 || s.n_background_refs == 0 || s.n_permutations == 0 {
            return Err(invalid("/shap", "n_explain, n_background_refs and n_permutations must be >= 1"));
        }
        if !(s.delta > 0.0 && s.delta <= 1.0) {
            return Err(invalid("/shap/delta", "must lie in (0, 1]"));
        }

        let k = &self.dknn;
        if k.k == 0 {
            return Err(invalid("/dknn/k", "must be >= 1"));
        }
        if !(k.epsilon >= 0.0 && k.epsilon.is_finite()) {
            return Err(invalid("/dknn/epsilon", "must be finite and >= 0"));
        }
        if k.n_bins == 0 {
            return Err(invalid("/dknn/n_bins", "must be >= 1"));
        }
        if let Some(i) = k.thresholds.iter().position(|t| !(0.0..=1.0).contains(t)) {
            return Err(invalid(&format!("/dknn/thresholds/{i}"), "must lie in [0, 1]"));
        }
        if k.max_rows == Some(0) {
            return Err(invalid("/dknn/max_rows", "must be >= 1"));
        }

        let e = &self.eval;
        if let Some(i) = e.subset_sizes.iter().position(|&m| m == 0 || m > n_bs) {
            return Err(invalid(&format!("/eval/subset_sizes/{i}"), format!("must lie in 1..={n_bs}")));
        }
        if let Some(i) = e.ks.iter().position(|&k| k == 0 || k > q) {
            return Err(invalid(&format!("/eval/ks/{i}"), format!("must lie in 1..={q}")));
        }
        if e.ks.is_empty() {
            return Err(invalid("/eval/ks", "needs at least one k"));
        }
        if e.paired_size == 0 || e.paired_size > n_bs {
            return Err(invalid("/eval/paired_size", format!("must lie in 1..={n_bs}")));
        }
        if e.n_wide == 0 || !n_bs.is_multiple_of(e.n_wide) {
            return Err(invalid("/eval/n_wide", format!("must divide n_bs = {n_bs}")));
        }
        if e.mrt_bits == 0 {
            return Err(invalid("/eval/mrt_bits", "must be >= 1"));
        }
        if e.max_rows == Some(0) {
            return Err(invalid("/eval/max_rows", "must be >= 1"));
        }
        Ok(())
    }

    /// Canonical JSON of everything that can change results.
    pub fn resolved_json(&self) -> String {
        let mut c = self.clone();
        c.threads = None;
        c.output_dir = None;
        serde_json::to_string_pretty(&c).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.resolved_json().as_bytes()))
    }

    /// A scene and training budget small enough for a sub-minute end-to-end run.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.scene.n_ue = 80;
        c.data.n_twin = 800;
        c.data.n_real = 400;
        c.pretrain.epochs = 5;
        c.finetune.epochs = 5;
        c.shap.n_explain = 10;
        c.shap.n_background_refs = 8;
        c.shap.n_permutations = 4;
        c.dknn.lsh.n_tables = 4;
        c.eval.subset_sizes = vec![2, 4];
        c.eval.paired_size = 4;
        c.eval.paired_seeds = vec![1];
        c.eval.max_rows = Some(40);
        c
    }
}

/// Named sub-seeds of a root seed.
#[derive(Clone, Copy, Debug)]
pub struct Seeds {
    pub scene: u64,
    pub noise: u64,
    pub init: u64,
    pub shuffle: u64,
    pub shap: u64,
    pub lsh: u64,
    pub fgsm: u64,
}

impl Seeds {
    pub fn new(root: u64) -> Self {
        let d = |name| beamlab::seed::derive(root, name);
        Self {
            scene: d("scene"),
            noise: d("noise"),
            init: d("init"),
            shuffle: d("shuffle"),
            shap: d("shap"),
            lsh: d("lsh"),
            fgsm: d("fgsm"),
        }
    }
}
