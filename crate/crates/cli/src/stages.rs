//! The pipeline stages and the artifacts they exchange.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use beamlab::baselines::{binary_search, exhaustive_search, fixed_subset_baseline, fixed_subset_indices, hierarchical_search};
use beamlab::codebook::{dft_codebook, quantized_mrt, wide_codebook};
use beamlab::dataset::{argmax, augment, build_dataset, build_dataset_with, measure, optimal_label};
use beamlab::dknn::{build_index, calibrate, classify_batch, fgsm_rows, records_csv, reliability_bins, reliability_csv, reliability_diagram, RobustnessSummary};
use beamlab::metrics::{average_snr_db, db_to_linear, effective_se, se_with_alignment_time, snr_db, topk_accuracies};
use beamlab::mlp::{self, feature_matrix, label_vec, topk_indices};
use beamlab::shap::{explain, retrain_reduced, sample_references, select_features, ModelOutput};
use beamlab::{
    channel, seed, BeamDataset, ChannelVector, Codebook, MeasurementConfig, MlpModel, Origin, Scene, ShapReport, Split, SweepResult,
    TimingConfig, TrainConfig,
};
use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, Method, Seeds};
use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, clap::ValueEnum)]
pub enum Stage {
    Generate,
    Pretrain,
    Finetune,
    Shap,
    Select,
    Dknn,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Generate,
        Stage::Pretrain,
        Stage::Finetune,
        Stage::Shap,
        Stage::Select,
        Stage::Dknn,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Shap => "shap",
            Stage::Select => "select",
            Stage::Dknn => "dknn",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// Artifact file names.
pub mod files {
    pub const SCENE_REAL: &str = "scene_real.json";
    pub const SCENE_TWIN: &str = "scene_twin.json";
    pub const TWIN: &str = "twin.btds";
    pub const REAL: &str = "real.btds";
    pub const AUGMENTED: &str = "augmented.btds";
    pub const PRETRAINED: &str = "pretrained.btmd";
    pub const PRETRAIN_LOSS: &str = "pretrain_loss.csv";
    pub const FINETUNED: &str = "finetuned.btmd";
    pub const REAL_ONLY: &str = "real_only.btmd";
    pub const FINETUNE_LOSS: &str = "finetune_loss.csv";
    pub const SHAP_PSI: &str = "shap_psi.btsh";
    pub const SHAP_BAR: &str = "shap_bar.csv";
    pub const SHAP_REPORT: &str = "shap_report.json";
    pub const SELECTION: &str = "selection.csv";
    pub const REDUCED: &str = "reduced.btmd";
    pub const REDUCED_LOSS: &str = "reduced_loss.csv";
    pub const CRED_CLEAN: &str = "credibility_clean.csv";
    pub const CRED_ADV: &str = "credibility_adversarial.csv";
    pub const REL_DKNN_CLEAN: &str = "reliability_dknn_clean.csv";
    pub const REL_DKNN_ADV: &str = "reliability_dknn_adversarial.csv";
    pub const REL_SOFTMAX_CLEAN: &str = "reliability_softmax_clean.csv";
    pub const REL_SOFTMAX_ADV: &str = "reliability_softmax_adversarial.csv";
    pub const ROBUSTNESS: &str = "robustness.csv";
    pub const CONFIDENCE: &str = "confidence_summary.csv";
    pub const TRANSFER: &str = "transfer_accuracy.csv";
    pub const SUBSETS: &str = "subsets.csv";
    pub const PAIRED: &str = "paired.csv";
    pub const SVD: &str = "svd.csv";
    pub const LEARNED: &str = "learned.csv";
    pub const BASELINES: &str = "baselines.csv";
    pub const REPORT_DIR: &str = "report";
    pub const REPORT_INDEX: &str = "report/index.csv";
    pub const REPORT_FLAT: &str = "report/figures.csv";

    pub fn sweep(method: &str) -> String {
        format!("sweep_{method}.csv")
    }
}

/// Stage that writes `artifact`.
pub fn producer(artifact: &str) -> Stage {
    use files::*;
    match artifact {
        SCENE_REAL | SCENE_TWIN | TWIN | REAL | AUGMENTED => Stage::Generate,
        PRETRAINED | PRETRAIN_LOSS => Stage::Pretrain,
        FINETUNED | REAL_ONLY | FINETUNE_LOSS => Stage::Finetune,
        SHAP_PSI | SHAP_BAR => Stage::Shap,
        SHAP_REPORT | SELECTION | REDUCED | REDUCED_LOSS => Stage::Select,
        a if a.starts_with("report/") => Stage::Report,
        a if a.starts_with("credibility_") || a.starts_with("reliability_") || a == ROBUSTNESS || a == CONFIDENCE => Stage::Dknn,
        _ => Stage::Eval,
    }
}

/// Inputs of a stage other than `report`, whose inputs are whatever CSVs exist.
pub fn inputs(stage: Stage, cfg: &ExperimentConfig) -> Vec<&'static str> {
    use files::*;
    match stage {
        Stage::Generate | Stage::Report => vec![],
        Stage::Pretrain => vec![TWIN],
        Stage::Finetune => vec![PRETRAINED, AUGMENTED, REAL],
        Stage::Shap => vec![FINETUNED, TWIN, REAL],
        Stage::Select => vec![SHAP_PSI, AUGMENTED],
        Stage::Dknn => vec![FINETUNED, REAL],
        Stage::Eval => {
            let mut v = vec![SCENE_REAL, REAL];
            for m in &cfg.eval.methods {
                match m {
                    Method::Transfer => v.extend([TWIN, PRETRAINED, FINETUNED, REAL_ONLY]),
                    Method::Subsets => v.extend([SCENE_TWIN, TWIN, AUGMENTED, SHAP_REPORT]),
                    Method::Learned => v.extend([FINETUNED, REDUCED, SHAP_REPORT]),
                    Method::Exhaustive | Method::Hierarchical | Method::Binary | Method::Svd => {}
                }
            }
            v.sort_unstable();
            v.dedup();
            v
        }
    }
}

/// Config sections a stage reads; upstream effects enter through input hashes.
pub fn stage_settings(stage: Stage, cfg: &ExperimentConfig) -> serde_json::Value {
    use serde_json::json;
    let c = cfg;
    match stage {
        Stage::Generate => json!({"seed": c.seed, "array": c.array, "scene": c.scene, "twin": c.twin, "measurement": c.measurement, "data": c.data}),
        Stage::Pretrain => json!({"seed": c.seed, "pretrain": c.pretrain}),
        Stage::Finetune => json!({"seed": c.seed, "pretrain": c.pretrain, "finetune": c.finetune}),
        Stage::Shap => {
            // the threshold only matters from `select` on
            let mut shap = serde_json::to_value(&c.shap).expect("serializable");
            shap.as_object_mut().expect("struct").remove("delta");
            json!({"seed": c.seed, "shap": shap})
        }
        Stage::Select => json!({"seed": c.seed, "delta": c.shap.delta, "pretrain": c.pretrain}),
        Stage::Dknn => json!({"seed": c.seed, "dknn": c.dknn}),
        Stage::Eval => json!({
            "seed": c.seed, "array": c.array, "twin": c.twin, "measurement": c.measurement, "data": c.data,
            "pretrain": c.pretrain, "eval": c.eval, "timing": c.timing
        }),
        Stage::Report => json!({}),
    }
}

/// Everything a stage needs to run.
pub struct StageContext<'a> {
    pub cfg: &'a ExperimentConfig,
    pub seeds: Seeds,
    pub dir: &'a Path,
}

/// Bytes produced by a stage, keyed by artifact name, written only after the stage succeeds.
#[derive(Default)]
pub struct Outputs(pub BTreeMap<String, Vec<u8>>);

impl Outputs {
    fn put(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.0.insert(name.into(), bytes.into());
    }
}

impl StageContext<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn read(&self, name: &str) -> Result<Vec<u8>> {
        let p = self.path(name);
        std::fs::read(&p).map_err(|e| CliError::io(&p, e))
    }

    fn dataset(&self, name: &str) -> Result<BeamDataset> {
        BeamDataset::from_bytes(&self.read(name)?).map_err(|e| CliError::artifact(&self.path(name), e))
    }

    fn model(&self, name: &str) -> Result<MlpModel> {
        MlpModel::from_bytes(&self.read(name)?).map_err(|e| CliError::artifact(&self.path(name), e))
    }

    fn scene(&self, name: &str) -> Result<Scene> {
        serde_json::from_slice(&self.read(name)?).map_err(|e| CliError::artifact(&self.path(name), e))
    }

    fn shap_report(&self) -> Result<ShapReport> {
        serde_json::from_slice(&self.read(files::SHAP_REPORT)?).map_err(|e| CliError::artifact(&self.path(files::SHAP_REPORT), e))
    }

    fn sensing(&self) -> Result<Codebook> {
        Ok(dft_codebook(&self.cfg.array, 1)?)
    }

    fn candidates(&self) -> Result<Codebook> {
        Ok(dft_codebook(&self.cfg.array, self.cfg.data.candidate_oversampling)?)
    }

    fn twin_seed(&self) -> u64 {
        seed::derive(self.seeds.noise, "twin")
    }

    fn real_seed(&self) -> u64 {
        seed::derive(self.seeds.noise, "real")
    }

    fn augment_seed(&self) -> u64 {
        seed::derive(self.seeds.shuffle, "augment")
    }

    /// Seeded subsample of `rows`, kept in ascending order.
    fn sample_rows(&self, rows: Vec<usize>, cap: Option<usize>, stream: u64) -> Vec<usize> {
        match cap {
            Some(n) if n < rows.len() => {
                let mut keyed: Vec<(u64, usize)> = rows.into_iter().map(|r| (seed::derive_index(stream, r as u64), r)).collect();
                keyed.sort_unstable();
                let mut out: Vec<usize> = keyed.into_iter().take(n).map(|k| k.1).collect();
                out.sort_unstable();
                out
            }
            _ => rows,
        }
    }
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

fn loss_csv(columns: &[(&str, &[f64])]) -> String {
    let mut out = String::from("epoch");
    for (name, _) in columns {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    let n = columns.iter().map(|c| c.1.len()).max().unwrap_or(0);
    for e in 0..n {
        let _ = write!(out, "{}", e + 1);
        for (_, v) in columns {
            match v.get(e) {
                Some(x) => {
                    let _ = write!(out, ",{x}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

pub fn execute(stage: Stage, ctx: &StageContext) -> Result<Outputs> {
    match stage {
        Stage::Generate => generate(ctx),
        Stage::Pretrain => pretrain(ctx),
        Stage::Finetune => finetune(ctx),
        Stage::Shap => shap(ctx),
        Stage::Select => select(ctx),
        Stage::Dknn => dknn(ctx),
        Stage::Eval => eval(ctx),
        Stage::Report => unreachable!("report is assembled by the pipeline"),
    }
}

fn generate(ctx: &StageContext) -> Result<Outputs> {
    let cfg = ctx.cfg;
    let real_scene = channel::generate_scene(&cfg.scene, &cfg.array, ctx.seeds.scene)?;
    let twin_scene = channel::perturb_to_twin(&real_scene, &cfg.twin, seed::derive(ctx.seeds.scene, "twin"))?;
    let (sensing, cands) = (ctx.sensing()?, ctx.candidates()?);
    let twin = build_dataset(&twin_scene, &cfg.array, &sensing, &cands, &cfg.measurement, cfg.data.n_twin, Origin::Twin, ctx.twin_seed())?;
    // Real measurements are standardized with the twin statistics the model is trained on.
    let real = build_dataset_with(
        &real_scene,
        &cfg.array,
        &sensing,
        &cands,
        &cfg.measurement,
        cfg.data.n_real,
        Origin::Real,
        ctx.real_seed(),
        Some(&twin.standardizer),
    )?;
    let aug = augment(&real, &twin, cfg.data.real_fraction, ctx.augment_seed())?;
    log::info!(
        "generated {} twin rows, {} real rows, {} augmented train rows",
        twin.n_rows(),
        real.n_rows(),
        aug.count(Split::Train)
    );
    let mut out = Outputs::default();
    out.put(files::SCENE_REAL, json_bytes(&real_scene));
    out.put(files::SCENE_TWIN, json_bytes(&twin_scene));
    out.put(files::TWIN, twin.to_bytes());
    out.put(files::REAL, real.to_bytes());
    out.put(files::AUGMENTED, aug.to_bytes());
    Ok(out)
}

fn pretrain_config(ctx: &StageContext, name: &str) -> TrainConfig {
    ctx.cfg.pretrain.with_seed(seed::derive(ctx.seeds.shuffle, name))
}

fn pretrain(ctx: &StageContext) -> Result<Outputs> {
    let twin = ctx.dataset(files::TWIN)?;
    let init = MlpModel::beam_classifier(twin.n_features, twin.n_classes, seed::derive(ctx.seeds.init, "pretrain"))?;
    let rep = mlp::train(&init, &twin, &pretrain_config(ctx, "pretrain"))?;
    log::info!("pretrained on twin data, final loss {:.4}", rep.epoch_losses.last().copied().unwrap_or(f64::NAN));
    let mut out = Outputs::default();
    out.put(files::PRETRAINED, rep.model.to_bytes());
    out.put(files::PRETRAIN_LOSS, loss_csv(&[("loss", &rep.epoch_losses)]));
    Ok(out)
}

fn finetune(ctx: &StageContext) -> Result<Outputs> {
    let pre = ctx.model(files::PRETRAINED)?;
    let aug = ctx.dataset(files::AUGMENTED)?;
    let real = ctx.dataset(files::REAL)?;
    let (ft, ro) = rayon::join(
        || mlp::finetune(&pre, &aug, &ctx.cfg.finetune.with_seed(seed::derive(ctx.seeds.shuffle, "finetune"))),
        || {
            let init = MlpModel::beam_classifier(real.n_features, real.n_classes, seed::derive(ctx.seeds.init, "real_only"))?;
            mlp::train(&init, &real, &pretrain_config(ctx, "real_only"))
        },
    );
    let (ft, ro) = (ft?, ro?);
    let mut out = Outputs::default();
    out.put(files::FINETUNED, ft.model.to_bytes());
    out.put(files::REAL_ONLY, ro.model.to_bytes());
    out.put(files::FINETUNE_LOSS, loss_csv(&[("finetune", &ft.epoch_losses), ("real_only", &ro.epoch_losses)]));
    Ok(out)
}

fn shap(ctx: &StageContext) -> Result<Outputs> {
    let model = ctx.model(files::FINETUNED)?;
    let twin = ctx.dataset(files::TWIN)?;
    let real = ctx.dataset(files::REAL)?;
    let s = &ctx.cfg.shap;
    let rows = ctx.sample_rows(real.indices(Split::Test), Some(s.n_explain), seed::derive(ctx.seeds.shap, "rows"));
    let xs = feature_matrix(&real, &rows);
    let refs = sample_references(&twin, &twin.indices(Split::Train), s.n_background_refs, seed::derive(ctx.seeds.shap, "refs"))?;
    let game = ModelOutput {
        model: &model,
        target: s.target,
    };
    let psi = explain(&game, xs.view(), refs.view(), &s.with_seed(seed::derive(ctx.seeds.shap, "orderings")))?;
    let rep = ShapReport::new(psi, s.delta)?;
    let mut out = Outputs::default();
    out.put(files::SHAP_PSI, rep.psi_bytes());
    out.put(files::SHAP_BAR, rep.bar_csv());
    Ok(out)
}

/// Deltas reported beside the configured one.
const SELECTION_DELTAS: [f64; 5] = [0.71, 0.82, 0.92, 0.96, 0.99];

fn select(ctx: &StageContext) -> Result<Outputs> {
    let psi = ShapReport::psi_from_bytes(&ctx.read(files::SHAP_PSI)?).map_err(|e| CliError::artifact(&ctx.path(files::SHAP_PSI), e))?;
    let rep = ShapReport::new(psi, ctx.cfg.shap.delta)?;
    log::info!("delta {} selects {} of {} sensing beams: {:?}", rep.delta, rep.selected.len(), rep.psi_bar.len(), rep.selected);
    let mut deltas = SELECTION_DELTAS.to_vec();
    if !deltas.contains(&rep.delta) {
        deltas.push(rep.delta);
        deltas.sort_by(f64::total_cmp);
    }
    let mut sel = String::from("delta,n_selected,selected\n");
    for d in deltas {
        let s = select_features(&rep.psi_bar, d)?;
        let list: Vec<String> = s.iter().map(ToString::to_string).collect();
        let _ = writeln!(sel, "{d},{},{}", s.len(), list.join(" "));
    }
    let aug = ctx.dataset(files::AUGMENTED)?;
    let reduced = retrain_reduced(&aug, &rep.selected, &pretrain_config(ctx, "reduced"), seed::derive(ctx.seeds.init, "reduced"))?;
    let mut out = Outputs::default();
    out.put(files::SHAP_REPORT, json_bytes(&rep));
    out.put(files::SELECTION, sel);
    out.put(files::REDUCED, reduced.model.to_bytes());
    out.put(files::REDUCED_LOSS, loss_csv(&[("loss", &reduced.epoch_losses)]));
    Ok(out)
}

/// Largest softmax probability and whether its class is the label.
fn softmax_scores(model: &MlpModel, x: &Array2<f64>, labels: &[usize]) -> Result<Vec<(f64, bool)>> {
    let p = model.probs_batch(x.view())?;
    Ok(p.rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &l)| {
            let v = row.to_vec();
            let j = argmax(&v);
            (v[j], j == l)
        })
        .collect())
}

fn mean_and_accuracy(items: &[(f64, bool)]) -> (f64, f64) {
    let n = items.len() as f64;
    (
        items.iter().map(|i| i.0).sum::<f64>() / n,
        items.iter().filter(|i| i.1).count() as f64 / n,
    )
}

fn dknn(ctx: &StageContext) -> Result<Outputs> {
    let d = &ctx.cfg.dknn;
    let model = ctx.model(files::FINETUNED)?;
    let real = ctx.dataset(files::REAL)?;
    // Calibration rows come from the real holdout, so the reference rows are the real train split.
    let idx = build_index(&model, &real, None, &d.with_seed(ctx.seeds.lsh))?;
    let cal = calibrate(&idx, &real, &real.indices(Split::Holdout))?;
    let rows = ctx.sample_rows(real.indices(Split::Test), d.max_rows, ctx.seeds.fgsm);
    let labels = label_vec(&real, &rows);
    let clean = feature_matrix(&real, &rows);
    let adv = fgsm_rows(&model, &real, &rows, d.epsilon)?;

    let mut out = Outputs::default();
    let mut summary = String::from("input,score,mean,accuracy\n");
    let mut records = Vec::new();
    for (name, x, cred_file, rel_file, soft_file) in [
        ("clean", &clean, files::CRED_CLEAN, files::REL_DKNN_CLEAN, files::REL_SOFTMAX_CLEAN),
        ("adversarial", &adv, files::CRED_ADV, files::REL_DKNN_ADV, files::REL_SOFTMAX_ADV),
    ] {
        let recs = classify_batch(&idx, &cal, x.view())?;
        let labeled: Vec<_> = recs.iter().cloned().zip(labels.iter().copied()).collect();
        out.put(cred_file, records_csv(&labeled));
        out.put(rel_file, reliability_csv(&reliability_diagram(&labeled, d.n_bins)?));
        let soft = softmax_scores(&model, x, &labels)?;
        out.put(soft_file, reliability_csv(&reliability_bins(&soft, d.n_bins)?));
        let dk: Vec<(f64, bool)> = labeled.iter().map(|(r, l)| (r.credibility, r.prediction == *l)).collect();
        for (score, items) in [("dknn_credibility", &dk), ("softmax_confidence", &soft)] {
            let (m, a) = mean_and_accuracy(items);
            let _ = writeln!(summary, "{name},{score},{m},{a}");
        }
        records.push(recs);
    }
    let rob = RobustnessSummary::from_records(&records[0], &records[1], &d.thresholds)?;
    log::info!(
        "mean credibility clean {:.3}, adversarial {:.3} (epsilon {})",
        rob.clean_mean_credibility,
        rob.adversarial_mean_credibility,
        d.epsilon
    );
    out.put(files::ROBUSTNESS, rob.to_csv());
    out.put(files::CONFIDENCE, summary);
    Ok(out)
}

/// Real test rows and their channels, shared by the evaluations.
struct EvalSet {
    real: BeamDataset,
    channels: Vec<ChannelVector>,
    cands: Codebook,
    rows: Vec<usize>,
}

impl EvalSet {
    fn h(&self, row: usize) -> &ChannelVector {
        &self.channels[self.real.ue[row] as usize]
    }

    fn noise_dbm(&self, row: usize) -> f64 {
        f64::from(self.real.noise_dbm[row])
    }

    fn label(&self, row: usize) -> usize {
        usize::from(self.real.labels[row])
    }
}

/// The row's own noise draw, so every policy faces the same noise power.
fn row_mc(mc: &MeasurementConfig, noise_dbm: f64) -> MeasurementConfig {
    if noise_dbm.is_finite() {
        mc.fixed_noise(noise_dbm)
    } else {
        mc.clone()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyStats {
    pub k: usize,
    pub n_measurements: usize,
    pub accuracy: f64,
    pub avg_snr_db: f64,
    pub mean_se: f64,
}

/// Top-k accuracy, and the SNR/SE reached when the best of the top `k` narrow beams
/// (by a noisy re-measurement when `k > 1`) is used after `m` sensing measurements.
#[allow(clippy::too_many_arguments)]
fn learned_policy(
    model: &MlpModel,
    x: &Array2<f64>,
    set: &EvalSet,
    mc: &MeasurementConfig,
    timing: &TimingConfig,
    m: usize,
    ks: &[usize],
    seed: u64,
) -> Result<Vec<PolicyStats>> {
    let labels: Vec<usize> = set.rows.iter().map(|&r| set.label(r)).collect();
    let acc = topk_accuracies(model, x.view(), &labels, ks)?;
    let probs = model.probs_batch(x.view())?;
    let kmax = ks.iter().copied().max().unwrap_or(1);
    let per_row: Vec<Vec<(f64, f64)>> = set
        .rows
        .par_iter()
        .enumerate()
        .map(|(i, &r)| {
            let top = topk_indices(&probs.row(i).to_vec(), kmax);
            let h = set.h(r);
            let noise = set.noise_dbm(r);
            ks.iter()
                .map(|&k| {
                    let chosen = if k == 1 {
                        top[0]
                    } else {
                        let sub = set.cands.subset(&top[..k]).expect("indices in range");
                        top[argmax(&measure(h, &sub, &row_mc(mc, noise), seed::derive_index(seed, r as u64)).rssi)]
                    };
                    let snr = snr_db(h, &set.cands.vectors[chosen], mc.tx_power_dbm, noise);
                    (snr, effective_se(db_to_linear(snr), timing, m, k))
                })
                .collect()
        })
        .collect();
    Ok(ks
        .iter()
        .enumerate()
        .map(|(j, &k)| {
            let snrs: Vec<f64> = per_row.iter().map(|v| v[j].0).collect();
            PolicyStats {
                k,
                n_measurements: m + if k > 1 { k } else { 0 },
                accuracy: acc[j],
                avg_snr_db: average_snr_db(&snrs),
                mean_se: per_row.iter().map(|v| v[j].1).sum::<f64>() / per_row.len() as f64,
            }
        })
        .collect())
}

fn noise_label(mc: &MeasurementConfig) -> String {
    match mc.noise_dbm_range {
        Some([lo, hi]) => format!("{lo}..{hi}dBm"),
        None => "none".into(),
    }
}

const BASELINE_HEADER: &str = "method,m_w,k,noise,seed,n_measurements,accuracy,avg_snr_db,sweep_time_ms,mean_se,t_frame_ms\n";

struct SummaryRow<'a> {
    method: &'a str,
    m_w: usize,
    k: usize,
    n_measurements: usize,
    accuracy: f64,
    avg_snr_db: f64,
    mean_se: f64,
}

fn summary_line(out: &mut String, ctx: &StageContext, r: &SummaryRow) {
    let t = &ctx.cfg.timing;
    let _ = writeln!(
        out,
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.method,
        r.m_w,
        r.k,
        noise_label(&ctx.cfg.measurement),
        ctx.cfg.seed,
        r.n_measurements,
        r.accuracy,
        r.avg_snr_db,
        t.sweep_time_ms(r.n_measurements),
        r.mean_se,
        t.t_frame_ms
    );
}

fn sweep_csv(set: &EvalSet, results: &[SweepResult], timing: &TimingConfig) -> String {
    let mut out = String::from("row,ue,label,chosen_beam,correct,n_measurements,achieved_snr_db,sweep_time_ms,effective_se\n");
    for (&r, s) in set.rows.iter().zip(results) {
        let se = effective_se(db_to_linear(s.achieved_snr_db), timing, s.n_measurements, 1);
        let label = set.label(r);
        let _ = writeln!(
            out,
            "{r},{},{label},{},{},{},{},{},{se}",
            set.real.ue[r],
            s.chosen_beam,
            u8::from(s.chosen_beam == label),
            s.n_measurements,
            s.achieved_snr_db,
            s.sweep_time_ms
        );
    }
    out
}

fn eval(ctx: &StageContext) -> Result<Outputs> {
    let cfg = ctx.cfg;
    let e = &cfg.eval;
    let real_scene = ctx.scene(files::SCENE_REAL)?;
    let real = ctx.dataset(files::REAL)?;
    let rows = ctx.sample_rows(real.indices(Split::Test), e.max_rows, seed::derive(ctx.seeds.noise, "eval_rows"));
    let set = EvalSet {
        channels: channel::synthesize_all(&real_scene, &cfg.array)?,
        cands: ctx.candidates()?,
        real,
        rows,
    };
    let x_full = feature_matrix(&set.real, &set.rows);
    let mc = &cfg.measurement;
    let timing = &cfg.timing;
    let policy_seed = seed::derive(ctx.seeds.noise, "policy");
    let mut out = Outputs::default();
    let mut summary = String::from(BASELINE_HEADER);
    let mut methods = e.methods.clone();
    methods.sort_unstable();
    methods.dedup();

    for method in methods {
        log::info!("eval: {}", method.name());
        match method {
            Method::Transfer => out.put(files::TRANSFER, transfer(ctx, &set, &x_full)?),
            Method::Subsets => {
                let (subsets, paired) = subsets(ctx, &set)?;
                out.put(files::SUBSETS, subsets);
                out.put(files::PAIRED, paired);
            }
            Method::Learned => {
                let rep = ctx.shap_report()?;
                let reduced = ctx.model(files::REDUCED)?;
                let full = ctx.model(files::FINETUNED)?;
                let x_red = feature_matrix(&set.real.select_columns(&rep.selected)?, &set.rows);
                let mut csv = String::from(BASELINE_HEADER);
                for (name, model, x) in [("dnn_full", &full, &x_full), ("dnn_shap", &reduced, &x_red)] {
                    let m = model.input_dim();
                    for s in learned_policy(model, x, &set, mc, timing, m, &e.ks, policy_seed)? {
                        let row = SummaryRow {
                            method: name,
                            m_w: m,
                            k: s.k,
                            n_measurements: s.n_measurements,
                            accuracy: s.accuracy,
                            avg_snr_db: s.avg_snr_db,
                            mean_se: s.mean_se,
                        };
                        summary_line(&mut csv, ctx, &row);
                        summary_line(&mut summary, ctx, &row);
                    }
                }
                out.put(files::LEARNED, csv);
            }
            Method::Exhaustive | Method::Hierarchical | Method::Binary => {
                let wide = wide_codebook(&cfg.array, e.n_wide)?;
                let sweep_seed = seed::derive(ctx.seeds.noise, method.name());
                let results: Vec<SweepResult> = set
                    .rows
                    .par_iter()
                    .map(|&r| {
                        let (h, m) = (set.h(r), row_mc(mc, set.noise_dbm(r)));
                        let s = seed::derive_index(sweep_seed, r as u64);
                        match method {
                            Method::Exhaustive => Ok(exhaustive_search(h, &set.cands, &m, s, timing)),
                            Method::Hierarchical => hierarchical_search(h, &wide, &set.cands, &m, s, timing),
                            _ => binary_search(h, &set.cands, &m, s, timing),
                        }
                    })
                    .collect::<beamlab::Result<_>>()?;
                out.put(files::sweep(method.name()), sweep_csv(&set, &results, timing));
                let snrs: Vec<f64> = results.iter().map(|s| s.achieved_snr_db).collect();
                let hits = set.rows.iter().zip(&results).filter(|(&r, s)| s.chosen_beam == set.label(r)).count();
                let mean_se = results
                    .iter()
                    .map(|s| effective_se(db_to_linear(s.achieved_snr_db), timing, s.n_measurements, 1))
                    .sum::<f64>()
                    / results.len() as f64;
                summary_line(
                    &mut summary,
                    ctx,
                    &SummaryRow {
                        method: method.name(),
                        m_w: results[0].n_measurements,
                        k: 1,
                        n_measurements: results[0].n_measurements,
                        accuracy: hits as f64 / results.len() as f64,
                        avg_snr_db: average_snr_db(&snrs),
                        mean_se,
                    },
                );
            }
            Method::Svd => {
                let mut csv = String::from("row,ue,svd_snr_db,best_beam_snr_db\n");
                let mut svd_snr = Vec::new();
                let mut best_snr = Vec::new();
                for &r in &set.rows {
                    let h = set.h(r);
                    let noise = set.noise_dbm(r);
                    let w = quantized_mrt(h, e.mrt_bits)?;
                    let a = snr_db(h, &w, mc.tx_power_dbm, noise);
                    let b = snr_db(h, &set.cands.vectors[optimal_label(h, &set.cands)], mc.tx_power_dbm, noise);
                    let _ = writeln!(csv, "{r},{},{a},{b}", set.real.ue[r]);
                    svd_snr.push(a);
                    best_snr.push(b);
                }
                out.put(files::SVD, csv);
                // Perfect channel knowledge: no sweep, the whole frame carries data.
                let name = format!("svd_{}bit", e.mrt_bits);
                for (method, snrs, acc) in [(name.as_str(), &svd_snr, f64::NAN), ("best_beam", &best_snr, 1.0)] {
                    let mean_se = snrs
                        .iter()
                        .map(|&s| se_with_alignment_time(db_to_linear(s), timing.t_frame_ms, 0.0))
                        .sum::<f64>()
                        / snrs.len() as f64;
                    summary_line(
                        &mut summary,
                        ctx,
                        &SummaryRow {
                            method,
                            m_w: 0,
                            k: 1,
                            n_measurements: 0,
                            accuracy: acc,
                            avg_snr_db: average_snr_db(snrs),
                            mean_se,
                        },
                    );
                }
            }
        }
    }
    out.put(files::BASELINES, summary);
    Ok(out)
}

fn transfer(ctx: &StageContext, set: &EvalSet, x_real: &Array2<f64>) -> Result<String> {
    let ks = &ctx.cfg.eval.ks;
    let twin = ctx.dataset(files::TWIN)?;
    let twin_rows = twin.indices(Split::Test);
    let x_twin = feature_matrix(&twin, &twin_rows);
    let real_labels: Vec<usize> = set.rows.iter().map(|&r| set.label(r)).collect();
    let mut csv = String::from("model,eval_set,k,accuracy\n");
    let pre = ctx.model(files::PRETRAINED)?;
    let ft = ctx.model(files::FINETUNED)?;
    let ro = ctx.model(files::REAL_ONLY)?;
    for (name, model, set_name, x, labels) in [
        ("twin_only", &pre, "twin", &x_twin, label_vec(&twin, &twin_rows)),
        ("twin_only", &pre, "real", x_real, real_labels.clone()),
        ("finetuned", &ft, "real", x_real, real_labels.clone()),
        ("real_only", &ro, "real", x_real, real_labels.clone()),
    ] {
        for (k, a) in ks.iter().zip(topk_accuracies(model, x.view(), &labels, ks)?) {
            let _ = writeln!(csv, "{name},{set_name},{k},{a}");
        }
    }
    Ok(csv)
}

/// Fine-tuning set measured on an evenly spaced subset of the narrow beams.
fn fixed_subset_data(ctx: &StageContext, twin_scene: &Scene, real_scene: &Scene, m: usize) -> Result<(BeamDataset, BeamDataset)> {
    let cfg = ctx.cfg;
    let cands = ctx.candidates()?;
    let sensing = cands.subset(&fixed_subset_indices(cands.len(), m)?)?;
    let mc = &cfg.measurement;
    let twin = build_dataset(twin_scene, &cfg.array, &sensing, &cands, mc, cfg.data.n_twin, Origin::Twin, ctx.twin_seed())?;
    let real = build_dataset_with(
        real_scene,
        &cfg.array,
        &sensing,
        &cands,
        mc,
        cfg.data.n_real,
        Origin::Real,
        ctx.real_seed(),
        Some(&twin.standardizer),
    )?;
    let aug = augment(&real, &twin, cfg.data.real_fraction, ctx.augment_seed())?;
    Ok((aug, real))
}

enum Job {
    Sweep(usize),
    Paired(usize, u64),
}

/// SHAP-ranked vs evenly spaced subsets over the configured sizes, plus the paired-seed comparison.
fn subsets(ctx: &StageContext, set: &EvalSet) -> Result<(String, String)> {
    let e = &ctx.cfg.eval;
    let rep = ctx.shap_report()?;
    let aug = ctx.dataset(files::AUGMENTED)?;
    let twin_scene = ctx.scene(files::SCENE_TWIN)?;
    let real_scene = ctx.scene(files::SCENE_REAL)?;
    let mut sizes: Vec<usize> = e.subset_sizes.iter().copied().chain([e.paired_size]).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let fixed: BTreeMap<usize, (BeamDataset, BeamDataset)> = sizes
        .iter()
        .map(|&m| Ok((m, fixed_subset_data(ctx, &twin_scene, &real_scene, m)?)))
        .collect::<Result<_>>()?;

    let mut jobs: Vec<Job> = e.subset_sizes.iter().map(|&m| Job::Sweep(m)).collect();
    jobs.extend(e.paired_seeds.iter().map(|&s| Job::Paired(e.paired_size, s)));
    let policy_seed = seed::derive(ctx.seeds.noise, "policy");
    let ks: &[usize] = &e.ks;
    // Each job trains two networks single-threaded, so jobs run side by side.
    let results: Vec<(Vec<PolicyStats>, Vec<PolicyStats>)> = jobs
        .par_iter()
        .map(|job| {
            let (m, tc_seed, init_seed) = match *job {
                Job::Sweep(m) => (m, seed::derive_index(seed::derive(ctx.seeds.shuffle, "subsets"), m as u64), seed::derive_index(seed::derive(ctx.seeds.init, "subsets"), m as u64)),
                Job::Paired(m, s) => (m, seed::derive_index(seed::derive(ctx.seeds.shuffle, "paired"), s), seed::derive_index(seed::derive(ctx.seeds.init, "paired"), s)),
            };
            let tc = ctx.cfg.pretrain.with_seed(tc_seed);
            let cols = &rep.ranking[..m];
            let shap_model = retrain_reduced(&aug, cols, &tc, init_seed)?.model;
            let x_shap = feature_matrix(&set.real.select_columns(cols)?, &set.rows);
            let (f_aug, f_real) = &fixed[&m];
            let fixed_model = fixed_subset_baseline(f_aug, &tc, init_seed)?.model;
            let x_fixed = feature_matrix(f_real, &set.rows);
            debug_assert!(set.rows.iter().all(|&r| f_real.labels[r] == set.real.labels[r]));
            let a = learned_policy(&shap_model, &x_shap, set, &ctx.cfg.measurement, &ctx.cfg.timing, m, ks, policy_seed)?;
            let b = learned_policy(&fixed_model, &x_fixed, set, &ctx.cfg.measurement, &ctx.cfg.timing, m, ks, policy_seed)?;
            Ok((a, b))
        })
        .collect::<Result<_>>()?;

    let mut sweep = String::from("method,m_w,k,accuracy,avg_snr_db,mean_se,t_frame_ms\n");
    let mut paired = String::from("seed,m_w,shap_top1,fixed_top1\n");
    let t_frame = ctx.cfg.timing.t_frame_ms;
    for (job, (a, b)) in jobs.iter().zip(&results) {
        match *job {
            Job::Sweep(m) => {
                for (name, stats) in [("shap", a), ("fixed", b)] {
                    for s in stats {
                        let _ = writeln!(sweep, "{name},{m},{},{},{},{},{t_frame}", s.k, s.accuracy, s.avg_snr_db, s.mean_se);
                    }
                }
            }
            Job::Paired(m, s) => {
                let top1 = |v: &[PolicyStats]| v.iter().find(|p| p.k == 1).map_or(f64::NAN, |p| p.accuracy);
                let _ = writeln!(paired, "{s},{m},{},{}", top1(a), top1(b));
            }
        }
    }
    Ok((sweep, paired))
}

/// Figure-data bundle: figure id, source artifact and a short description.
pub const FIGURES: &[(&str, &str, &str)] = &[
    ("fig4_transfer", files::TRANSFER, "top-k accuracy of twin-only and fine-tuned and real-only models"),
    ("fig5_selection", files::SELECTION, "selected sensing beams per SHAP threshold"),
    ("fig6_shap_importance", files::SHAP_BAR, "mean absolute SHAP value per sensing beam"),
    ("fig7_subsets", files::SUBSETS, "top-k accuracy of SHAP-ranked vs evenly spaced subsets"),
    ("fig7_paired", files::PAIRED, "paired-seed top-1 of SHAP vs fixed subsets"),
    ("fig8_effective_se", files::SUBSETS, "effective spectral efficiency over subset size (assumed t_frame_ms)"),
    ("fig8_baselines", files::BASELINES, "accuracy and SNR and sweep time and effective SE per method (assumed t_frame_ms)"),
    ("fig9a_robustness", files::ROBUSTNESS, "fraction below credibility thresholds for clean vs FGSM inputs"),
    ("fig9a_confidence", files::CONFIDENCE, "mean DkNN credibility and softmax confidence"),
    ("fig9b_dknn_clean", files::REL_DKNN_CLEAN, "DkNN credibility reliability diagram for clean inputs"),
    ("fig9b_dknn_adversarial", files::REL_DKNN_ADV, "DkNN credibility reliability diagram for FGSM inputs"),
    ("fig9b_softmax_clean", files::REL_SOFTMAX_CLEAN, "softmax confidence reliability diagram for clean inputs"),
    ("fig9b_softmax_adversarial", files::REL_SOFTMAX_ADV, "softmax confidence reliability diagram for FGSM inputs"),
];

/// Builds the report files from the CSVs present; fails without writing when there are none.
pub fn report(dir: &Path, available: &BTreeMap<String, String>) -> Result<Outputs> {
    let mut out = Outputs::default();
    let mut index = String::from("figure,file,source,source_sha256,description\n");
    let mut flat = String::from("figure,row,column,value\n");
    for &(fig, src, desc) in FIGURES {
        let Some(hash) = available.get(src) else {
            continue;
        };
        let path = dir.join(src);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let name = format!("{}/{fig}.csv", files::REPORT_DIR);
        let _ = writeln!(index, "{fig},{name},{src},{hash},{desc}");
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
        for (i, line) in lines.enumerate() {
            for (col, v) in header.iter().zip(line.split(',')) {
                let _ = writeln!(flat, "{fig},{i},{col},{v}");
            }
        }
        out.put(name, text);
    }
    if out.0.is_empty() {
        return Err(CliError::EmptyReport(dir.to_path_buf()));
    }
    out.put(files::REPORT_INDEX, index);
    out.put(files::REPORT_FLAT, flat);
    Ok(out)
}
