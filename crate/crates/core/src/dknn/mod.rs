//! Deep k-nearest-neighbor conformal prediction over a frozen classifier.
//!
//! Every representation space of the network (hidden activations and
//! logits) gets its own neighbor index over the training rows. The
//! nonconformity of a candidate label is the number of retrieved neighbors,
//! across all spaces, that carry a different label; p-values compare it with
//! scores of a held-out calibration set.

pub mod lsh;

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{BeamDataset, Split};
use crate::error::{Error, Result};
use crate::mlp::{self, MlpModel};
use crate::seed;

pub use lsh::{CosineLsh, LshParams};

/// Rows sent through the network per representation batch.
const REP_CHUNK: usize = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DknnConfig {
    /// Neighbors per representation space.
    pub k: usize,
    pub lsh: LshParams,
    /// Brute-force cosine search instead of LSH.
    pub exact: bool,
    pub seed: u64,
}

impl Default for DknnConfig {
    fn default() -> Self {
        Self {
            k: 10,
            lsh: LshParams::default(),
            exact: false,
            seed: 0,
        }
    }
}

/// Neighbor indices over the training representations of a frozen model.
#[derive(Clone, Debug)]
pub struct LayerIndex {
    pub model: MlpModel,
    pub layers: Vec<CosineLsh>,
    pub labels: Vec<u16>,
    pub k: usize,
    pub exact: bool,
}

/// Representations of every row of `x`, one matrix per space.
fn representations(model: &MlpModel, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
    let mut parts: Vec<Vec<Array2<f64>>> = Vec::new();
    for start in (0..x.nrows()).step_by(REP_CHUNK) {
        let end = (start + REP_CHUNK).min(x.nrows());
        parts.push(model.representations_batch(x.slice(ndarray::s![start..end, ..]))?);
    }
    let n_spaces = model.layer_dims.len() - 1;
    Ok((0..n_spaces)
        .map(|l| {
            let views: Vec<_> = parts.iter().map(|p| p[l].view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("matching widths")
        })
        .collect())
}

/// Builds an index over the given rows of `ds` (its train split when `rows` is `None`).
pub fn build_index(model: &MlpModel, ds: &BeamDataset, rows: Option<&[usize]>, cfg: &DknnConfig) -> Result<LayerIndex> {
    if cfg.k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let rows = rows.map_or_else(|| ds.indices(Split::Train), <[usize]>::to_vec);
    if rows.is_empty() {
        return Err(Error::Build("empty training set".into()));
    }
    if ds.n_features != model.input_dim() {
        return Err(Error::Shape {
            expected: model.input_dim(),
            got: ds.n_features,
        });
    }
    let x = mlp::feature_matrix(ds, &rows);
    let reps = representations(model, x.view())?;
    let layers = reps
        .par_iter()
        .enumerate()
        .map(|(l, r)| CosineLsh::build(r.view(), &cfg.lsh, seed::derive_index(cfg.seed, l as u64)))
        .collect::<Result<_>>()?;
    Ok(LayerIndex {
        model: model.clone(),
        layers,
        labels: rows.iter().map(|&r| ds.labels[r]).collect(),
        k: cfg.k,
        exact: cfg.exact,
    })
}

/// Neighbor labels `Ω_η` of one input in every space.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhood {
    pub labels: Vec<Vec<u16>>,
}

impl Neighborhood {
    /// `ϱ(x, j) = Σ_η |{i ∈ Ω_η : label_i ≠ j}|` for every `j < n_classes`.
    pub fn scores(&self, n_classes: usize) -> Vec<u32> {
        let total: usize = self.labels.iter().map(Vec::len).sum();
        let mut agree = vec![0u32; n_classes];
        for &l in self.labels.iter().flatten() {
            if let Some(a) = agree.get_mut(usize::from(l)) {
                *a += 1;
            }
        }
        agree.into_iter().map(|a| total as u32 - a).collect()
    }
}

impl LayerIndex {
    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_spaces(&self) -> usize {
        self.layers.len()
    }

    pub fn n_classes(&self) -> usize {
        self.model.output_dim()
    }

    /// Largest possible nonconformity, `L·k̃`.
    pub fn max_score(&self) -> u32 {
        (self.n_spaces() * self.k.min(self.n_rows())) as u32
    }

    /// Training-row positions of the neighbors of every row of `x`, per space.
    pub fn neighbors_batch(&self, x: ArrayView2<f64>) -> Result<Vec<Vec<Vec<usize>>>> {
        let reps = representations(&self.model, x)?;
        Ok((0..x.nrows())
            .into_par_iter()
            .map(|r| {
                reps.iter()
                    .zip(&self.layers)
                    .map(|(rep, idx)| {
                        if self.exact {
                            idx.exact(rep.row(r), self.k)
                        } else {
                            idx.query(rep.row(r), self.k)
                        }
                    })
                    .collect()
            })
            .collect())
    }

    pub fn neighborhoods(&self, x: ArrayView2<f64>) -> Result<Vec<Neighborhood>> {
        Ok(self
            .neighbors_batch(x)?
            .into_iter()
            .map(|per_layer| Neighborhood {
                labels: per_layer
                    .into_iter()
                    .map(|ns| ns.into_iter().map(|i| self.labels[i]).collect())
                    .collect(),
            })
            .collect())
    }

    pub fn nonconformity(&self, x: &[f64], j: usize) -> Result<u32> {
        if j >= self.n_classes() {
            return Err(Error::Index {
                index: j,
                len: self.n_classes(),
            });
        }
        let xb = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.neighborhoods(xb)?[0].scores(self.n_classes())[j])
    }
}

/// Sorted nonconformity scores of calibration rows under their true labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationScores {
    pub scores: Vec<u32>,
}

impl CalibrationScores {
    pub fn new(mut scores: Vec<u32>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Domain("calibration set is empty".into()));
        }
        scores.sort_unstable();
        Ok(Self { scores })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// `|{ϱ ∈ C : ϱ ≥ s}| / |C|`.
    pub fn p_value(&self, s: u32) -> f64 {
        let below = self.scores.partition_point(|&c| c < s);
        (self.scores.len() - below) as f64 / self.scores.len() as f64
    }

    pub fn p_values(&self, scores: &[u32]) -> Vec<f64> {
        scores.iter().map(|&s| self.p_value(s)).collect()
    }
}

/// Scores the given rows of `ds` under their true labels.
pub fn calibrate(idx: &LayerIndex, ds: &BeamDataset, rows: &[usize]) -> Result<CalibrationScores> {
    if rows.is_empty() {
        return Err(Error::Domain("calibration set is empty".into()));
    }
    let x = mlp::feature_matrix(ds, rows);
    let hoods = idx.neighborhoods(x.view())?;
    let q = idx.n_classes();
    CalibrationScores::new(
        hoods
            .iter()
            .zip(rows)
            .map(|(h, &r)| h.scores(q)[usize::from(ds.labels[r])])
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CredibilityRecord {
    pub prediction: usize,
    pub confidence: f64,
    pub credibility: f64,
    pub p_values: Vec<f64>,
    #[serde(skip)]
    pub neighbor_labels: Vec<Vec<u16>>,
}

impl CredibilityRecord {
    /// Prediction = argmax p (lowest index on ties), credibility = max p,
    /// confidence = 1 − second-largest p.
    pub fn from_p_values(p_values: Vec<f64>, neighbor_labels: Vec<Vec<u16>>) -> Self {
        let mut best = 0;
        for (j, &p) in p_values.iter().enumerate() {
            if p > p_values[best] {
                best = j;
            }
        }
        let second = p_values
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != best)
            .map(|(_, &p)| p)
            .fold(0.0, f64::max);
        Self {
            prediction: best,
            confidence: 1.0 - second,
            credibility: p_values[best],
            p_values,
            neighbor_labels,
        }
    }
}

pub fn classify_batch(idx: &LayerIndex, cal: &CalibrationScores, x: ArrayView2<f64>) -> Result<Vec<CredibilityRecord>> {
    let q = idx.n_classes();
    Ok(idx
        .neighborhoods(x)?
        .into_iter()
        .map(|h| CredibilityRecord::from_p_values(cal.p_values(&h.scores(q)), h.labels))
        .collect())
}

pub fn classify(idx: &LayerIndex, cal: &CalibrationScores, x: &[f64]) -> Result<CredibilityRecord> {
    let xb = ArrayView2::from_shape((1, x.len()), x).expect("row view");
    Ok(classify_batch(idx, cal, xb)?.pop().expect("one row"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `None` for an empty bin.
    pub accuracy: Option<f64>,
    pub mean_score: Option<f64>,
}

/// Bin of `score` among `(s/S, (s+1)/S]`; a score of exactly 0 lands in bin 0.
pub fn bin_of(score: f64, n_bins: usize) -> usize {
    let s = (score * n_bins as f64 - 1e-9).ceil() as isize - 1;
    s.clamp(0, n_bins as isize - 1) as usize
}

/// Accuracy per score bin for `(score, correct)` pairs.
pub fn reliability_bins(items: &[(f64, bool)], n_bins: usize) -> Result<Vec<ReliabilityBin>> {
    if n_bins == 0 {
        return Err(Error::Domain("need at least one bin".into()));
    }
    let mut count = vec![0usize; n_bins];
    let mut hits = vec![0usize; n_bins];
    let mut sum = vec![0.0; n_bins];
    for &(s, ok) in items {
        let b = bin_of(s, n_bins);
        count[b] += 1;
        hits[b] += usize::from(ok);
        sum[b] += s;
    }
    Ok((0..n_bins)
        .map(|b| ReliabilityBin {
            lower: b as f64 / n_bins as f64,
            upper: (b + 1) as f64 / n_bins as f64,
            count: count[b],
            accuracy: (count[b] > 0).then(|| hits[b] as f64 / count[b] as f64),
            mean_score: (count[b] > 0).then(|| sum[b] / count[b] as f64),
        })
        .collect())
}

/// Reliability diagram of DkNN credibility.
pub fn reliability_diagram(records: &[(CredibilityRecord, usize)], n_bins: usize) -> Result<Vec<ReliabilityBin>> {
    let items: Vec<(f64, bool)> = records.iter().map(|(r, l)| (r.credibility, r.prediction == *l)).collect();
    reliability_bins(&items, n_bins)
}

pub fn reliability_csv(bins: &[ReliabilityBin]) -> String {
    let mut out = String::from("bin_lower,bin_upper,count,accuracy,mean_score\n");
    for b in bins {
        let fmt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| v.to_string());
        let _ = writeln!(out, "{},{},{},{},{}", b.lower, b.upper, b.count, fmt(b.accuracy), fmt(b.mean_score));
    }
    out
}

/// `row,prediction,label,confidence,credibility`.
pub fn records_csv(records: &[(CredibilityRecord, usize)]) -> String {
    let mut out = String::from("row,prediction,label,confidence,credibility\n");
    for (i, (r, l)) in records.iter().enumerate() {
        let _ = writeln!(out, "{i},{},{l},{},{}", r.prediction, r.confidence, r.credibility);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSummary {
    pub thresholds: Vec<f64>,
    /// Fraction of clean rows with credibility below each threshold.
    pub clean_below: Vec<f64>,
    pub adversarial_below: Vec<f64>,
    pub clean_mean_credibility: f64,
    pub adversarial_mean_credibility: f64,
}

impl RobustnessSummary {
    pub fn from_records(clean: &[CredibilityRecord], adversarial: &[CredibilityRecord], thresholds: &[f64]) -> Result<Self> {
        if clean.is_empty() || adversarial.is_empty() {
            return Err(Error::Domain("robustness evaluation needs clean and adversarial rows".into()));
        }
        let below = |rs: &[CredibilityRecord], t: f64| rs.iter().filter(|r| r.credibility < t).count() as f64 / rs.len() as f64;
        let mean = |rs: &[CredibilityRecord]| rs.iter().map(|r| r.credibility).sum::<f64>() / rs.len() as f64;
        Ok(Self {
            thresholds: thresholds.to_vec(),
            clean_below: thresholds.iter().map(|&t| below(clean, t)).collect(),
            adversarial_below: thresholds.iter().map(|&t| below(adversarial, t)).collect(),
            clean_mean_credibility: mean(clean),
            adversarial_mean_credibility: mean(adversarial),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,clean_fraction_below,adversarial_fraction_below,clean_mean_credibility,adversarial_mean_credibility\n");
        for (i, t) in self.thresholds.iter().enumerate() {
            let _ = writeln!(
                out,
                "{t},{},{},{},{}",
                self.clean_below[i], self.adversarial_below[i], self.clean_mean_credibility, self.adversarial_mean_credibility
            );
        }
        out
    }
}

pub fn robustness_eval(
    idx: &LayerIndex,
    cal: &CalibrationScores,
    clean: ArrayView2<f64>,
    adversarial: ArrayView2<f64>,
    thresholds: &[f64],
) -> Result<RobustnessSummary> {
    let c = classify_batch(idx, cal, clean)?;
    let a = classify_batch(idx, cal, adversarial)?;
    RobustnessSummary::from_records(&c, &a, thresholds)
}

/// FGSM copies of the given rows under their true labels.
pub fn fgsm_rows(model: &MlpModel, ds: &BeamDataset, rows: &[usize], epsilon: f64) -> Result<Array2<f64>> {
    let x = mlp::feature_matrix(ds, rows);
    let adv: Vec<Vec<f64>> = rows
        .par_iter()
        .enumerate()
        .map(|(i, &r)| model.fgsm(&x.row(i).to_vec(), usize::from(ds.labels[r]), epsilon))
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros(x.raw_dim());
    for (i, a) in adv.iter().enumerate() {
        out.row_mut(i).assign(&ndarray::ArrayView1::from(a.as_slice()));
    }
    Ok(out)
}
