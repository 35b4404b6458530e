//! Labeled RSSI datasets.
//!
//! A row is one (user, noise realization) pair: the user's channel is swept
//! with the sensing beams, every received power picks up complex Gaussian
//! noise, and the label is the best oversampled beam found by a noise-free
//! exhaustive search. Rows are split 70/10/20 into train, holdout and test.
//! Features are z-scored with train statistics (or with a supplied
//! [`Standardizer`], so twin and real data share one input scale).

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{synthesize_all, ArrayConfig, ChannelVector, Scene};
use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasurementConfig {
    pub tx_power_dbm: f64,
    /// Per-sample noise power is drawn uniformly in dBm from `[low, high]`;
    /// `None` disables measurement noise.
    pub noise_dbm_range: Option<[f64; 2]>,
    pub noiseless_labels: bool,
}

impl Default for MeasurementConfig {
    fn default() -> Self {
        Self {
            tx_power_dbm: 30.0,
            noise_dbm_range: Some([-114.0, -94.0]),
            noiseless_labels: true,
        }
    }
}

impl MeasurementConfig {
    pub fn noiseless() -> Self {
        Self {
            noise_dbm_range: None,
            ..Self::default()
        }
    }

    /// Noise fixed at `dbm` for every sample.
    pub fn fixed_noise(&self, dbm: f64) -> Self {
        Self {
            noise_dbm_range: Some([dbm, dbm]),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.tx_power_dbm.is_finite() {
            return Err(Error::Config("tx_power_dbm must be finite".into()));
        }
        if let Some([lo, hi]) = self.noise_dbm_range {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("noise range [{lo}, {hi}] must be finite with low <= high")));
            }
        }
        Ok(())
    }

    pub fn tx_power_w(&self) -> f64 {
        dbm_to_w(self.tx_power_dbm)
    }
}

pub fn dbm_to_w(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// One sweep over a codebook.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    /// `|√P·h^H w_i + z_i|²` per beam, in watts.
    pub rssi: Vec<f64>,
    /// Noise power of this sample in dBm (−∞ when noiseless).
    pub noise_dbm: f64,
}

impl Measurement {
    pub fn noise_w(&self) -> f64 {
        dbm_to_w(self.noise_dbm)
    }
}

/// Sweeps `h` with every beam of `book`. Deterministic in `seed`.
pub fn measure(h: &ChannelVector, book: &Codebook, mc: &MeasurementConfig, seed: u64) -> Measurement {
    let mut rng = seed::rng(seed);
    let noise_dbm = match mc.noise_dbm_range {
        Some([lo, hi]) if lo < hi => rng.random_range(lo..=hi),
        Some([lo, _]) => lo,
        None => f64::NEG_INFINITY,
    };
    let sigma2 = dbm_to_w(noise_dbm);
    let amp = mc.tx_power_w().sqrt();
    let normal = Normal::new(0.0, (sigma2 / 2.0).sqrt()).expect("finite noise power");
    let rssi = book
        .vectors
        .iter()
        .map(|w| {
            let mut r = h.inner(w) * amp;
            if sigma2 > 0.0 {
                r.re += normal.sample(&mut rng);
                r.im += normal.sample(&mut rng);
            }
            r.norm_sqr()
        })
        .collect();
    Measurement { rssi, noise_dbm }
}

/// `x = [|r_1|², …, |r_M|²]` for the sensing beams.
pub fn rssi_features(h: &ChannelVector, sensing: &Codebook, mc: &MeasurementConfig, seed: u64) -> Vec<f64> {
    measure(h, sensing, mc, seed).rssi
}

/// Index of the largest value; the lowest index wins ties. NaNs never win.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] || values[best].is_nan() {
            best = i;
        }
    }
    best
}

/// Noise-free exhaustive search: `argmax_q |h^H w_q|²`.
pub fn optimal_label(h: &ChannelVector, candidates: &Codebook) -> usize {
    argmax(&candidates.gains(h))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train = 0,
    Holdout = 1,
    Test = 2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Twin = 0,
    Real = 1,
}

impl Split {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Split::Train),
            1 => Ok(Split::Holdout),
            2 => Ok(Split::Test),
            _ => Err(Error::Format(format!("bad split tag {v}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Holdout => "holdout",
            Split::Test => "test",
        }
    }
}

impl Origin {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Origin::Twin),
            1 => Ok(Origin::Real),
            _ => Err(Error::Format(format!("bad origin tag {v}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Origin::Twin => "twin",
            Origin::Real => "real",
        }
    }
}

/// Per-column z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits on the given rows of a row-major raw matrix.
    pub fn fit(raw: &[Vec<f64>], rows: &[usize], n_features: usize) -> Self {
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; n_features];
        for &r in rows {
            for (m, x) in mean.iter_mut().zip(&raw[r]) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; n_features];
        for &r in rows {
            for ((v, x), m) in var.iter_mut().zip(&raw[r]).zip(&mean) {
                *v += (x - m).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 0.0 && s.is_finite() {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn select(&self, cols: &[usize]) -> Self {
        Self {
            mean: cols.iter().map(|&c| self.mean[c]).collect(),
            std: cols.iter().map(|&c| self.std[c]).collect(),
        }
    }
}

/// Rows of `(x, q*)` with split and origin tags.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamDataset {
    pub n_features: usize,
    pub n_classes: usize,
    /// Standardized features, row-major.
    pub features: Vec<f32>,
    pub labels: Vec<u16>,
    pub split: Vec<Split>,
    pub origin: Vec<Origin>,
    /// Scene user each row was measured from.
    pub ue: Vec<u32>,
    pub noise_dbm: Vec<f32>,
    pub standardizer: Standardizer,
}

/// Sizes of the train and holdout splits for `n` rows (70% / 10%, rounded half up).
pub fn split_sizes(n: usize) -> (usize, usize) {
    ((7 * n + 5) / 10, (n + 5) / 10)
}

/// Number of rows selected by a fraction, robust to binary rounding of `fraction`.
pub fn fraction_of(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64 + 1e-9).floor() as usize).min(n)
}

/// Builds a dataset with features standardized on its own train split.
#[allow(clippy::too_many_arguments)]
pub fn build_dataset(
    scene: &Scene,
    cfg: &ArrayConfig,
    sensing: &Codebook,
    candidates: &Codebook,
    mc: &MeasurementConfig,
    n_samples: usize,
    origin: Origin,
    seed: u64,
) -> Result<BeamDataset> {
    build_dataset_with(scene, cfg, sensing, candidates, mc, n_samples, origin, seed, None)
}

/// Like [`build_dataset`] but standardizes with `standardizer` when given.
#[allow(clippy::too_many_arguments)]
pub fn build_dataset_with(
    scene: &Scene,
    cfg: &ArrayConfig,
    sensing: &Codebook,
    candidates: &Codebook,
    mc: &MeasurementConfig,
    n_samples: usize,
    origin: Origin,
    seed: u64,
    standardizer: Option<&Standardizer>,
) -> Result<BeamDataset> {
    mc.validate()?;
    if n_samples == 0 || scene.n_ue() == 0 || sensing.is_empty() || candidates.is_empty() {
        return Err(Error::Build("dataset needs at least one sample, user and beam".into()));
    }
    if candidates.len() > usize::from(u16::MAX) {
        return Err(Error::Build(format!("{} candidate beams exceed the u16 label range", candidates.len())));
    }
    if let Some(s) = standardizer {
        if s.mean.len() != sensing.len() {
            return Err(Error::Shape {
                expected: sensing.len(),
                got: s.mean.len(),
            });
        }
    }
    let channels = synthesize_all(scene, cfg)?;
    let clean_labels: Vec<u16> = channels
        .par_iter()
        .map(|h| optimal_label(h, candidates) as u16)
        .collect();

    let rows: Vec<(u32, Vec<f64>, f64, u16)> = (0..n_samples)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::rng(seed::derive_index(seed, r as u64));
            let ue = rng.random_range(0..scene.n_ue());
            let noise_seed: u64 = rng.random();
            let m = measure(&channels[ue], sensing, mc, noise_seed);
            let label = if mc.noiseless_labels {
                clean_labels[ue]
            } else {
                let sweep = measure(&channels[ue], candidates, &mc.fixed_noise(m.noise_dbm), noise_seed ^ 1);
                argmax(&sweep.rssi) as u16
            };
            (ue as u32, m.rssi, m.noise_dbm, label)
        })
        .collect();

    let mut order: Vec<usize> = (0..n_samples).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed, "split")));
    let (n_train, n_hold) = split_sizes(n_samples);
    let mut split = vec![Split::Test; n_samples];
    for (rank, &r) in order.iter().enumerate() {
        if rank < n_train {
            split[r] = Split::Train;
        } else if rank < n_train + n_hold {
            split[r] = Split::Holdout;
        }
    }

    let raw: Vec<Vec<f64>> = rows.iter().map(|r| r.1.clone()).collect();
    let standardizer = match standardizer {
        Some(s) => s.clone(),
        None => {
            let train: Vec<usize> = (0..n_samples).filter(|&r| split[r] == Split::Train).collect();
            Standardizer::fit(&raw, &train, sensing.len())
        }
    };
    let mut features = Vec::with_capacity(n_samples * sensing.len());
    for x in &raw {
        features.extend(standardizer.apply(x).into_iter().map(|v| v as f32));
    }
    Ok(BeamDataset {
        n_features: sensing.len(),
        n_classes: candidates.len(),
        features,
        labels: rows.iter().map(|r| r.3).collect(),
        split,
        origin: vec![origin; n_samples],
        ue: rows.iter().map(|r| r.0).collect(),
        noise_dbm: rows.iter().map(|r| r.2 as f32).collect(),
        standardizer,
    })
}

/// Augmented set: every twin train row plus a seeded `real_fraction` of the
/// real train rows. Holdout and test rows are the real ones.
pub fn augment(real: &BeamDataset, twin: &BeamDataset, real_fraction: f64, seed: u64) -> Result<BeamDataset> {
    if !(0.0..=1.0).contains(&real_fraction) {
        return Err(Error::Config(format!("real_fraction must lie in [0,1], got {real_fraction}")));
    }
    if real.n_features != twin.n_features || real.n_classes != twin.n_classes {
        return Err(Error::Shape {
            expected: twin.n_features,
            got: real.n_features,
        });
    }
    let mut real_train = real.indices(Split::Train);
    real_train.shuffle(&mut seed::rng(seed));
    real_train.truncate(fraction_of(real_fraction, real_train.len()));
    real_train.sort_unstable();

    let twin_rows = twin.select_rows(&twin.indices(Split::Train));
    let mut real_rows: Vec<usize> = real_train;
    real_rows.extend(real.indices(Split::Holdout));
    real_rows.extend(real.indices(Split::Test));
    let mut out = twin_rows;
    out.append(&real.select_rows(&real_rows));
    Ok(out)
}

const DATASET_MAGIC: &[u8; 4] = b"BTDS";
const DATASET_VERSION: u16 = 1;

impl BeamDataset {
    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.n_rows()).filter(|&r| self.split[r] == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.split.iter().filter(|&&s| s == split).count()
    }

    pub fn select_rows(&self, rows: &[usize]) -> BeamDataset {
        let mut features = Vec::with_capacity(rows.len() * self.n_features);
        for &r in rows {
            features.extend_from_slice(self.row(r));
        }
        BeamDataset {
            n_features: self.n_features,
            n_classes: self.n_classes,
            features,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            split: rows.iter().map(|&r| self.split[r]).collect(),
            origin: rows.iter().map(|&r| self.origin[r]).collect(),
            ue: rows.iter().map(|&r| self.ue[r]).collect(),
            noise_dbm: rows.iter().map(|&r| self.noise_dbm[r]).collect(),
            standardizer: self.standardizer.clone(),
        }
    }

    /// The same rows restricted to feature columns `cols`, in that order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<BeamDataset> {
        if let Some(&c) = cols.iter().find(|&&c| c >= self.n_features) {
            return Err(Error::Index {
                index: c,
                len: self.n_features,
            });
        }
        let mut features = Vec::with_capacity(self.n_rows() * cols.len());
        for r in 0..self.n_rows() {
            let row = self.row(r);
            features.extend(cols.iter().map(|&c| row[c]));
        }
        Ok(BeamDataset {
            n_features: cols.len(),
            features,
            standardizer: self.standardizer.select(cols),
            ..self.clone()
        })
    }

    /// Rows of `other` appended to `self`.
    pub fn append(&mut self, other: &BeamDataset) {
        assert_eq!(self.n_features, other.n_features);
        self.features.extend_from_slice(&other.features);
        self.labels.extend_from_slice(&other.labels);
        self.split.extend_from_slice(&other.split);
        self.origin.extend_from_slice(&other.origin);
        self.ue.extend_from_slice(&other.ue);
        self.noise_dbm.extend_from_slice(&other.noise_dbm);
    }

    /// Rows of one split as a new dataset.
    pub fn split_rows(&self, split: Split) -> BeamDataset {
        self.select_rows(&self.indices(split))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(DATASET_MAGIC);
        w.u16(DATASET_VERSION);
        w.u32(self.n_rows() as u32);
        w.u32(self.n_features as u32);
        w.u32(self.n_classes as u32);
        self.features.iter().for_each(|&v| w.f32(v));
        self.labels.iter().for_each(|&v| w.u16(v));
        self.split.iter().for_each(|&v| w.u8(v as u8));
        self.origin.iter().for_each(|&v| w.u8(v as u8));
        self.ue.iter().for_each(|&v| w.u32(v));
        self.noise_dbm.iter().for_each(|&v| w.f32(v));
        self.standardizer.mean.iter().for_each(|&v| w.f64(v));
        self.standardizer.std.iter().for_each(|&v| w.f64(v));
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_header(DATASET_MAGIC, DATASET_VERSION)?;
        let n = r.u32()? as usize;
        let nf = r.u32()? as usize;
        let n_classes = r.u32()? as usize;
        let expected = n
            .checked_mul(nf)
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
        if expected > bytes.len() {
            return Err(Error::Format(format!("{n}x{nf} features exceed file size")));
        }
        let features = (0..n * nf).map(|_| r.f32()).collect::<Result<_>>()?;
        let labels: Vec<u16> = (0..n).map(|_| r.u16()).collect::<Result<_>>()?;
        let split = (0..n).map(|_| Split::from_u8(r.u8()?)).collect::<Result<_>>()?;
        let origin = (0..n).map(|_| Origin::from_u8(r.u8()?)).collect::<Result<_>>()?;
        let ue = (0..n).map(|_| r.u32()).collect::<Result<_>>()?;
        let noise_dbm = (0..n).map(|_| r.f32()).collect::<Result<_>>()?;
        let mean = (0..nf).map(|_| r.f64()).collect::<Result<_>>()?;
        let std = (0..nf).map(|_| r.f64()).collect::<Result<_>>()?;
        r.finish()?;
        if let Some(&l) = labels.iter().find(|&&l| usize::from(l) >= n_classes) {
            return Err(Error::Format(format!("label {l} >= {n_classes} classes")));
        }
        Ok(BeamDataset {
            n_features: nf,
            n_classes,
            features,
            labels,
            split,
            origin,
            ue,
            noise_dbm,
            standardizer: Standardizer { mean, std },
        })
    }

    /// CSV: `row,split,origin,ue,noise_dbm,label,x_0,…`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,split,origin,ue,noise_dbm,label");
        for i in 0..self.n_features {
            let _ = write!(out, ",x_{i}");
        }
        out.push('\n');
        for r in 0..self.n_rows() {
            let _ = write!(
                out,
                "{r},{},{},{},{},{}",
                self.split[r].name(),
                self.origin[r].name(),
                self.ue[r],
                self.noise_dbm[r],
                self.labels[r]
            );
            for v in self.row(r) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}
