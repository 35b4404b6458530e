//! Accuracy, SNR and sweep-time metrics.

use std::time::Instant;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelVector;
use crate::dataset::dbm_to_w;
use crate::error::{Error, Result};
use crate::mlp::{topk_indices, MlpModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    /// Scan time per measured beam.
    pub t_s_ms: f64,
    pub t_frame_ms: f64,
    pub t_predict_ms: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            t_s_ms: 5.0 / 64.0,
            t_frame_ms: 10.0,
            t_predict_ms: 0.0435,
        }
    }
}

impl TimingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("t_s_ms", self.t_s_ms), ("t_frame_ms", self.t_frame_ms), ("t_predict_ms", self.t_predict_ms)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn sweep_time_ms(&self, n_measurements: usize) -> f64 {
        n_measurements as f64 * self.t_s_ms
    }

    /// `T_IA = (n + k·1{k>1})·t_s + t_predict`.
    pub fn alignment_time_ms(&self, n_measurements: usize, k: usize) -> f64 {
        let extra = if k > 1 { k } else { 0 };
        self.sweep_time_ms(n_measurements + extra) + self.t_predict_ms
    }
}

/// `((T_frame − T_IA)/T_frame)·log₂(1 + SNR)`, zero once alignment fills the frame.
pub fn effective_se(snr_linear: f64, timing: &TimingConfig, n_measurements: usize, k: usize) -> f64 {
    se_with_alignment_time(snr_linear, timing.t_frame_ms, timing.alignment_time_ms(n_measurements, k))
}

pub fn se_with_alignment_time(snr_linear: f64, t_frame_ms: f64, t_ia_ms: f64) -> f64 {
    if t_ia_ms >= t_frame_ms {
        return 0.0;
    }
    (t_frame_ms - t_ia_ms) / t_frame_ms * (1.0 + snr_linear).log2()
}

/// `P·|h^H w|²/σ²` in dB.
pub fn snr_db(h: &ChannelVector, w: &ChannelVector, tx_power_dbm: f64, noise_dbm: f64) -> f64 {
    let signal = dbm_to_w(tx_power_dbm) * h.gain(w);
    10.0 * (signal / dbm_to_w(noise_dbm)).log10()
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Mean of per-channel SNRs in dB.
pub fn average_snr_db(snrs_db: &[f64]) -> f64 {
    snrs_db.iter().sum::<f64>() / snrs_db.len() as f64
}

/// Fraction of rows whose label lies in the top `k` predictions.
pub fn topk_accuracy(model: &MlpModel, x: ArrayView2<f64>, labels: &[usize], k: usize) -> Result<f64> {
    Ok(topk_accuracies(model, x, labels, &[k])?[0])
}

/// [`topk_accuracy`] for several `k` from one forward pass.
pub fn topk_accuracies(model: &MlpModel, x: ArrayView2<f64>, labels: &[usize], ks: &[usize]) -> Result<Vec<f64>> {
    if labels.is_empty() || labels.len() != x.nrows() {
        return Err(Error::Shape {
            expected: x.nrows(),
            got: labels.len(),
        });
    }
    let q = model.output_dim();
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > q) {
        return Err(Error::Domain(format!("k must lie in 1..={q}, got {k}")));
    }
    let probs = model.probs_batch(x)?;
    let kmax = ks.iter().copied().max().unwrap_or(1);
    let mut hits = vec![0usize; ks.len()];
    for (r, &l) in labels.iter().enumerate() {
        let top = topk_indices(&probs.row(r).to_vec(), kmax);
        if let Some(pos) = top.iter().position(|&i| i == l) {
            for (h, &k) in hits.iter_mut().zip(ks) {
                if pos < k {
                    *h += 1;
                }
            }
        }
    }
    Ok(hits.into_iter().map(|h| h as f64 / labels.len() as f64).collect())
}

/// Median wall time of `reps` single-row forward passes, in ms.
pub fn measure_predict_ms(model: &MlpModel, x: &[f64], reps: usize) -> Result<f64> {
    let mut times = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        let t0 = Instant::now();
        std::hint::black_box(model.forward(std::hint::black_box(x))?);
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_scene, synthesize_all, ArrayConfig, SceneParams};
    use crate::codebook::{dft_codebook, quantized_mrt};
    use crate::dataset::optimal_label;
    use crate::seed;
    use ndarray::Array2;
    use rand::Rng;

    #[test]
    fn sweep_time_anchors() {
        let t = TimingConfig::default();
        assert_eq!(t.sweep_time_ms(12), 0.9375);
        assert_eq!(t.sweep_time_ms(128), 10.0);
        assert!((t.alignment_time_ms(12, 1) - 0.981).abs() < 1e-12);
        assert!((t.alignment_time_ms(2, 1) - (0.15625 + 0.0435)).abs() < 1e-12);
        assert_eq!(t.alignment_time_ms(12, 3), t.sweep_time_ms(15) + 0.0435);
    }

    #[test]
    fn spectral_efficiency_arithmetic() {
        assert_eq!(se_with_alignment_time(1.0, 10.0, 5.0), 0.5);
        assert_eq!(se_with_alignment_time(100.0, 10.0, 10.0), 0.0);
        assert_eq!(se_with_alignment_time(100.0, 10.0, 12.0), 0.0);
        let t = TimingConfig::default();
        assert_eq!(effective_se(1e3, &t, 200, 1), 0.0);
        assert!(effective_se(1e3, &t, 2, 1) > effective_se(1e3, &t, 32, 1));
    }

    #[test]
    fn topk_accuracy_matches_naive_loop() {
        let model = MlpModel::new(&[4, 8, 6], 2).unwrap();
        let mut rng = seed::rng(3);
        let x = Array2::from_shape_fn((20, 4), |_| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..20).map(|_| rng.random_range(0..6)).collect();
        for k in 1..=6 {
            let mut hit = 0;
            for r in 0..20 {
                let p = model.forward(&x.row(r).to_vec()).unwrap().probs;
                let better = (0..6).filter(|&j| p[j] > p[labels[r]] || (p[j] == p[labels[r]] && j < labels[r])).count();
                hit += usize::from(better < k);
            }
            assert_eq!(topk_accuracy(&model, x.view(), &labels, k).unwrap(), hit as f64 / 20.0);
        }
        assert_eq!(topk_accuracy(&model, x.view(), &labels, 6).unwrap(), 1.0);
        assert!(topk_accuracy(&model, x.view(), &labels, 7).is_err());
    }

    #[test]
    fn perfect_model_scores_one() {
        let mut m = MlpModel::zeros(&[3, 3]);
        for i in 0..3 {
            m.weights[0][(i, i)] = 50.0;
        }
        let x = ndarray::array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(topk_accuracy(&m, x.view(), &[0, 1, 2], 1).unwrap(), 1.0);
    }

    #[test]
    fn snr_policies() {
        let cfg = ArrayConfig::default();
        let cands = dft_codebook(&cfg, 4).unwrap();
        let scene = generate_scene(&SceneParams { n_ue: 100, ..SceneParams::default() }, &cfg, 2).unwrap();
        for h in synthesize_all(&scene, &cfg).unwrap() {
            let best = snr_db(&h, &cands.vectors[optimal_label(&h, &cands)], 30.0, -100.0);
            for w in &cands.vectors {
                assert!(snr_db(&h, w, 30.0, -100.0) <= best);
            }
            let fine = h.gain(&quantized_mrt(&h, 16).unwrap());
            let coarse = h.gain(&quantized_mrt(&h, 3).unwrap());
            assert!(fine >= coarse * (1.0 - 1e-9));
        }
        let hand = [10.0, 12.5, -3.0, 7.0, 0.5];
        assert_eq!(average_snr_db(&hand), 27.0 / 5.0);
    }

    #[test]
    fn predict_timing_is_positive() {
        let m = MlpModel::beam_classifier(12, 128, 0).unwrap();
        let t = measure_predict_ms(&m, &[0.1; 12], 50).unwrap();
        assert!(t > 0.0 && t < 100.0);
    }
}
