//! Classical beam-search baselines under noisy RSSI measurements.
//!
//! Every procedure reports how many beams it measured so sweep time and
//! effective spectral efficiency can be compared with the learned policy.

use serde::{Deserialize, Serialize};

use crate::channel::ChannelVector;
use crate::codebook::{child_beams, grid_center, subarray_beam, Codebook, CodebookKind};
use crate::dataset::{argmax, measure, BeamDataset, MeasurementConfig};
use crate::error::{Error, Result};
use crate::metrics::{snr_db, TimingConfig};
use crate::mlp::{self, MlpModel, TrainConfig, TrainReport};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub chosen_beam: usize,
    pub n_measurements: usize,
    /// SNR of the chosen beam against the sweep's noise power (+∞ when noiseless).
    pub achieved_snr_db: f64,
    pub sweep_time_ms: f64,
}

impl SweepResult {
    fn new(h: &ChannelVector, candidates: &Codebook, chosen: usize, n: usize, mc: &MeasurementConfig, noise_dbm: f64, timing: &TimingConfig) -> Self {
        Self {
            chosen_beam: chosen,
            n_measurements: n,
            achieved_snr_db: snr_db(h, &candidates.vectors[chosen], mc.tx_power_dbm, noise_dbm),
            sweep_time_ms: timing.sweep_time_ms(n),
        }
    }
}

/// Sweeps all `Q` candidates.
pub fn exhaustive_search(h: &ChannelVector, candidates: &Codebook, mc: &MeasurementConfig, seed: u64, timing: &TimingConfig) -> SweepResult {
    let m = measure(h, candidates, mc, seed);
    SweepResult::new(h, candidates, argmax(&m.rssi), candidates.len(), mc, m.noise_dbm, timing)
}

/// Best wide beam, then best child narrow beam: `M_w + ⌈Q/M_w⌉` measurements.
pub fn hierarchical_search(
    h: &ChannelVector,
    wide: &Codebook,
    candidates: &Codebook,
    mc: &MeasurementConfig,
    seed: u64,
    timing: &TimingConfig,
) -> Result<SweepResult> {
    if wide.is_empty() || wide.len() > candidates.len() {
        return Err(Error::Config("hierarchical search needs 1..=Q wide beams".into()));
    }
    let first = measure(h, wide, mc, seed::derive(seed, "wide"));
    let best = argmax(&first.rssi);
    let kids: Vec<usize> = child_beams(best, wide.len(), candidates.len()).collect();
    let sub = candidates.subset(&kids)?;
    // Both tiers share one noise realization of the sample.
    let second = measure(h, &sub, &mc.fixed_noise(first.noise_dbm), seed::derive(seed, "narrow"));
    let chosen = kids[argmax(&second.rssi)];
    let n = wide.len() + candidates.len().div_ceil(wide.len());
    Ok(SweepResult::new(h, candidates, chosen, n, mc, first.noise_dbm, timing))
}

/// Wide beam covering candidate range `[a, b)` of a `q`-beam oversampled grid.
pub fn range_beam(a: usize, b: usize, q: usize, n_antennas: usize) -> ChannelVector {
    let u = (grid_center(a, q) + grid_center(b - 1, q)) / 2.0;
    let n_active = if b - a == 1 { n_antennas } else { (q / (b - a)).clamp(1, n_antennas) };
    subarray_beam(u, n_active, n_antennas)
}

/// Bisection over the candidate grid with two wide beams per level.
pub fn binary_search(h: &ChannelVector, candidates: &Codebook, mc: &MeasurementConfig, seed: u64, timing: &TimingConfig) -> Result<SweepResult> {
    let q = candidates.len();
    if q < 2 || !q.is_power_of_two() {
        return Err(Error::Config(format!("binary search needs a power-of-two codebook, got {q}")));
    }
    let n_ant = candidates.n_antennas();
    let (mut a, mut b) = (0, q);
    let mut n = 0;
    let mut noise_dbm = None;
    let mut level = 0u64;
    while b - a > 1 {
        let mid = (a + b) / 2;
        let pair = if mid - a == 1 {
            candidates.subset(&[a, mid])?
        } else {
            Codebook {
                vectors: vec![range_beam(a, mid, q, n_ant), range_beam(mid, b, q, n_ant)],
                kind: CodebookKind::WideTier1,
                oversampling: 1,
            }
        };
        let level_mc = noise_dbm.map_or_else(|| mc.clone(), |d| mc.fixed_noise(d));
        let m = measure(h, &pair, &level_mc, seed::derive_index(seed, level));
        noise_dbm.get_or_insert(m.noise_dbm);
        n += 2;
        if m.rssi[1] > m.rssi[0] {
            a = mid;
        } else {
            b = mid;
        }
        level += 1;
    }
    Ok(SweepResult::new(h, candidates, a, n, mc, noise_dbm.unwrap_or(f64::NEG_INFINITY), timing))
}

/// `M̃_w` evenly spaced indices of a `q`-beam grid, at the centers of equal slices.
pub fn fixed_subset_indices(q: usize, m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > q {
        return Err(Error::Config(format!("fixed subset size {m} must lie in 1..={q}")));
    }
    Ok((0..m).map(|i| (2 * i + 1) * q / (2 * m)).collect())
}

/// Beam classifier trained on RSSI of a fixed narrow-beam subset.
pub fn fixed_subset_baseline(ds: &BeamDataset, tc: &TrainConfig, init_seed: u64) -> Result<TrainReport> {
    let init = MlpModel::beam_classifier(ds.n_features, ds.n_classes, init_seed)?;
    mlp::train(&init, ds, tc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_scene, steering_vector, synthesize_all, ArrayConfig, SceneParams};
    use crate::codebook::{angle_for_spatial_frequency, dft_codebook, wide_codebook};
    use crate::dataset::optimal_label;

    fn setup() -> (ArrayConfig, Codebook, Codebook) {
        let cfg = ArrayConfig::default();
        (cfg, wide_codebook(&cfg, 32).unwrap(), dft_codebook(&cfg, 4).unwrap())
    }

    fn on_grid(q: usize, cfg: &ArrayConfig) -> ChannelVector {
        steering_vector(angle_for_spatial_frequency(grid_center(q, 128), cfg).unwrap(), cfg)
            .unwrap()
            .scaled(1e-6)
    }

    #[test]
    fn measurement_counts_and_times() {
        let (cfg, wide, cands) = setup();
        let t = TimingConfig::default();
        let mc = MeasurementConfig::default();
        let h = on_grid(40, &cfg);
        let e = exhaustive_search(&h, &cands, &mc, 1, &t);
        assert_eq!(e.n_measurements, 128);
        assert!((e.sweep_time_ms - 10.0).abs() < 1e-12);
        assert_eq!(hierarchical_search(&h, &wide, &cands, &mc, 1, &t).unwrap().n_measurements, 36);
        assert_eq!(binary_search(&h, &cands, &mc, 1, &t).unwrap().n_measurements, 14);

        for (n, q) in [(8usize, 32usize), (16, 64), (4, 16)] {
            let cfg = ArrayConfig::with_antennas(n);
            let cands = dft_codebook(&cfg, q / n).unwrap();
            let h = steering_vector(0.1, &cfg).unwrap();
            for m_w in [1, 2, n] {
                let wide = wide_codebook(&cfg, m_w).unwrap();
                let r = hierarchical_search(&h, &wide, &cands, &mc, 0, &t).unwrap();
                assert_eq!(r.n_measurements, m_w + q.div_ceil(m_w));
            }
            let r = binary_search(&h, &cands, &mc, 0, &t).unwrap();
            assert_eq!(r.n_measurements, 2 + 2 * (q / 2).ilog2() as usize);
        }
    }

    #[test]
    fn noiseless_baselines_agree_on_grid() {
        let (cfg, wide, cands) = setup();
        let t = TimingConfig::default();
        let mc = MeasurementConfig::noiseless();
        for q in 0..128 {
            let h = on_grid(q, &cfg);
            assert_eq!(optimal_label(&h, &cands), q);
            assert_eq!(exhaustive_search(&h, &cands, &mc, 0, &t).chosen_beam, q);
            assert_eq!(hierarchical_search(&h, &wide, &cands, &mc, 0, &t).unwrap().chosen_beam, q, "hierarchical {q}");
            assert_eq!(binary_search(&h, &cands, &mc, 0, &t).unwrap().chosen_beam, q, "binary {q}");
        }
    }

    #[test]
    fn noiseless_exhaustive_is_the_label_and_hierarchy_stays_in_its_children() {
        let (cfg, wide, cands) = setup();
        let t = TimingConfig::default();
        let mc = MeasurementConfig::noiseless();
        let scene = generate_scene(&SceneParams { n_ue: 200, ..SceneParams::default() }, &cfg, 3).unwrap();
        for h in synthesize_all(&scene, &cfg).unwrap() {
            assert_eq!(exhaustive_search(&h, &cands, &mc, 0, &t).chosen_beam, optimal_label(&h, &cands));
            let best_wide = argmax(&wide.gains(&h));
            let r = hierarchical_search(&h, &wide, &cands, &mc, 0, &t).unwrap();
            assert!(child_beams(best_wide, 32, 128).contains(&r.chosen_beam));
        }
    }

    #[test]
    fn drowned_exhaustive_search_is_uniform() {
        let (cfg, _, cands) = setup();
        let t = TimingConfig::default();
        let mc = MeasurementConfig::default().fixed_noise(0.0);
        let h = on_grid(17, &cfg);
        let mut counts = [0usize; 128];
        for s in 0..1000 {
            counts[exhaustive_search(&h, &cands, &mc, s, &t).chosen_beam] += 1;
        }
        let expect = 1000.0 / 128.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        // 127 degrees of freedom: mean 127, sd ≈ 16
        assert!(chi2 < 127.0 + 5.0 * 16.0, "chi2 {chi2}");
    }

    #[test]
    fn binary_is_no_better_than_hierarchical_under_noise() {
        let (cfg, wide, cands) = setup();
        let t = TimingConfig::default();
        let scene = generate_scene(&SceneParams { n_ue: 400, ..SceneParams::default() }, &cfg, 8).unwrap();
        let channels = synthesize_all(&scene, &cfg).unwrap();
        let mc = MeasurementConfig::default().fixed_noise(-90.0);
        let (mut hier, mut bin) = (0, 0);
        for trial in 0..2000u64 {
            let h = &channels[trial as usize % channels.len()];
            let best = optimal_label(h, &cands);
            hier += usize::from(hierarchical_search(h, &wide, &cands, &mc, trial, &t).unwrap().chosen_beam == best);
            bin += usize::from(binary_search(h, &cands, &mc, trial, &t).unwrap().chosen_beam == best);
        }
        assert!(bin <= hier, "binary {bin} vs hierarchical {hier}");
        assert!(hier < 2000, "noise level leaves no errors");
    }

    #[test]
    fn fixed_subset_layout() {
        assert_eq!(fixed_subset_indices(128, 4).unwrap(), vec![16, 48, 80, 112]);
        assert_eq!(fixed_subset_indices(128, 128).unwrap(), (0..128).collect::<Vec<_>>());
        assert!(fixed_subset_indices(128, 0).is_err());
        assert!(fixed_subset_indices(128, 129).is_err());
    }
}
