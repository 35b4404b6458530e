//! Cross-module flows on a small scene: channels → datasets → training → attribution → credibility.

use beamlab::baselines::fixed_subset_indices;
use beamlab::channel::{generate_scene, perturb_to_twin};
use beamlab::codebook::dft_codebook;
use beamlab::dataset::{augment, build_dataset, build_dataset_with};
use beamlab::dknn::{build_index, calibrate, classify_batch};
use beamlab::metrics::topk_accuracies;
use beamlab::mlp::{self, feature_matrix, label_vec};
use beamlab::shap::{explain, sample_references, value_function, ModelOutput, ShapTarget};
use beamlab::{ArrayConfig, BeamDataset, DknnConfig, MeasurementConfig, MlpModel, Origin, SceneParams, ShapConfig, Split, TrainConfig, TwinPerturbation};
use proptest::prelude::*;

struct Small {
    twin: BeamDataset,
    real: BeamDataset,
    model: MlpModel,
}

fn small() -> Small {
    let cfg = ArrayConfig::default();
    let scene = generate_scene(&SceneParams { n_ue: 150, ..SceneParams::default() }, &cfg, 5).unwrap();
    let twin_scene = perturb_to_twin(&scene, &TwinPerturbation::default(), 6).unwrap();
    let sensing = dft_codebook(&cfg, 1).unwrap();
    let cands = dft_codebook(&cfg, 4).unwrap();
    let mc = MeasurementConfig::default();
    let twin = build_dataset(&twin_scene, &cfg, &sensing, &cands, &mc, 1500, Origin::Twin, 7).unwrap();
    let real = build_dataset_with(&scene, &cfg, &sensing, &cands, &mc, 600, Origin::Real, 8, Some(&twin.standardizer)).unwrap();
    let tc = TrainConfig { epochs: 30, ..TrainConfig::default() };
    let init = MlpModel::beam_classifier(32, 128, 9).unwrap();
    let pre = mlp::train(&init, &twin, &tc).unwrap().model;
    let aug = augment(&real, &twin, 0.3, 10).unwrap();
    let model = mlp::finetune(&pre, &aug, &tc).unwrap().model;
    Small { twin, real, model }
}

#[test]
fn trained_model_beats_chance_by_far() {
    let s = small();
    let test = s.real.indices(Split::Test);
    let acc = topk_accuracies(&s.model, feature_matrix(&s.real, &test).view(), &label_vec(&s.real, &test), &[1, 3]).unwrap();
    // chance is 1/128 and 3/128
    assert!(acc[0] > 0.15 && acc[1] > 0.3, "{acc:?}");
    assert!(acc[1] >= acc[0]);
}

#[test]
fn attributions_on_a_trained_model_are_efficient() {
    let s = small();
    let rows: Vec<usize> = s.real.indices(Split::Test).into_iter().take(3).collect();
    let xs = feature_matrix(&s.real, &rows);
    let refs = sample_references(&s.twin, &s.twin.indices(Split::Train), 6, 1).unwrap();
    let game = ModelOutput { model: &s.model, target: ShapTarget::Logits };
    let cfg = ShapConfig { n_permutations: 8, ..ShapConfig::default() };
    let psi = explain(&game, xs.view(), refs.view(), &cfg).unwrap();
    let all: Vec<usize> = (0..32).collect();
    for (r, p) in psi.iter().enumerate() {
        let x = xs.row(r).to_vec();
        let full = value_function(&game, &x, &all, refs.view()).unwrap();
        let empty = value_function(&game, &x, &[], refs.view()).unwrap();
        for c in 0..128 {
            assert!((p.column(c).sum() - (full[c] - empty[c])).abs() < 1e-8);
        }
    }
}

#[test]
fn credibility_records_are_consistent() {
    let s = small();
    let idx = build_index(&s.model, &s.real, None, &DknnConfig::default()).unwrap();
    let cal = calibrate(&idx, &s.real, &s.real.indices(Split::Holdout)).unwrap();
    let test = s.real.indices(Split::Test);
    for rec in classify_batch(&idx, &cal, feature_matrix(&s.real, &test).view()).unwrap() {
        let max = rec.p_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(rec.credibility, max);
        assert_eq!(rec.p_values[rec.prediction], max);
        assert!((0.0..=1.0).contains(&rec.confidence));
        assert_eq!(rec.neighbor_labels.len(), 4);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    /// Rows depend only on the seed and index, so any sensing book sees the same UEs, labels and noise.
    #[test]
    fn sensing_book_does_not_change_rows(seed in any::<u64>(), m in 1usize..=32) {
        let cfg = ArrayConfig::default();
        let scene = generate_scene(&SceneParams { n_ue: 40, ..SceneParams::default() }, &cfg, seed).unwrap();
        let cands = dft_codebook(&cfg, 4).unwrap();
        let full = dft_codebook(&cfg, 1).unwrap();
        let sub = cands.subset(&fixed_subset_indices(128, m).unwrap()).unwrap();
        let mc = MeasurementConfig::default();
        let a = build_dataset(&scene, &cfg, &full, &cands, &mc, 50, Origin::Real, seed ^ 1).unwrap();
        let b = build_dataset(&scene, &cfg, &sub, &cands, &mc, 50, Origin::Real, seed ^ 1).unwrap();
        prop_assert_eq!(&a.labels, &b.labels);
        prop_assert_eq!(&a.ue, &b.ue);
        prop_assert_eq!(&a.split, &b.split);
        prop_assert_eq!(a.noise_dbm.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.noise_dbm.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(b.n_features, m);
    }
}
