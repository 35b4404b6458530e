//! Shapley attributions over sensing beams and threshold-based selection.
//!
//! The coalition value of a feature subset `S` is the model output averaged
//! over background references, each reference taking the explained input's
//! values on `S` and its own values elsewhere. Attributions are computed by
//! full subset enumeration for small inputs and by permutation sampling
//! otherwise.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::BeamDataset;
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::mlp::{self, MlpModel, TrainConfig, TrainReport};
use crate::seed;

/// Largest input dimension for subset enumeration.
pub const EXACT_MAX_FEATURES: usize = 14;

/// Rows evaluated per model call when sampling.
const MAX_BATCH_ROWS: usize = 1 << 16;

/// Anything that maps a batch of inputs to a batch of output vectors.
pub trait ValueModel: Sync {
    fn n_inputs(&self) -> usize;
    fn n_outputs(&self) -> usize;
    fn eval(&self, x: ArrayView2<f64>) -> Array2<f64>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapTarget {
    #[default]
    Logits,
    Probabilities,
}

/// An MLP's logits or probabilities as a [`ValueModel`].
pub struct ModelOutput<'a> {
    pub model: &'a MlpModel,
    pub target: ShapTarget,
}

impl ValueModel for ModelOutput<'_> {
    fn n_inputs(&self) -> usize {
        self.model.input_dim()
    }

    fn n_outputs(&self) -> usize {
        self.model.output_dim()
    }

    fn eval(&self, x: ArrayView2<f64>) -> Array2<f64> {
        match self.target {
            ShapTarget::Logits => self.model.logits_batch(x),
            ShapTarget::Probabilities => self.model.probs_batch(x),
        }
        .expect("input width checked by caller")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Exact when the input has at most [`EXACT_MAX_FEATURES`] features.
    #[default]
    Auto,
    Exact,
    PermutationSampling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapConfig {
    pub n_background_refs: usize,
    pub estimator: Estimator,
    pub n_permutations: usize,
    /// Pair every sampled ordering with its reverse.
    pub antithetic: bool,
    pub target: ShapTarget,
    pub seed: u64,
}

impl Default for ShapConfig {
    fn default() -> Self {
        Self {
            n_background_refs: 64,
            estimator: Estimator::Auto,
            n_permutations: 2048,
            antithetic: true,
            target: ShapTarget::Logits,
            seed: 0,
        }
    }
}

/// Seeded subsample of `n` background rows (all rows when `n` ≥ the row count).
pub fn sample_references(background: &BeamDataset, rows: &[usize], n: usize, seed: u64) -> Result<Array2<f64>> {
    if rows.is_empty() || n == 0 {
        return Err(Error::Config("background references need at least one row".into()));
    }
    let picked: Vec<usize> = if n >= rows.len() {
        rows.to_vec()
    } else {
        let mut p: Vec<usize> = index::sample(&mut seed::rng(seed), rows.len(), n).into_iter().map(|i| rows[i]).collect();
        p.sort_unstable();
        p
    };
    Ok(mlp::feature_matrix(background, &picked))
}

/// Mean output over references with features outside each mask replaced.
fn coalition_values<M: ValueModel + ?Sized>(model: &M, x: &[f64], refs: ArrayView2<f64>, masks: &[Vec<bool>]) -> Vec<Vec<f64>> {
    let r = refs.nrows();
    let m = x.len();
    let mut batch = Array2::zeros((masks.len() * r, m));
    for (k, mask) in masks.iter().enumerate() {
        for j in 0..r {
            let mut row = batch.row_mut(k * r + j);
            for i in 0..m {
                row[i] = if mask[i] { x[i] } else { refs[(j, i)] };
            }
        }
    }
    let out = model.eval(batch.view());
    (0..masks.len())
        .map(|k| {
            out.slice(ndarray::s![k * r..(k + 1) * r, ..])
                .mean_axis(Axis(0))
                .expect("non-empty references")
                .to_vec()
        })
        .collect()
}

fn check_inputs<M: ValueModel + ?Sized>(model: &M, x: &[f64], refs: &ArrayView2<f64>) -> Result<()> {
    if x.len() != model.n_inputs() {
        return Err(Error::Shape {
            expected: model.n_inputs(),
            got: x.len(),
        });
    }
    if refs.ncols() != x.len() {
        return Err(Error::Shape {
            expected: x.len(),
            got: refs.ncols(),
        });
    }
    if refs.nrows() == 0 {
        return Err(Error::Config("no background references".into()));
    }
    Ok(())
}

/// `v(S)`: the full set evaluates `x` directly, anything else averages over references.
pub fn value_function<M: ValueModel + ?Sized>(model: &M, x: &[f64], subset: &[usize], refs: ArrayView2<f64>) -> Result<Vec<f64>> {
    check_inputs(model, x, &refs)?;
    let mut mask = vec![false; x.len()];
    for &i in subset {
        if i >= x.len() {
            return Err(Error::Index { index: i, len: x.len() });
        }
        mask[i] = true;
    }
    if mask.iter().all(|&b| b) {
        let xb = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        return Ok(model.eval(xb).row(0).to_vec());
    }
    Ok(coalition_values(model, x, refs, &[mask]).pop().expect("one mask"))
}

/// Attribution matrix `ψ[i][q]`, row-major `M × Q`.
pub type Attribution = Array2<f64>;

/// Exact Shapley values by enumerating all `2^M` coalitions.
pub fn shapley_exact<M: ValueModel + ?Sized>(model: &M, x: &[f64], refs: ArrayView2<f64>) -> Result<Attribution> {
    check_inputs(model, x, &refs)?;
    let m = x.len();
    if m > EXACT_MAX_FEATURES {
        return Err(Error::Estimator(format!(
            "exact enumeration supports at most {EXACT_MAX_FEATURES} features, got {m}; use permutation sampling"
        )));
    }
    let q = model.n_outputs();
    let n_sets = 1usize << m;
    let full_mask = n_sets - 1;
    let mut values = vec![Vec::new(); n_sets];
    let per_chunk = (MAX_BATCH_ROWS / refs.nrows()).max(1);
    let mut start = 0;
    while start < full_mask {
        let end = (start + per_chunk).min(full_mask);
        let masks: Vec<Vec<bool>> = (start..end).map(|s| (0..m).map(|i| s >> i & 1 == 1).collect()).collect();
        for (s, v) in (start..end).zip(coalition_values(model, x, refs, &masks)) {
            values[s] = v;
        }
        start = end;
    }
    values[full_mask] = value_function(model, x, &(0..m).collect::<Vec<_>>(), refs)?;

    // w(s) = s!(M-s-1)!/M!
    let mut weight = vec![0.0; m];
    for (s, w) in weight.iter_mut().enumerate() {
        let mut v = 1.0 / m as f64;
        // 1/(M·C(M-1, s))
        for k in 0..s {
            v *= (s - k) as f64 / (m - 1 - k) as f64;
        }
        *w = v;
    }
    let mut psi = Array2::zeros((m, q));
    for s in 0..n_sets {
        let size = (s as u64).count_ones() as usize;
        for i in 0..m {
            if s >> i & 1 == 0 {
                let with = &values[s | 1 << i];
                let without = &values[s];
                let w = weight[size];
                for c in 0..q {
                    psi[(i, c)] += w * (with[c] - without[c]);
                }
            }
        }
    }
    Ok(psi)
}

/// Permutation-sampling estimate: mean marginal contribution over random orderings.
pub fn shapley_sampled<M: ValueModel + ?Sized>(
    model: &M,
    x: &[f64],
    refs: ArrayView2<f64>,
    n_permutations: usize,
    antithetic: bool,
    seed: u64,
) -> Result<Attribution> {
    check_inputs(model, x, &refs)?;
    if n_permutations == 0 {
        return Err(Error::Config("n_permutations must be >= 1".into()));
    }
    let m = x.len();
    let q = model.n_outputs();
    let mut rng = seed::rng(seed);
    let mut orders = Vec::with_capacity(n_permutations);
    while orders.len() < n_permutations {
        let mut p: Vec<usize> = (0..m).collect();
        p.shuffle(&mut rng);
        if antithetic && orders.len() + 1 < n_permutations {
            let mut rev = p.clone();
            rev.reverse();
            orders.push(p);
            orders.push(rev);
        } else {
            orders.push(p);
        }
    }
    let base = coalition_values(model, x, refs, &[vec![false; m]]).pop().expect("one mask");
    let full = value_function(model, x, &(0..m).collect::<Vec<_>>(), refs)?;

    let mut psi = Array2::zeros((m, q));
    let per_chunk = (MAX_BATCH_ROWS / (refs.nrows() * m.max(1))).max(1);
    for chunk in orders.chunks(per_chunk) {
        // proper prefixes of length 1..M-1; the full prefix is `full`
        let mut masks = Vec::with_capacity(chunk.len() * m.saturating_sub(1));
        for p in chunk {
            let mut mask = vec![false; m];
            for &i in &p[..m - 1] {
                mask[i] = true;
                masks.push(mask.clone());
            }
        }
        let vals = coalition_values(model, x, refs, &masks);
        for (pi, p) in chunk.iter().enumerate() {
            let mut prev = &base;
            for (step, &i) in p.iter().enumerate() {
                let cur = if step + 1 == m { &full } else { &vals[pi * (m - 1) + step] };
                for c in 0..q {
                    psi[(i, c)] += cur[c] - prev[c];
                }
                prev = cur;
            }
        }
    }
    psi.mapv_inplace(|v| v / orders.len() as f64);
    Ok(psi)
}

/// Attributions for every row of `xs`, parallel over rows with per-row seeds.
pub fn explain<M: ValueModel + ?Sized>(model: &M, xs: ArrayView2<f64>, refs: ArrayView2<f64>, cfg: &ShapConfig) -> Result<Vec<Attribution>> {
    let m = xs.ncols();
    let exact = match cfg.estimator {
        Estimator::Auto => m <= EXACT_MAX_FEATURES,
        Estimator::Exact => true,
        Estimator::PermutationSampling => false,
    };
    (0..xs.nrows())
        .into_par_iter()
        .map(|d| {
            let x = xs.row(d).to_vec();
            if exact {
                shapley_exact(model, &x, refs)
            } else {
                shapley_sampled(model, &x, refs, cfg.n_permutations, cfg.antithetic, seed::derive_index(cfg.seed, d as u64))
            }
        })
        .collect()
}

/// `ψ̄_i = mean_{d,q} |ψ^d_{i,q}|` and the stable descending ranking.
pub fn aggregate(psi: &[Attribution]) -> Result<(Vec<f64>, Vec<usize>)> {
    let first = psi.first().ok_or_else(|| Error::Domain("no attributions to aggregate".into()))?;
    let (m, q) = first.dim();
    let mut bar = vec![0.0; m];
    for p in psi {
        if p.dim() != (m, q) {
            return Err(Error::Shape { expected: m, got: p.nrows() });
        }
        for (b, row) in bar.iter_mut().zip(p.rows()) {
            *b += row.iter().map(|v| v.abs()).sum::<f64>();
        }
    }
    let denom = (psi.len() * q) as f64;
    bar.iter_mut().for_each(|v| *v /= denom);
    Ok((bar.clone(), ranking(&bar)))
}

/// Indices by descending score; ties keep index order.
pub fn ranking(psi_bar: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..psi_bar.len()).collect();
    idx.sort_by(|&a, &b| psi_bar[b].total_cmp(&psi_bar[a]));
    idx
}

/// Smallest prefix of the ranking whose score sum reaches `delta` of the total.
pub fn select_features(psi_bar: &[f64], delta: f64) -> Result<Vec<usize>> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0, 1], got {delta}")));
    }
    if psi_bar.is_empty() {
        return Err(Error::Domain("empty importance vector".into()));
    }
    let order = ranking(psi_bar);
    let total: f64 = order.iter().map(|&i| psi_bar[i]).sum();
    let target = delta * total;
    let mut acc = 0.0;
    let mut out = Vec::new();
    for &i in &order {
        if !out.is_empty() && acc >= target {
            break;
        }
        acc += psi_bar[i];
        out.push(i);
    }
    Ok(out)
}

/// Fresh beam classifier trained on the `selected` feature columns.
pub fn retrain_reduced(ds: &BeamDataset, selected: &[usize], tc: &TrainConfig, init_seed: u64) -> Result<TrainReport> {
    if selected.is_empty() {
        return Err(Error::Domain("no features selected".into()));
    }
    let reduced = ds.select_columns(selected)?;
    let init = MlpModel::beam_classifier(selected.len(), ds.n_classes, init_seed)?;
    mlp::train(&init, &reduced, tc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapReport {
    pub psi_bar: Vec<f64>,
    pub ranking: Vec<usize>,
    pub selected: Vec<usize>,
    pub delta: f64,
    pub n_samples: usize,
    pub n_classes: usize,
    #[serde(skip)]
    pub psi: Vec<Attribution>,
}

impl ShapReport {
    pub fn new(psi: Vec<Attribution>, delta: f64) -> Result<Self> {
        let (psi_bar, ranking) = aggregate(&psi)?;
        let selected = select_features(&psi_bar, delta)?;
        Ok(Self {
            n_samples: psi.len(),
            n_classes: psi[0].ncols(),
            psi_bar,
            ranking,
            selected,
            delta,
            psi,
        })
    }

    /// Re-selects at a different threshold.
    pub fn with_delta(&self, delta: f64) -> Result<Self> {
        Ok(Self {
            selected: select_features(&self.psi_bar, delta)?,
            delta,
            ..self.clone()
        })
    }

    /// `feature,mean_abs_shap`, in feature order.
    pub fn bar_csv(&self) -> String {
        let mut out = String::from("feature,mean_abs_shap\n");
        for (i, v) in self.psi_bar.iter().enumerate() {
            let _ = writeln!(out, "{i},{v}");
        }
        out
    }

    /// Full tensor as `D × M × Q` little-endian f64 with a small header.
    pub fn psi_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(PSI_MAGIC);
        w.u16(1);
        let m = self.psi.first().map_or(0, |p| p.nrows());
        w.u32(self.psi.len() as u32);
        w.u32(m as u32);
        w.u32(self.n_classes as u32);
        for p in &self.psi {
            p.iter().for_each(|&v| w.f64(v));
        }
        w.into_inner()
    }

    pub fn psi_from_bytes(bytes: &[u8]) -> Result<Vec<Attribution>> {
        let mut r = ByteReader::new(bytes);
        r.expect_header(PSI_MAGIC, 1)?;
        let (d, m, q) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        if d.saturating_mul(m).saturating_mul(q).saturating_mul(8) > bytes.len() {
            return Err(Error::Format("attribution tensor larger than file".into()));
        }
        let out = (0..d)
            .map(|_| {
                let v = (0..m * q).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                Ok(Array2::from_shape_vec((m, q), v).expect("sized"))
            })
            .collect::<Result<_>>()?;
        r.finish()?;
        Ok(out)
    }
}

const PSI_MAGIC: &[u8; 4] = b"BTSH";

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;
    use proptest::prelude::*;
    use rand::Rng;

    /// `f(x) = A^T x + c` with `A` of shape `M × Q`.
    struct Linear {
        a: Array2<f64>,
        c: Array1<f64>,
    }

    impl ValueModel for Linear {
        fn n_inputs(&self) -> usize {
            self.a.nrows()
        }
        fn n_outputs(&self) -> usize {
            self.a.ncols()
        }
        fn eval(&self, x: ArrayView2<f64>) -> Array2<f64> {
            x.dot(&self.a) + &self.c
        }
    }

    /// `f(x) = x_0·x_1 + x_2` (features 0 and 1 interchangeable, 3 is a dummy).
    struct Symmetric;

    impl ValueModel for Symmetric {
        fn n_inputs(&self) -> usize {
            4
        }
        fn n_outputs(&self) -> usize {
            1
        }
        fn eval(&self, x: ArrayView2<f64>) -> Array2<f64> {
            Array2::from_shape_fn((x.nrows(), 1), |(r, _)| x[(r, 0)] * x[(r, 1)] + x[(r, 2)].powi(3))
        }
    }

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = seed::rng(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.5..1.5))
    }

    fn mlp_case(m: usize, seed: u64) -> (MlpModel, Vec<f64>, Array2<f64>) {
        let model = MlpModel::new(&[m, 16, 16, 6], seed).unwrap();
        let x = rand_matrix(1, m, seed + 1).row(0).to_vec();
        (model, x, rand_matrix(12, m, seed + 2))
    }

    #[test]
    fn value_function_extremes() {
        let (model, x, refs) = mlp_case(5, 1);
        let game = ModelOutput { model: &model, target: ShapTarget::Logits };
        let full = value_function(&game, &x, &[0, 1, 2, 3, 4], refs.view()).unwrap();
        assert_eq!(full, model.forward(&x).unwrap().logits);
        let empty = value_function(&game, &x, &[], refs.view()).unwrap();
        let base = model.logits_batch(refs.view()).unwrap().mean_axis(Axis(0)).unwrap();
        for (a, b) in empty.iter().zip(base.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_on_linear_model() {
        let lin = Linear { a: rand_matrix(4, 3, 5), c: Array1::from(vec![0.5, -1.0, 2.0]) };
        let x = [0.3, -0.9, 1.2, 0.05];
        let refs = rand_matrix(7, 4, 6);
        let base = value_function(&lin, &x, &[], refs.view()).unwrap();
        let v = value_function(&lin, &x, &[2], refs.view()).unwrap();
        let mean2 = refs.column(2).mean().unwrap();
        for q in 0..3 {
            assert!((v[q] - (base[q] + lin.a[(2, q)] * (x[2] - mean2))).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_model_has_zero_attribution() {
        let lin = Linear { a: Array2::zeros((6, 2)), c: Array1::from(vec![3.0, -4.0]) };
        let psi = shapley_exact(&lin, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], rand_matrix(5, 6, 1).view()).unwrap();
        assert!(psi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_identity() {
        let lin = Linear { a: rand_matrix(8, 4, 2), c: Array1::zeros(4) };
        let refs = rand_matrix(10, 8, 3);
        let x = rand_matrix(1, 8, 4).row(0).to_vec();
        let psi = shapley_exact(&lin, &x, refs.view()).unwrap();
        for i in 0..8 {
            let mean = refs.column(i).mean().unwrap();
            for q in 0..4 {
                assert!((psi[(i, q)] - lin.a[(i, q)] * (x[i] - mean)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_efficiency_on_mlp() {
        for seed in 0..4 {
            let (model, x, refs) = mlp_case(9, seed);
            let game = ModelOutput { model: &model, target: ShapTarget::Logits };
            let psi = shapley_exact(&game, &x, refs.view()).unwrap();
            let full = value_function(&game, &x, &(0..9).collect::<Vec<_>>(), refs.view()).unwrap();
            let empty = value_function(&game, &x, &[], refs.view()).unwrap();
            for q in 0..6 {
                let s: f64 = psi.column(q).sum();
                assert!((s - (full[q] - empty[q])).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn symmetry_and_dummy_axioms() {
        // Features 0 and 1 are interchangeable only if the references agree on them too.
        let mut refs = rand_matrix(9, 4, 7);
        let col0 = refs.column(0).to_owned();
        refs.column_mut(1).assign(&col0);
        let x = [0.8, 0.8, -0.4, 1.3];
        let psi = shapley_exact(&Symmetric, &x, refs.view()).unwrap();
        assert!((psi[(0, 0)] - psi[(1, 0)]).abs() < 1e-8);
        assert!(psi[(3, 0)].abs() < 1e-10);

        let (mut model, x, refs) = mlp_case(6, 3);
        model.weights[0].row_mut(4).fill(0.0);
        let psi = shapley_exact(&ModelOutput { model: &model, target: ShapTarget::Probabilities }, &x, refs.view()).unwrap();
        assert!(psi.row(4).iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn exact_refuses_wide_inputs() {
        let lin = Linear { a: Array2::zeros((15, 1)), c: Array1::zeros(1) };
        let err = shapley_exact(&lin, &[0.0; 15], Array2::zeros((2, 15)).view()).unwrap_err();
        assert!(matches!(err, Error::Estimator(_)));
    }

    fn rel_err(a: &Attribution, b: &Attribution) -> f64 {
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
    }

    #[test]
    fn sampling_approaches_exact() {
        for seed in 0..3 {
            let (model, x, refs) = mlp_case(10, 10 + seed);
            let game = ModelOutput { model: &model, target: ShapTarget::Logits };
            let exact = shapley_exact(&game, &x, refs.view()).unwrap();
            let est = shapley_sampled(&game, &x, refs.view(), 2048, true, seed).unwrap();
            let e = rel_err(&est, &exact);
            assert!(e < 0.05, "seed {seed}: {e}");
        }
    }

    #[test]
    fn sampling_error_shrinks_with_permutations() {
        let mut errs = [0.0; 3];
        for seed in 0..6 {
            let (model, x, refs) = mlp_case(10, 40 + seed);
            let game = ModelOutput { model: &model, target: ShapTarget::Logits };
            let exact = shapley_exact(&game, &x, refs.view()).unwrap();
            for (k, n) in [128, 512, 2048].into_iter().enumerate() {
                let est = shapley_sampled(&game, &x, refs.view(), n, false, seed).unwrap();
                let rms = (est.iter().zip(exact.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / est.len() as f64).sqrt();
                errs[k] += rms;
            }
        }
        // 4x the samples roughly halves the error
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.4..3.0).contains(&ratio), "{errs:?}");
        }
    }

    #[test]
    fn sampling_efficiency_and_reproducibility() {
        let (model, x, refs) = mlp_case(20, 4);
        let game = ModelOutput { model: &model, target: ShapTarget::Logits };
        let a = shapley_sampled(&game, &x, refs.view(), 1, false, 9).unwrap();
        assert_eq!(a, shapley_sampled(&game, &x, refs.view(), 1, false, 9).unwrap());
        let psi = shapley_sampled(&game, &x, refs.view(), 33, true, 9).unwrap();
        let full = value_function(&game, &x, &(0..20).collect::<Vec<_>>(), refs.view()).unwrap();
        let empty = value_function(&game, &x, &[], refs.view()).unwrap();
        for q in 0..6 {
            assert!((psi.column(q).sum() - (full[q] - empty[q])).abs() < 1e-9);
        }
    }

    #[test]
    fn explain_is_schedule_independent() {
        let (model, _, refs) = mlp_case(16, 5);
        let game = ModelOutput { model: &model, target: ShapTarget::Logits };
        let xs = rand_matrix(6, 16, 8);
        let cfg = ShapConfig { n_permutations: 8, ..ShapConfig::default() };
        let a = explain(&game, xs.view(), refs.view(), &cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| explain(&game, xs.view(), refs.view(), &cfg)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn aggregate_matches_triple_loop() {
        let psi: Vec<Attribution> = (0..5).map(|s| rand_matrix(4, 3, s)).collect();
        let (bar, rank) = aggregate(&psi).unwrap();
        for i in 0..4 {
            let mut s = 0.0;
            for p in &psi {
                for q in 0..3 {
                    s += p[(i, q)].abs();
                }
            }
            assert!((bar[i] - s / 15.0).abs() < 1e-15);
        }
        assert!(rank.windows(2).all(|w| bar[w[0]] >= bar[w[1]]));

        let single = vec![Array2::from_elem((1, 1), -2.5)];
        assert_eq!(aggregate(&single).unwrap().0, vec![2.5]);
        let zeros = vec![Array2::zeros((5, 2))];
        assert_eq!(aggregate(&zeros).unwrap().1, vec![0, 1, 2, 3, 4]);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_features(&[5.0, 3.0, 1.0, 1.0], 0.8).unwrap(), vec![0, 1]);
        assert_eq!(select_features(&[1.0, 3.0, 5.0, 1.0], 0.8).unwrap(), vec![2, 1]);
        assert_eq!(select_features(&[1.0, 3.0, 5.0, 1.0], 1e-9).unwrap(), vec![2]);
        assert_eq!(select_features(&[0.2, 0.0, 0.7, 0.1, 0.0], 1.0).unwrap(), vec![2, 0, 3]);
        assert_eq!(select_features(&[0.0, 0.0], 0.5).unwrap(), vec![0]);
        assert!(select_features(&[1.0], 0.0).is_err());
        assert!(select_features(&[1.0], 1.1).is_err());

        let bar: Vec<f64> = (0..32).map(|i| 1.0 / (1.0 + i as f64).powf(1.3)).collect();
        let sizes: Vec<usize> = [0.71, 0.82, 0.92, 0.96, 0.99].iter().map(|&d| select_features(&bar, d).unwrap().len()).collect();
        assert!(sizes.windows(2).all(|w| w[0] < w[1]), "{sizes:?}");
    }

    #[test]
    fn report_serialization() {
        let psi: Vec<Attribution> = (0..3).map(|s| rand_matrix(4, 2, s)).collect();
        let rep = ShapReport::new(psi.clone(), 0.9).unwrap();
        let json = serde_json::to_string(&rep).unwrap();
        let back: ShapReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.selected, rep.selected);
        assert_eq!(ShapReport::psi_from_bytes(&rep.psi_bytes()).unwrap(), psi);
        assert_eq!(rep.bar_csv().lines().count(), 5);
    }

    proptest! {
        #[test]
        fn selection_is_monotone_in_delta(
            bar in proptest::collection::vec(0.0f64..10.0, 1..40),
            d1 in 0.001f64..1.0,
            d2 in 0.001f64..1.0,
        ) {
            let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
            let a = select_features(&bar, lo).unwrap();
            let b = select_features(&bar, hi).unwrap();
            prop_assert!(a.iter().all(|i| b.contains(i)));
            let total: f64 = bar.iter().sum();
            let got: f64 = b.iter().map(|&i| bar[i]).sum();
            prop_assert!(got >= hi * total - 1e-9 * total.max(1.0));
        }
    }
}
