//! Fully connected ReLU classifier with a softmax head.
//!
//! Batches are row-major `B × d` matrices; layer `l` computes
//! `Z_l = A_{l-1} W_l + b_l` with `W_l` stored `d_in × d_out`. Training is
//! mini-batch Adam on cross-entropy and is single-threaded, so a seed fully
//! determines the trained weights.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{BeamDataset, Split};
use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::seed;

/// Hidden widths of the beam classifier.
pub const HIDDEN: [usize; 3] = [64, 64, 128];

/// Lower clamp applied to probabilities inside the log of the loss.
pub const LOG_CLAMP: f64 = 1e-12;

/// `Σ_l (d_l·d_{l+1} + d_{l+1})`.
pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// `[input, 64, 64, 128, n_classes]`.
pub fn classifier_dims(input: usize, n_classes: usize) -> Vec<usize> {
    let mut dims = vec![input];
    dims.extend(HIDDEN);
    dims.push(n_classes);
    dims
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub rng_seed: u64,
}

/// Output of a single-row forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// Post-activation output of every hidden layer, then the logits.
    pub layer_reps: Vec<Vec<f64>>,
}

/// Parameter gradients, shaped like the model's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        let w: f64 = self.weights.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum();
        let b: f64 = self.biases.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum();
        (w + b).sqrt()
    }

    /// Entry `i` in [`MlpModel::param`] order.
    pub fn flat(&self, i: usize) -> f64 {
        let (l, is_bias, j) = locate(&self.weights, i);
        if is_bias {
            self.biases[l][j]
        } else {
            let cols = self.weights[l].ncols();
            self.weights[l][(j / cols, j % cols)]
        }
    }
}

fn locate(weights: &[Array2<f64>], mut i: usize) -> (usize, bool, usize) {
    for (l, w) in weights.iter().enumerate() {
        if i < w.len() {
            return (l, false, i);
        }
        i -= w.len();
        if i < w.ncols() {
            return (l, true, i);
        }
        i -= w.ncols();
    }
    panic!("parameter index out of range");
}

fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut p = z.clone();
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Indices of the `k` largest values, descending; ties go to the lower index.
pub fn topk_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn cross_entropy(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(r, &l)| -probs[(r, l)].max(LOG_CLAMP).ln())
        .sum();
    total / labels.len() as f64
}

impl MlpModel {
    /// He-uniform weights `U(±√(6/fan_in))`, zero biases.
    pub fn new(layer_dims: &[usize], seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer dims {layer_dims:?}")));
        }
        let mut rng = seed::rng(seed::derive(seed, "init"));
        let weights = layer_dims
            .windows(2)
            .map(|w| {
                let bound = (6.0 / w[0] as f64).sqrt();
                Array2::from_shape_fn((w[0], w[1]), |_| rng.random_range(-bound..bound))
            })
            .collect();
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases: layer_dims[1..].iter().map(|&d| Array1::zeros(d)).collect(),
            rng_seed: seed,
        })
    }

    pub fn beam_classifier(input: usize, n_classes: usize, seed: u64) -> Result<Self> {
        Self::new(&classifier_dims(input, n_classes), seed)
    }

    pub fn zeros(layer_dims: &[usize]) -> Self {
        Self {
            layer_dims: layer_dims.to_vec(),
            weights: layer_dims.windows(2).map(|w| Array2::zeros((w[0], w[1]))).collect(),
            biases: layer_dims[1..].iter().map(|&d| Array1::zeros(d)).collect(),
            rng_seed: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("at least two layers")
    }

    pub fn n_params(&self) -> usize {
        param_count(&self.layer_dims)
    }

    /// Flat parameter access: layer by layer, weights row-major then biases.
    pub fn param(&self, i: usize) -> f64 {
        let (l, is_bias, j) = locate(&self.weights, i);
        if is_bias {
            self.biases[l][j]
        } else {
            let cols = self.weights[l].ncols();
            self.weights[l][(j / cols, j % cols)]
        }
    }

    pub fn set_param(&mut self, i: usize, v: f64) {
        let (l, is_bias, j) = locate(&self.weights, i);
        if is_bias {
            self.biases[l][j] = v;
        } else {
            let cols = self.weights[l].ncols();
            self.weights[l][(j / cols, j % cols)] = v;
        }
    }

    fn check_batch(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    /// Pre-activations of every layer for a batch.
    fn pre_activations(&self, x: &ArrayView2<f64>) -> Vec<Array2<f64>> {
        let n = self.weights.len();
        let mut pre = Vec::with_capacity(n);
        let mut a = x.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = a.dot(w) + b;
            if l + 1 < n {
                a = z.mapv(|v| v.max(0.0));
            }
            pre.push(z);
        }
        pre
    }

    /// Logits for a batch.
    pub fn logits_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_batch(&x)?;
        Ok(self.pre_activations(&x).pop().expect("non-empty"))
    }

    pub fn probs_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(softmax_rows(&self.logits_batch(x)?))
    }

    /// Hidden post-activations and logits for a batch, one matrix per space.
    pub fn representations_batch(&self, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
        self.check_batch(&x)?;
        let mut pre = self.pre_activations(&x);
        let n = pre.len();
        for z in pre.iter_mut().take(n - 1) {
            z.mapv_inplace(|v| v.max(0.0));
        }
        Ok(pre)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        let xb = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        let reps = self.representations_batch(xb)?;
        let layer_reps: Vec<Vec<f64>> = reps.into_iter().map(|m| m.into_raw_vec_and_offset().0).collect();
        let logits = layer_reps.last().expect("non-empty").clone();
        let probs = softmax(&logits);
        Ok(Forward {
            logits,
            probs,
            layer_reps,
        })
    }

    /// Mean cross-entropy over the batch.
    pub fn loss(&self, x: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
        self.check_labels(&x, labels)?;
        Ok(cross_entropy(&self.probs_batch(x)?, labels))
    }

    fn check_labels(&self, x: &ArrayView2<f64>, labels: &[usize]) -> Result<()> {
        self.check_batch(x)?;
        if labels.is_empty() || labels.len() != x.nrows() {
            return Err(Error::Shape {
                expected: x.nrows(),
                got: labels.len(),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= self.output_dim()) {
            return Err(Error::Index {
                index: l,
                len: self.output_dim(),
            });
        }
        Ok(())
    }

    /// Loss, parameter gradients and the gradient with respect to the input batch.
    ///
    /// The log clamp is ignored in the backward pass; it only matters once a
    /// probability underflows 1e-12.
    pub fn backprop(&self, x: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Gradients, Array2<f64>)> {
        self.check_labels(&x, labels)?;
        let pre = self.pre_activations(&x);
        let n = self.weights.len();
        let probs = softmax_rows(&pre[n - 1]);
        let loss = cross_entropy(&probs, labels);

        let bsz = labels.len() as f64;
        let mut dz = probs;
        for (r, &l) in labels.iter().enumerate() {
            dz[(r, l)] -= 1.0;
        }
        dz.mapv_inplace(|v| v / bsz);

        let mut gw = vec![Array2::zeros((0, 0)); n];
        let mut gb = vec![Array1::zeros(0); n];
        for l in (0..n).rev() {
            let a_prev = if l == 0 {
                x.to_owned()
            } else {
                pre[l - 1].mapv(|v| v.max(0.0))
            };
            gw[l] = a_prev.t().dot(&dz);
            gb[l] = dz.sum_axis(Axis(0));
            let mut da = dz.dot(&self.weights[l].t());
            if l > 0 {
                ndarray::Zip::from(&mut da).and(&pre[l - 1]).for_each(|d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            dz = da;
        }
        Ok((
            loss,
            Gradients {
                weights: gw,
                biases: gb,
            },
            dz,
        ))
    }

    pub fn grad(&self, x: ArrayView2<f64>, labels: &[usize]) -> Result<Gradients> {
        Ok(self.backprop(x, labels)?.1)
    }

    /// `∂L/∂x` for one row.
    pub fn input_grad(&self, x: &[f64], label: usize) -> Result<Vec<f64>> {
        let xb = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.backprop(xb, &[label])?.2.into_raw_vec_and_offset().0)
    }

    /// `x + ε·sign(∂L/∂x)`, with `sign(0) = 0`.
    pub fn fgsm(&self, x: &[f64], label: usize, epsilon: f64) -> Result<Vec<f64>> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::Domain(format!("epsilon must be finite and >= 0, got {epsilon}")));
        }
        let g = self.input_grad(x, label)?;
        Ok(x.iter()
            .zip(&g)
            .map(|(&v, &d)| {
                let s = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                v + epsilon * s
            })
            .collect())
    }

    pub fn topk(&self, x: &[f64], k: usize) -> Result<Vec<usize>> {
        if k == 0 || k > self.output_dim() {
            return Err(Error::Domain(format!("k must lie in 1..={}, got {k}", self.output_dim())));
        }
        Ok(topk_indices(&self.forward(x)?.probs, k))
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MODEL_MAGIC);
        w.u16(MODEL_VERSION);
        w.u64(self.rng_seed);
        w.u32(self.layer_dims.len() as u32);
        self.layer_dims.iter().for_each(|&d| w.u32(d as u32));
        for (wt, b) in self.weights.iter().zip(&self.biases) {
            wt.iter().for_each(|&v| w.f64(v));
            b.iter().for_each(|&v| w.f64(v));
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_header(MODEL_MAGIC, MODEL_VERSION)?;
        let rng_seed = r.u64()?;
        let n = r.u32()? as usize;
        if !(2..=64).contains(&n) {
            return Err(Error::Format(format!("implausible layer count {n}")));
        }
        let dims: Vec<usize> = (0..n).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        if dims.contains(&0) || param_count(&dims) * 8 > bytes.len() {
            return Err(Error::Format(format!("layer dims {dims:?} do not match file size")));
        }
        let mut model = MlpModel::zeros(&dims);
        model.rng_seed = rng_seed;
        for (wt, b) in model.weights.iter_mut().zip(model.biases.iter_mut()) {
            for v in wt.iter_mut() {
                *v = r.f64()?;
            }
            for v in b.iter_mut() {
                *v = r.f64()?;
            }
        }
        r.finish()?;
        Ok(model)
    }
}

const MODEL_MAGIC: &[u8; 4] = b"BTMD";
const MODEL_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 100,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0,1) and eps > 0".into()));
        }
        Ok(())
    }
}

/// Trained model plus the mean training loss of every epoch.
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model: MlpModel,
    pub epoch_losses: Vec<f64>,
}

/// Features of `rows` as an `f64` matrix.
pub fn feature_matrix(ds: &BeamDataset, rows: &[usize]) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), ds.n_features));
    for (i, &r) in rows.iter().enumerate() {
        for (j, &v) in ds.row(r).iter().enumerate() {
            m[(i, j)] = f64::from(v);
        }
    }
    m
}

pub fn label_vec(ds: &BeamDataset, rows: &[usize]) -> Vec<usize> {
    rows.iter().map(|&r| usize::from(ds.labels[r])).collect()
}

/// Adam on the rows of `x`, starting from `init`'s weights.
pub fn train_arrays(init: &MlpModel, x: ArrayView2<f64>, labels: &[usize], tc: &TrainConfig) -> Result<TrainReport> {
    tc.validate()?;
    init.check_labels(&x, labels)?;
    let mut model = init.clone();
    let mut m_w: Vec<Array2<f64>> = model.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect();
    let mut v_w = m_w.clone();
    let mut m_b: Vec<Array1<f64>> = model.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect();
    let mut v_b = m_b.clone();
    let mut rng = seed::rng(seed::derive(tc.seed, "shuffle"));
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut step = 0i32;
    let mut epoch_losses = Vec::with_capacity(tc.epochs);

    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let lb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, g, _) = model.backprop(xb.view(), &lb)?;
            if !loss.is_finite() {
                return Err(Error::Training { epoch, loss });
            }
            total += loss * chunk.len() as f64;
            step += 1;
            let c1 = 1.0 - tc.beta1.powi(step);
            let c2 = 1.0 - tc.beta2.powi(step);
            let adam = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
                *m = tc.beta1 * *m + (1.0 - tc.beta1) * g;
                *v = tc.beta2 * *v + (1.0 - tc.beta2) * g * g;
                *p -= tc.lr * (*m / c1) / ((*v / c2).sqrt() + tc.eps);
            };
            for l in 0..model.weights.len() {
                ndarray::Zip::from(&mut model.weights[l])
                    .and(&mut m_w[l])
                    .and(&mut v_w[l])
                    .and(&g.weights[l])
                    .for_each(|p, m, v, &g| adam(p, m, v, g));
                ndarray::Zip::from(&mut model.biases[l])
                    .and(&mut m_b[l])
                    .and(&mut v_b[l])
                    .and(&g.biases[l])
                    .for_each(|p, m, v, &g| adam(p, m, v, g));
            }
        }
        let mean = total / labels.len() as f64;
        if !mean.is_finite() || !model.is_finite() {
            return Err(Error::Training { epoch, loss: mean });
        }
        epoch_losses.push(mean);
    }
    Ok(TrainReport { model, epoch_losses })
}

/// Trains on the train split of `ds`, starting from `init`.
pub fn train(init: &MlpModel, ds: &BeamDataset, tc: &TrainConfig) -> Result<TrainReport> {
    if init.input_dim() != ds.n_features || init.output_dim() != ds.n_classes {
        return Err(Error::Shape {
            expected: init.input_dim(),
            got: ds.n_features,
        });
    }
    let rows = ds.indices(Split::Train);
    if rows.is_empty() {
        return Err(Error::Build("dataset has no train rows".into()));
    }
    train_arrays(init, feature_matrix(ds, &rows).view(), &label_vec(ds, &rows), tc)
}

/// Continues training a pretrained model on an augmented dataset.
pub fn finetune(pretrained: &MlpModel, augmented: &BeamDataset, tc: &TrainConfig) -> Result<TrainReport> {
    train(pretrained, augmented, tc)
}
