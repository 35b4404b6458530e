//! Cross-polytope LSH for cosine similarity with exact re-ranking.
//!
//! Points are unit-normalized. Each table concatenates several hash
//! functions; one hash projects onto `d′` Gaussian directions and reports
//! the signed coordinate of largest magnitude (one of `2d′` cross-polytope
//! vertices). Multiprobe also visits the buckets obtained by swapping a
//! single hash for its runner-up vertex.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Bucket holding all-zero vectors.
const ZERO_BUCKET: u64 = u64::MAX;

/// Widest single hash, in bits (`2d′ ≤ 256`).
const MAX_HASH_BITS: u32 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LshParams {
    pub n_tables: usize,
    pub n_hash_bits: u32,
    /// Extra buckets probed per table beyond the home bucket.
    pub n_probes: usize,
}

impl Default for LshParams {
    fn default() -> Self {
        Self {
            n_tables: 16,
            n_hash_bits: 12,
            n_probes: 4,
        }
    }
}

impl LshParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_tables == 0 || !(1..=60).contains(&self.n_hash_bits) {
            return Err(Error::Config("LSH needs n_tables >= 1 and 1..=60 hash bits".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Hash {
    /// `d′ × dim` projection.
    proj: Array2<f64>,
    bits: u32,
}

#[derive(Clone, Debug)]
struct Table {
    hashes: Vec<Hash>,
    buckets: HashMap<u64, Vec<u32>>,
}

/// One ranked vertex choice of a hash: `(code, |y|)`.
fn vertex_codes(h: &Hash, x: ArrayView1<f64>) -> [(u64, f64); 2] {
    let y = h.proj.dot(&x);
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut second = (0usize, f64::NEG_INFINITY);
    for (k, &v) in y.iter().enumerate() {
        let a = v.abs();
        if a > best.1 {
            second = best;
            best = (k, a);
        } else if a > second.1 {
            second = (k, a);
        }
    }
    let code = |k: usize| 2 * k as u64 + u64::from(y[k] < 0.0);
    if y.len() == 1 {
        // the only alternative vertex is the opposite sign
        return [(code(0), best.1), (code(0) ^ 1, best.1)];
    }
    [(code(best.0), best.1), (code(second.0), second.1)]
}

impl Table {
    fn codes(&self, x: ArrayView1<f64>) -> Vec<[(u64, f64); 2]> {
        self.hashes.iter().map(|h| vertex_codes(h, x)).collect()
    }

    fn key(&self, codes: &[u64]) -> u64 {
        let mut key = 0u64;
        for (h, &c) in self.hashes.iter().zip(codes) {
            key = (key << h.bits) | c;
        }
        key
    }
}

/// Cosine nearest-neighbor index over a fixed point set.
#[derive(Clone, Debug)]
pub struct CosineLsh {
    unit: Array2<f64>,
    zero: Vec<bool>,
    tables: Vec<Table>,
    params: LshParams,
}

fn normalize(x: ArrayView1<f64>) -> (Array1<f64>, bool) {
    let n = x.dot(&x).sqrt();
    if n > 0.0 && n.is_finite() {
        (x.mapv(|v| v / n), false)
    } else {
        (Array1::zeros(x.len()), true)
    }
}

impl CosineLsh {
    pub fn build(points: ArrayView2<f64>, params: &LshParams, seed: u64) -> Result<Self> {
        params.validate()?;
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(Error::Build("cannot index an empty point set".into()));
        }
        if points.nrows() > u32::MAX as usize {
            return Err(Error::Build("too many points".into()));
        }
        let dim = points.ncols();
        let mut unit = Array2::zeros(points.raw_dim());
        let mut zero = Vec::with_capacity(points.nrows());
        for (r, row) in points.rows().into_iter().enumerate() {
            let (u, z) = normalize(row);
            unit.row_mut(r).assign(&u);
            zero.push(z);
        }
        // widest hash allowed by the dimension: 2d′ ≤ 2·dim
        let dim_bits = (usize::BITS - (2 * dim).leading_zeros() - 1).clamp(1, MAX_HASH_BITS);
        let mut rng = seed::rng(seed);
        let mut tables = Vec::with_capacity(params.n_tables);
        for _ in 0..params.n_tables {
            let mut hashes = Vec::new();
            let mut left = params.n_hash_bits;
            while left > 0 {
                let bits = left.min(dim_bits);
                let d_prime = 1usize << (bits - 1);
                let proj = Array2::from_shape_fn((d_prime, dim), |_| StandardNormal.sample(&mut rng));
                hashes.push(Hash { proj, bits });
                left -= bits;
            }
            let mut table = Table {
                hashes,
                buckets: HashMap::new(),
            };
            for (r, &is_zero) in zero.iter().enumerate() {
                let key = if is_zero {
                    ZERO_BUCKET
                } else {
                    let codes: Vec<u64> = table.codes(unit.row(r)).iter().map(|c| c[0].0).collect();
                    table.key(&codes)
                };
                table.buckets.entry(key).or_default().push(r as u32);
            }
            tables.push(table);
        }
        Ok(Self {
            unit,
            zero,
            tables,
            params: params.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.unit.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.unit.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.unit.ncols()
    }

    fn similarity(&self, q: &Array1<f64>, q_zero: bool, r: usize) -> f64 {
        match (q_zero, self.zero[r]) {
            (true, true) => 1.0,
            (true, false) | (false, true) => 0.0,
            (false, false) => q.dot(&self.unit.row(r)),
        }
    }

    /// Sorted, deduplicated union of probed buckets.
    pub fn candidates(&self, q: ArrayView1<f64>) -> Vec<usize> {
        let (u, is_zero) = normalize(q);
        let mut out: Vec<u32> = Vec::new();
        for table in &self.tables {
            if is_zero {
                if let Some(b) = table.buckets.get(&ZERO_BUCKET) {
                    out.extend_from_slice(b);
                }
                continue;
            }
            let codes = table.codes(u.view());
            let home: Vec<u64> = codes.iter().map(|c| c[0].0).collect();
            if let Some(b) = table.buckets.get(&table.key(&home)) {
                out.extend_from_slice(b);
            }
            // probe the hashes whose runner-up vertex is closest to the winner
            let mut alts: Vec<(f64, usize)> = codes.iter().enumerate().map(|(i, c)| (c[0].1 - c[1].1, i)).collect();
            alts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(_, i) in alts.iter().take(self.params.n_probes) {
                let mut probe = home.clone();
                probe[i] = codes[i][1].0;
                if let Some(b) = table.buckets.get(&table.key(&probe)) {
                    out.extend_from_slice(b);
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out.into_iter().map(|r| r as usize).collect()
    }

    fn rank(&self, q: ArrayView1<f64>, pool: impl Iterator<Item = usize>, k: usize) -> Vec<usize> {
        let (u, z) = normalize(q);
        let mut scored: Vec<(f64, usize)> = pool.map(|r| (self.similarity(&u, z, r), r)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.truncate(k);
        scored.into_iter().map(|s| s.1).collect()
    }

    /// `k` most cosine-similar points, ties to the lower index.
    pub fn exact(&self, q: ArrayView1<f64>, k: usize) -> Vec<usize> {
        self.rank(q, 0..self.len(), k)
    }

    /// LSH candidates re-ranked exactly; falls back to brute force when too few.
    pub fn query(&self, q: ArrayView1<f64>, k: usize) -> Vec<usize> {
        let cands = self.candidates(q);
        if cands.len() < k.min(self.len()) {
            return self.exact(q, k);
        }
        self.rank(q, cands.into_iter(), k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Clustered, non-negative points like ReLU activations; `centers_seed` fixes the clusters.
    fn cloud_around(n: usize, dim: usize, centers_seed: u64, seed: u64) -> Array2<f64> {
        let mut rng = seed::rng(centers_seed);
        let centers = Array2::from_shape_fn((20, dim), |_| rng.random_range(0.0..1.0f64).powi(3));
        let mut rng = seed::rng(seed);
        Array2::from_shape_fn((n, dim), |(r, c)| (centers[(r % 20, c)] + rng.random_range(-0.05..0.05)).max(0.0))
    }

    fn cloud(n: usize, dim: usize, seed: u64) -> Array2<f64> {
        cloud_around(n, dim, seed, seed + 1)
    }

    #[test]
    fn every_point_finds_itself() {
        let pts = cloud(600, 64, 1);
        let idx = CosineLsh::build(pts.view(), &LshParams::default(), 3).unwrap();
        for r in 0..600 {
            assert_eq!(idx.query(pts.row(r), 10)[0], r);
        }
    }

    #[test]
    fn recall_against_brute_force() {
        let pts = cloud_around(5000, 64, 2, 3);
        let idx = CosineLsh::build(pts.view(), &LshParams::default(), 4).unwrap();
        // fresh draws from the same distribution
        let queries = cloud_around(500, 64, 2, 4);
        let mut hit = 0;
        for q in queries.rows() {
            let exact = idx.exact(q, 10);
            let got = idx.query(q, 10);
            hit += got.iter().filter(|i| exact.contains(i)).count();
        }
        let recall = hit as f64 / 5000.0;
        assert!(recall >= 0.9, "recall {recall}");
    }

    #[test]
    fn zero_vectors_share_a_bucket() {
        let mut pts = cloud(50, 8, 5);
        pts.row_mut(7).fill(0.0);
        pts.row_mut(30).fill(0.0);
        let idx = CosineLsh::build(pts.view(), &LshParams::default(), 1).unwrap();
        let zero = Array1::zeros(8);
        assert_eq!(idx.candidates(zero.view()), vec![7, 30]);
        assert_eq!(idx.query(zero.view(), 2), vec![7, 30]);
    }

    #[test]
    fn tiny_dimensions_and_empty_input() {
        let pts = Array2::from_shape_fn((10, 1), |(r, _)| r as f64 - 4.5);
        let idx = CosineLsh::build(pts.view(), &LshParams::default(), 1).unwrap();
        let n = idx.query(pts.row(9), 3);
        assert_eq!(n.len(), 3);
        assert!(n.iter().all(|&i| pts[(i, 0)] > 0.0));
        assert!(CosineLsh::build(Array2::zeros((0, 4)).view(), &LshParams::default(), 1).is_err());
    }
}
