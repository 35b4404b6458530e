//! Beamforming codebooks.
//!
//! Beams are indexed by spatial frequency `u = 2(d/λ)·sin φ ∈ [−1, 1)`. Beam
//! `q` of a book with `N·os` beams is centered at `u_q = −1 + (2q+1)/(N·os)`,
//! so consecutive beams of the `os = 1` DFT book sit exactly between groups of
//! `os` oversampled beams. Child beams of wide beam `m` are the `⌈Q/M_w⌉`
//! consecutive oversampled beams `m·⌈Q/M_w⌉ ..`, which are centered inside the
//! wide beam's tile.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::ops::Range;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{ArrayConfig, ChannelVector};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookKind {
    Dft,
    Odft,
    WideTier1,
    Quantized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub vectors: Vec<ChannelVector>,
    pub kind: CodebookKind,
    pub oversampling: usize,
}

/// Center of beam `q` in a uniform grid of `n_beams` beams over `[−1, 1)`.
pub fn grid_center(q: usize, n_beams: usize) -> f64 {
    -1.0 + (2 * q + 1) as f64 / n_beams as f64
}

/// A beam steered at spatial frequency `u` using the first `n_active` of
/// `n_total` elements; the remaining elements are off. Unit norm.
pub fn subarray_beam(u: f64, n_active: usize, n_total: usize) -> ChannelVector {
    let amp = 1.0 / (n_active as f64).sqrt();
    let mut w = ChannelVector::zeros(n_total);
    for (i, c) in w.0.iter_mut().take(n_active).enumerate() {
        *c = Complex64::from_polar(amp, PI * i as f64 * u);
    }
    w
}

/// AoD (radians) of a path whose spatial frequency is `u`, if one exists.
pub fn angle_for_spatial_frequency(u: f64, cfg: &ArrayConfig) -> Option<f64> {
    let s = u / (2.0 * cfg.spacing_wavelengths);
    (s.abs() < 1.0).then(|| s.asin())
}

/// The `N·os` beam (oversampled) DFT codebook.
pub fn dft_codebook(cfg: &ArrayConfig, oversampling: usize) -> Result<Codebook> {
    cfg.validate()?;
    if oversampling == 0 {
        return Err(Error::Config("oversampling must be >= 1".into()));
    }
    let q = cfg.n_bs * oversampling;
    Ok(Codebook {
        vectors: (0..q)
            .map(|i| subarray_beam(grid_center(i, q), cfg.n_bs, cfg.n_bs))
            .collect(),
        kind: if oversampling == 1 {
            CodebookKind::Dft
        } else {
            CodebookKind::Odft
        },
        oversampling,
    })
}

/// Tier-1 wide beams: DFT beams of an `n_wide`-element subarray, zero-padded
/// to the full aperture. Their main lobes tile `[−1, 1)`.
pub fn wide_codebook(cfg: &ArrayConfig, n_wide: usize) -> Result<Codebook> {
    cfg.validate()?;
    if n_wide == 0 || !cfg.n_bs.is_multiple_of(n_wide) {
        return Err(Error::Config(format!(
            "n_wide = {n_wide} must divide n_bs = {}",
            cfg.n_bs
        )));
    }
    Ok(Codebook {
        vectors: (0..n_wide)
            .map(|m| subarray_beam(grid_center(m, n_wide), n_wide, cfg.n_bs))
            .collect(),
        kind: CodebookKind::WideTier1,
        oversampling: 1,
    })
}

/// Oversampled beams covered by wide beam `m` out of `n_wide`, for `q_total` narrow beams.
pub fn child_beams(m: usize, n_wide: usize, q_total: usize) -> Range<usize> {
    let per = q_total.div_ceil(n_wide);
    (m * per).min(q_total)..((m + 1) * per).min(q_total)
}

/// Phase-quantized matched filter for a single-antenna user: element `i` is
/// `exp(j·round(∠h_i/Δ)·Δ)/√N` with `Δ = 2π/2^bits`.
pub fn quantized_mrt(h: &ChannelVector, bits: u32) -> Result<ChannelVector> {
    if bits == 0 || bits > 30 {
        return Err(Error::Domain(format!("bits must be in 1..=30, got {bits}")));
    }
    if h.norm() == 0.0 {
        return Err(Error::Domain("zero channel has no matched filter".into()));
    }
    let step = 2.0 * PI / f64::from(1u32 << bits);
    let amp = 1.0 / (h.len() as f64).sqrt();
    Ok(ChannelVector(
        h.0.iter()
            .map(|c| Complex64::from_polar(amp, (c.arg() / step).round() * step))
            .collect(),
    ))
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn n_antennas(&self) -> usize {
        self.vectors.first().map_or(0, ChannelVector::len)
    }

    /// Book of the quantized matched filters of `channels`.
    pub fn quantized(channels: &[ChannelVector], bits: u32) -> Result<Codebook> {
        Ok(Codebook {
            vectors: channels
                .iter()
                .map(|h| quantized_mrt(h, bits))
                .collect::<Result<_>>()?,
            kind: CodebookKind::Quantized,
            oversampling: 1,
        })
    }

    /// The beams at `indices`, in that order, keeping the kind.
    pub fn subset(&self, indices: &[usize]) -> Result<Codebook> {
        let vectors = indices
            .iter()
            .map(|&i| {
                self.vectors.get(i).cloned().ok_or(Error::Index {
                    index: i,
                    len: self.len(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Codebook {
            vectors,
            kind: self.kind,
            oversampling: self.oversampling,
        })
    }

    /// `|h^H w_q|²` for every beam.
    pub fn gains(&self, h: &ChannelVector) -> Vec<f64> {
        self.vectors.iter().map(|w| h.gain(w)).collect()
    }

    /// CSV with one row per beam: `beam,re_0,im_0,...`.
    pub fn to_csv(&self) -> String {
        let n = self.n_antennas();
        let mut out = String::from("beam");
        for i in 0..n {
            let _ = write!(out, ",re_{i},im_{i}");
        }
        out.push('\n');
        for (q, w) in self.vectors.iter().enumerate() {
            let _ = write!(out, "{q}");
            for c in &w.0 {
                let _ = write!(out, ",{},{}", c.re, c.im);
            }
            out.push('\n');
        }
        out
    }
}
