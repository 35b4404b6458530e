//! Site-specific narrowband multipath channels.
//!
//! The base station sits at the origin with a uniform linear array along the
//! x axis and boresight along +y. Every user sees a handful of propagation
//! paths: an optional line-of-sight path plus single-bounce paths through
//! virtual scatterers ("buildings") shared by the whole site. Because the
//! scatterers are shared, angles of departure cluster around the same
//! bearings across users, which is the site-specific structure a beam
//! classifier can learn.
//!
//! A digital twin of a scene is produced by [`perturb_to_twin`], which moves
//! each scatterer by a fixed distance, drops NLOS paths at random and
//! jitters path gains.

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::seed;

/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Largest |AoD| emitted by the generators; keeps angles strictly inside (−π/2, π/2).
const AOD_LIMIT: f64 = FRAC_PI_2 - 1e-3;

/// Complex vector of length `n_bs`: a channel `h` or a beamforming vector `w`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelVector(pub Vec<Complex64>);

impl ChannelVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![Complex64::new(0.0, 0.0); n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.0
    }

    /// Euclidean norm.
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Largest element magnitude.
    pub fn max_abs(&self) -> f64 {
        self.0.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// Hermitian inner product `self^H · other`.
    pub fn inner(&self, other: &ChannelVector) -> Complex64 {
        debug_assert_eq!(self.len(), other.len());
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    /// Beamforming gain `|self^H w|²`.
    pub fn gain(&self, w: &ChannelVector) -> f64 {
        self.inner(w).norm_sqr()
    }

    pub fn scaled(&self, s: f64) -> ChannelVector {
        ChannelVector(self.0.iter().map(|c| c * s).collect())
    }
}

/// Base-station array geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArrayConfig {
    pub n_bs: usize,
    pub carrier_hz: f64,
    pub spacing_wavelengths: f64,
}

impl Default for ArrayConfig {
    fn default() -> Self {
        Self {
            n_bs: 32,
            carrier_hz: 28e9,
            spacing_wavelengths: 0.5,
        }
    }
}

impl ArrayConfig {
    pub fn with_antennas(n_bs: usize) -> Self {
        Self {
            n_bs,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bs < 2 {
            return Err(Error::Config(format!("n_bs must be >= 2, got {}", self.n_bs)));
        }
        if !(self.spacing_wavelengths > 0.0 && self.spacing_wavelengths.is_finite()) {
            return Err(Error::Config(format!(
                "spacing_wavelengths must be positive, got {}",
                self.spacing_wavelengths
            )));
        }
        if !(self.carrier_hz > 0.0 && self.carrier_hz.is_finite()) {
            return Err(Error::Config(format!("carrier_hz must be positive, got {}", self.carrier_hz)));
        }
        Ok(())
    }

    pub fn wavelength_m(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }
}

/// Array response toward `phi` (radians from boresight), unit norm.
pub fn steering_vector(phi: f64, cfg: &ArrayConfig) -> Result<ChannelVector> {
    if phi.is_nan() || phi.abs() >= FRAC_PI_2 {
        return Err(Error::Domain(format!("angle {phi} rad outside (-pi/2, pi/2)")));
    }
    let amp = 1.0 / (cfg.n_bs as f64).sqrt();
    let k = 2.0 * PI * cfg.spacing_wavelengths * phi.sin();
    Ok(ChannelVector(
        (0..cfg.n_bs)
            .map(|i| Complex64::from_polar(amp, k * i as f64))
            .collect(),
    ))
}

/// One propagation path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathComponent {
    pub gain: Complex64,
    pub aod_rad: f64,
    /// Scatterer the path bounces off; `None` for the line-of-sight path.
    pub scatterer: Option<usize>,
}

impl PathComponent {
    pub fn is_los(&self) -> bool {
        self.scatterer.is_none()
    }
}

/// Disturbances applied to a scene to obtain its digital twin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwinPerturbation {
    pub scatterer_shift_m: f64,
    pub path_drop_prob: f64,
    pub gain_jitter_db: f64,
}

impl Default for TwinPerturbation {
    fn default() -> Self {
        Self {
            scatterer_shift_m: 2.0,
            path_drop_prob: 0.2,
            gain_jitter_db: 2.0,
        }
    }
}

impl TwinPerturbation {
    pub fn none() -> Self {
        Self {
            scatterer_shift_m: 0.0,
            path_drop_prob: 0.0,
            gain_jitter_db: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.scatterer_shift_m.is_finite()
            && self.path_drop_prob.is_finite()
            && self.gain_jitter_db.is_finite();
        if !finite
            || self.scatterer_shift_m < 0.0
            || self.gain_jitter_db < 0.0
            || !(0.0..=1.0).contains(&self.path_drop_prob)
        {
            return Err(Error::Config(format!("invalid twin perturbation {self:?}")));
        }
        Ok(())
    }
}

/// Parameters of the parametric scene generator.
///
/// Path magnitudes are log-normal: log-distance path loss over the path
/// length, an excess loss for the bounce, and Gaussian shadowing in dB.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    pub n_ue: usize,
    pub los_fraction: f64,
    /// Maximum number of paths per user.
    pub l_max: usize,
    pub n_scatterers: usize,
    /// User area `[x_min, x_max, y_min, y_max]` in meters.
    pub ue_area: [f64; 4],
    /// Scatterer area `[x_min, x_max, y_min, y_max]` in meters.
    pub scatterer_area: [f64; 4],
    pub los_exponent: f64,
    pub nlos_exponent: f64,
    pub nlos_excess_db: f64,
    pub shadowing_db: f64,
    /// LOS advantage over the strongest NLOS path, `[low, high]` dB.
    pub los_advantage_db: [f64; 2],
    /// Laplacian scale (radians) of AoDs around a scatterer bearing.
    pub cluster_spread_rad: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            n_ue: 622,
            los_fraction: 0.3,
            l_max: 5,
            n_scatterers: 24,
            ue_area: [-90.0, 50.0, 30.0, 200.0],
            scatterer_area: [-160.0, 120.0, 20.0, 260.0],
            los_exponent: 2.0,
            nlos_exponent: 2.4,
            nlos_excess_db: 10.0,
            shadowing_db: 4.0,
            los_advantage_db: [10.0, 20.0],
            cluster_spread_rad: 0.02,
        }
    }
}

impl SceneParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_ue == 0 {
            return bad("n_ue must be >= 1".into());
        }
        if self.l_max == 0 {
            return bad("l_max must be >= 1".into());
        }
        if self.n_scatterers == 0 && self.los_fraction < 1.0 {
            return bad("NLOS users need at least one scatterer".into());
        }
        if !(0.0..=1.0).contains(&self.los_fraction) {
            return bad(format!("los_fraction must lie in [0,1], got {}", self.los_fraction));
        }
        for area in [self.ue_area, self.scatterer_area] {
            if !(area[0] < area[1] && area[2] < area[3] && area[2] > 0.0) {
                return bad(format!("area {area:?} must have x_min<x_max and 0<y_min<y_max"));
            }
        }
        if self.los_advantage_db[0] > self.los_advantage_db[1] {
            return bad("los_advantage_db low > high".into());
        }
        Ok(())
    }
}

/// Ground truth for channel synthesis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub ue_positions: Vec<[f64; 2]>,
    pub paths_per_ue: Vec<Vec<PathComponent>>,
    pub scatterers: Vec<[f64; 2]>,
    pub rng_seed: u64,
    pub los_fraction: f64,
}

fn bearing(p: [f64; 2]) -> f64 {
    p[0].atan2(p[1])
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Path amplitude in dB for a path of `length_m` meters.
///
/// Includes the `N_BS` array gain: steering vectors are unit-norm, so a
/// per-element amplitude `a` appears as `α = √N_BS·a`.
fn path_amplitude_db(cfg: &ArrayConfig, length_m: f64, exponent: f64) -> f64 {
    let fspl_1m = 20.0 * (4.0 * PI / cfg.wavelength_m()).log10();
    10.0 * (cfg.n_bs as f64).log10() - (fspl_1m + 10.0 * exponent * length_m.max(1.0).log10())
}

fn db_to_amp(db: f64) -> f64 {
    10f64.powf(db / 20.0)
}

fn uniform_in(rng: &mut impl Rng, area: [f64; 4]) -> [f64; 2] {
    [rng.random_range(area[0]..area[1]), rng.random_range(area[2]..area[3])]
}

fn laplace(rng: &mut impl Rng, scale: f64) -> f64 {
    let u: f64 = rng.random_range(-0.5..0.5);
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
}

/// Draws a scene. Identical `(params, cfg, seed)` give a bit-identical scene.
pub fn generate_scene(params: &SceneParams, cfg: &ArrayConfig, seed: u64) -> Result<Scene> {
    params.validate()?;
    cfg.validate()?;
    let mut rng = seed::rng(seed);
    let scatterers: Vec<[f64; 2]> = (0..params.n_scatterers)
        .map(|_| uniform_in(&mut rng, params.scatterer_area))
        .collect();
    let shadow = Normal::new(0.0, params.shadowing_db.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let phase = Uniform::new(0.0, 2.0 * PI).unwrap();

    let mut ue_positions = Vec::with_capacity(params.n_ue);
    let mut paths_per_ue = Vec::with_capacity(params.n_ue);
    for _ in 0..params.n_ue {
        let ue = uniform_in(&mut rng, params.ue_area);
        let is_los = rng.random::<f64>() < params.los_fraction;
        let n_paths = rng.random_range(1..=params.l_max);
        let n_nlos = (if is_los { n_paths - 1 } else { n_paths }).min(scatterers.len());

        // Scatterers closer to the combined BS-UE route are more likely to be hit.
        let mut weights: Vec<f64> = scatterers
            .iter()
            .map(|&s| 1.0 / (dist([0.0, 0.0], s) + dist(s, ue)).powi(2))
            .collect();
        let mut paths = Vec::with_capacity(n_paths);
        for _ in 0..n_nlos {
            let total: f64 = weights.iter().sum();
            let mut pick = rng.random::<f64>() * total;
            let mut chosen = weights.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if *w > 0.0 && pick < *w {
                    chosen = i;
                    break;
                }
                pick -= w;
            }
            // Guard against the fallthrough landing on an already used scatterer.
            if weights[chosen] == 0.0 {
                chosen = weights.iter().position(|&w| w > 0.0).unwrap();
            }
            weights[chosen] = 0.0;
            let s = scatterers[chosen];
            let length = dist([0.0, 0.0], s) + dist(s, ue);
            let mag_db = path_amplitude_db(cfg, length, params.nlos_exponent)
                - params.nlos_excess_db
                + shadow.sample(&mut rng);
            let aod = (bearing(s) + laplace(&mut rng, params.cluster_spread_rad)).clamp(-AOD_LIMIT, AOD_LIMIT);
            paths.push(PathComponent {
                gain: Complex64::from_polar(db_to_amp(mag_db), phase.sample(&mut rng)),
                aod_rad: aod,
                scatterer: Some(chosen),
            });
        }
        if is_los || paths.is_empty() {
            let strongest = paths.iter().map(|p| p.gain.norm()).fold(0.0, f64::max);
            let advantage = rng.random_range(params.los_advantage_db[0]..=params.los_advantage_db[1]);
            let mag = if strongest > 0.0 {
                strongest * db_to_amp(advantage)
            } else {
                db_to_amp(path_amplitude_db(cfg, dist([0.0, 0.0], ue), params.los_exponent))
            };
            paths.insert(
                0,
                PathComponent {
                    gain: Complex64::from_polar(mag, phase.sample(&mut rng)),
                    aod_rad: bearing(ue).clamp(-AOD_LIMIT, AOD_LIMIT),
                    scatterer: None,
                },
            );
        }
        ue_positions.push(ue);
        paths_per_ue.push(paths);
    }
    Ok(Scene {
        ue_positions,
        paths_per_ue,
        scatterers,
        rng_seed: seed,
        los_fraction: params.los_fraction,
    })
}

/// Builds the digital-twin copy of `scene`.
///
/// Every scatterer moves by exactly `scatterer_shift_m` in a random
/// direction and all paths through it rotate by the change of its bearing.
/// NLOS paths are dropped independently; a user never loses its last path.
pub fn perturb_to_twin(scene: &Scene, pert: &TwinPerturbation, seed: u64) -> Result<Scene> {
    pert.validate()?;
    let mut rng = seed::rng(seed);
    let shifted: Vec<[f64; 2]> = scene
        .scatterers
        .iter()
        .map(|&s| {
            let theta: f64 = rng.random_range(0.0..2.0 * PI);
            [
                s[0] + pert.scatterer_shift_m * theta.cos(),
                s[1] + pert.scatterer_shift_m * theta.sin(),
            ]
        })
        .collect();
    let rotation: Vec<f64> = scene
        .scatterers
        .iter()
        .zip(&shifted)
        .map(|(&a, &b)| bearing(b) - bearing(a))
        .collect();

    let mut paths_per_ue = Vec::with_capacity(scene.paths_per_ue.len());
    for paths in &scene.paths_per_ue {
        let mut kept = Vec::with_capacity(paths.len());
        let mut strongest: Option<PathComponent> = None;
        for p in paths {
            let drop_draw: f64 = rng.random();
            let jitter_draw: f64 = rng.random_range(-1.0..=1.0);
            let mut q = p.clone();
            q.gain *= db_to_amp(jitter_draw * pert.gain_jitter_db);
            if let Some(s) = p.scatterer {
                q.aod_rad = (p.aod_rad + rotation[s]).clamp(-AOD_LIMIT, AOD_LIMIT);
            }
            if strongest.as_ref().is_none_or(|b| q.gain.norm() > b.gain.norm()) {
                strongest = Some(q.clone());
            }
            if p.is_los() || drop_draw >= pert.path_drop_prob {
                kept.push(q);
            }
        }
        if kept.is_empty() {
            kept.extend(strongest);
        }
        paths_per_ue.push(kept);
    }
    Ok(Scene {
        ue_positions: scene.ue_positions.clone(),
        paths_per_ue,
        scatterers: shifted,
        rng_seed: scene.rng_seed,
        los_fraction: scene.los_fraction,
    })
}

/// `h = Σ_l α_l · b(φ_l)` for user `ue`, in physical (unnormalized) units.
pub fn synthesize_channel(scene: &Scene, ue: usize, cfg: &ArrayConfig) -> Result<ChannelVector> {
    let paths = scene.paths_per_ue.get(ue).ok_or(Error::Index {
        index: ue,
        len: scene.paths_per_ue.len(),
    })?;
    let mut h = ChannelVector::zeros(cfg.n_bs);
    for p in paths {
        let b = steering_vector(p.aod_rad, cfg)?;
        for (hi, bi) in h.0.iter_mut().zip(&b.0) {
            *hi += p.gain * bi;
        }
    }
    Ok(h)
}

/// Channels of every user in the scene.
pub fn synthesize_all(scene: &Scene, cfg: &ArrayConfig) -> Result<Vec<ChannelVector>> {
    (0..scene.paths_per_ue.len())
        .map(|u| synthesize_channel(scene, u, cfg))
        .collect()
}

/// Divides every channel by the largest element magnitude across the set,
/// returning that scale. A set of all-zero channels is left untouched.
pub fn normalize_channels(channels: &mut [ChannelVector]) -> f64 {
    let scale = channels.iter().map(ChannelVector::max_abs).fold(0.0, f64::max);
    if scale > 0.0 {
        for h in channels.iter_mut() {
            for c in h.0.iter_mut() {
                *c /= scale;
            }
        }
    }
    scale
}

const SCENE_MAGIC: &[u8; 4] = b"BTSC";
const SCENE_VERSION: u16 = 1;

impl Scene {
    pub fn n_ue(&self) -> usize {
        self.ue_positions.len()
    }

    /// Smallest BS-to-scatterer distance, in meters.
    pub fn min_scatterer_distance(&self) -> f64 {
        self.scatterers
            .iter()
            .map(|&s| dist([0.0, 0.0], s))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(SCENE_MAGIC);
        w.u16(SCENE_VERSION);
        w.u64(self.rng_seed);
        w.f64(self.los_fraction);
        w.u32(self.scatterers.len() as u32);
        for s in &self.scatterers {
            w.f64(s[0]);
            w.f64(s[1]);
        }
        w.u32(self.ue_positions.len() as u32);
        for (pos, paths) in self.ue_positions.iter().zip(&self.paths_per_ue) {
            w.f64(pos[0]);
            w.f64(pos[1]);
            w.u32(paths.len() as u32);
            for p in paths {
                w.f64(p.gain.re);
                w.f64(p.gain.im);
                w.f64(p.aod_rad);
                w.i32(p.scatterer.map_or(-1, |s| s as i32));
            }
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_header(SCENE_MAGIC, SCENE_VERSION)?;
        let rng_seed = r.u64()?;
        let los_fraction = r.f64()?;
        let n_scat = r.u32()? as usize;
        let mut scatterers = Vec::with_capacity(n_scat.min(1 << 20));
        for _ in 0..n_scat {
            scatterers.push([r.f64()?, r.f64()?]);
        }
        let n_ue = r.u32()? as usize;
        let mut ue_positions = Vec::with_capacity(n_ue.min(1 << 20));
        let mut paths_per_ue = Vec::with_capacity(n_ue.min(1 << 20));
        for _ in 0..n_ue {
            ue_positions.push([r.f64()?, r.f64()?]);
            let n_paths = r.u32()? as usize;
            let mut paths = Vec::with_capacity(n_paths.min(1 << 16));
            for _ in 0..n_paths {
                let re = r.f64()?;
                let im = r.f64()?;
                let aod_rad = r.f64()?;
                let s = r.i32()?;
                let scatterer = match s {
                    -1 => None,
                    s if s >= 0 && (s as usize) < n_scat => Some(s as usize),
                    s => return Err(Error::Format(format!("scatterer index {s} out of range"))),
                };
                paths.push(PathComponent {
                    gain: Complex64::new(re, im),
                    aod_rad,
                    scatterer,
                });
            }
            paths_per_ue.push(paths);
        }
        r.finish()?;
        Ok(Scene {
            ue_positions,
            paths_per_ue,
            scatterers,
            rng_seed,
            los_fraction,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn small_params(n_ue: usize) -> SceneParams {
        SceneParams {
            n_ue,
            ..SceneParams::default()
        }
    }

    #[test]
    fn steering_broadside_is_flat() {
        let b = steering_vector(0.0, &ArrayConfig::with_antennas(4)).unwrap();
        for c in &b.0 {
            assert_abs_diff_eq!(c.re, 0.5, epsilon = 1e-15);
            assert_abs_diff_eq!(c.im, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn steering_thirty_degrees_two_elements() {
        let b = steering_vector(PI / 6.0, &ArrayConfig::with_antennas(2)).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert_abs_diff_eq!(b.0[0].re, s, epsilon = 1e-15);
        assert_abs_diff_eq!(b.0[0].im, 0.0, epsilon = 1e-15);
        // exp(j*pi/2) = j
        assert_abs_diff_eq!(b.0[1].re, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(b.0[1].im, s, epsilon = 1e-15);
    }

    #[test]
    fn steering_rejects_endfire() {
        let cfg = ArrayConfig::default();
        assert!(matches!(steering_vector(FRAC_PI_2, &cfg), Err(Error::Domain(_))));
        assert!(steering_vector(-2.0, &cfg).is_err());
        assert!(steering_vector(f64::NAN, &cfg).is_err());
    }

    #[test]
    fn steering_unit_norm_random_angles() {
        let cfg = ArrayConfig::default();
        let mut rng = seed::rng(3);
        for _ in 0..1000 {
            let phi = rng.random_range(-1.5..1.5);
            assert!((steering_vector(phi, &cfg).unwrap().norm() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn scene_is_deterministic() {
        let cfg = ArrayConfig::default();
        let a = generate_scene(&small_params(1), &cfg, 7).unwrap();
        let b = generate_scene(&small_params(1), &cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn scene_with_622_users() {
        let scene = generate_scene(&small_params(622), &ArrayConfig::default(), 1).unwrap();
        assert_eq!(scene.paths_per_ue.len(), 622);
        for paths in &scene.paths_per_ue {
            assert!(!paths.is_empty() && paths.len() <= 5);
            for p in paths {
                assert!(p.aod_rad.abs() < FRAC_PI_2);
                assert!(p.gain.re.is_finite() && p.gain.im.is_finite());
            }
        }
    }

    #[test]
    fn all_los_users_have_dominant_path() {
        let params = SceneParams {
            los_fraction: 1.0,
            ..small_params(300)
        };
        let scene = generate_scene(&params, &ArrayConfig::default(), 11).unwrap();
        for paths in &scene.paths_per_ue {
            let (los, rest): (Vec<_>, Vec<_>) = paths.iter().partition(|p| p.is_los());
            assert_eq!(los.len(), 1);
            let g = los[0].gain.norm();
            for p in rest {
                // at least the minimum 10 dB advantage
                assert!(g >= p.gain.norm() * db_to_amp(10.0) * (1.0 - 1e-12));
            }
        }
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let scene = generate_scene(&small_params(50), &ArrayConfig::default(), 5).unwrap();
        let twin = perturb_to_twin(&scene, &TwinPerturbation::none(), 99).unwrap();
        assert_eq!(scene, twin);
    }

    #[test]
    fn shifted_aods_are_bounded_by_geometry() {
        let scene = generate_scene(&small_params(200), &ArrayConfig::default(), 8).unwrap();
        let pert = TwinPerturbation {
            scatterer_shift_m: 2.0,
            path_drop_prob: 0.0,
            gain_jitter_db: 0.0,
        };
        let twin = perturb_to_twin(&scene, &pert, 4).unwrap();
        // A point at distance r moved by s changes its bearing by at most asin(s/r).
        let bound = (2.0 / scene.min_scatterer_distance()).asin();
        let mut moved = 0;
        for (a, b) in scene.paths_per_ue.iter().zip(&twin.paths_per_ue) {
            assert_eq!(a.len(), b.len());
            for (p, q) in a.iter().zip(b) {
                let d = (p.aod_rad - q.aod_rad).abs();
                assert!(d <= bound + 1e-12, "{d} > {bound}");
                if p.is_los() {
                    assert_eq!(d, 0.0);
                } else if d > 0.0 {
                    moved += 1;
                }
            }
        }
        assert!(moved > 0);
    }

    #[test]
    fn full_drop_keeps_exactly_the_los_path() {
        let mut scene = generate_scene(&small_params(1), &ArrayConfig::default(), 2).unwrap();
        scene.scatterers = vec![[-30.0, 60.0], [40.0, 90.0]];
        scene.paths_per_ue[0] = vec![
            PathComponent { gain: Complex64::new(1.0, 0.0), aod_rad: 0.1, scatterer: None },
            PathComponent { gain: Complex64::new(0.3, 0.0), aod_rad: -0.4, scatterer: Some(0) },
            PathComponent { gain: Complex64::new(0.2, 0.1), aod_rad: 0.4, scatterer: Some(1) },
        ];
        let pert = TwinPerturbation { path_drop_prob: 1.0, ..TwinPerturbation::none() };
        let twin = perturb_to_twin(&scene, &pert, 1).unwrap();
        assert_eq!(twin.paths_per_ue[0], vec![scene.paths_per_ue[0][0].clone()]);
    }

    #[test]
    fn full_drop_never_empties_nlos_user() {
        let params = SceneParams { los_fraction: 0.0, ..small_params(100) };
        let scene = generate_scene(&params, &ArrayConfig::default(), 3).unwrap();
        let pert = TwinPerturbation { path_drop_prob: 1.0, ..TwinPerturbation::none() };
        let twin = perturb_to_twin(&scene, &pert, 1).unwrap();
        assert!(twin.paths_per_ue.iter().all(|p| p.len() == 1));
    }

    #[test]
    fn single_path_channel() {
        let cfg = ArrayConfig::with_antennas(4);
        let scene = Scene {
            ue_positions: vec![[0.0, 10.0]],
            paths_per_ue: vec![vec![PathComponent {
                gain: Complex64::new(1.0, 0.0),
                aod_rad: 0.0,
                scatterer: None,
            }]],
            scatterers: vec![],
            rng_seed: 0,
            los_fraction: 1.0,
        };
        let h = synthesize_channel(&scene, 0, &cfg).unwrap();
        for c in &h.0 {
            assert_abs_diff_eq!(c.re, 0.5, epsilon = 1e-15);
        }
        assert!(matches!(synthesize_channel(&scene, 1, &cfg), Err(Error::Index { .. })));
    }

    #[test]
    fn symmetric_paths_give_real_cosine_channel() {
        // b(φ) + b(−φ) has elements 2cos(π i sinφ)/√N: real, and each element is
        // the conjugate-symmetric sum of the two unit phasors.
        let cfg = ArrayConfig::with_antennas(8);
        let phi = 0.3;
        let path = |a| PathComponent { gain: Complex64::new(1.0, 0.0), aod_rad: a, scatterer: None };
        let scene = Scene {
            ue_positions: vec![[0.0, 1.0]],
            paths_per_ue: vec![vec![path(phi), path(-phi)]],
            scatterers: vec![],
            rng_seed: 0,
            los_fraction: 1.0,
        };
        let h = synthesize_channel(&scene, 0, &cfg).unwrap();
        for (i, c) in h.0.iter().enumerate() {
            let expect = 2.0 * (PI * i as f64 * phi.sin()).cos() / 8f64.sqrt();
            assert_abs_diff_eq!(c.re, expect, epsilon = 1e-14);
            assert_abs_diff_eq!(c.im, 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn normalization_sets_global_max_to_one() {
        let cfg = ArrayConfig::default();
        let scene = generate_scene(&small_params(80), &cfg, 21).unwrap();
        let mut hs = synthesize_all(&scene, &cfg).unwrap();
        let scale = normalize_channels(&mut hs);
        assert!(scale > 0.0);
        let m = hs.iter().map(ChannelVector::max_abs).fold(0.0, f64::max);
        assert!((m - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scene_binary_and_json_round_trip() {
        let scene = generate_scene(&small_params(20), &ArrayConfig::default(), 4).unwrap();
        assert_eq!(Scene::from_bytes(&scene.to_bytes()).unwrap(), scene);
        let json = serde_json::to_string(&scene).unwrap();
        assert_eq!(serde_json::from_str::<Scene>(&json).unwrap(), scene);
        let mut bytes = scene.to_bytes();
        bytes[0] = b'X';
        assert!(Scene::from_bytes(&bytes).is_err());
        assert!(Scene::from_bytes(&scene.to_bytes()[..40]).is_err());
    }

    proptest! {
        #[test]
        fn channel_is_linear_in_gains(seed in 0u64..1000) {
            let cfg = ArrayConfig::default();
            let scene = generate_scene(&small_params(3), &cfg, seed).unwrap();
            let mut doubled = scene.clone();
            for paths in &mut doubled.paths_per_ue {
                for p in paths {
                    p.gain *= 2.0;
                }
            }
            for u in 0..3 {
                let h = synthesize_channel(&scene, u, &cfg).unwrap();
                let h2 = synthesize_channel(&doubled, u, &cfg).unwrap();
                for (a, b) in h.0.iter().zip(&h2.0) {
                    prop_assert!((a * 2.0 - b).norm() <= 1e-12 * b.norm().max(1e-300));
                }
            }
        }

        #[test]
        fn generation_is_pure(seed in any::<u64>()) {
            let cfg = ArrayConfig::default();
            let a = generate_scene(&small_params(4), &cfg, seed).unwrap();
            let b = generate_scene(&small_params(4), &cfg, seed).unwrap();
            prop_assert_eq!(&a, &b);
            let pert = TwinPerturbation::default();
            prop_assert_eq!(perturb_to_twin(&a, &pert, seed ^ 1).unwrap(), perturb_to_twin(&b, &pert, seed ^ 1).unwrap());
        }
    }
}
