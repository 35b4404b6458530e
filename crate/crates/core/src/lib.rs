//! Beam alignment from wide-beam RSSI measurements.
//!
//! Channels come from a geometric multipath model of a uniform linear array
//! and its perturbed digital twin. A small MLP maps RSSI measurements taken
//! with a few sensing beams to the best narrow beam; Shapley values pick which
//! sensing beams are worth measuring, and a deep k-nearest-neighbor wrapper
//! attaches conformal confidence to every prediction.

pub mod baselines;
pub mod channel;
pub mod codebook;
pub mod dataset;
pub mod dknn;
pub mod error;
pub mod io;
pub mod metrics;
pub mod mlp;
pub mod seed;
pub mod shap;

pub use baselines::SweepResult;
pub use channel::{ArrayConfig, ChannelVector, PathComponent, Scene, SceneParams, TwinPerturbation};
pub use codebook::{Codebook, CodebookKind};
pub use dataset::{BeamDataset, MeasurementConfig, Origin, Split, Standardizer};
pub use dknn::{CalibrationScores, CredibilityRecord, DknnConfig, LayerIndex};
pub use error::{Error, Result};
pub use metrics::TimingConfig;
pub use mlp::{MlpModel, TrainConfig};
pub use shap::{ShapConfig, ShapReport};
