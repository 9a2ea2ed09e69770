//! Multivariate time-series forecasting with patch-level channel and
//! temporal attention and a spectral stationarity correction, built on a
//! small reverse-mode differentiation engine.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod dual_branch;
pub mod engine;
pub mod error;
pub mod global_fusion;
pub mod model;
pub mod params;
pub mod patch;
pub mod revin;
pub mod spectral;
pub mod trainer;

#[cfg(test)]
mod oracle;

pub use config::{Ablation, FusionMode, ModelConfig};
pub use engine::{Graph, Tensor, Var};
pub use error::{Error, Result};
pub use model::{DctNet, Forecast};
pub use params::DctNetParams;
