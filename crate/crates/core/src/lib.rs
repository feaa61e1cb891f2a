//! Reconstruction-based time-series anomaly detector built from selective
//! state-space (Mamba-style) blocks and multi-stage detrending.
//!
//! Pipeline: a Hodrick-Prescott trend is removed from each window (with
//! preceding windows as context), the seasonal remainder runs through `L`
//! blocks that each pair a Mamba block with an adaptive moving-average
//! detrender, and the reconstruction is the refined seasonality plus the
//! fused trends. The per-timestep squared reconstruction error is the anomaly
//! score; a peaks-over-threshold fit picks the alarm threshold and affiliation
//! metrics score predicted events against labels.

pub mod checkpoint;
pub mod detector;
pub mod detrend;
pub mod diff;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod series;
pub mod ssm;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use series::Series;
pub use tensor::Tensor;
