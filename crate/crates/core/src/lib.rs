//! Patch-token transformer with a recurrently routed, noisy-gated
//! mixture-of-experts layer for time series forecasting, imputation,
//! anomaly detection and classification.

pub mod backbone;
pub mod balance;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod numerics;
pub mod params;
pub mod preprocess;
pub mod router;

pub use error::{Error, Result};
