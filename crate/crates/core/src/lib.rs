//! Forecasting of irregularly sampled multivariate time series with missing
//! values, using an attention encoder that fits a parametric latent curve.

pub mod data;
pub mod model;
pub mod tensor;
pub mod goodwin;
pub mod train;
pub mod pipeline;
pub mod bench;
pub mod gradcheck;
