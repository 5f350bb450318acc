//! Joint imputation and forecasting for multivariate time series with
//! missing values.

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod masking;
pub mod model;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod training;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
