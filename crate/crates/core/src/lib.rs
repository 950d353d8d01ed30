pub mod autograd;
pub mod baselines;
pub mod datasets;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod stgnn;
pub mod training;

pub use error::{Error, Result};
