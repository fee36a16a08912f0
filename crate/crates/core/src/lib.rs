//! Mixed Gaussian Flow: a conditional normalizing flow over future trajectory
//! offsets whose base distribution is a K-means-built mixture of Gaussians.

// Validation is written `!(x > 0.0)` on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod app;
pub mod encoder;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod prior;
pub mod training;
pub mod trajdata;

pub use error::{MgfError, Result};
pub use metrics::PredictionSet;
pub use model::{DensityMode, MgfModel, ModelConfig, PredictOptions};
pub use prior::{MixedGaussianPrior, PriorEdit};
