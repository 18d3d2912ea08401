//! Model-based clustering of high-dimensional binary data with mixtures of
//! common-slope latent trait models.
//!
//! Each observation belongs to one of `G` components. Within component `g`
//! a `d`-dimensional latent trait `y ~ N(μ_g, Σ_g)` drives every item
//! through a logistic response `P(x_m = 1 | y) = σ(w_m'y)`, with the slope
//! matrix `W` shared across components. Fitting uses a variational EM
//! algorithm built on a quadratic lower bound of the logistic function;
//! fitted models are scored with Gauss-Hermite quadrature and BIC.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`). The
//! aliases below fix the scalar to `f64`, which is what the command line
//! tool uses.

pub mod block;
pub mod covariance;
pub mod data;
pub mod error;
pub mod linalg;
pub mod model;
pub mod quadrature;
pub mod scalar;
pub mod selection;
pub mod simulate;
pub mod vem;

pub use data::BinaryDataset;
pub use error::{Error, Result};
pub use model::{
    count_free_parameters, BlockParams, CovarianceStructure, LatentProjection, MclmModel,
    ModelConfig,
};
pub use scalar::Scalar;
pub use selection::{adjusted_rand_index, bic, ModelScore};
pub use vem::{fit, project, StoppingRule};
pub use block::{fit_block, BlockOptions};
pub use quadrature::loglik_quadrature;

pub type Model = MclmModel<f64>;
pub type Model32 = MclmModel<f32>;
pub type Blocks = BlockParams<f64>;
pub type Projection = LatentProjection<f64>;
pub type Fit = vem::FitResult<f64>;
pub type FitOptions = vem::FitOptions<f64>;
pub type Score = ModelScore;
