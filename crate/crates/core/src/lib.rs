//! Neural coarse-graining (NCG).
//!
//! A transform network maps a raw timeseries onto per-timestep probability
//! distributions over a small number of abstract classes. A predictor network
//! reads a local neighborhood of those distributions and predicts the
//! distribution a fixed number of raw timesteps ahead. Both are trained
//! jointly against a loss that rewards accurate prediction while penalizing
//! collapse of the class usage, so the transform learns slowly-varying,
//! self-predictive latent variables.
//!
//! ## Layout
//!
//! - [`autodiff`]: tensors, the recording tape and the differentiable ops
//! - [`loss`]: entropy utilities and the discrete and continuous NCG objectives
//! - [`signals`]: synthetic noise benchmarks and CSV ingestion
//! - [`model`]: transform and predictor networks, presets, checkpoints
//! - [`train`]: Adam and the chunked minibatch training loop
//! - [`analysis`]: correlation against ground truth, transition graphs and
//!   exact information measures on small Markov chains
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below pin the common instantiations.

pub mod analysis;
pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod signals;
pub mod train;

pub use error::{NcgError, Result};
pub use scalar::{Precision, Scalar};

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type ModelState64 = model::ModelState<f64>;
pub type ModelState32 = model::ModelState<f32>;
pub type ClassDistributionSeries64 = loss::ClassDistributionSeries<f64>;
pub type ClassDistributionSeries32 = loss::ClassDistributionSeries<f32>;
