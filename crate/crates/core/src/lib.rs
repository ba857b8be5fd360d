//! Learning the most relevant feature pairs of a joint distribution and using
//! them for conditional-expectation inference.
//!
//! The crate is organised bottom-up:
//!
//! - [`discrete`]: exact Fisher-metric machinery on finite probability spaces
//!   (inner products, χ² divergence, stochastic channels and their SVD). It is
//!   the brute-force oracle for everything learned from samples.
//! - [`canonical`]: covariance estimation from feature batches, stabilized
//!   inverses, the relevance trace and the loss built on it.
//! - [`neural`]: small feedforward feature networks with exact backpropagation
//!   and the analytic gradient of the loss with respect to the features.
//! - [`trainer`]: ADAM / gradient-descent training of the two networks, loss
//!   monitoring, canonical extraction and model files.
//! - [`inference`]: second-stage target statistics and conditional
//!   expectations, classification and posterior spread.
//! - [`gaussian`]: closed forms for the one-dimensional Gaussian pair.
//! - [`datasets`]: seeded synthetic generators and CSV ingestion.
//! - [`gradcheck`]: finite-difference checks of the analytic gradients.

pub mod canonical;
pub mod datasets;
pub mod discrete;
mod error;
pub mod gaussian;
pub mod gradcheck;
pub mod inference;
pub mod linalg;
pub mod neural;
pub mod trainer;

pub use error::{Error, Result};
