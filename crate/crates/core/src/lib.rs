//! Correlation-alignment losses for unsupervised domain adaptation.
//!
//! The crate provides the Euclidean CORAL loss, the Log-Euclidean
//! (geodesic) LogCORAL loss with an analytic backward pass through the
//! symmetric eigendecomposition, and a first-order mean loss. A small
//! multilayer perceptron and a synthetic two-domain data generator make it
//! possible to train with these losses end to end.
//!
//! Module map:
//!
//! * [`linalg`] symmetric matrices, Jacobi eigendecomposition, spectral
//!   matrix functions and the structured-gradient helpers.
//! * [`statistics`] feature batches, covariance, mean and moving averages.
//! * [`losses`] forward and backward passes of every loss.
//! * [`network`] the MLP, SGD, the joint training step and checkpoints.
//! * [`data`] synthetic shifted domains and CSV feature files.
//! * [`gradcheck`] central finite-difference checks used by the CLI.
//! * [`cli`] the `logcoral` command line.

pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod network;
pub mod statistics;

pub use error::{Error, Result};
