//! Low-rank adapter laboratory: parameterizations, training problems,
//! initializers, optimizers, a batched serving kernel, and the CLI harness
//! that drives them.

pub mod adapter;
pub mod config;
pub mod error;
pub mod init;
pub mod matrix;
pub mod optim;
pub mod problems;
pub mod rng;
pub mod runner;
pub mod serving;
pub mod spectral;
pub mod verify;

pub use error::{Error, Result};
pub use matrix::{DenseMatrix, Tensor3};
pub use rng::RandomSource;
