//! Numeric core for training a multi-step diffusion motion predictor,
//! distilling it into one-step denoisers and tuning the final student with
//! Gaussian-process Bayesian optimization.
//!
//! The crate is `no_std` + `alloc` unless the `std` feature is enabled. All
//! IO, wall-clock timing and threading live in the companion CLI crate; the
//! code here is deterministic given its inputs and RNG seeds.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod bayesopt;
pub mod data;
pub mod diffusion;
pub mod distill;
mod error;
pub mod gradsuite;
mod kernels;
pub mod math;
pub mod metrics;
pub mod models;
pub mod motion;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
