//! Command-line pipeline around `motion-distill-core`: file formats,
//! experiment configuration, timing and the Bayesian-optimization driver.

pub mod bench;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod io;
pub mod report;
pub mod study;
