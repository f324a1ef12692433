//! Semi-supervised image classification training with pseudo-labels and a
//! self-supervised feature loss.

pub mod augment;
pub mod cli;
pub mod config;
pub mod data;
pub mod ema;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod trainer;
