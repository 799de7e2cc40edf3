pub mod augment;
pub mod autodiff;
pub mod cli;
pub mod cohort;
pub mod dataset;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod model;
pub mod plots;
pub mod report;
pub mod rng;
pub mod split;
pub mod survival;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
