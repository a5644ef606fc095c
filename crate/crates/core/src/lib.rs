// `!(x >= 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod config;
pub mod data;
pub mod dme;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod optimizers;
mod seed;

pub use config::{DatasetConfig, ExperimentConfig};
pub use error::{Error, Result};
pub use seed::derive_seed;
