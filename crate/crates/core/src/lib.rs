// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod pca;
pub mod ridge;
pub mod rng;
pub mod stats;
pub mod store;
pub mod synth;
pub mod temporal;
pub mod transfer;
pub mod types;
pub mod workflow;

pub use error::{Error, Result};
