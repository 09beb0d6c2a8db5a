// NaN must fail the range checks, which `!(x > 0.0)` does; numeric kernels
// index several arrays in lockstep.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autograd;
pub mod binio;
pub mod brain;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod model;
pub mod objective;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod preprocessing;
pub mod speech_features;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
