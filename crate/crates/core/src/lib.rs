#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autograd;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod instruct;
pub mod model;
pub mod nn;
pub mod params;
pub mod signal;
pub mod textembed;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
