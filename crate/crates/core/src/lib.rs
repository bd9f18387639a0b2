// `!(x < bound)` is used deliberately so that NaN fails every check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod error;
pub mod evalmetrics;
pub mod geometry;
pub mod msfskd;
pub mod nets;
pub mod pipeline;
pub mod rng;
pub mod sparsevox;
pub mod tensor;

pub use error::{Error, Result};
