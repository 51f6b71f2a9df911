// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod colorize;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod image;
pub mod liftsplat;
pub mod metrics;
pub mod model;
pub mod par;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
