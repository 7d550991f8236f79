//! Mamba-UCM: a lightweight hybrid convolution / state-space network for
//! binary medical image segmentation, with its own autodiff, training loop,
//! data pipeline and complexity audit.

// `!(x > 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audit;
pub mod blocks;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod objective;
pub mod params;
pub mod rng;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
