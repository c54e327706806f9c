//! Accident anticipation from dashcam feature bundles with a dynamic graph
//! network: object geometry drives per-frame edge weights, a weighted GCN and
//! spatial LSTM summarize each frame, and a causal dilated convolution plus a
//! recurrent head emit per-frame accident probabilities.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autograd;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod network;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
