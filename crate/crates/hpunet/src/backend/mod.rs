//! Minimal differentiable array engine.
//!
//! Provides dense tensors, a seeded deterministic RNG, a Wengert-tape graph
//! with reverse-mode gradients, and the two initializers the model needs.
//! The op set is exactly what the network requires; there is no broadcasting
//! beyond that and no higher-order differentiation.

pub mod fdcheck;
pub mod graph;
pub mod init;
pub mod kernels;
pub mod rng;
pub mod tensor;

pub use graph::{Graph, Var};
pub use rng::RngState;
pub use tensor::{Real, Tensor};

use thiserror::Error;

/// Errors produced by graph construction and the backward pass.
#[derive(Debug, Error)]
pub enum BackendError {
    #[error("{context}: shapes {left:?} and {right:?} are incompatible")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("conv2d: input has {input} channels but kernel expects {kernel}")]
    ChannelMismatch { input: usize, kernel: usize },
    #[error("avg_pool2x2: spatial extents must be even, got {h}x{w}")]
    OddSpatialExtent { h: usize, w: usize },
    #[error("reparam_sample: sigma must be elementwise positive")]
    NonPositiveSigma,
    #[error("softmax_ce_map: target {value} out of range for {classes} classes at pixel {index}")]
    TargetOutOfRange {
        value: i32,
        classes: usize,
        index: usize,
    },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("variable does not belong to this graph's tape")]
    NotOnTape,
    #[error("{op}: expected rank-{expected} input, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: {message}")]
    Invalid { op: &'static str, message: String },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    LengthMismatch { len: usize, shape: Vec<usize> },
}
