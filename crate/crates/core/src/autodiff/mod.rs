//! Reverse-mode autodiff and the neural building blocks the model is made of.

mod nn;
mod params;
mod tape;

pub use nn::{
    conv_encoder, gaussian_kl, EncodedGrid, gaussian_kl_values, gru_cell, reparameterize, Activation, ConvEncoderParams,
    GaussianStats, GaussianVars, GruParams, Linear, Mlp, SIGMA_FLOOR,
};
pub use params::{init_scale, ParamId, ParamSet, ParamTensor};
pub use tape::{Gradients, OpKind, Tape, Var};

use alloc::string::String;
use alloc::vec::Vec;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    Axis { op: &'static str, axis: usize, shape: Vec<usize> },
    #[error("slice [{start}, {start}+{len}) out of range for dimension {dim}")]
    SliceRange { start: usize, len: usize, dim: usize },
    #[error("{op}: wrong number of inputs ({got})")]
    Arity { op: &'static str, got: usize },
    #[error("unknown op kind `{0}`")]
    UnknownKind(String),
    #[error("leaf of shape {shape:?} cannot hold {len} values")]
    BadLeaf { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran; record a new forward pass first")]
    AlreadyBackpropagated,
    #[error("gaussian statistics have mismatched lengths {0} and {1}")]
    StatsLength(usize, usize),
}

impl AutodiffError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        AutodiffError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }
}
