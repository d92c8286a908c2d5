//! Minimal reverse-mode differentiable tensor engine.
//!
//! [`Array`] holds plain data. A [`Tape`] records operations over arrays and
//! hands out [`Tensor`] handles; calling [`Tensor::backward`] on a scalar
//! fills gradients on every reachable leaf created with `requires_grad`.

mod array;
mod gradcheck;
mod init;
mod kernels;
mod params;
mod tape;

pub use array::Array;
pub use gradcheck::{finite_diff_check, max_relative_error, param_gradcheck};
pub use init::{normal_array, seeded_normal};
pub use params::{Binder, Gradients, Param, ParamId, ParamStore};
pub use tape::{Tape, Tensor, Unary};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("{op}: axis {axis} out of range for rank {ndim}")]
    AxisOutOfRange { op: &'static str, axis: usize, ndim: usize },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
    #[error("invalid shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}")]
    InvalidArgument(String),
}
