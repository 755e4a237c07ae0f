//! Minimal reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] is built fresh for every forward pass. Values are plain [`Tensor`]s;
//! graph membership is tracked by [`Var`] handles, and gradients come back from
//! [`Tape::backward`] as a [`Gradients`] map keyed by those handles.

mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, BlockReport, GradCheckOptions, GradCheckReport};
pub use params::{BoundParams, ParamStore};
pub use tape::{base_coordinate, normalized_to_pixel, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar output of shape [1], got {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("tensor is not on this tape")]
    ForeignTensor,
    #[error("{op}: axis {axis} is invalid for shape {shape:?}")]
    InvalidAxis { op: &'static str, axis: usize, shape: Vec<usize> },
    #[error("{op}: reduction axis is empty")]
    EmptyAxis { op: &'static str },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("loss function is not deterministic: two evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Test hooks for mutation-testing the gradient checker.
#[doc(hidden)]
pub mod fault {
    use std::cell::Cell;

    thread_local! {
        static SAMPLER_SIGN_FLIP: Cell<bool> = const { Cell::new(false) };
    }

    /// Negates the bilinear sampler's coordinate gradient on the current thread.
    pub fn set_sampler_grad_sign_flip(enabled: bool) {
        SAMPLER_SIGN_FLIP.with(|c| c.set(enabled));
    }

    pub(crate) fn sampler_grad_sign_flipped() -> bool {
        SAMPLER_SIGN_FLIP.with(Cell::get)
    }
}

#[cfg(test)]
mod tests;
