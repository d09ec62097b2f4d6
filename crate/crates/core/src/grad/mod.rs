//! Dense matrices and a reverse-mode tape over them.
//!
//! The kernel covers exactly what an attention-only transformer needs:
//! products, sums, scaling, transposes, embedding gathers, column
//! concatenation, causally masked row softmax and per-row cross-entropy.
//! Every recorded value is checked for finiteness.

mod matrix;
mod tape;

pub use matrix::{masked_softmax_rows, Matrix, Real};
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("{op}: shape mismatch {}x{} vs {}x{}", left.0, left.1, right.0, right.1)]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{op}: expected a square matrix, got {}x{}", shape.0, shape.1)]
    NotSquare {
        op: &'static str,
        shape: (usize, usize),
    },
    #[error("matrix of shape {rows}x{cols} needs {} values, got {len}", rows * cols)]
    DataLength {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: no inputs")]
    Empty { op: &'static str },
    #[error("backward requires a 1x1 loss, got {}x{}", shape.0, shape.1)]
    NotScalar { shape: (usize, usize) },
    #[error("backward already ran on this tape; reset it first")]
    BackwardTwice,
}
