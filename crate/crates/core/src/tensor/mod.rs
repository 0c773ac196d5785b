//! Numeric substrate: dense arrays, a reverse-mode tape over a closed op set,
//! parameter storage, AdamW, and a finite-difference gradient checker.

mod array;
mod graph;
pub mod gradcheck;
pub mod kernels;
mod optim;
mod params;

pub use array::{NdArray, Real};
pub use graph::{Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Init, ParamId, ParamSet};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{0}: non-finite value")]
    NonFinite(String),
    #[error("{0}")]
    Invalid(String),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape {
            op,
            detail: detail.into(),
        }
    }
}
