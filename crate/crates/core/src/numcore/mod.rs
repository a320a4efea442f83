//! Dense tensors, reverse-mode autodiff, Adam, and the finite-difference
//! gradient oracle.

mod adam;
pub mod gradcheck;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("softmax row {row} is fully masked")]
    Mask { row: usize },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("tape error: {0}")]
    Tape(String),
}
