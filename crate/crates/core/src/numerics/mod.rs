//! Small-MLP forward/backward passes, the Adam optimizer, checkpoints and
//! seeded random streams.

mod adam;
mod checkpoint;
mod mlp;
mod rng;

pub use adam::OptState;
pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use mlp::{mlp_grad, MlpArch, MlpGrads, MlpParams, Tape};
pub use rng::RngStream;

use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid architecture {0}")]
    BadArchitecture(String),
    #[error("non-finite loss in batch {batch}")]
    NonFiniteLoss { batch: usize },
    #[error("non-finite gradient rejected by optimizer at step {step}")]
    NonFiniteGradient { step: u64 },
    #[error("parameters contain non-finite values")]
    NonFiniteParams,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major dense matrix used for batched network inputs and outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::DimMismatch {
                what: "batch buffer",
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a batch with `rows` rows by filling each row in place.
    pub fn build(rows: usize, cols: usize, mut fill: impl FnMut(usize, &mut [T])) -> Self {
        let mut b = Self::zeros(rows, cols);
        for r in 0..rows {
            fill(r, b.row_mut(r));
        }
        b
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }
}
