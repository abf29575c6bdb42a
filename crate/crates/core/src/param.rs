//! Learnable parameter storage.
//!
//! Parameters live as plain shaped `f64` buffers between steps; each
//! forward pass binds them onto a tape as leaf tensors and the optimizer
//! writes updates back into the buffers.

use crate::error::Result;
use crate::rng::RngState;
use crate::tensor::{Tape, Tensor};
use crate::fmath;
use alloc::vec;
use alloc::vec::Vec;

/// One named block of learnable scalars.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        Param {
            shape: shape.to_vec(),
            values: vec![0.0; shape.iter().product()],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Param {
            shape: shape.to_vec(),
            values: vec![1.0; shape.iter().product()],
        }
    }

    /// Glorot-uniform initialization: uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut RngState) -> Self {
        let limit = fmath::sqrt(6.0 / (fan_in + fan_out) as f64);
        Param {
            shape: shape.to_vec(),
            values: (0..shape.iter().product())
                .map(|_| rng.next_symmetric(limit))
                .collect(),
        }
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// Register this parameter on a tape as a leaf tensor.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Result<Tensor> {
        tape.leaf(&self.shape, self.values.clone(), trainable)
    }
}
