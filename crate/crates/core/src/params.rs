//! Named, learnable parameter tensors.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};

/// A named parameter: flat data plus shape. Frozen parameters (for example
/// the identity voting matrices of the no-weighted-voting ablation) are
/// serialized like any other but excluded from optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
}

impl Param {
    /// Glorot-uniform initialization for a `[fan_in, fan_out]` matrix.
    pub fn glorot(name: impl Into<String>, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-limit..=limit))
            .collect();
        Param {
            name: name.into(),
            shape: vec![rows, cols],
            data,
            trainable: true,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Param {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
            trainable: true,
        }
    }

    pub fn identity(name: impl Into<String>, n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Param {
            name: name.into(),
            shape: vec![n, n],
            data,
            trainable: true,
        }
    }

    pub fn frozen(mut self) -> Self {
        self.trainable = false;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Register on a tape: a gradient-carrying leaf when trainable,
    /// a constant otherwise.
    pub fn bind(&self, tape: &mut Tape) -> Var {
        if self.trainable {
            tape.param(&self.data, &self.shape)
        } else {
            tape.constant(&self.data, &self.shape)
        }
    }
}
