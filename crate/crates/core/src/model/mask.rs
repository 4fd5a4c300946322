use crate::error::{contract, Result};
use crate::numerics::Tensor;

/// Additive attention mask hiding future positions: `M[i][j] = -inf` for `j > i`.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalMask {
    matrix: Tensor,
}

impl CausalMask {
    pub fn size(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix.data()[i * self.size() + j]
    }
}

pub fn make_causal_mask(len: usize) -> Result<CausalMask> {
    if len == 0 {
        return Err(contract("mask length must be at least 1"));
    }
    let mut m = Tensor::zeros(&[len, len]);
    for i in 0..len {
        for j in i + 1..len {
            m.data_mut()[i * len + j] = f64::NEG_INFINITY;
        }
    }
    Ok(CausalMask { matrix: m })
}
