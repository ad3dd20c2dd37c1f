use rand::Rng;

use super::{join, Cursor, Module, Slot};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Affine layer `y = x·Wᵀ + b` with `W: out×in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    /// Weights from `U(-1/√in, 1/√in)`, biases zero.
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        Linear {
            weight: Tensor::uniform(&[out_features, in_features], -bound, bound, rng),
            bias: bias.then(|| Tensor::zeros(&[out_features])),
        }
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let (out, _) = weight.dims2()?;
        if weight.shape().len() != 2 {
            return Err(Error::Contract(format!("linear weight must be 2-D, got {:?}", weight.shape())));
        }
        if let Some(b) = &bias {
            if b.shape() != [out] {
                return Err(Error::shape("linear bias", weight.shape(), b.shape()));
            }
        }
        Ok(Linear { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, tape: &mut Tape, params: &mut Cursor<'_>, x: Var) -> Result<Var> {
        let w = params.next_var();
        let xs = tape.value(x).shape().to_vec();
        if xs.len() != 2 || xs[1] != self.in_features() {
            return Err(Error::shape("linear", &xs, self.weight.shape()));
        }
        let mut y = tape.matmul_nt(x, w)?;
        if self.bias.is_some() {
            let b = params.next_var();
            y = tape.add_row(y, b)?;
        }
        Ok(y)
    }
}

impl Module for Linear {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot, &Tensor)) {
        f(&join(prefix, "weight"), Slot::Param, &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), Slot::Param, b);
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot, &mut Tensor)) {
        f(&join(prefix, "weight"), Slot::Param, &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), Slot::Param, b);
        }
    }
}
