//! Network building blocks: linear and normalization layers, MLP stacks and
//! the EMA link between online and momentum branches.

pub mod checkpoint;
mod ema;
mod linear;
mod mlp;
mod norm;

pub use ema::{ema_update, EmaParams, EmaSchedule};
pub use linear::Linear;
pub use mlp::{Mlp, MlpSpec};
pub use norm::{BatchNorm, LayerNorm};

use crate::tensor::{Tape, Tensor, Var};

/// Batch statistics vs running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Whether a named tensor is a learnable parameter or a state buffer such
/// as running batch-norm statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Param,
    Buffer,
}

/// Anything that owns named tensors.
///
/// Parameters are always visited in the same order; [`Module::bind`]
/// registers them on a tape in that order, and forward passes consume the
/// bound handles through a [`Cursor`].
pub trait Module {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot, &Tensor));
    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot, &mut Tensor));

    /// Registers every parameter on `tape`, as differentiable leaves when
    /// `trainable`, otherwise as constants.
    fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        let mut vars = Vec::new();
        self.for_each("", &mut |_, slot, t| {
            if slot == Slot::Param {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                vars.push(v);
            }
        });
        vars
    }

    /// Owned copies of the parameters in bind order.
    fn param_tensors(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.for_each("", &mut |_, slot, t| {
            if slot == Slot::Param {
                out.push(t.clone());
            }
        });
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each("", &mut |_, slot, t| {
            if slot == Slot::Param {
                n += t.len();
            }
        });
        n
    }

    /// Applies `f` to every parameter paired with the matching tensor from
    /// `items` (same order as [`Module::bind`]).
    fn update_params(&mut self, items: &[Tensor], f: &mut dyn FnMut(&mut Tensor, &Tensor)) {
        let mut i = 0;
        self.for_each_mut("", &mut |_, slot, t| {
            if slot == Slot::Param {
                f(t, &items[i]);
                i += 1;
            }
        });
        assert_eq!(i, items.len(), "parameter list length mismatch");
    }
}

/// Sequential reader over bound parameter handles.
#[derive(Debug)]
pub struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        Cursor { vars, pos: 0 }
    }

    pub fn next_var(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }

    pub fn is_exhausted(&self) -> bool {
        self.pos == self.vars.len()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
