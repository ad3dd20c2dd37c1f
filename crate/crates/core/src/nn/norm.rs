use super::{join, Cursor, Mode, Module, Slot};
use crate::error::{Error, Result};
use crate::tensor::{column_moments, Axis, Tape, Tensor, Var};

/// Per-feature batch normalization over the rows of an `N×D` input.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        BatchNorm {
            gamma: Tensor::ones(&[dim]),
            beta: Tensor::zeros(&[dim]),
            running_mean: Tensor::zeros(&[dim]),
            running_var: Tensor::ones(&[dim]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// Train mode standardizes with batch statistics and folds them into the
    /// running estimates (unbiased variance); eval mode uses the running
    /// estimates.
    pub fn forward(&mut self, tape: &mut Tape, params: &mut Cursor<'_>, x: Var, mode: Mode) -> Result<Var> {
        let gamma = params.next_var();
        let beta = params.next_var();
        let (n, d) = tape.value(x).dims2()?;
        if d != self.dim() {
            return Err(Error::shape("batch_norm", tape.value(x).shape(), self.gamma.shape()));
        }
        let normed = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::Contract(format!("batch norm in train mode needs N >= 2, got {n}")));
                }
                let (mean, var) = column_moments(tape.value(x))?;
                let unbias = n as f64 / (n as f64 - 1.0);
                let m = self.momentum;
                for j in 0..d {
                    let rm = &mut self.running_mean.data_mut()[j];
                    *rm = (1.0 - m) * *rm + m * mean[j];
                    let rv = &mut self.running_var.data_mut()[j];
                    *rv = (1.0 - m) * *rv + m * var[j] * unbias;
                }
                tape.standardize(x, Axis::Cols, self.eps)?
            }
            Mode::Eval => {
                let shift = tape.constant(self.running_mean.map(|v| -v));
                let inv = tape.constant(self.running_var.map(|v| 1.0 / (v + self.eps).sqrt()));
                let centered = tape.add_row(x, shift)?;
                tape.mul_row(centered, inv)?
            }
        };
        let scaled = tape.mul_row(normed, gamma)?;
        tape.add_row(scaled, beta)
    }
}

impl Module for BatchNorm {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot, &Tensor)) {
        f(&join(prefix, "gamma"), Slot::Param, &self.gamma);
        f(&join(prefix, "beta"), Slot::Param, &self.beta);
        f(&join(prefix, "running_mean"), Slot::Buffer, &self.running_mean);
        f(&join(prefix, "running_var"), Slot::Buffer, &self.running_var);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot, &mut Tensor)) {
        f(&join(prefix, "gamma"), Slot::Param, &mut self.gamma);
        f(&join(prefix, "beta"), Slot::Param, &mut self.beta);
        f(&join(prefix, "running_mean"), Slot::Buffer, &mut self.running_mean);
        f(&join(prefix, "running_var"), Slot::Buffer, &mut self.running_var);
    }
}

/// Per-row normalization with a learned affine, as used inside encoder
/// layers.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::ones(&[dim]),
            beta: Tensor::zeros(&[dim]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &mut Cursor<'_>, x: Var) -> Result<Var> {
        let gamma = params.next_var();
        let beta = params.next_var();
        let normed = tape.standardize(x, Axis::Rows, self.eps)?;
        let scaled = tape.mul_row(normed, gamma)?;
        tape.add_row(scaled, beta)
    }
}

impl Module for LayerNorm {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot, &Tensor)) {
        f(&join(prefix, "gamma"), Slot::Param, &self.gamma);
        f(&join(prefix, "beta"), Slot::Param, &self.beta);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot, &mut Tensor)) {
        f(&join(prefix, "gamma"), Slot::Param, &mut self.gamma);
        f(&join(prefix, "beta"), Slot::Param, &mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check_many;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(bn: &mut BatchNorm, x: Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = bn.bind(&mut tape, true);
        let xv = tape.constant(x);
        let y = bn.forward(&mut tape, &mut Cursor::new(&vars), xv, mode)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn standardized_column_is_nearly_unchanged() {
        let mut bn = BatchNorm::new(1);
        let x = Tensor::new(vec![4, 1], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let y = run(&mut bn, x.clone(), Mode::Train).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-5 * 1.0 + 1e-6);
    }

    #[test]
    fn constant_column_maps_to_beta() {
        let mut bn = BatchNorm::new(2);
        bn.beta = Tensor::new(vec![2], vec![0.25, -3.0]).unwrap();
        let x = Tensor::from_rows(&[[5.0, 7.0], [5.0, 7.0], [5.0, 7.0]]).unwrap();
        let y = run(&mut bn, x, Mode::Train).unwrap();
        for i in 0..3 {
            assert_eq!(y.row(i), &[0.25, -3.0]);
        }
    }

    #[test]
    fn zero_gamma_outputs_beta_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut bn = BatchNorm::new(3);
        bn.gamma = Tensor::zeros(&[3]);
        bn.beta = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = run(&mut bn, Tensor::randn(&[5, 3], &mut rng), Mode::Train).unwrap();
        for i in 0..5 {
            assert_eq!(y.row(i), &[1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn train_mode_needs_two_rows() {
        let mut bn = BatchNorm::new(2);
        let err = run(&mut bn, Tensor::zeros(&[1, 2]), Mode::Train).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert!(run(&mut bn, Tensor::zeros(&[1, 2]), Mode::Eval).is_ok());
    }

    #[test]
    fn running_stats_follow_momentum_rule() {
        let mut bn = BatchNorm::new(1);
        let x = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        run(&mut bn, x, Mode::Train).unwrap();
        assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-15);
        // unbiased variance of {1, 3} is 2
        assert!((bn.running_var.data()[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let mut bn = BatchNorm::new(1);
        bn.running_mean = Tensor::new(vec![1], vec![2.0]).unwrap();
        bn.running_var = Tensor::new(vec![1], vec![4.0 - bn.eps]).unwrap();
        let y = run(&mut bn, Tensor::new(vec![1, 1], vec![6.0]).unwrap(), Mode::Eval).unwrap();
        assert!((y.data()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn train_mode_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[4, 3], &mut rng);
        let gamma = Tensor::uniform(&[3], 0.5, 1.5, &mut rng);
        let beta = Tensor::randn(&[3], &mut rng);
        let w = Tensor::randn(&[4, 3], &mut rng);
        let err = finite_diff_check_many(
            |tape, v| {
                let mut bn = BatchNorm::new(3);
                let vars = [v[1], v[2]];
                let y = bn.forward(tape, &mut Cursor::new(&vars), v[0], Mode::Train)?;
                let wv = tape.constant(w.clone());
                let p = tape.mul(y, wv)?;
                Ok(tape.sum(p))
            },
            &[x, gamma, beta],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
