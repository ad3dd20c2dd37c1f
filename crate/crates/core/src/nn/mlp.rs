use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{join, BatchNorm, Cursor, Linear, Mode, Module, Slot};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Shape of a fully connected stack.
///
/// Hidden layers run Linear → BatchNorm → ReLU; the last layer is a bare
/// affine map. A linear layer that feeds a batch norm carries no bias, since
/// the batch mean subtraction cancels it and `beta` plays its role.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub layer_widths: Vec<usize>,
    #[serde(default = "default_true")]
    pub batchnorm_after_hidden: bool,
    /// Bias on the last layer; drop it when the output feeds a layer that is
    /// itself batch-normalized.
    #[serde(default = "default_true")]
    pub final_bias: bool,
}

fn default_true() -> bool {
    true
}

impl MlpSpec {
    pub fn new(input_dim: usize, layer_widths: &[usize]) -> Self {
        MlpSpec {
            input_dim,
            layer_widths: layer_widths.to_vec(),
            batchnorm_after_hidden: true,
            final_bias: true,
        }
    }

    pub fn without_final_bias(mut self) -> Self {
        self.final_bias = false;
        self
    }

    pub fn output_dim(&self) -> usize {
        self.layer_widths.last().copied().unwrap_or(self.input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.layer_widths.is_empty() || self.layer_widths.contains(&0) {
            return Err(Error::Config(format!(
                "MLP needs a positive input width and at least one positive layer width, got {} -> {:?}",
                self.input_dim, self.layer_widths
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    pub linears: Vec<Linear>,
    pub norms: Vec<Option<BatchNorm>>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let depth = spec.layer_widths.len();
        let mut linears = Vec::with_capacity(depth);
        let mut norms = Vec::with_capacity(depth);
        let mut fan_in = spec.input_dim;
        for (i, &width) in spec.layer_widths.iter().enumerate() {
            let hidden = i + 1 < depth;
            let bn = hidden && spec.batchnorm_after_hidden;
            linears.push(Linear::new(fan_in, width, !bn && (hidden || spec.final_bias), rng));
            norms.push(bn.then(|| BatchNorm::new(width)));
            fan_in = width;
        }
        Ok(Mlp {
            spec: spec.clone(),
            linears,
            norms,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn forward(&mut self, tape: &mut Tape, params: &mut Cursor<'_>, x: Var, mode: Mode) -> Result<Var> {
        let xs = tape.value(x).shape();
        if xs.len() != 2 || xs[1] != self.input_dim() {
            return Err(Error::shape("mlp input", xs, &[self.input_dim()]));
        }
        let depth = self.linears.len();
        let mut h = x;
        for (i, (lin, norm)) in self.linears.iter().zip(self.norms.iter_mut()).enumerate() {
            h = lin.forward(tape, params, h)?;
            if let Some(bn) = norm {
                h = bn.forward(tape, params, h, mode)?;
            }
            if i + 1 < depth {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Forward pass on a plain tensor without gradient tracking.
    pub fn infer(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &mut Cursor::new(&vars), xv, mode)?;
        Ok(tape.value(y).clone())
    }
}

impl Module for Mlp {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot, &Tensor)) {
        for (i, (lin, norm)) in self.linears.iter().zip(&self.norms).enumerate() {
            lin.for_each(&join(prefix, &format!("{i}.linear")), f);
            if let Some(bn) = norm {
                bn.for_each(&join(prefix, &format!("{i}.bn")), f);
            }
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot, &mut Tensor)) {
        for (i, (lin, norm)) in self.linears.iter_mut().zip(&mut self.norms).enumerate() {
            lin.for_each_mut(&join(prefix, &format!("{i}.linear")), f);
            if let Some(bn) = norm {
                bn.for_each_mut(&join(prefix, &format!("{i}.bn")), f);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn single_layer_is_plain_linear() {
        let mut r = rng();
        let mut mlp = Mlp::new(&MlpSpec::new(3, &[2]), &mut r).unwrap();
        let x = Tensor::randn(&[4, 3], &mut r);
        let y = mlp.infer(&x, Mode::Train).unwrap();
        let expect = x.matmul(&mlp.linears[0].weight.transpose().unwrap()).unwrap();
        assert!(y.max_abs_diff(&expect) < 1e-15);
        assert!(mlp.norms[0].is_none());
    }

    #[test]
    fn identity_two_layer_stack_is_relu() {
        let mut mlp = Mlp::new(&MlpSpec::new(2, &[2, 2]), &mut rng()).unwrap();
        mlp.linears[0].weight = Tensor::eye(2);
        mlp.linears[1].weight = Tensor::eye(2);
        let x = Tensor::from_rows(&[[1.5, -2.0], [-0.5, 3.0]]).unwrap();
        let y = mlp.infer(&x, Mode::Eval).unwrap();
        let expect = Tensor::from_rows(&[[1.5, 0.0], [0.0, 3.0]]).unwrap();
        // eval running stats (0, 1) with eps 1e-5 scale by 1/sqrt(1 + 1e-5)
        assert!(y.max_abs_diff(&expect) < 1e-4);
    }

    #[test]
    fn negative_input_through_hidden_relu_leaves_bias_path() {
        let mut spec = MlpSpec::new(2, &[2, 3]);
        spec.batchnorm_after_hidden = false;
        let mut mlp = Mlp::new(&spec, &mut rng()).unwrap();
        mlp.linears[0].weight = Tensor::eye(2);
        mlp.linears[1].bias = Some(Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        let x = Tensor::from_rows(&[[-1.0, -2.0], [-3.0, -0.5]]).unwrap();
        let y = mlp.infer(&x, Mode::Train).unwrap();
        for i in 0..2 {
            assert_eq!(y.row(i), &[0.1, 0.2, 0.3]);
        }
    }

    #[test]
    fn batchnorm_layers_drop_the_redundant_bias() {
        let mlp = Mlp::new(&MlpSpec::new(4, &[8, 8, 2]), &mut rng()).unwrap();
        assert!(mlp.linears[0].bias.is_none());
        assert!(mlp.linears[1].bias.is_none());
        assert!(mlp.linears[2].bias.is_some());
        assert!(mlp.norms[2].is_none());
    }

    #[test]
    fn width_mismatch_errors() {
        let mut mlp = Mlp::new(&MlpSpec::new(4, &[2]), &mut rng()).unwrap();
        assert!(mlp.infer(&Tensor::zeros(&[2, 3]), Mode::Eval).is_err());
    }

    #[test]
    fn last_layer_is_affine() {
        // superposition on the final layer with frozen (eval) statistics
        let mut r = rng();
        let mut mlp = Mlp::new(&MlpSpec::new(3, &[5, 4]), &mut r).unwrap();
        let last = mlp.linears.pop().unwrap();
        let single = |x: &Tensor| {
            let mut tape = Tape::new();
            let vars = last.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let y = last.forward(&mut tape, &mut Cursor::new(&vars), xv).unwrap();
            tape.value(y).clone()
        };
        let a = Tensor::randn(&[2, 5], &mut r);
        let b = Tensor::randn(&[2, 5], &mut r);
        let sum: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| 0.3 * x + 0.7 * y).collect();
        let ab = Tensor::new(vec![2, 5], sum).unwrap();
        let lhs = single(&ab);
        let (ya, yb) = (single(&a), single(&b));
        for i in 0..lhs.len() {
            let rhs = 0.3 * ya.data()[i] + 0.7 * yb.data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-9);
        }
    }
}
