use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Cursor, LayerNorm, Linear, Module, Slot};
use crate::tensor::{Tape, Tensor, Var};

/// Size of the centroid encoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerSpec {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    /// Feed-forward hidden width; `4 · model_dim` when omitted.
    #[serde(default)]
    pub ff_dim: Option<usize>,
}

impl TransformerSpec {
    pub fn new(model_dim: usize) -> Self {
        TransformerSpec {
            num_layers: 3,
            num_heads: 8,
            model_dim,
            ff_dim: None,
        }
    }

    pub fn ff_width(&self) -> usize {
        self.ff_dim.unwrap_or(4 * self.model_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.model_dim == 0 {
            return Err(Error::Config("transformer sizes must be positive".into()));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !self.model_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "model_dim {} must be even for positional encoding",
                self.model_dim
            )));
        }
        Ok(())
    }
}

/// Multi-head self-attention with query/key/value/output projections.
///
/// The key projection has no bias: a key bias shifts every score of a query
/// row by the same amount and cancels in the softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Self {
        MultiHeadAttention {
            heads,
            query: Linear::new(dim, dim, true, rng),
            key: Linear::new(dim, dim, false, rng),
            value: Linear::new(dim, dim, true, rng),
            output: Linear::new(dim, dim, true, rng),
        }
    }

    /// Returns the projected output and the attention node (whose saved
    /// probabilities can be read with [`Tape::attention_probs`]).
    pub fn forward(&self, tape: &mut Tape, params: &mut Cursor<'_>, x: Var, seq_len: usize) -> Result<(Var, Var)> {
        let q = self.query.forward(tape, params, x)?;
        let k = self.key.forward(tape, params, x)?;
        let v = self.value.forward(tape, params, x)?;
        let attn = tape.attention(q, k, v, seq_len, self.heads)?;
        let out = self.output.forward(tape, params, attn)?;
        Ok((out, attn))
    }

    /// Attention output for position 0 of each sequence only; `first` holds
    /// those rows of `x`.
    pub fn forward_first(
        &self,
        tape: &mut Tape,
        params: &mut Cursor<'_>,
        x: Var,
        first: Var,
        seq_len: usize,
    ) -> Result<(Var, Var)> {
        let q = self.query.forward(tape, params, first)?;
        let k = self.key.forward(tape, params, x)?;
        let v = self.value.forward(tape, params, x)?;
        let attn = tape.attention_prefix(q, k, v, 1, seq_len, self.heads)?;
        let out = self.output.forward(tape, params, attn)?;
        Ok((out, attn))
    }
}

impl Module for MultiHeadAttention {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot, &Tensor)) {
        self.query.for_each(&join(prefix, "query"), f);
        self.key.for_each(&join(prefix, "key"), f);
        self.value.for_each(&join(prefix, "value"), f);
        self.output.for_each(&join(prefix, "output"), f);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot, &mut Tensor)) {
        self.query.for_each_mut(&join(prefix, "query"), f);
        self.key.for_each_mut(&join(prefix, "key"), f);
        self.value.for_each_mut(&join(prefix, "value"), f);
        self.output.for_each_mut(&join(prefix, "output"), f);
    }
}

/// Post-norm encoder layer:
/// `h = LN(x + MHSA(x))`, `out = LN(h + W₂·ReLU(W₁·h))`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, ff_dim: usize, rng: &mut R) -> Self {
        EncoderLayer {
            attention: MultiHeadAttention::new(dim, heads, rng),
            norm1: LayerNorm::new(dim),
            ff1: Linear::new(dim, ff_dim, true, rng),
            ff2: Linear::new(ff_dim, dim, true, rng),
            norm2: LayerNorm::new(dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &mut Cursor<'_>, x: Var, seq_len: usize) -> Result<(Var, Var)> {
        let (a, attn) = self.attention.forward(tape, params, x, seq_len)?;
        let r1 = tape.add(x, a)?;
        let h = self.norm1.forward(tape, params, r1)?;
        let f = self.ff1.forward(tape, params, h)?;
        let f = tape.relu(f);
        let f = self.ff2.forward(tape, params, f)?;
        let r2 = tape.add(h, f)?;
        let out = self.norm2.forward(tape, params, r2)?;
        Ok((out, attn))
    }

    /// Same as [`EncoderLayer::forward`] restricted to the position-0 row of
    /// every sequence: one output row per sequence.
    pub fn forward_first(&self, tape: &mut Tape, params: &mut Cursor<'_>, x: Var, seq_len: usize) -> Result<(Var, Var)> {
        let rows = tape.value(x).rows();
        if seq_len == 0 || !rows.is_multiple_of(seq_len) {
            return Err(Error::Contract(format!("{rows} rows do not split into sequences of {seq_len}")));
        }
        let index: Vec<(usize, usize)> = (0..rows / seq_len).map(|i| (0, i * seq_len)).collect();
        let first = tape.gather_rows(&[x], &index)?;
        let (a, attn) = self.attention.forward_first(tape, params, x, first, seq_len)?;
        let r1 = tape.add(first, a)?;
        let h = self.norm1.forward(tape, params, r1)?;
        let f = self.ff1.forward(tape, params, h)?;
        let f = tape.relu(f);
        let f = self.ff2.forward(tape, params, f)?;
        let r2 = tape.add(h, f)?;
        let out = self.norm2.forward(tape, params, r2)?;
        Ok((out, attn))
    }
}

impl Module for EncoderLayer {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot, &Tensor)) {
        self.attention.for_each(&join(prefix, "attention"), f);
        self.norm1.for_each(&join(prefix, "norm1"), f);
        self.ff1.for_each(&join(prefix, "ff1"), f);
        self.ff2.for_each(&join(prefix, "ff2"), f);
        self.norm2.for_each(&join(prefix, "norm2"), f);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot, &mut Tensor)) {
        self.attention.for_each_mut(&join(prefix, "attention"), f);
        self.norm1.for_each_mut(&join(prefix, "norm1"), f);
        self.ff1.for_each_mut(&join(prefix, "ff1"), f);
        self.ff2.for_each_mut(&join(prefix, "ff2"), f);
        self.norm2.for_each_mut(&join(prefix, "norm2"), f);
    }
}

/// Stack of encoder layers shared by both branches.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformerEncoder {
    spec: TransformerSpec,
    pub layers: Vec<EncoderLayer>,
}

impl TransformerEncoder {
    pub fn new<R: Rng + ?Sized>(spec: &TransformerSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = (0..spec.num_layers)
            .map(|_| EncoderLayer::new(spec.model_dim, spec.num_heads, spec.ff_width(), rng))
            .collect();
        Ok(TransformerEncoder {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &TransformerSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.model_dim
    }

    /// Runs every layer over `batch · seq_len` rows. Also returns each
    /// layer's attention node.
    pub fn forward(&self, tape: &mut Tape, params: &mut Cursor<'_>, x: Var, seq_len: usize) -> Result<(Var, Vec<Var>)> {
        let shape = tape.value(x).shape();
        if shape.len() != 2 || shape[1] != self.dim() {
            return Err(Error::shape("transformer input", shape, &[self.dim()]));
        }
        let mut h = x;
        let mut attns = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (out, attn) = layer.forward(tape, params, h, seq_len)?;
            h = out;
            attns.push(attn);
        }
        Ok((h, attns))
    }

    /// Position-0 output of the stack, one row per sequence. Equal to taking
    /// every `seq_len`-th row of [`TransformerEncoder::forward`], without
    /// computing the other positions in the last layer.
    pub fn forward_first(&self, tape: &mut Tape, params: &mut Cursor<'_>, x: Var, seq_len: usize) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.len() != 2 || shape[1] != self.dim() {
            return Err(Error::shape("transformer input", shape, &[self.dim()]));
        }
        let (last, rest) = self.layers.split_last().expect("at least one layer");
        let mut h = x;
        for layer in rest {
            h = layer.forward(tape, params, h, seq_len)?.0;
        }
        Ok(last.forward_first(tape, params, h, seq_len)?.0)
    }
}

impl Module for TransformerEncoder {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot, &Tensor)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.for_each(&join(prefix, &format!("layer{i}")), f);
        }
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot, &mut Tensor)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.for_each_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check_many, Axis};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run_mhsa(mhsa: &MultiHeadAttention, x: &Tensor, seq_len: usize) -> (Tensor, Vec<f64>) {
        let mut tape = Tape::new();
        let vars = mhsa.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let (y, attn) = mhsa.forward(&mut tape, &mut Cursor::new(&vars), xv, seq_len).unwrap();
        (tape.value(y).clone(), tape.attention_probs(attn).unwrap().to_vec())
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mhsa = MultiHeadAttention::new(8, 4, &mut rng);
        let row = Tensor::randn(&[1, 8], &mut rng);
        let rows: Vec<&[f64]> = (0..5).map(|_| row.row(0)).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let (y, _) = run_mhsa(&mhsa, &x, 5);
        for i in 1..5 {
            assert!(y.row(i).iter().zip(y.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn single_token_identity_projections_return_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mhsa = MultiHeadAttention::new(4, 1, &mut rng);
        for lin in [&mut mhsa.query, &mut mhsa.key, &mut mhsa.value, &mut mhsa.output] {
            lin.weight = Tensor::eye(4);
        }
        let x = Tensor::from_rows(&[[0.3, -1.0, 2.0, 0.5]]).unwrap();
        let (y, probs) = run_mhsa(&mhsa, &x, 1);
        assert_eq!(probs, vec![1.0]);
        assert!(y.max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mhsa = MultiHeadAttention::new(8, 2, &mut rng);
        let x = Tensor::randn(&[12, 8], &mut rng);
        let (_, probs) = run_mhsa(&mhsa, &x, 4);
        for row in probs.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn indivisible_heads_rejected() {
        let spec = TransformerSpec {
            num_layers: 1,
            num_heads: 3,
            model_dim: 8,
            ff_dim: None,
        };
        assert!(TransformerEncoder::new(&spec, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn zero_feedforward_and_attention_output_reduce_to_layer_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut layer = EncoderLayer::new(6, 2, 24, &mut rng);
        layer.attention.output.weight = Tensor::zeros(&[6, 6]);
        layer.ff2.weight = Tensor::zeros(&[6, 24]);
        let x = Tensor::randn(&[3, 6], &mut rng);

        let mut tape = Tape::new();
        let vars = layer.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (y, _) = layer.forward(&mut tape, &mut Cursor::new(&vars), xv, 3).unwrap();
        let y = tape.value(y).clone();

        let layer_norm = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = (0..t.rows())
                .map(|i| {
                    let r = t.row(i);
                    let mean = r.iter().sum::<f64>() / r.len() as f64;
                    let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / r.len() as f64;
                    r.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
                })
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let expect = layer_norm(&layer_norm(&x));
        assert!(y.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn stack_output_is_finite_over_many_seeds() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let enc = TransformerEncoder::new(&TransformerSpec::new(16), &mut rng).unwrap();
            let x = Tensor::randn(&[10, 16], &mut rng);
            let mut tape = Tape::new();
            let vars = enc.bind(&mut tape, false);
            let xv = tape.constant(x);
            let (y, _) = enc.forward(&mut tape, &mut Cursor::new(&vars), xv, 5).unwrap();
            assert_eq!(tape.value(y).shape(), &[10, 16]);
            assert!(tape.value(y).all_finite());
        }
    }

    #[test]
    fn forward_first_matches_full_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let enc = TransformerEncoder::new(&TransformerSpec::new(16), &mut rng).unwrap();
        let x = Tensor::randn(&[12, 16], &mut rng);
        let mut tape = Tape::new();
        let vars = enc.bind(&mut tape, false);
        let xv = tape.constant(x);
        let (full, _) = enc.forward(&mut tape, &mut Cursor::new(&vars), xv, 4).unwrap();
        let first = enc.forward_first(&mut tape, &mut Cursor::new(&vars), xv, 4).unwrap();
        let full = tape.value(full);
        let first = tape.value(first);
        assert_eq!(first.shape(), &[3, 16]);
        for i in 0..3 {
            for (a, b) in first.row(i).iter().zip(full.row(i * 4)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = EncoderLayer::new(8, 2, 16, &mut rng);
        let x = Tensor::randn(&[6, 8], &mut rng);
        let w = Tensor::randn(&[6, 8], &mut rng);
        let mut inputs = layer.param_tensors();
        inputs.push(x);
        let err = finite_diff_check_many(
            |tape, v| {
                let (params, x) = v.split_at(v.len() - 1);
                let (y, _) = layer.forward(tape, &mut Cursor::new(params), x[0], 3)?;
                let (y, _) = tape.l2_normalize(y, Axis::Rows)?;
                let wv = tape.constant(w.clone());
                let p = tape.mul(y, wv)?;
                Ok(tape.sum(p))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
