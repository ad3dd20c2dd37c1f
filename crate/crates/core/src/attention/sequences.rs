use super::{sinusoidal_pe, TransformerEncoder};
use crate::error::{Error, Result};
use crate::nn::Cursor;
use crate::tensor::{Tape, Tensor, Var};

/// Where an element of a neighbour sequence comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Element {
    /// Row of the retrieved-neighbour tensor (support-set origin, detached).
    Neighbour(usize),
    /// Row of the injected predictor output (carries gradient).
    Injected(usize),
}

/// Drops the last element, puts `p` first, and keeps the remaining
/// neighbours in order: `[n1, .., nK], p → [p, n1, .., nK-1]`.
pub fn shift<T: Clone>(seq: &[T], p: T) -> Result<Vec<T>> {
    if seq.is_empty() {
        return Err(Error::Contract("cannot shift an empty sequence".into()));
    }
    let mut out = Vec::with_capacity(seq.len());
    out.push(p);
    out.extend_from_slice(&seq[..seq.len() - 1]);
    Ok(out)
}

/// A batch of equal-length neighbour sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighbourSequences {
    /// Retrieved vectors, `N·K × D`, sequence-major.
    pub neighbours: Tensor,
    pub seq_len: usize,
    pub sequences: Vec<Vec<Element>>,
}

impl NeighbourSequences {
    /// Plain sequences straight from retrieval: sequence `i` is rows
    /// `i·K .. (i+1)·K` of `neighbours`.
    pub fn from_retrieval(neighbours: Tensor, seq_len: usize) -> Result<Self> {
        let rows = neighbours.rows();
        if seq_len == 0 || !rows.is_multiple_of(seq_len) || neighbours.shape().len() != 2 {
            return Err(Error::Contract(format!(
                "{:?} neighbour rows do not split into sequences of {seq_len}",
                neighbours.shape()
            )));
        }
        let sequences = (0..rows / seq_len)
            .map(|i| (0..seq_len).map(|j| Element::Neighbour(i * seq_len + j)).collect())
            .collect();
        Ok(NeighbourSequences {
            neighbours,
            seq_len,
            sequences,
        })
    }

    pub fn batch(&self) -> usize {
        self.sequences.len()
    }

    pub fn dim(&self) -> usize {
        self.neighbours.cols()
    }

    /// Applies [`shift`] to every sequence, injecting row `i` of the
    /// predictor output into sequence `i`.
    pub fn shifted(&self) -> Result<Self> {
        let sequences = self
            .sequences
            .iter()
            .enumerate()
            .map(|(i, s)| shift(s, Element::Injected(i)))
            .collect::<Result<_>>()?;
        Ok(NeighbourSequences {
            neighbours: self.neighbours.clone(),
            seq_len: self.seq_len,
            sequences,
        })
    }

    /// Stacks the sequences into an `N·K × D` tape value. Neighbour rows are
    /// registered as constants; injected rows are taken from `injected`.
    pub fn assemble(&self, tape: &mut Tape, injected: Option<Var>) -> Result<Var> {
        let neighbours = tape.constant(self.neighbours.clone());
        self.assemble_with(tape, neighbours, injected)
    }

    /// Like [`NeighbourSequences::assemble`] but reads neighbour rows from an
    /// existing tape value, which is detached first.
    pub fn assemble_with(&self, tape: &mut Tape, neighbours: Var, injected: Option<Var>) -> Result<Var> {
        let neighbours = tape.detach(neighbours);
        let mut sources = vec![neighbours];
        if let Some(p) = injected {
            if tape.value(p).cols() != self.dim() {
                return Err(Error::shape("injected rows", tape.value(p).shape(), self.neighbours.shape()));
            }
            sources.push(p);
        }
        let mut index = Vec::with_capacity(self.batch() * self.seq_len);
        for seq in &self.sequences {
            if seq.len() != self.seq_len {
                return Err(Error::Contract("sequences differ in length".into()));
            }
            for el in seq {
                index.push(match *el {
                    Element::Neighbour(r) => (0, r),
                    Element::Injected(r) => {
                        if injected.is_none() {
                            return Err(Error::Contract("shifted sequence without injected rows".into()));
                        }
                        (1, r)
                    }
                });
            }
        }
        tape.gather_rows(&sources, &index)
    }
}

/// Positional encoding, the encoder stack and first-position selection:
/// returns one `N × D` row per sequence.
///
/// Sequence elements are unit vectors, so they are scaled by `√D` before the
/// encoding is added; both then have entries of order one.
pub fn centroids_from_sequences(
    psi: &TransformerEncoder,
    tape: &mut Tape,
    params: &mut Cursor<'_>,
    seqs: &NeighbourSequences,
    injected: Option<Var>,
) -> Result<Var> {
    let stacked = seqs.assemble(tape, injected)?;
    centroids_from_stacked(psi, tape, params, stacked, seqs.seq_len)
}

pub(crate) fn centroids_from_stacked(
    psi: &TransformerEncoder,
    tape: &mut Tape,
    params: &mut Cursor<'_>,
    stacked: Var,
    seq_len: usize,
) -> Result<Var> {
    let (rows, d) = tape.value(stacked).dims2()?;
    if d != psi.dim() {
        return Err(Error::shape("centroid sequences", tape.value(stacked).shape(), &[psi.dim()]));
    }
    let batch = rows / seq_len;
    let pe = sinusoidal_pe(seq_len, d)?;
    let mut tiled = Vec::with_capacity(rows * d);
    for _ in 0..batch {
        tiled.extend_from_slice(pe.data());
    }
    let pe = tape.constant(Tensor::new(vec![rows, d], tiled)?);
    let scaled = tape.scale(stacked, (d as f64).sqrt());
    let x = tape.add(scaled, pe)?;
    psi.forward_first(tape, params, x, seq_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::TransformerSpec;
    use crate::nn::Module;
    use crate::tensor::finite_diff_check_many;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shift_replaces_the_fifth_neighbour() {
        let seq = ["n1", "n2", "n3", "n4", "n5"];
        assert_eq!(shift(&seq, "p").unwrap(), vec!["p", "n1", "n2", "n3", "n4"]);
    }

    #[test]
    fn shift_of_length_one_and_empty() {
        assert_eq!(shift(&["n1"], "p").unwrap(), vec!["p"]);
        assert!(shift::<&str>(&[], "p").is_err());
    }

    #[test]
    fn shift_twice_preserves_order() {
        let seq = ["n1", "n2", "n3", "n4", "n5"];
        let once = shift(&seq, "p").unwrap();
        assert_eq!(shift(&once, "q").unwrap(), vec!["q", "p", "n1", "n2", "n3"]);
    }

    proptest! {
        #[test]
        fn shift_keeps_length_and_multiset(k in prop::sample::select(vec![1usize, 2, 5, 8]), base in 0u32..1000) {
            let seq: Vec<u32> = (0..k as u32).map(|i| base + i).collect();
            let out = shift(&seq, u32::MAX).unwrap();
            prop_assert_eq!(out.len(), k);
            let mut expect: Vec<u32> = seq[..k - 1].to_vec();
            expect.push(u32::MAX);
            let mut got = out.clone();
            expect.sort_unstable();
            got.sort_unstable();
            prop_assert_eq!(got, expect);
            prop_assert_eq!(out[0], u32::MAX);
        }
    }

    fn setup(seed: u64, n: usize, k: usize, d: usize) -> (TransformerEncoder, NeighbourSequences, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = TransformerSpec {
            num_layers: 2,
            num_heads: 2,
            model_dim: d,
            ff_dim: None,
        };
        let psi = TransformerEncoder::new(&spec, &mut rng).unwrap();
        let seqs = NeighbourSequences::from_retrieval(Tensor::randn(&[n * k, d], &mut rng), k).unwrap();
        let p = Tensor::randn(&[n, d], &mut rng);
        (psi, seqs, p)
    }

    fn centroids(psi: &TransformerEncoder, seqs: &NeighbourSequences, p: Option<&Tensor>) -> Tensor {
        let mut tape = Tape::new();
        let vars = psi.bind(&mut tape, false);
        let pv = p.map(|p| tape.constant(p.clone()));
        let c = centroids_from_sequences(psi, &mut tape, &mut Cursor::new(&vars), seqs, pv).unwrap();
        tape.value(c).clone()
    }

    #[test]
    fn output_is_one_row_per_sequence() {
        let (psi, seqs, _) = setup(1, 4, 3, 8);
        assert_eq!(centroids(&psi, &seqs, None).shape(), &[4, 8]);
    }

    #[test]
    fn identical_sequences_give_identical_centroids() {
        let (psi, seqs, _) = setup(2, 2, 3, 8);
        let mut dup = seqs.clone();
        dup.sequences[1] = dup.sequences[0].clone();
        let c = centroids(&psi, &dup, None);
        assert_eq!(c.row(0), c.row(1));
    }

    #[test]
    fn permuting_trailing_positions_changes_the_centroid() {
        for seed in 0..10 {
            let (psi, seqs, p) = setup(seed, 1, 4, 8);
            let shifted = seqs.shifted().unwrap();
            let mut permuted = shifted.clone();
            permuted.sequences[0].swap(1, 3);
            let a = centroids(&psi, &shifted, Some(&p));
            let b = centroids(&psi, &permuted, Some(&p));
            assert!(a.max_abs_diff(&b) > 1e-9, "seed {seed}");
        }
    }

    #[test]
    fn shifted_sequence_without_injection_is_an_error() {
        let (psi, seqs, _) = setup(3, 2, 3, 8);
        let mut tape = Tape::new();
        let vars = psi.bind(&mut tape, false);
        let shifted = seqs.shifted().unwrap();
        assert!(centroids_from_sequences(&psi, &mut tape, &mut Cursor::new(&vars), &shifted, None).is_err());
    }

    #[test]
    fn neighbour_rows_receive_no_gradient() {
        let (psi, seqs, p) = setup(4, 3, 3, 8);
        let shifted = seqs.shifted().unwrap();
        let mut tape = Tape::new();
        let vars = psi.bind(&mut tape, true);
        let nb = tape.param(shifted.neighbours.clone());
        let pv = tape.param(p);
        let stacked = shifted.assemble_with(&mut tape, nb, Some(pv)).unwrap();
        let c = centroids_from_stacked(&psi, &mut tape, &mut Cursor::new(&vars), stacked, 3).unwrap();
        let sq = tape.square(c);
        let l = tape.sum(sq);
        let g = tape.backward(l).unwrap();
        assert!(g.get(nb).data().iter().all(|&x| x == 0.0));
        assert!(g.get(pv).data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn gradient_check_wrt_encoder_and_injection() {
        let (psi, seqs, p) = setup(5, 3, 3, 8);
        let shifted = seqs.shifted().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let readout = Tensor::randn(&[3, 8], &mut rng);
        let mut inputs = psi.param_tensors();
        inputs.push(p);
        let err = finite_diff_check_many(
            |tape, v| {
                let (params, p) = v.split_at(v.len() - 1);
                let c = centroids_from_sequences(&psi, tape, &mut Cursor::new(params), &shifted, Some(p[0]))?;
                let r = tape.constant(readout.clone());
                let lin = tape.mul(c, r)?;
                let sq = tape.square(lin);
                Ok(tape.sum(sq))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
