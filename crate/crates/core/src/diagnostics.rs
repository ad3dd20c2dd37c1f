//! The gradient-check suite behind the `gradcheck` subcommand: every loss,
//! the attention blocks, batch norm and the full training-step objective,
//! each against central finite differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{EncoderLayer, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Cursor, Mode, Module};
use crate::objectives::{
    centroid_loss, cross_correlation, neighbour_loss, redundancy_loss, total_loss, LossTerms, ObjectiveParams,
};
use crate::support_set::SupportSet;
use crate::tensor::{finite_diff_check_many, finite_diff_errors, Tape, Tensor, Var};
use crate::training::{step_objective, Bound, Model, TrainConfig};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Batch size, projection width and neighbours of the suite's shapes.
pub const N: usize = 4;
pub const D: usize = 8;
pub const K: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: impl Into<String>, err: f64) -> Self {
        CheckResult {
            name: name.into(),
            max_rel_error: err,
            passed: err <= TOLERANCE,
        }
    }
}

pub const MODULES: [&str; 8] = [
    "neighbour",
    "centroid",
    "redundancy",
    "total",
    "attention",
    "encoder",
    "batchnorm",
    "train_step",
];

fn rng(tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x5eed_0000 + tag)
}

/// Quadratic readout `Σ (y ∘ R)²` so that every output entry matters.
fn readout(tape: &mut Tape, y: Var, r: &Tensor) -> Result<Var> {
    let r = tape.constant(r.clone());
    let lin = tape.mul(y, r)?;
    let sq = tape.square(lin);
    Ok(tape.sum(sq))
}

fn inputs(count: usize, tag: u64) -> Vec<Tensor> {
    let mut r = rng(tag);
    (0..count).map(|_| Tensor::randn(&[N, D], &mut r)).collect()
}

fn check_neighbour() -> Result<f64> {
    let xs = inputs(2, 1);
    let anchor = xs[0].clone();
    finite_diff_check_many(
        |t, v| {
            let nn = t.constant(anchor.clone());
            neighbour_loss(t, nn, v[0], 0.2)
        },
        &xs[1..],
        STEP,
    )
}

fn check_centroid() -> Result<f64> {
    finite_diff_check_many(|t, v| centroid_loss(t, v[0], v[1], 0.2), &inputs(2, 2), STEP)
}

fn redundancy(t: &mut Tape, v: &[Var]) -> Result<Var> {
    let (cc1, _) = cross_correlation(t, v[0], v[1])?;
    let (cc2, _) = cross_correlation(t, v[2], v[3])?;
    redundancy_loss(t, cc1, cc2, 0.5)
}

fn check_redundancy() -> Result<f64> {
    finite_diff_check_many(redundancy, &inputs(4, 3), STEP)
}

fn check_total() -> Result<f64> {
    let xs = inputs(5, 4);
    let anchor = xs[4].clone();
    finite_diff_check_many(
        |t, v| {
            let nn1 = t.constant(anchor.clone());
            let terms = LossTerms {
                neighbour: Some(neighbour_loss(t, nn1, v[1], 0.2)?),
                centroid: Some(centroid_loss(t, v[2], v[3], 0.2)?),
                redundancy: Some(redundancy(t, v)?),
            };
            Ok(total_loss(t, terms, &ObjectiveParams::default())?.0)
        },
        &xs[..4],
        STEP,
    )
}

fn check_attention() -> Result<f64> {
    let mut r = rng(5);
    let mha = MultiHeadAttention::new(D, 2, &mut r);
    let x = Tensor::randn(&[N * K, D], &mut r);
    let w = Tensor::randn(&[N * K, D], &mut r);
    let mut xs = mha.param_tensors();
    xs.push(x);
    finite_diff_check_many(
        |t, v| {
            let (params, x) = v.split_at(v.len() - 1);
            let (y, _) = mha.forward(t, &mut Cursor::new(params), x[0], K)?;
            readout(t, y, &w)
        },
        &xs,
        STEP,
    )
}

fn check_encoder() -> Result<f64> {
    let mut r = rng(6);
    let layer = EncoderLayer::new(D, 2, 4 * D, &mut r);
    let x = Tensor::randn(&[N * K, D], &mut r);
    let w = Tensor::randn(&[N * K, D], &mut r);
    let mut xs = layer.param_tensors();
    xs.push(x);
    finite_diff_check_many(
        |t, v| {
            let (params, x) = v.split_at(v.len() - 1);
            let (y, _) = layer.forward(t, &mut Cursor::new(params), x[0], K)?;
            readout(t, y, &w)
        },
        &xs,
        STEP,
    )
}

fn check_batchnorm() -> Result<f64> {
    let mut r = rng(7);
    let mut bn = BatchNorm::new(D);
    bn.gamma = Tensor::uniform(&[D], 0.5, 1.5, &mut r);
    bn.beta = Tensor::randn(&[D], &mut r);
    let x = Tensor::randn(&[N, D], &mut r);
    let w = Tensor::randn(&[N, D], &mut r);
    let mut xs = bn.param_tensors();
    xs.push(x);
    finite_diff_check_many(
        |t, v| {
            let (params, x) = v.split_at(v.len() - 1);
            let y = bn.clone().forward(t, &mut Cursor::new(params), x[0], Mode::Train)?;
            readout(t, y, &w)
        },
        &xs,
        STEP,
    )
}

/// Small configuration used for the whole-step check.
pub fn step_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.dataset.input_dim = 6;
    cfg.dataset.samples = 64;
    cfg.backbone_widths = vec![10, 10];
    cfg.projector_widths = vec![12, D];
    cfg.predictor_widths = vec![12, D];
    cfg.transformer.num_layers = 2;
    cfg.transformer.num_heads = 2;
    cfg.batch_size = N;
    cfg.k = K;
    cfg.queue_capacity = 16;
    cfg.steps = 10;
    cfg.warmup_steps = 1;
    cfg
}

/// Whole-step objective with respect to each trainable group: online
/// encoder and projector, both predictors, and ψ.
fn check_train_step() -> Result<Vec<(String, f64)>> {
    let cfg = step_config();
    let mut r = rng(8);
    let model = Model::new(&cfg, &mut r)?;
    let x1 = Tensor::randn(&[N, cfg.dataset.input_dim], &mut r);
    let x2 = Tensor::randn(&[N, cfg.dataset.input_dim], &mut r);
    let mut queue = SupportSet::new(cfg.queue_capacity, D)?;
    queue.enqueue_batch(&Tensor::randn(&[12, D], &mut r), None)?;

    let groups = [
        ("online", model.online.param_tensors()),
        ("predictor_nn", model.predictor_nn.param_tensors()),
        ("predictor_c", model.predictor_c.param_tensors()),
        ("psi", model.psi.param_tensors()),
    ];
    let sizes: Vec<usize> = groups.iter().map(|g| g.1.len()).collect();
    let xs: Vec<Tensor> = groups.iter().flat_map(|g| g.1.clone()).collect();
    let f = |t: &mut Tape, v: &[Var]| -> Result<Var> {
        let mut m = model.clone();
        let (a, rest) = v.split_at(sizes[0]);
        let (b, rest) = rest.split_at(sizes[1]);
        let (c, p) = rest.split_at(sizes[2]);
        let bound = Bound {
            online: a.to_vec(),
            momentum: m.momentum.bind(t, false),
            predictor_nn: b.to_vec(),
            predictor_c: c.to_vec(),
            psi: p.to_vec(),
        };
        let fwd = step_objective(&mut m, t, &bound, &x1, &x2, &queue, &cfg)?;
        if fwd.breakdown.l_nn.is_none() || fwd.breakdown.l_centroid.is_none() || fwd.breakdown.l_red.is_none() {
            return Err(Error::Contract("train-step check must exercise every loss term".into()));
        }
        Ok(fwd.loss)
    };
    let errs = finite_diff_errors(&f, &xs, STEP)?;
    let mut out = Vec::new();
    let mut start = 0;
    for (g, n) in groups.iter().zip(&sizes) {
        let worst = errs[start..start + n].iter().copied().fold(0.0, f64::max);
        out.push((format!("train_step/{}", g.0), worst));
        start += n;
    }
    Ok(out)
}

/// Runs the named check (or every check) and reports one line per result.
pub fn run_suite(module: Option<&str>) -> Result<Vec<CheckResult>> {
    let selected: Vec<&str> = match module {
        Some(m) if MODULES.contains(&m) => vec![m],
        Some(m) => {
            return Err(Error::Config(format!(
                "unknown gradcheck module {m:?}; expected one of {}",
                MODULES.join(", ")
            )))
        }
        None => MODULES.to_vec(),
    };
    let mut out = Vec::new();
    for name in selected {
        match name {
            "neighbour" => out.push(CheckResult::new(name, check_neighbour()?)),
            "centroid" => out.push(CheckResult::new(name, check_centroid()?)),
            "redundancy" => out.push(CheckResult::new(name, check_redundancy()?)),
            "total" => out.push(CheckResult::new(name, check_total()?)),
            "attention" => out.push(CheckResult::new(name, check_attention()?)),
            "encoder" => out.push(CheckResult::new(name, check_encoder()?)),
            "batchnorm" => out.push(CheckResult::new(name, check_batchnorm()?)),
            "train_step" => {
                for (n, e) in check_train_step()? {
                    out.push(CheckResult::new(n, e));
                }
            }
            _ => unreachable!("validated above"),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_module_is_a_config_error() {
        assert!(matches!(run_suite(Some("nope")), Err(Error::Config(_))));
    }

    #[test]
    fn single_cheap_module_passes() {
        let r = run_suite(Some("redundancy")).unwrap();
        assert_eq!(r.len(), 1);
        assert!(r[0].passed, "{r:?}");
    }
}
