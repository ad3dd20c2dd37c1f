use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{grid_side, DatasetMode, TrainConfig};
use super::data::{augment, Dataset};
use super::model::Model;
use super::optim::{lr_schedule, transformer_lr, Sgd};
use crate::attention::{centroids_from_stacked, shift};
use crate::error::{Error, Result};
use crate::nn::{ema_update, Cursor, Mode, Module};
use crate::objectives::{
    centroid_loss, cross_correlation, neighbour_loss, redundancy_loss, total_loss, LossBreakdown, LossTerms,
};
use crate::support_set::{nn_retrieval_accuracy, AccuracyMode, RetrievalResult, SupportSet};
use crate::tensor::{l2_normalize, Axis, Tape, Tensor, Var};

/// Tape handles of every parameter group for one step. Momentum parameters
/// are bound as constants.
#[derive(Clone, Debug)]
pub struct Bound {
    pub online: Vec<Var>,
    pub momentum: Vec<Var>,
    pub predictor_nn: Vec<Var>,
    pub predictor_c: Vec<Var>,
    pub psi: Vec<Var>,
}

impl Bound {
    pub fn new(model: &Model, tape: &mut Tape) -> Self {
        Bound {
            online: model.online.bind(tape, true),
            momentum: model.momentum.bind(tape, false),
            predictor_nn: model.predictor_nn.bind(tape, true),
            predictor_c: model.predictor_c.bind(tape, true),
            psi: model.psi.bind(tape, true),
        }
    }
}

/// Values produced by the forward half of a step.
#[derive(Clone, Debug)]
pub struct StepForward {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    /// Momentum projections of view 1, the vectors that get enqueued.
    pub momentum_z1: Tensor,
    pub online_z1: Tensor,
    /// Retrieval for the momentum view-1 queries, when the queue is warm.
    pub retrieval: Option<RetrievalResult>,
    pub momentum_outputs: [Var; 2],
}

/// One batch of sequences for ψ: retrieved neighbours plus, for the shifted
/// online path, the injected predictor rows.
struct SeqBatch<'a> {
    neighbours: &'a RetrievalResult,
    injected: Option<Var>,
}

/// Centroids of several sequence batches in a single ψ pass.
fn centroids(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    batches: &[SeqBatch<'_>],
    k: usize,
) -> Result<Vec<Var>> {
    let mut sources = Vec::new();
    let mut index = Vec::new();
    let mut sizes = Vec::new();
    for b in batches {
        let src = sources.len();
        sources.push(tape.constant(b.neighbours.vectors.clone()));
        let inj = match b.injected {
            Some(p) => {
                let (p, _) = tape.l2_normalize(p, Axis::Rows)?;
                sources.push(p);
                Some(sources.len() - 1)
            }
            None => None,
        };
        let n = b.neighbours.num_queries();
        for i in 0..n {
            let seq: Vec<(usize, usize)> = (0..k).map(|j| (src, i * k + j)).collect();
            let seq = match inj {
                Some(s) => shift(&seq, (s, i))?,
                None => seq,
            };
            index.extend(seq);
        }
        sizes.push(n);
    }
    let stacked = tape.gather_rows(&sources, &index)?;
    let all = centroids_from_stacked(&model.psi, tape, &mut Cursor::new(&bound.psi), stacked, k)?;
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for n in sizes {
        let rows: Vec<(usize, usize)> = (start..start + n).map(|r| (0, r)).collect();
        out.push(tape.gather_rows(&[all], &rows)?);
        start += n;
    }
    Ok(out)
}

/// The full objective for two views of a batch, recorded on `tape`.
///
/// Routing: `Z¹ = g_ξ(f_ξ(X¹))` and `Z² = g_θ(f_θ(X²))`, plus the swapped pair
/// from the other view. Neighbours of `Z¹` feed the neighbour term against
/// `q_nn(Z²)` and, as a plain sequence, the momentum-side centroid; neighbours
/// of `Z²` are shifted with `q_c(Z²)` for the online-side centroid. The
/// redundancy term pairs momentum view 1 with online view 2 and vice versa.
/// Neighbour and centroid terms need `k` queue entries; before that only the
/// redundancy term is active.
pub fn step_objective(
    model: &mut Model,
    tape: &mut Tape,
    bound: &Bound,
    x1: &Tensor,
    x2: &Tensor,
    queue: &SupportSet,
    cfg: &TrainConfig,
) -> Result<StepForward> {
    let obj = &cfg.objective;
    let k = cfg.k;
    let xv1 = tape.constant(x1.clone());
    let xv2 = tape.constant(x2.clone());

    let (_, zm1) = model.momentum.forward(tape, &mut Cursor::new(&bound.momentum), xv1, Mode::Train)?;
    let (_, zm2) = model.momentum.forward(tape, &mut Cursor::new(&bound.momentum), xv2, Mode::Train)?;
    let zm1 = tape.detach(zm1);
    let zm2 = tape.detach(zm2);
    let (_, zo1) = model.online.forward(tape, &mut Cursor::new(&bound.online), xv1, Mode::Train)?;
    let (_, zo2) = model.online.forward(tape, &mut Cursor::new(&bound.online), xv2, Mode::Train)?;

    let mut terms = LossTerms::default();
    if obj.eta > 0.0 {
        let (cc1, _) = cross_correlation(tape, zm1, zo2)?;
        let (cc2, _) = cross_correlation(tape, zm2, zo1)?;
        terms.redundancy = Some(redundancy_loss(tape, cc1, cc2, obj.lambda_red)?);
    }

    let warm = queue.len() >= k;
    let retrieval = if warm {
        Some(queue.knn_query(tape.value(zm1), k)?)
    } else {
        None
    };
    if let Some(r1) = retrieval.as_ref().filter(|_| obj.sigma > 0.0 || obj.kappa > 0.0) {
        let r1_swapped = if obj.symmetrize {
            Some(queue.knn_query(tape.value(zm2), k)?)
        } else {
            None
        };
        if obj.sigma > 0.0 {
            let nn1 = tape.constant(r1.first_neighbours());
            let p2 = model.predictor_nn.forward(tape, &mut Cursor::new(&bound.predictor_nn), zo2, Mode::Train)?;
            let mut l = neighbour_loss(tape, nn1, p2, obj.tau)?;
            if let Some(r) = &r1_swapped {
                let nn2 = tape.constant(r.first_neighbours());
                let p1 =
                    model.predictor_nn.forward(tape, &mut Cursor::new(&bound.predictor_nn), zo1, Mode::Train)?;
                let l2 = neighbour_loss(tape, nn2, p1, obj.tau)?;
                let sum = tape.add(l, l2)?;
                l = tape.scale(sum, 0.5);
            }
            terms.neighbour = Some(l);
        }
        if obj.kappa > 0.0 {
            let r2 = queue.knn_query(tape.value(zo2), k)?;
            let pc2 = model.predictor_c.forward(tape, &mut Cursor::new(&bound.predictor_c), zo2, Mode::Train)?;
            let mut batches = vec![
                SeqBatch {
                    neighbours: r1,
                    injected: None,
                },
                SeqBatch {
                    neighbours: &r2,
                    injected: Some(pc2),
                },
            ];
            let r2_swapped;
            if let Some(r) = &r1_swapped {
                r2_swapped = queue.knn_query(tape.value(zo1), k)?;
                let pc1 = model.predictor_c.forward(tape, &mut Cursor::new(&bound.predictor_c), zo1, Mode::Train)?;
                batches.push(SeqBatch {
                    neighbours: r,
                    injected: None,
                });
                batches.push(SeqBatch {
                    neighbours: &r2_swapped,
                    injected: Some(pc1),
                });
            }
            let c = centroids(model, tape, bound, &batches, k)?;
            let mut l = centroid_loss(tape, c[0], c[1], obj.tau)?;
            if c.len() == 4 {
                let l2 = centroid_loss(tape, c[2], c[3], obj.tau)?;
                let sum = tape.add(l, l2)?;
                l = tape.scale(sum, 0.5);
            }
            terms.centroid = Some(l);
        }
    }

    let (loss, breakdown) = total_loss(tape, terms, obj)?;
    Ok(StepForward {
        loss,
        breakdown,
        momentum_z1: tape.value(zm1).clone(),
        online_z1: tape.value(zo1).clone(),
        retrieval,
        momentum_outputs: [zm1, zm2],
    })
}

/// Per-step record written to the metrics CSV. Terms that were not
/// computed (weight zero or queue warm-up) are `None`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_total: f64,
    pub l_nn: Option<f64>,
    pub l_centroid: Option<f64>,
    pub l_red: Option<f64>,
    pub nn_retrieval_top1: Option<f64>,
    pub lr: f64,
    pub queue_fill: usize,
    pub embedding_std: f64,
}

pub const METRICS_HEADER: &str = "step,l_total,l_nn,l_centroid,l_red,nn_retrieval_top1,lr,queue_fill,embedding_std";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        fn opt(v: Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.l_total,
            opt(self.l_nn),
            opt(self.l_centroid),
            opt(self.l_red),
            opt(self.nn_retrieval_top1),
            self.lr,
            self.queue_fill,
            self.embedding_std
        )
    }
}

/// Mean over dimensions of the per-dimension standard deviation of the
/// row-normalized embeddings; 0 for a collapsed representation.
pub fn embedding_std(z: &Tensor) -> Result<f64> {
    let (n, d) = z.dims2()?;
    if n < 2 {
        return Err(Error::Contract("embedding_std needs at least 2 rows".into()));
    }
    let zn = l2_normalize(z, Axis::Rows)?.tensor;
    let (_, var) = crate::tensor::column_moments(&zn)?;
    Ok(var.iter().map(|v| v.max(0.0).sqrt()).sum::<f64>() / d as f64)
}

/// Mutable training state: parameters, optimizer buffers, queue and RNG.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub queue: SupportSet,
    opt_online: Sgd,
    opt_nn: Sgd,
    opt_c: Sgd,
    opt_psi: Sgd,
    pub step: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Model::new(cfg, &mut init_rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let mu = cfg.sgd_momentum;
        Ok(Trainer {
            queue: SupportSet::new(cfg.queue_capacity, cfg.projection_dim())?,
            opt_online: Sgd::new(&model.online, mu),
            opt_nn: Sgd::new(&model.predictor_nn, mu),
            opt_c: Sgd::new(&model.predictor_c, mu),
            opt_psi: Sgd::new(&model.psi, mu),
            model,
            cfg: cfg.clone(),
            step: 0,
            rng,
        })
    }

    /// Samples a batch and runs one step on two fresh augmentations of it.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepMetrics> {
        let batch = data.sample_batch(self.cfg.batch_size, &mut self.rng)?;
        let grid = match self.cfg.dataset.mode {
            DatasetMode::TinyGrid => Some(grid_side(self.cfg.dataset.input_dim)),
            DatasetMode::GaussianMixture => None,
        };
        let x1 = augment(&batch.inputs, &self.cfg.augmentation, grid, &mut self.rng)?;
        let x2 = augment(&batch.inputs, &self.cfg.augmentation, grid, &mut self.rng)?;
        self.step_on_views(&x1, &x2, &batch.labels)
    }

    /// One optimization step on given views. `labels` only feed the
    /// retrieval metric and ride along in the queue.
    pub fn step_on_views(&mut self, x1: &Tensor, x2: &Tensor, labels: &[usize]) -> Result<StepMetrics> {
        let cfg = &self.cfg;
        if x1.rows() < 2 || x1.shape() != x2.shape() {
            return Err(Error::Contract(format!(
                "step needs two views with N >= 2, got {:?} and {:?}",
                x1.shape(),
                x2.shape()
            )));
        }
        let step = self.step;
        let lr = lr_schedule(step.min(cfg.steps), cfg)?;

        let mut tape = Tape::new();
        let bound = Bound::new(&self.model, &mut tape);
        let fwd = step_objective(&mut self.model, &mut tape, &bound, x1, x2, &self.queue, cfg)?;
        let b = fwd.breakdown;
        if !b.l_total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at step {step}: l_total={} l_nn={:?} l_centroid={:?} l_red={:?}",
                b.l_total, b.l_nn, b.l_centroid, b.l_red
            )));
        }
        let grads = tape.backward(fwd.loss)?;

        for &v in bound.momentum.iter().chain(&fwd.momentum_outputs) {
            let clean = grads.try_get(v).is_none_or(|g| g.data().iter().all(|&x| x == 0.0));
            assert!(clean && !tape.requires_grad(v), "momentum branch received gradient at step {step}");
        }

        let collect = |vars: &[Var]| -> Vec<Tensor> { vars.iter().map(|&v| grads.get(v)).collect() };
        let (g_online, g_nn, g_c, g_psi) = (
            collect(&bound.online),
            collect(&bound.predictor_nn),
            collect(&bound.predictor_c),
            collect(&bound.psi),
        );
        for g in g_online.iter().chain(&g_nn).chain(&g_c).chain(&g_psi) {
            if !g.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at step {step}: l_total={} l_nn={:?} l_centroid={:?} l_red={:?}",
                    b.l_total, b.l_nn, b.l_centroid, b.l_red
                )));
            }
        }
        self.opt_online.step(&mut self.model.online, &g_online, lr)?;
        self.opt_nn.step(&mut self.model.predictor_nn, &g_nn, lr)?;
        self.opt_c.step(&mut self.model.predictor_c, &g_c, lr)?;
        self.opt_psi.step(&mut self.model.psi, &g_psi, transformer_lr(cfg))?;

        let m = cfg.ema.at(step, cfg.steps);
        ema_update(&self.model.online, &mut self.model.momentum, m)?;

        let nn_top1 = match &fwd.retrieval {
            Some(r) => Some(nn_retrieval_accuracy(r, labels, AccuracyMode::Top1)?),
            None => None,
        };
        self.queue.enqueue_batch(&fwd.momentum_z1, Some(labels))?;
        self.step += 1;

        Ok(StepMetrics {
            step,
            l_total: b.l_total,
            l_nn: b.l_nn,
            l_centroid: b.l_centroid,
            l_red: b.l_red,
            nn_retrieval_top1: nn_top1,
            lr,
            queue_fill: self.queue.len(),
            embedding_std: embedding_std(&fwd.online_z1)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::EmaSchedule;
    use crate::training::data::{synthesize_dataset, Split};
    use crate::training::model::tests::tiny_config;

    fn run(cfg: &TrainConfig, steps: usize) -> (Trainer, Vec<StepMetrics>) {
        let data = synthesize_dataset(&cfg.dataset, Split::Train).unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        let metrics = (0..steps).map(|_| t.train_step(&data).unwrap()).collect();
        (t, metrics)
    }

    #[test]
    fn warm_up_step_uses_redundancy_only() {
        let (t, m) = run(&tiny_config(), 1);
        assert_eq!(m[0].l_nn, None);
        assert_eq!(m[0].l_centroid, None);
        assert_eq!(m[0].nn_retrieval_top1, None);
        assert!(m[0].l_red.unwrap().is_finite());
        assert_eq!(m[0].queue_fill, 8);
        assert_eq!(t.step, 1);
    }

    #[test]
    fn all_terms_active_once_queue_holds_k() {
        let (_, m) = run(&tiny_config(), 3);
        for s in &m[1..] {
            assert!(s.l_nn.unwrap().is_finite());
            assert!(s.l_centroid.unwrap().is_finite());
            assert!(s.l_red.unwrap().is_finite());
            let acc = s.nn_retrieval_top1.unwrap();
            assert!((0.0..=1.0).contains(&acc));
        }
    }

    #[test]
    fn queue_fill_is_capped() {
        let (t, m) = run(&tiny_config(), 6);
        let fills: Vec<usize> = m.iter().map(|s| s.queue_fill).collect();
        assert_eq!(fills, vec![8, 16, 24, 32, 32, 32]);
        assert_eq!(t.queue.len(), 32);
    }

    #[test]
    fn every_trained_group_moves() {
        let cfg = tiny_config();
        let before = Trainer::new(&cfg).unwrap().model;
        let (t, _) = run(&cfg, 3);
        assert_ne!(t.model.online, before.online);
        assert_ne!(t.model.predictor_nn, before.predictor_nn);
        assert_ne!(t.model.predictor_c, before.predictor_c);
        assert_ne!(t.model.psi, before.psi);
    }

    #[test]
    fn momentum_branch_gets_no_gradient() {
        let cfg = tiny_config();
        let (mut t, _) = run(&cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x1 = Tensor::randn(&[8, 6], &mut rng);
        let x2 = Tensor::randn(&[8, 6], &mut rng);
        let mut tape = Tape::new();
        let bound = Bound::new(&t.model, &mut tape);
        let fwd = step_objective(&mut t.model, &mut tape, &bound, &x1, &x2, &t.queue, &cfg).unwrap();
        assert!(fwd.breakdown.l_centroid.is_some());
        let g = tape.backward(fwd.loss).unwrap();
        for &v in bound.momentum.iter().chain(&fwd.momentum_outputs) {
            assert!(g.try_get(v).is_none());
        }
        assert!(bound.online.iter().any(|&v| g.try_get(v).is_some()));
    }

    #[test]
    fn ema_extremes_are_bit_exact() {
        let mut cfg = tiny_config();
        cfg.ema.schedule = EmaSchedule::Fixed;
        cfg.ema.m = 1.0;
        let init = Trainer::new(&cfg).unwrap().model.momentum;
        let (t, _) = run(&cfg, 3);
        assert_eq!(t.model.momentum.param_tensors(), init.param_tensors());

        cfg.ema.m = 0.0;
        let data = synthesize_dataset(&cfg.dataset, Split::Train).unwrap();
        let mut t = Trainer::new(&cfg).unwrap();
        for _ in 0..3 {
            t.train_step(&data).unwrap();
            assert_eq!(t.model.momentum.param_tensors(), t.model.online.param_tensors());
        }
    }

    #[test]
    fn ablated_terms_are_absent() {
        for (nn, c, red) in [(true, false, true), (false, true, true), (true, true, false), (false, false, true)] {
            let mut cfg = tiny_config();
            cfg.objective = cfg.objective.with_terms(nn, c, red);
            let (_, m) = run(&cfg, 3);
            let last = m.last().unwrap();
            assert_eq!(last.l_nn.is_some(), nn);
            assert_eq!(last.l_centroid.is_some(), c);
            assert_eq!(last.l_red.is_some(), red);
            assert!(last.l_total.is_finite());
        }
    }

    #[test]
    fn one_sided_objective_runs() {
        let mut cfg = tiny_config();
        cfg.objective.symmetrize = false;
        let (_, m) = run(&cfg, 3);
        assert!(m[2].l_centroid.unwrap().is_finite());
    }

    #[test]
    fn same_seed_same_metrics() {
        let cfg = tiny_config();
        let (a, ma) = run(&cfg, 4);
        let (b, mb) = run(&cfg, 4);
        assert_eq!(ma, mb);
        assert_eq!(a.model, b.model);
        let mut other = cfg.clone();
        other.seed = 1;
        let (_, mc) = run(&other, 4);
        assert_ne!(ma, mc);
    }

    #[test]
    fn csv_row_leaves_missing_terms_empty() {
        let m = StepMetrics {
            step: 3,
            l_total: 1.5,
            l_nn: None,
            l_centroid: Some(0.25),
            l_red: None,
            nn_retrieval_top1: None,
            lr: 0.1,
            queue_fill: 8,
            embedding_std: 0.5,
        };
        assert_eq!(m.csv_row(), "3,1.5,,0.25,,,0.1,8,0.5");
        assert_eq!(METRICS_HEADER.split(',').count(), m.csv_row().split(',').count());
    }

    #[test]
    fn collapsed_embedding_has_zero_std() {
        let z = Tensor::from_rows(&[[1.0, 2.0], [1.0, 2.0], [2.0, 4.0]]).unwrap();
        assert!(embedding_std(&z).unwrap().abs() < 1e-12);
        let spread = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!((embedding_std(&spread).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mismatched_views_rejected() {
        let cfg = tiny_config();
        let mut t = Trainer::new(&cfg).unwrap();
        let a = Tensor::zeros(&[4, 6]);
        let b = Tensor::zeros(&[5, 6]);
        assert!(t.step_on_views(&a, &b, &[0; 4]).is_err());
        let one = Tensor::zeros(&[1, 6]);
        assert!(t.step_on_views(&one, &one, &[0]).is_err());
    }
}
