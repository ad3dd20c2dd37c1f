use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::attention::TransformerEncoder;
use crate::error::{Error, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{join, Cursor, Mlp, MlpSpec, Mode, Module, Slot};
use crate::support_set::SupportSet;
use crate::tensor::{Tape, Tensor, Var};

/// Backbone followed by projector.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub encoder: Mlp,
    pub projector: Mlp,
}

impl Branch {
    pub fn new<R: Rng + ?Sized>(cfg: &TrainConfig, rng: &mut R) -> Result<Self> {
        let projector_spec = MlpSpec::new(cfg.feature_dim(), &cfg.projector_widths);
        let mut encoder_spec = MlpSpec::new(cfg.dataset.input_dim, &cfg.backbone_widths);
        if projector_spec.layer_widths.len() > 1 && projector_spec.batchnorm_after_hidden {
            encoder_spec = encoder_spec.without_final_bias();
        }
        let encoder = Mlp::new(&encoder_spec, rng)?;
        let projector = Mlp::new(&projector_spec, rng)?;
        Ok(Branch { encoder, projector })
    }

    /// Returns `(features, projection)`.
    pub fn forward(&mut self, tape: &mut Tape, params: &mut Cursor<'_>, x: Var, mode: Mode) -> Result<(Var, Var)> {
        let h = self.encoder.forward(tape, params, x, mode)?;
        let z = self.projector.forward(tape, params, h, mode)?;
        Ok((h, z))
    }

    /// Gradient-free forward; returns `(features, projection)`.
    pub fn infer(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let h = self.encoder.infer(x, mode)?;
        let z = self.projector.infer(&h, mode)?;
        Ok((h, z))
    }
}

impl Module for Branch {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot, &Tensor)) {
        self.encoder.for_each(&join(prefix, "encoder"), f);
        self.projector.for_each(&join(prefix, "projector"), f);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot, &mut Tensor)) {
        self.encoder.for_each_mut(&join(prefix, "encoder"), f);
        self.projector.for_each_mut(&join(prefix, "projector"), f);
    }
}

/// Every learned tensor of the method: online and momentum branches, the two
/// online predictors and the shared transformer encoder ψ.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub online: Branch,
    pub momentum: Branch,
    /// Feeds the neighbour contrast.
    pub predictor_nn: Mlp,
    /// Feeds the injected element of the shifted sequences.
    pub predictor_c: Mlp,
    pub psi: TransformerEncoder,
}

pub(crate) const PARTS: [&str; 5] = ["online", "momentum", "predictor_nn", "predictor_c", "psi"];

impl Model {
    /// Fresh parameters; the momentum branch starts as an exact copy of the
    /// online branch.
    pub fn new<R: Rng + ?Sized>(cfg: &TrainConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let online = Branch::new(cfg, rng)?;
        let momentum = online.clone();
        let d = cfg.projection_dim();
        let predictor_nn = Mlp::new(&MlpSpec::new(d, &cfg.predictor_widths), rng)?;
        let predictor_c = Mlp::new(&MlpSpec::new(d, &cfg.predictor_widths), rng)?;
        let psi = TransformerEncoder::new(&cfg.transformer_spec(), rng)?;
        Ok(Model {
            online,
            momentum,
            predictor_nn,
            predictor_c,
            psi,
        })
    }

    /// Online projector output (and backbone features) with running
    /// statistics; leaves the model untouched.
    pub fn embed(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.online.clone().infer(x, Mode::Eval)
    }
}

impl Module for Model {
    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(&str, Slot, &Tensor)) {
        self.online.for_each(&join(prefix, PARTS[0]), f);
        self.momentum.for_each(&join(prefix, PARTS[1]), f);
        self.predictor_nn.for_each(&join(prefix, PARTS[2]), f);
        self.predictor_c.for_each(&join(prefix, PARTS[3]), f);
        self.psi.for_each(&join(prefix, PARTS[4]), f);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot, &mut Tensor)) {
        self.online.for_each_mut(&join(prefix, PARTS[0]), f);
        self.momentum.for_each_mut(&join(prefix, PARTS[1]), f);
        self.predictor_nn.for_each_mut(&join(prefix, PARTS[2]), f);
        self.predictor_c.for_each_mut(&join(prefix, PARTS[3]), f);
        self.psi.for_each_mut(&join(prefix, PARTS[4]), f);
    }
}

/// JSON header stored inside checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: String,
    pub step: usize,
    pub config: TrainConfig,
}

pub const CHECKPOINT_FORMAT: &str = "tricontrast-train-v1";

/// Model parameters, buffers and the support-set snapshot.
pub fn to_checkpoint(model: &Model, queue: &SupportSet, cfg: &TrainConfig, step: usize) -> Checkpoint {
    let meta = CheckpointMeta {
        format: CHECKPOINT_FORMAT.into(),
        step,
        config: cfg.clone(),
    };
    let mut ck = Checkpoint::new(serde_json::to_string(&meta).expect("metadata serializes"));
    ck.push_module("", model);
    if let Some((v, l, s)) = queue.snapshot() {
        ck.push("queue.vectors", v);
        ck.push("queue.labels", l);
        ck.push("queue.ids", s);
    }
    ck
}

/// Inverse of [`to_checkpoint`]: rebuilds the model from the stored config,
/// then overwrites every tensor.
pub fn from_checkpoint(ck: &Checkpoint) -> Result<(CheckpointMeta, Model, SupportSet)> {
    let meta: CheckpointMeta =
        serde_json::from_str(&ck.metadata).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown checkpoint format {:?}", meta.format)));
    }
    let cfg = &meta.config;
    // Shapes only; every value is overwritten below.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::new(cfg, &mut rng)?;
    ck.load_module("", &mut model)?;
    let queue = match (ck.get("queue.vectors"), ck.get("queue.labels"), ck.get("queue.ids")) {
        (Some(v), Some(l), Some(s)) => SupportSet::restore(cfg.queue_capacity, v, l, s)?,
        (None, None, None) => SupportSet::new(cfg.queue_capacity, cfg.projection_dim())?,
        _ => return Err(Error::Checkpoint("incomplete queue snapshot".into())),
    };
    if queue.dim() != cfg.projection_dim() {
        return Err(Error::Checkpoint(format!(
            "queue width {} does not match projection width {}",
            queue.dim(),
            cfg.projection_dim()
        )));
    }
    Ok((meta, model, queue))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.dataset.samples = 64;
        cfg.dataset.input_dim = 6;
        cfg.backbone_widths = vec![12, 10];
        cfg.projector_widths = vec![12, 8];
        cfg.predictor_widths = vec![12, 8];
        cfg.transformer.num_layers = 2;
        cfg.transformer.num_heads = 2;
        cfg.batch_size = 8;
        cfg.steps = 10;
        cfg.warmup_steps = 2;
        cfg.k = 3;
        cfg.queue_capacity = 32;
        cfg
    }

    #[test]
    fn momentum_starts_as_online_copy() {
        let m = Model::new(&tiny_config(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.online, m.momentum);
        assert_ne!(m.predictor_nn, m.predictor_c);
    }

    #[test]
    fn backbone_shapes_and_determinism() {
        let cfg = tiny_config();
        let a = Model::new(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = Model::new(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let x = Tensor::randn(&[5, 6], &mut ChaCha8Rng::seed_from_u64(4));
        let (ha, za) = a.embed(&x).unwrap();
        let (hb, zb) = b.embed(&x).unwrap();
        assert_eq!(ha.shape(), &[5, 10]);
        assert_eq!(za.shape(), &[5, 8]);
        assert_eq!((ha, za), (hb, zb));
    }

    #[test]
    fn identity_backbone_passes_input_through() {
        let mut cfg = tiny_config();
        cfg.backbone_widths = vec![6];
        let mut m = Model::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        m.online.encoder.linears[0].weight = Tensor::eye(6);
        if let Some(b) = m.online.encoder.linears[0].bias.as_mut() {
            b.data_mut().fill(0.0);
        }
        let x = Tensor::randn(&[3, 6], &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(m.embed(&x).unwrap().0, x);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny_config();
        let model = Model::new(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut q = SupportSet::new(cfg.queue_capacity, 8).unwrap();
        q.enqueue_batch(&Tensor::randn(&[5, 8], &mut ChaCha8Rng::seed_from_u64(6)), Some(&[0, 1, 2, 3, 4]))
            .unwrap();
        let ck = to_checkpoint(&model, &q, &cfg, 17);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let (meta, m2, q2) = from_checkpoint(&back).unwrap();
        assert_eq!(meta.step, 17);
        assert_eq!(meta.config, cfg);
        assert_eq!(m2, model);
        assert_eq!(q2.entries().collect::<Vec<_>>(), q.entries().collect::<Vec<_>>());

        let empty = to_checkpoint(&model, &SupportSet::new(cfg.queue_capacity, 8).unwrap(), &cfg, 0);
        assert!(from_checkpoint(&empty).unwrap().2.is_empty());
    }
}
