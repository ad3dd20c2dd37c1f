use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::TransformerSpec;
use crate::error::{Error, Result};
use crate::nn::EmaParams;
use crate::objectives::ObjectiveParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetMode {
    /// Isotropic Gaussian clusters around class means on a sphere.
    GaussianMixture,
    /// Small square images built from per-class templates, flattened.
    TinyGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub mode: DatasetMode,
    pub num_classes: usize,
    /// Training samples; held-out splits are drawn separately.
    pub samples: usize,
    pub test_samples: usize,
    /// Flattened input width; a perfect square in grid mode.
    pub input_dim: usize,
    pub cluster_std: f64,
    /// Radius of the sphere carrying the class means.
    pub radius: f64,
    /// Seed for class means / templates and sample noise.
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            mode: DatasetMode::GaussianMixture,
            num_classes: 8,
            samples: 4096,
            test_samples: 1024,
            input_dim: 32,
            cluster_std: 1.0,
            radius: 4.0,
            seed: 7,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.samples < self.num_classes || self.input_dim == 0 {
            return Err(Error::Config(format!(
                "dataset needs samples >= classes and a positive input width, got {} samples, width {}",
                self.samples, self.input_dim
            )));
        }
        if !(self.cluster_std >= 0.0 && self.cluster_std.is_finite() && self.radius.is_finite()) {
            return Err(Error::Config("cluster_std and radius must be finite, cluster_std >= 0".into()));
        }
        if self.mode == DatasetMode::TinyGrid {
            let side = grid_side(self.input_dim);
            if side * side != self.input_dim || side < 2 {
                return Err(Error::Config(format!(
                    "tiny-grid input_dim must be a square >= 4, got {}",
                    self.input_dim
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: DatasetSpec =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }
}

pub(crate) fn grid_side(input_dim: usize) -> usize {
    (input_dim as f64).sqrt().round() as usize
}

/// View distortions; every field at zero is the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    pub gaussian_noise_std: f64,
    pub coordinate_mask_prob: f64,
    /// Half-width `s` of the per-sample scale factor drawn from `[1-s, 1+s]`.
    pub random_scale_range: f64,
    /// Fraction of the grid side removed by the crop (grid mode only).
    pub crop_fraction: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            gaussian_noise_std: 0.5,
            coordinate_mask_prob: 0.2,
            random_scale_range: 0.2,
            crop_fraction: 0.0,
        }
    }
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        AugmentationSpec {
            gaussian_noise_std: 0.0,
            coordinate_mask_prob: 0.0,
            random_scale_range: 0.0,
            crop_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gaussian_noise_std >= 0.0
            && self.gaussian_noise_std.is_finite()
            && (0.0..=1.0).contains(&self.coordinate_mask_prob)
            && (0.0..=1.0).contains(&self.random_scale_range)
            && (0.0..1.0).contains(&self.crop_fraction);
        if !ok {
            return Err(Error::Config(format!("invalid augmentation spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: Option<usize>,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            num_layers: 3,
            num_heads: 8,
            ff_dim: None,
        }
    }
}

/// Everything a training run depends on. Loaded from one JSON document;
/// missing keys take defaults, unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub dataset: DatasetSpec,
    pub batch_size: usize,
    pub steps: usize,
    /// Neighbours per sequence.
    pub k: usize,
    pub queue_capacity: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    /// Constant rate for the transformer encoder.
    pub transformer_lr: f64,
    pub sgd_momentum: f64,
    pub ema: EmaParams,
    pub objective: ObjectiveParams,
    pub augmentation: AugmentationSpec,
    pub backbone_widths: Vec<usize>,
    pub projector_widths: Vec<usize>,
    pub predictor_widths: Vec<usize>,
    pub transformer: TransformerConfig,
    /// Neighbours used by the kNN probe in the final report.
    pub probe_k: usize,
    pub linear_probe_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: DatasetSpec::default(),
            batch_size: 128,
            steps: 2000,
            k: 5,
            queue_capacity: 4096,
            base_lr: 1.0,
            warmup_steps: 200,
            transformer_lr: 0.1,
            sgd_momentum: 0.9,
            ema: EmaParams::default(),
            objective: ObjectiveParams::default(),
            augmentation: AugmentationSpec::default(),
            backbone_widths: vec![128, 128],
            projector_widths: vec![256, 256, 64],
            predictor_widths: vec![512, 64],
            transformer: TransformerConfig::default(),
            probe_k: 5,
            linear_probe_epochs: 300,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Projection width shared by the projectors, predictors and ψ.
    pub fn projection_dim(&self) -> usize {
        self.projector_widths.last().copied().unwrap_or(0)
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone_widths.last().copied().unwrap_or(self.dataset.input_dim)
    }

    pub fn transformer_spec(&self) -> TransformerSpec {
        TransformerSpec {
            num_layers: self.transformer.num_layers,
            num_heads: self.transformer.num_heads,
            model_dim: self.projection_dim(),
            ff_dim: self.transformer.ff_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.augmentation.validate()?;
        self.objective.validate()?;
        self.ema.validate()?;
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.batch_size > self.dataset.samples {
            return Err(Error::Config(format!(
                "batch_size {} exceeds dataset size {}",
                self.batch_size, self.dataset.samples
            )));
        }
        if self.steps > 0 && self.warmup_steps >= self.steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if self.queue_capacity < self.k {
            return Err(Error::Config(format!(
                "queue capacity {} cannot hold k = {} neighbours",
                self.queue_capacity, self.k
            )));
        }
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("transformer_lr", self.transformer_lr),
            ("sgd_momentum", self.sgd_momentum),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if self.sgd_momentum >= 1.0 {
            return Err(Error::Config("sgd_momentum must be below 1".into()));
        }
        if self.projector_widths.is_empty() || self.predictor_widths.last() != self.projector_widths.last() {
            return Err(Error::Config(format!(
                "predictor output {:?} must match projector output {:?}",
                self.predictor_widths.last(),
                self.projector_widths.last()
            )));
        }
        if self.projection_dim() < 2 {
            return Err(Error::Config("projection dim must be at least 2".into()));
        }
        if self.probe_k == 0 {
            return Err(Error::Config("probe_k must be at least 1".into()));
        }
        self.transformer_spec()
            .validate()
            .map_err(|e| Error::Config(format!("transformer: {e}")))
    }
}
