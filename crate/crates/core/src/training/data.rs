use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{grid_side, AugmentationSpec, DatasetMode, DatasetSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labelled inputs, one sample per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows at `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        let d = self.inputs.cols();
        let mut data = Vec::with_capacity(idx.len() * d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(self.inputs.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            inputs: Tensor::new(vec![idx.len(), d], data).expect("non-empty selection"),
            labels,
        }
    }

    /// `n` distinct random rows.
    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Dataset> {
        if n > self.len() {
            return Err(Error::Contract(format!("batch of {n} from {} samples", self.len())));
        }
        let idx = index::sample(rng, self.len(), n).into_vec();
        Ok(self.select(&idx))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Class prototypes (means or templates) shared by every split.
fn prototypes(spec: &DatasetSpec) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.input_dim;
    (0..spec.num_classes)
        .map(|_| {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            if spec.mode == DatasetMode::TinyGrid {
                v = box_blur(&v, grid_side(d));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.iter().map(|x| spec.radius * x / norm).collect()
        })
        .collect()
}

fn box_blur(img: &[f64], side: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for r in 0..side {
        for c in 0..side {
            let mut acc = 0.0;
            for dr in [side - 1, 0, 1] {
                for dc in [side - 1, 0, 1] {
                    acc += img[((r + dr) % side) * side + (c + dc) % side];
                }
            }
            out[r * side + c] = acc / 9.0;
        }
    }
    out
}

/// Class-balanced synthetic data. Class `i mod C` sits at row `i`, so every
/// class gets `M / C` rows (the first `M mod C` classes one more).
pub fn synthesize_dataset(spec: &DatasetSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let protos = prototypes(spec);
    let (m, stream) = match split {
        Split::Train => (spec.samples, 1),
        Split::Test => (spec.test_samples, 2),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let d = spec.input_dim;
    let side = grid_side(d);
    let mut data = Vec::with_capacity(m * d);
    let mut labels = Vec::with_capacity(m);
    for i in 0..m {
        let class = i % spec.num_classes;
        let proto = &protos[class];
        match spec.mode {
            DatasetMode::GaussianMixture => {
                for &mu in proto {
                    let z: f64 = rng.sample(StandardNormal);
                    data.push(mu + spec.cluster_std * z);
                }
            }
            DatasetMode::TinyGrid => {
                let (dr, dc) = (rng.gen_range(0..3), rng.gen_range(0..3));
                for r in 0..side {
                    for c in 0..side {
                        let src = ((r + side + dr - 1) % side) * side + (c + side + dc - 1) % side;
                        let z: f64 = rng.sample(StandardNormal);
                        data.push(proto[src] + spec.cluster_std * z);
                    }
                }
            }
        }
        labels.push(class);
    }
    Ok(Dataset {
        inputs: Tensor::new(vec![m, d], data)?,
        labels,
    })
}

/// One random view: per-sample scale, additive noise, coordinate masking,
/// then (grid inputs only) a crop resized back to the full grid.
pub fn augment<R: Rng + ?Sized>(x: &Tensor, spec: &AugmentationSpec, grid: Option<usize>, rng: &mut R) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    if !x.all_finite() {
        return Err(Error::Numeric("augmentation input is not finite".into()));
    }
    let mut out = x.clone();
    let crop = match grid {
        Some(side) if spec.crop_fraction > 0.0 => {
            if side * side != d {
                return Err(Error::shape("grid crop", x.shape(), &[side, side]));
            }
            Some(side)
        }
        _ => None,
    };
    for i in 0..n {
        let row = &mut out.data_mut()[i * d..(i + 1) * d];
        if spec.random_scale_range > 0.0 {
            let s = spec.random_scale_range;
            let factor = rng.gen_range(1.0 - s..=1.0 + s);
            row.iter_mut().for_each(|v| *v *= factor);
        }
        if spec.gaussian_noise_std > 0.0 {
            for v in row.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += spec.gaussian_noise_std * z;
            }
        }
        if spec.coordinate_mask_prob > 0.0 {
            for v in row.iter_mut() {
                if rng.gen_bool(spec.coordinate_mask_prob) {
                    *v = 0.0;
                }
            }
        }
        if let Some(side) = crop {
            let w = ((side as f64 * (1.0 - spec.crop_fraction)).round() as usize).clamp(1, side);
            let (r0, c0) = (rng.gen_range(0..=side - w), rng.gen_range(0..=side - w));
            let src = row.to_vec();
            for r in 0..side {
                for c in 0..side {
                    let sr = r0 + r * w / side;
                    let sc = c0 + c * w / side;
                    row[r * side + c] = src[sr * side + sc];
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(classes: usize, samples: usize, std: f64) -> DatasetSpec {
        DatasetSpec {
            num_classes: classes,
            samples,
            cluster_std: std,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn zero_std_samples_sit_on_their_class_mean() {
        let ds = synthesize_dataset(&spec(2, 10, 0.0), Split::Train).unwrap();
        for i in 2..10 {
            assert_eq!(ds.inputs.row(i), ds.inputs.row(i % 2));
        }
        assert_ne!(ds.inputs.row(0), ds.inputs.row(1));
        let norm: f64 = ds.inputs.row(0).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - DatasetSpec::default().radius).abs() < 1e-12);
    }

    #[test]
    fn fixed_seed_is_reproducible_and_splits_share_means() {
        let s = spec(4, 64, 0.5);
        assert_eq!(synthesize_dataset(&s, Split::Train).unwrap(), synthesize_dataset(&s, Split::Train).unwrap());
        let test = synthesize_dataset(&s, Split::Test).unwrap();
        assert_ne!(test.inputs.row(0), synthesize_dataset(&s, Split::Train).unwrap().inputs.row(0));
        let zero = spec(4, 64, 0.0);
        assert_eq!(
            synthesize_dataset(&zero, Split::Test).unwrap().inputs.row(1),
            synthesize_dataset(&zero, Split::Train).unwrap().inputs.row(1)
        );
    }

    #[test]
    fn classes_are_balanced() {
        let ds = synthesize_dataset(&spec(8, 4096, 1.0), Split::Train).unwrap();
        for c in 0..8 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == c).count(), 512);
        }
    }

    #[test]
    fn grid_mode_produces_square_images() {
        let s = DatasetSpec {
            mode: DatasetMode::TinyGrid,
            input_dim: 36,
            samples: 30,
            num_classes: 3,
            ..DatasetSpec::default()
        };
        let ds = synthesize_dataset(&s, Split::Train).unwrap();
        assert_eq!(ds.inputs.shape(), &[30, 36]);
        assert!(ds.inputs.all_finite());
        assert!(synthesize_dataset(&DatasetSpec { input_dim: 35, ..s }, Split::Train).is_err());
    }

    #[test]
    fn identity_augmentation_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::randn(&[6, 16], &mut rng);
        let id = AugmentationSpec::identity();
        assert_eq!(augment(&x, &id, None, &mut rng).unwrap(), x);
        assert_eq!(augment(&x, &id, Some(4), &mut rng).unwrap(), x);
    }

    #[test]
    fn full_mask_zeroes_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[4, 8], &mut rng);
        let spec = AugmentationSpec {
            coordinate_mask_prob: 1.0,
            ..AugmentationSpec::identity()
        };
        assert!(augment(&x, &spec, None, &mut rng).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn noise_variance_matches_its_std() {
        let x = Tensor::zeros(&[100, 100]);
        let spec = AugmentationSpec {
            gaussian_noise_std: 0.1,
            ..AugmentationSpec::identity()
        };
        let a = augment(&x, &spec, None, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = augment(&x, &spec, None, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let n = a.len() as f64;
        let mean = a.sum() / n;
        let var = a.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 0.01).abs() < 0.002, "{var}");
    }

    #[test]
    fn scale_stays_in_range() {
        let x = Tensor::ones(&[200, 3]);
        let spec = AugmentationSpec {
            random_scale_range: 0.25,
            ..AugmentationSpec::identity()
        };
        let a = augment(&x, &spec, None, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for i in 0..200 {
            let r = a.row(i);
            assert!(r[0] >= 0.75 && r[0] <= 1.25);
            assert!(r.iter().all(|&v| v == r[0]));
        }
    }

    #[test]
    fn crop_resamples_from_a_window() {
        let side = 4;
        let x = Tensor::new(vec![1, 16], (0..16).map(f64::from).collect()).unwrap();
        let spec = AugmentationSpec {
            crop_fraction: 0.5,
            ..AugmentationSpec::identity()
        };
        let a = augment(&x, &spec, Some(side), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut distinct: Vec<i64> = a.data().iter().map(|&v| v as i64).collect();
        distinct.sort_unstable();
        distinct.dedup();
        assert_eq!(distinct.len(), 4);
        let (r0, c0) = (distinct[0] / 4, distinct[0] % 4);
        assert_eq!(distinct, vec![r0 * 4 + c0, r0 * 4 + c0 + 1, (r0 + 1) * 4 + c0, (r0 + 1) * 4 + c0 + 1]);
    }
}
