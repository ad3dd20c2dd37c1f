use serde::{Deserialize, Serialize};

use super::Module;
use crate::error::{Error, Result};

/// How the momentum coefficient evolves over training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmaSchedule {
    Fixed,
    /// `m_t = 1 - (1 - m)(cos(πt/T) + 1)/2`, rising to 1 at the last step.
    CosineToOne,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmaParams {
    pub m: f64,
    pub schedule: EmaSchedule,
}

impl Default for EmaParams {
    fn default() -> Self {
        EmaParams {
            m: 0.996,
            schedule: EmaSchedule::Fixed,
        }
    }
}

impl EmaParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.m) {
            return Err(Error::Config(format!("EMA coefficient {} outside [0, 1]", self.m)));
        }
        Ok(())
    }

    /// Coefficient for `step` out of `total_steps`.
    pub fn at(&self, step: usize, total_steps: usize) -> f64 {
        match self.schedule {
            EmaSchedule::Fixed => self.m,
            EmaSchedule::CosineToOne => {
                if total_steps == 0 {
                    return self.m;
                }
                let t = (step.min(total_steps) as f64) / total_steps as f64;
                1.0 - (1.0 - self.m) * ((std::f64::consts::PI * t).cos() + 1.0) / 2.0
            }
        }
    }
}

/// `ξ ← m·ξ + (1 − m)·θ` over every parameter pair, outside any tape.
///
/// `m = 1` and `m = 0` are exact copies; otherwise each result is clamped to
/// the closed interval between the old momentum value and the online value.
pub fn ema_update<M: Module>(online: &M, momentum: &mut M, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::Contract(format!("EMA coefficient {m} outside [0, 1]")));
    }
    let theta = online.param_tensors();
    let mut shapes_ok = true;
    let mut count = 0;
    momentum.for_each("", &mut |_, slot, t| {
        if slot == super::Slot::Param {
            if count >= theta.len() || theta[count].shape() != t.shape() {
                shapes_ok = false;
            }
            count += 1;
        }
    });
    if !shapes_ok || count != theta.len() {
        return Err(Error::Contract("online and momentum parameter shapes differ".into()));
    }
    momentum.update_params(&theta, &mut |xi, th| {
        if m == 1.0 {
            return;
        }
        if m == 0.0 {
            xi.data_mut().copy_from_slice(th.data());
            return;
        }
        for (x, &t) in xi.data_mut().iter_mut().zip(th.data()) {
            let v = m * *x + (1.0 - m) * t;
            let (lo, hi) = if *x <= t { (*x, t) } else { (t, *x) };
            *x = v.clamp(lo, hi);
        }
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Mlp, MlpSpec};
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(seed: u64) -> (Mlp, Mlp) {
        let spec = MlpSpec::new(3, &[4, 2]);
        let a = Mlp::new(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = Mlp::new(&spec, &mut ChaCha8Rng::seed_from_u64(seed + 100)).unwrap();
        (a, b)
    }

    #[test]
    fn m_one_leaves_momentum_bit_identical() {
        let (online, mut momentum) = pair(1);
        let before = momentum.clone();
        ema_update(&online, &mut momentum, 1.0).unwrap();
        assert_eq!(momentum, before);
    }

    #[test]
    fn m_zero_copies_online() {
        let (online, mut momentum) = pair(2);
        ema_update(&online, &mut momentum, 0.0).unwrap();
        assert_eq!(momentum.param_tensors(), online.param_tensors());
    }

    #[test]
    fn scalar_rule() {
        let spec = MlpSpec::new(1, &[1]);
        let mut online = Mlp::new(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut momentum = online.clone();
        online.linears[0].weight = Tensor::zeros(&[1, 1]);
        momentum.linears[0].weight = Tensor::ones(&[1, 1]);
        ema_update(&online, &mut momentum, 0.9).unwrap();
        assert!((momentum.linears[0].weight.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Mlp::new(&MlpSpec::new(3, &[4, 2]), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut b = Mlp::new(&MlpSpec::new(3, &[5, 2]), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(ema_update(&a, &mut b, 0.5).is_err());
    }

    #[test]
    fn cosine_schedule_is_monotone_and_ends_at_one() {
        let ema = EmaParams {
            m: 0.99,
            schedule: EmaSchedule::CosineToOne,
        };
        let values: Vec<f64> = (0..=100).map(|s| ema.at(s, 100)).collect();
        assert!((values[0] - 0.99).abs() < 1e-15);
        assert!((values[100] - 1.0).abs() < 1e-15);
        assert!(values.windows(2).all(|w| w[1] >= w[0]));
    }

    proptest! {
        #[test]
        fn update_stays_between_old_and_online(seed in 0u64..1000, m in 0.0f64..1.0) {
            let (online, mut momentum) = pair(seed);
            let before = momentum.param_tensors();
            ema_update(&online, &mut momentum, m).unwrap();
            let theta = online.param_tensors();
            for ((new, old), th) in momentum.param_tensors().iter().zip(&before).zip(&theta) {
                for ((n, o), t) in new.data().iter().zip(old.data()).zip(th.data()) {
                    prop_assert!(*n >= o.min(*t) && *n <= o.max(*t));
                }
            }
        }
    }
}
