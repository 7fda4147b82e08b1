//! Adam with decoupled weight decay, and the training loop.

mod train;

pub use train::{
    batch_input, predict, run_seeds, scored_set, select_best, train, train_observed, LogRecord, SeedRun, SeedRuns,
    TrainConfig, TrainOutcome, Trainer, AugmentConfig,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Parameters;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 1e-4 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Moment estimates for every parameter tensor, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Scalar = f32> {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: AdamWConfig, params: &[Tensor<T>]) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor<T>> = params.iter().map(Tensor::zeros_like).collect();
        Ok(OptimizerState { config, step: 0, first_moment: zeros.clone(), second_moment: zeros })
    }

    pub fn for_parameters(config: AdamWConfig, params: &Parameters<T>) -> Result<Self> {
        Self::new(config, &params.tensors)
    }
}

/// One AdamW update in place.
///
/// `m = b1 m + (1 - b1) g`, `v = b2 v + (1 - b2) g^2`, then with bias
/// corrections `theta -= lr (m_hat / (sqrt(v_hat) + eps) + wd theta)`. Decay
/// is applied to the parameter directly, never folded into the gradient.
/// Any non-finite gradient aborts the step before anything changes.
pub fn adamw_step<T: Scalar>(params: &mut [Tensor<T>], grads: &[Tensor<T>], state: &mut OptimizerState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} gradients, {} moment tensors",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dims() != g.dims() || p.dims() != state.first_moment[i].dims() {
            return Err(Error::shape(format!("tensor {i}: parameter {:?}, gradient {:?}", p.dims(), g.dims())));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter tensor {i} at step {}", state.step + 1)));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let b1 = T::from_f64(c.beta1);
    let b2 = T::from_f64(c.beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - c.beta1.powi(t));
    let bc2 = T::from_f64(1.0 - c.beta2.powi(t));
    let lr = T::from_f64(c.learning_rate);
    let eps = T::from_f64(c.epsilon);
    let wd = T::from_f64(c.weight_decay);
    let decay = c.weight_decay != 0.0;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (k, (theta, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[k] = b1 * m[k] + (one - b1) * gk;
            v[k] = b2 * v[k] + (one - b2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            let mut update = m_hat / (v_hat.sqrt() + eps);
            if decay {
                update += wd * *theta;
            }
            *theta -= lr * update;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(x: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::from_vec(vec![1], vec![x]).unwrap()]
    }

    /// Textbook Adam, written independently.
    fn plain_adam(theta: &mut [f64], grads: &[Vec<f64>], lr: f64, b1: f64, b2: f64, eps: f64) {
        let mut m = vec![0.0; theta.len()];
        let mut v = vec![0.0; theta.len()];
        for (t, g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            for k in 0..theta.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let mh = m[k] / (1.0 - b1.powi(t));
                let vh = v[k] / (1.0 - b2.powi(t));
                theta[k] -= lr * (mh / (vh.sqrt() + eps));
            }
        }
    }

    proptest! {
        #[test]
        fn without_decay_matches_plain_adam_bitwise(
            init in proptest::collection::vec(-3.0f64..3.0, 4),
            grads in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 4), 1..30),
        ) {
            let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
            let mut p = vec![Tensor::from_vec(vec![4], init.clone()).unwrap()];
            let mut st = OptimizerState::new(cfg, &p).unwrap();
            for g in &grads {
                adamw_step(&mut p, &[Tensor::from_vec(vec![4], g.clone()).unwrap()], &mut st).unwrap();
            }
            let mut want = init;
            plain_adam(&mut want, &grads, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon);
            for (a, b) in p[0].data().iter().zip(&want) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn odd_symmetry_without_decay(
            init in proptest::collection::vec(-3.0f64..3.0, 3),
            grads in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 3), 1..20),
        ) {
            let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
            let run = |sign: f64| {
                let mut p = vec![Tensor::from_vec(vec![3], init.iter().map(|x| sign * x).collect()).unwrap()];
                let mut st = OptimizerState::new(cfg, &p).unwrap();
                for g in &grads {
                    let g = Tensor::from_vec(vec![3], g.iter().map(|x| sign * x).collect()).unwrap();
                    adamw_step(&mut p, &[g], &mut st).unwrap();
                }
                p.remove(0)
            };
            let pos = run(1.0);
            let neg = run(-1.0);
            for (a, b) in pos.data().iter().zip(neg.data()) {
                prop_assert_eq!(*a, -*b);
            }
        }
    }

    #[test]
    fn zero_gradient_cases() {
        let zero = scalar(0.0);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut p = scalar(1.7);
        let mut st = OptimizerState::new(cfg, &p).unwrap();
        adamw_step(&mut p, &zero, &mut st).unwrap();
        assert_eq!(p[0].data()[0], 1.7);

        let cfg = AdamWConfig { weight_decay: 0.01, learning_rate: 0.1, ..Default::default() };
        let mut p = scalar(1.7);
        let mut st = OptimizerState::new(cfg, &p).unwrap();
        for k in 1..=5 {
            adamw_step(&mut p, &zero, &mut st).unwrap();
            let want = 1.7 * (1.0f64 - 0.1 * 0.01).powi(k);
            assert!((p[0].data()[0] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn scalar_quadratic_converges() {
        let cfg = AdamWConfig { learning_rate: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut p = scalar(1.0);
        let mut st = OptimizerState::new(cfg, &p).unwrap();
        for _ in 0..200 {
            let g = scalar(2.0 * p[0].data()[0]);
            adamw_step(&mut p, &g, &mut st).unwrap();
        }
        assert!(p[0].data()[0].abs() < 1e-3, "{}", p[0].data()[0]);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = vec![Tensor::from_vec(vec![2], vec![1.0f32, 2.0]).unwrap(), Tensor::from_vec(vec![1], vec![3.0f32]).unwrap()];
        let mut st = OptimizerState::new(AdamWConfig::default(), &p).unwrap();
        let before = (p.clone(), st.clone());
        let g = vec![Tensor::from_vec(vec![2], vec![0.5f32, 0.5]).unwrap(), Tensor::from_vec(vec![1], vec![f32::NAN]).unwrap()];
        assert!(matches!(adamw_step(&mut p, &g, &mut st), Err(Error::NonFinite(_))));
        assert_eq!((p, st), before);
    }

    #[test]
    fn second_moments_stay_non_negative() {
        let mut p = vec![Tensor::from_vec(vec![3], vec![0.1f32, -0.2, 0.3]).unwrap()];
        let mut st = OptimizerState::new(AdamWConfig::default(), &p).unwrap();
        for i in 0..50 {
            let g = Tensor::from_vec(vec![3], vec![(i as f32).sin(), -1e-20, 1e20]).unwrap();
            adamw_step(&mut p, &[g], &mut st).unwrap();
            assert!(st.second_moment[0].data().iter().all(|&v| v >= 0.0));
        }
        assert_eq!(st.step, 50);
    }
}
