//! AdamW with decoupled weight decay, plus the cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::{fl, Scalar};

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 4e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment accumulators plus the step counter.
pub struct OptimizerState<F> {
    pub config: AdamWConfig,
    m: ParamSet<F>,
    v: ParamSet<F>,
    step: u64,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(params: &ParamSet<F>, config: AdamWConfig) -> Self {
        assert!(config.lr > 0.0, "learning rate must be positive");
        OptimizerState {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update in place. `lr_override` supports schedules; weight
    /// decay is decoupled (applied directly to the parameter, not the moments).
    pub fn step(
        &mut self,
        params: &mut ParamSet<F>,
        grads: &ParamSet<F>,
        lr_override: Option<f64>,
    ) -> Result<()> {
        self.step += 1;
        let lr = fl::<F>(lr_override.unwrap_or(self.config.lr));
        let b1 = fl::<F>(self.config.beta1);
        let b2 = fl::<F>(self.config.beta2);
        let eps = fl::<F>(self.config.eps);
        let wd = fl::<F>(self.config.weight_decay);
        let bc1 = F::one() - fl::<F>(self.config.beta1.powi(self.step as i32));
        let bc2 = F::one() - fl::<F>(self.config.beta2.powi(self.step as i32));
        for (name, p) in params.iter_mut() {
            let g = grads.get(name);
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{:?}", p.shape()),
                    got: format!("{:?}", g.shape()),
                    context: "adamw_step",
                });
            }
            let m = self.m.get_mut(name);
            let v = self.v.get_mut(name);
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (F::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (F::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let pi = p.data()[i];
                p.data_mut()[i] = pi - lr * (mhat / (vhat.sqrt() + eps) + wd * pi);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `base_lr` at step 0 to `min_lr` at `total_steps`.
/// Steps past the end clamp to `min_lr`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64, min_lr: f64) -> f64 {
    if total_steps == 0 || step >= total_steps {
        if step > total_steps {
            eprintln!("warning: cosine_lr step {step} past total {total_steps}, clamping");
        }
        return min_lr;
    }
    let frac = step as f64 / total_steps as f64;
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single_param(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::filled(1, 1, v));
        p
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut params = single_param(1.5);
        let grads = params.zeros_like();
        let mut state = OptimizerState::new(
            &params,
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
        );
        state.step(&mut params, &grads, None).unwrap();
        assert_eq!(params.get("w").get(0, 0), 1.5);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn one_step_on_quadratic_decreases_loss() {
        // f(w) = w^2 at w=1, grad 2w
        let mut params = single_param(1.0);
        let mut grads = params.zeros_like();
        grads.get_mut("w").set(0, 0, 2.0);
        let mut state = OptimizerState::new(
            &params,
            AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
        );
        state.step(&mut params, &grads, None).unwrap();
        let w = params.get("w").get(0, 0);
        assert!(w * w < 1.0);
    }

    #[test]
    fn decoupled_decay_shrinks_weight_with_zero_grad() {
        let mut params = single_param(2.0);
        let grads = params.zeros_like();
        let mut state = OptimizerState::new(
            &params,
            AdamWConfig {
                weight_decay: 0.1,
                ..AdamWConfig::default()
            },
        );
        state.step(&mut params, &grads, None).unwrap();
        let w = params.get("w").get(0, 0);
        assert!(w.abs() < 2.0 && w > 0.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut params = single_param(1.0);
        let mut grads = ParamSet::new();
        grads.insert("w", Tensor::<f64>::zeros(1, 2));
        let mut state = OptimizerState::new(&params, AdamWConfig::default());
        assert!(state.step(&mut params, &grads, None).is_err());
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 1.0, 0.1), 1.0);
        assert_eq!(cosine_lr(100, 100, 1.0, 0.1), 0.1);
        let mid = cosine_lr(50, 100, 1.0, 0.1);
        assert!((mid - 0.55).abs() < 1e-12);
    }

    #[test]
    fn cosine_monotone_nonincreasing() {
        let mut prev = f64::INFINITY;
        for s in 0..=200 {
            let lr = cosine_lr(s, 150, 3.0, 0.03);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }
}
