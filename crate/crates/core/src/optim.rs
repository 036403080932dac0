//! Adam with decoupled weight decay, global-norm clipping and a
//! warmup-then-cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::balance::DEFAULT_ALPHA;
use crate::error::{Error, Result};
use crate::params::ParamTree;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub warmup_steps: usize,
    pub lr_init: f64,
    pub lr_peak: f64,
    pub lr_min: f64,
    pub total_steps: usize,
    pub alpha: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip_norm: 1.0,
            warmup_steps: 50,
            lr_init: 2e-7,
            lr_peak: 3e-4,
            lr_min: 3e-5,
            total_steps: 500,
            alpha: DEFAULT_ALPHA,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.beta1) || !open_unit(self.beta2) {
            return Err(Error::Config(format!(
                "betas must lie in (0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        let rates = [self.lr_init, self.lr_peak, self.lr_min];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Config("learning rates must be finite and >= 0".into()));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 || self.grad_clip_norm <= 0.0 {
            return Err(Error::Config("eps and grad_clip_norm must be > 0, weight_decay >= 0".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Linear ramp `lr_init → lr_peak`, cosine `lr_peak → lr_min`, then flat.
pub fn lr_at(step: usize, cfg: &OptimizerConfig) -> f64 {
    let w = cfg.warmup_steps;
    if step < w {
        return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * step as f64 / w as f64;
    }
    if step == w {
        return cfg.lr_peak;
    }
    if step >= cfg.total_steps {
        return cfg.lr_min;
    }
    let progress = (step - w) as f64 / (cfg.total_steps - w) as f64;
    cfg.lr_min + (cfg.lr_peak - cfg.lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [&mut [T]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| {
            let v = v.as_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Completed updates.
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new<P: ParamTree<T> + ?Sized>(params: &P) -> Self {
        let m: Vec<Vec<T>> = params
            .tensors()
            .iter()
            .map(|t| vec![T::zero(); t.numel()])
            .collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// Weight decay skips vectors (norm gains and the gate coefficient).
fn decays<T: Real>(t: &Tensor<T>) -> bool {
    t.shape().len() >= 2
}

/// One bias-corrected Adam update at learning rate `lr`, consuming each
/// trainable tensor's gradient.
pub fn adam_step<T: Real, P: ParamTree<T> + ?Sized>(
    params: &mut P,
    state: &mut AdamState<T>,
    cfg: &OptimizerConfig,
    lr: f64,
) {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let step = T::of(lr / bc1);
    let inv_bc2 = T::of(1.0 / bc2);
    let eps = T::of(cfg.eps);
    let tensors = params.tensors_mut();
    for ((p, m), v) in tensors.into_iter().zip(&mut state.m).zip(&mut state.v) {
        if !p.is_trainable() {
            continue;
        }
        let shrink = if decays(p) {
            T::of(1.0 - lr * cfg.weight_decay)
        } else {
            T::one()
        };
        let grad = p.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![T::zero(); p.numel()]);
        for (((w, g), mi), vi) in p.values_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + one_b1 * *g;
            *vi = b2 * *vi + one_b2 * *g * *g;
            let denom = (*vi * inv_bc2).sqrt() + eps;
            *w = *w * shrink - step * *mi / denom;
        }
    }
}

/// Clips the gradients held by `params` in place, returning the pre-clip norm.
pub fn clip_param_grads<T: Real, P: ParamTree<T> + ?Sized>(params: &mut P, max_norm: f64) -> f64 {
    let mut grads: Vec<&mut [T]> = params
        .tensors_mut()
        .into_iter()
        .filter_map(|t| t.grad_mut())
        .collect();
    clip_global_norm(&mut grads, max_norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct One(Tensor<f64>);

    impl ParamTree<f64> for One {
        fn tensors(&self) -> Vec<&Tensor<f64>> {
            vec![&self.0]
        }
        fn tensors_mut(&mut self) -> Vec<&mut Tensor<f64>> {
            vec![&mut self.0]
        }
    }

    fn cfg() -> OptimizerConfig {
        OptimizerConfig {
            warmup_steps: 10,
            total_steps: 110,
            lr_init: 1e-6,
            lr_peak: 1e-3,
            lr_min: 1e-4,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg();
        assert_eq!(lr_at(0, &c), c.lr_init);
        assert_eq!(lr_at(10, &c), c.lr_peak);
        assert!((lr_at(60, &c) - (c.lr_min + (c.lr_peak - c.lr_min) * 0.5)).abs() < 1e-15);
        assert_eq!(lr_at(110, &c), c.lr_min);
        assert_eq!(lr_at(10_000, &c), c.lr_min);
    }

    #[test]
    fn single_scalar_update_matches_hand_computation() {
        let mut p = One(Tensor::new(&[1, 1], vec![0.5]).unwrap().requires_grad());
        p.0.accumulate_grad(&[1.0]);
        let c = OptimizerConfig {
            weight_decay: 0.0,
            ..cfg()
        };
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &mut st, &c, 1e-3);
        // m̂ = 1, v̂ = 1
        let want = 0.5 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p.0.values()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn decay_only_shrinks_matrices() {
        let mut p = One(Tensor::new(&[1, 2], vec![2.0, -4.0]).unwrap().requires_grad());
        p.0.accumulate_grad(&[0.0, 0.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &mut st, &cfg(), 0.01);
        assert_eq!(p.0.values(), &[2.0 * (1.0 - 0.01 * 0.1), -4.0 * (1.0 - 0.01 * 0.1)]);
    }

    #[test]
    fn clipping_3_4_5() {
        let mut a = vec![3.0f64, 4.0];
        let n = clip_global_norm(&mut [a.as_mut_slice()], 1.0);
        assert_eq!(n, 5.0);
        assert!((a[0] - 0.6).abs() < 1e-15 && (a[1] - 0.8).abs() < 1e-15);
        let mut b = vec![0.3f64, 0.4];
        assert_eq!(clip_global_norm(&mut [b.as_mut_slice()], 1.0), 0.5);
        assert_eq!(b, vec![0.3, 0.4]);
    }
}
