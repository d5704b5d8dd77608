use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::{Grads, Mat, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear ramp from 0 to `lr` over this many steps.
    pub warmup_steps: u64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            warmup_steps: 500,
            grad_clip: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub lr: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
}

/// Adam with decoupled weight decay. Biases are not decayed.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Mat<T>>,
    pub v: Vec<Mat<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, cfg: AdamWConfig) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, _, p)| Mat::zeros(p.rows, p.cols))
                .collect()
        };
        Self {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if self.cfg.warmup_steps == 0 {
            self.cfg.lr
        } else {
            self.cfg.lr * ((step + 1) as f64 / self.cfg.warmup_steps as f64).min(1.0)
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>) -> StepStats {
        let norm = grads.global_norm().to_f64().unwrap_or(f64::INFINITY);
        let clip = if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            self.cfg.grad_clip / norm
        } else {
            1.0
        };
        let lr = self.lr_at(self.step);
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        let (b1, b2) = (T::of(self.cfg.beta1), T::of(self.cfg.beta2));
        let (one, eps) = (T::one(), T::of(self.cfg.eps));
        let clip = T::of(clip);
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        for i in 0..params.len() {
            let id = ParamId(i);
            let Some(g) = grads.get(id) else { continue };
            let decay = if params.name(id).ends_with(".b") {
                T::zero()
            } else {
                T::of(lr * self.cfg.weight_decay)
            };
            let p = params.get_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j] * clip;
                m.data[j] = b1 * m.data[j] + (one - b1) * gj;
                v.data[j] = b2 * v.data[j] + (one - b2) * gj * gj;
                let denom = (v.data[j] * inv_bc2).sqrt() + eps;
                p.data[j] = p.data[j] - decay * p.data[j] - step_size * m.data[j] / denom;
            }
        }
        StepStats {
            lr,
            grad_norm: norm,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_ramps_linearly() {
        let store = ParamStore::<f64>::new();
        let opt = AdamW::new(&store, AdamWConfig::default());
        assert!((opt.lr_at(0) - 1e-4 / 500.0).abs() < 1e-18);
        assert!((opt.lr_at(249) - 0.5e-4).abs() < 1e-18);
        assert_eq!(opt.lr_at(10_000), 1e-4);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Mat::from_vec(1, 2, vec![1.0, -1.0]));
        let b = store.add("w.b", Mat::from_vec(1, 1, vec![0.5]));
        let mut grads = Grads::new(2);
        grads.accumulate(w, &Mat::from_vec(1, 2, vec![0.3, -0.2]));
        grads.accumulate(b, &Mat::from_vec(1, 1, vec![0.1]));
        let cfg = AdamWConfig {
            lr: 0.01,
            warmup_steps: 0,
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(&store, cfg);
        opt.step(&mut store, &grads);
        // bias-corrected first Adam step is ±lr; decay acts on weights only
        let ww = store.get(w);
        assert!((ww.data[0] - (1.0 - 0.001 - 0.01)).abs() < 1e-6);
        assert!((ww.data[1] - (-1.0 + 0.001 + 0.01)).abs() < 1e-6);
        assert!((store.get(b).data[0] - (0.5 - 0.01)).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_the_update_direction_not_sign() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Mat::zeros(1, 1));
        let mut grads = Grads::new(1);
        grads.accumulate(w, &Mat::from_vec(1, 1, vec![100.0]));
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        let s = opt.step(&mut store, &grads);
        assert_eq!(s.grad_norm, 100.0);
        assert!(store.get(w).data[0] < 0.0);
    }
}
