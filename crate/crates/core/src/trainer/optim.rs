use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl OptimizerConfig {
    /// Desk-scale defaults: 2k steps, 10% warmup.
    pub fn desk() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
            peak_lr: 1e-3,
            warmup_steps: 200,
            total_steps: 2_000,
            clip_norm: Some(1.0),
        }
    }

    /// Full-scale pretraining schedule for the named preset: 10k warmup,
    /// 100k steps, peak rate 1e-3 / 6e-4 / 4e-4 for small / base / large.
    pub fn pretraining(preset: &str) -> Option<Self> {
        let peak_lr = match preset {
            "small" => 1e-3,
            "base" => 6e-4,
            "large" => 4e-4,
            _ => return None,
        };
        Some(Self {
            peak_lr,
            warmup_steps: 10_000,
            total_steps: 100_000,
            ..Self::desk()
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1), got {b}")));
            }
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps ({}) exceeds total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.eps > 0.0) || !(self.peak_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("eps must be positive; peak_lr and weight_decay nonnegative".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to the peak over `warmup_steps`, then linear decay
/// reaching 0 at `total_steps`; 0 afterwards.
pub fn lr_at(step: u64, cfg: &OptimizerConfig) -> f64 {
    let (w, t) = (cfg.warmup_steps, cfg.total_steps);
    if step == w {
        cfg.peak_lr
    } else if step < w {
        cfg.peak_lr * step as f64 / w as f64
    } else if step >= t {
        0.0
    } else {
        cfg.peak_lr * (t - step) as f64 / (t - w) as f64
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

pub fn global_norm<T: Scalar>(grads: &[Vec<T>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| {
            let g = g.as_f64();
            g * g
        })
        .sum::<f64>()
        .sqrt()
}

/// AdamW with bias-corrected moments and decoupled weight decay applied to
/// every tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Scalar> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Updates applied so far.
    pub t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new<'p>(params: impl IntoIterator<Item = &'p Tensor<T>>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Tensor::numel).collect();
        Self {
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    /// One update. The learning rate is `lr_at(t)` for the 1-based update
    /// number `t`. Gradients are checked before anything is modified.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor<T>)],
        grads: &[Vec<T>],
        cfg: &OptimizerConfig,
    ) -> Result<f64> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Invalid(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if g.len() != p.numel() {
                return Err(Error::shape("adamw", format!("gradient for `{name}` has {} values", g.len())));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.t += 1;
        let lr = lr_at(self.t, cfg);
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powf(self.t as f64);
        let c2 = 1.0 - b2.powf(self.t as f64);
        for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j].as_f64();
                let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
                let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
                m[j] = T::of(mj);
                v[j] = T::of(vj);
                let update = (mj / c1) / ((vj / c2).sqrt() + cfg.eps);
                let wj = w.as_f64();
                *w = T::of(wj - lr * cfg.weight_decay * wj - lr * update);
            }
        }
        Ok(lr)
    }
}
