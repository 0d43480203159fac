//! AdamW with decoupled weight decay and the warmup + cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Scalar};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

impl AdamWConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                v.push(format!("{name} = {b} is outside [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            v.push(format!("adam eps = {} must be positive", self.eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push(format!(
                "weight_decay = {} must be finite and non-negative",
                self.weight_decay
            ));
        }
        v
    }
}

/// First and second moments mirroring a parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T: Scalar> {
    pub config: AdamWConfig,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<T: Scalar> OptState<T> {
    pub fn new(params: &ParamSet<T>, config: AdamWConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// One bias-corrected Adam update plus `p <- p - lr * wd * p`.
    ///
    /// Every gradient is checked before anything is written, so a non-finite
    /// gradient leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64) -> Result<()> {
        if !params.same_layout(grads) || !params.same_layout(&self.m) {
            return Err(Error::dim(
                "parameters",
                "gradients or moments do not mirror the parameters",
            ));
        }
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::Divergence {
                step: self.t,
                detail: format!("non-finite gradient for {name}"),
            });
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.t + 1;
        let c1 = 1.0 - beta1.powf(t as f64);
        let c2 = 1.0 - beta2.powf(t as f64);
        let moments = self.m.iter_mut().zip(self.v.iter_mut());
        for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments)
        {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i].as_f64();
                let mi = beta1 * m[i].as_f64() + (1.0 - beta1) * gi;
                let vi = beta2 * v[i].as_f64() + (1.0 - beta2) * gi * gi;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let mut pi = p[i].as_f64();
                pi -= lr * weight_decay * pi;
                pi -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
                p[i] = T::from_f64(pi);
            }
        }
        self.t = t;
        Ok(())
    }
}

/// Linear warmup from 0 to `peak`, then cosine decay to `min` at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub min: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.min >= 0.0 && self.min <= self.peak && self.peak.is_finite()) {
            v.push(format!(
                "learning rates need 0 <= min ({}) <= peak ({})",
                self.min, self.peak
            ));
        }
        if self.warmup_steps >= self.total_steps {
            v.push(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        v
    }

    /// Steps past `total_steps` hold `min`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return self.min;
        }
        let frac =
            (step - self.warmup_steps) as f64 / (self.total_steps - self.warmup_steps) as f64;
        self.min + 0.5 * (self.peak - self.min) * (1.0 + (PI * frac).cos())
    }
}
