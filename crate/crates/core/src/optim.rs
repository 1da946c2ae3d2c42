//! Adam with decoupled weight decay and a linear warmup.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps over which the rate ramps linearly up to `lr`.
    pub warmup_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, weight_decay: 1e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, warmup_steps: 0 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and eps must be > 0".into()));
        }
        Ok(())
    }
}

/// First and second moments per parameter (indexed by [`ParamId`]) and the
/// number of updates taken so far.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.value.numel()]).collect();
        AdamState { step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn matches(&self, store: &ParamStore) -> bool {
        self.m.len() == store.len()
            && self.v.len() == store.len()
            && store
                .entries()
                .iter()
                .zip(&self.m)
                .zip(&self.v)
                .all(|((e, m), v)| m.len() == e.value.numel() && v.len() == e.value.numel())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: AdamState,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        Ok(AdamW { config, state: AdamState::new(store) })
    }

    /// Rate used by update number `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        let w = self.config.warmup_steps;
        if w == 0 || step >= w {
            self.config.lr
        } else {
            self.config.lr * (step + 1) as f64 / w as f64
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.lr_at(self.state.step)
    }

    /// One update from `grads`. Frozen parameters are skipped even if a
    /// gradient is supplied; decay applies only to updated parameters.
    /// Returns the rate that was used.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) -> Result<f64> {
        if !self.state.matches(store) {
            return Err(Error::InvariantViolation("optimizer state does not match the parameter set".into()));
        }
        let lr = self.current_lr();
        let c = self.config;
        let t = (self.state.step + 1) as i32;
        let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let i = id.index();
            let p = store.get_mut(*id).data_mut();
            if g.len() != p.len() {
                return Err(Error::shape(&[p.len()], &[g.len()]));
            }
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            for k in 0..p.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= lr * (mh / (libm::sqrt(vh) + c.eps) + c.weight_decay * p[k]);
            }
        }
        self.state.step += 1;
        Ok(lr)
    }
}

/// Adds `from` into `into`, both sorted by [`ParamId`].
pub fn accumulate(into: &mut Vec<(ParamId, Vec<f64>)>, from: Vec<(ParamId, Vec<f64>)>) {
    for (id, g) in from {
        match into.binary_search_by_key(&id, |(i, _)| *i) {
            Ok(pos) => {
                for (a, b) in into[pos].1.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            Err(pos) => into.insert(pos, (id, g)),
        }
    }
}

/// Largest absolute gradient entry; `None` if any entry is non-finite.
pub fn max_abs_grad(grads: &[(ParamId, Vec<f64>)]) -> Option<f64> {
    let mut mx: f64 = 0.0;
    for (_, g) in grads {
        for v in g {
            if !v.is_finite() {
                return None;
            }
            mx = mx.max(v.abs());
        }
    }
    Some(mx)
}
