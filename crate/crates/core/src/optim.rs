//! AdamW with gradient clipping, warmup + cosine schedule, and layer-wise
//! learning-rate scaling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::{Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05, clip_norm: Some(1.0) }
    }
}

/// Optimiser state. Moments are indexed like the parameter store and grow
/// when parameters are added (new domains, task heads).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Matrix>,
    pub second: Vec<Matrix>,
}

/// Weight decay applies to weight matrices only, not to biases, norms,
/// embeddings or the mask token.
pub fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    fn sync(&mut self, params: &ParamStore) {
        for (id, _, value) in params.iter().skip(self.first.len()) {
            debug_assert_eq!(id.index(), self.first.len());
            self.first.push(Matrix::zeros(value.rows(), value.cols()));
            self.second.push(Matrix::zeros(value.rows(), value.cols()));
        }
        // rows appended to an existing table (domain extension)
        for (id, _, value) in params.iter() {
            let m = &mut self.first[id.index()];
            if m.shape() != value.shape() {
                let grow = |old: &Matrix| {
                    let mut data = old.as_slice().to_vec();
                    data.resize(value.len(), 0.0);
                    Matrix::from_vec(value.rows(), value.cols(), data)
                };
                *m = grow(m);
                let s = &mut self.second[id.index()];
                *s = grow(s);
            }
        }
    }

    /// One update. `lr_scale(name)` multiplies `lr` per parameter; returns
    /// the pre-clip gradient norm.
    pub fn update(
        &mut self,
        params: &mut ParamStore,
        grads: &Gradients,
        lr: f64,
        lr_scale: &dyn Fn(&str) -> f64,
    ) -> Result<f64> {
        self.sync(params);
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::Diverged { step: self.step as usize });
        }
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (id, g) in grads.iter() {
            let name = params.name(id).to_string();
            let rate = lr * lr_scale(&name);
            let decay = if decays(&name) { c.weight_decay } else { 0.0 };
            let m = self.first[id.index()].as_mut_slice();
            let v = self.second[id.index()].as_mut_slice();
            let w = params.value_mut(id).as_mut_slice();
            for i in 0..w.len() {
                let gi = g.as_slice()[i] * clip;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= rate * (mh / (vh.sqrt() + c.eps) + decay * w[i]);
            }
        }
        Ok(norm)
    }
}

/// Linear warmup over the first `warmup_fraction` of steps, cosine decay
/// to zero afterwards.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64, warmup_fraction: f64) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::Invalid(format!("step {step} outside schedule of {total_steps} steps")));
    }
    if !(0.0..1.0).contains(&warmup_fraction) {
        return Err(Error::Invalid(format!("warmup fraction {warmup_fraction} outside [0, 1)")));
    }
    let warmup = warmup_fraction * total_steps as f64;
    let s = step as f64;
    if s < warmup {
        return Ok(base_lr * s / warmup);
    }
    let remaining = total_steps as f64 - warmup;
    let progress = (s - warmup) / remaining;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Depth of a parameter for layer-wise decay in an encoder with `layers`
/// blocks: tokeniser tables at 0, block `i` at `i + 1`, everything else
/// (final norm, heads, decoder) at `layers + 1`.
pub fn layer_depth(name: &str, layers: usize) -> usize {
    if name.starts_with("projector.") || name.starts_with("registry.") {
        return 0;
    }
    if let Some(rest) = name.strip_prefix("encoder.blocks.") {
        if let Some(i) = rest.split('.').next().and_then(|s| s.parse::<usize>().ok()) {
            return i + 1;
        }
    }
    layers + 1
}

/// `decay^(L + 1 − depth)`, so the top group keeps the full rate.
pub fn layer_scale(name: &str, layers: usize, decay: f64) -> f64 {
    decay.powi((layers + 1 - layer_depth(name, layers)) as i32)
}
