use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Bound, Gradients, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// Optimizer state, aligned with the parameter order of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub moments: Vec<Option<Moments>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        Self {
            cfg,
            step: 0,
            moments: vec![None; store.len()],
        }
    }

    /// One bias-corrected update of every trainable parameter. Frozen
    /// parameters are never touched. A trainable parameter without a
    /// gradient is treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, bound: &Bound, grads: &Gradients, lr: f64) -> Result<()> {
        if self.moments.len() != store.len() {
            return Err(Error::config("optimizer state does not match the parameter store"));
        }
        for (id, p) in store.iter() {
            if p.trainable {
                if let Some(g) = grads.get(bound[id]) {
                    if !g.is_finite() {
                        return Err(Error::NonFinite(format!("gradient of {}", p.name)));
                    }
                }
            }
        }
        self.step += 1;
        let ids: Vec<_> = store.trainable().map(|(id, _)| id).collect();
        for id in ids {
            let param = store.get_mut(id);
            let zero;
            let g = match grads.get(bound[id]) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(param.value.shape());
                    &zero
                }
            };
            let moments = self.moments[id.index()].get_or_insert_with(|| Moments {
                m: Tensor::zeros(param.value.shape()),
                v: Tensor::zeros(param.value.shape()),
            });
            adam_update(
                param.value.data_mut(),
                g.data(),
                moments.m.data_mut(),
                moments.v.data_mut(),
                self.step,
                lr,
                &self.cfg,
            );
        }
        Ok(())
    }
}

/// Elementwise Adam update at step `t ≥ 1`:
/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
/// `w ← w − lr·m̂ / (√v̂ + ε)` with `m̂ = m/(1−β₁ᵗ)` and `v̂ = v/(1−β₂ᵗ)`.
pub fn adam_update(w: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, cfg: &AdamConfig) {
    let t = i32::try_from(t).unwrap_or(i32::MAX);
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..w.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
    }
}
