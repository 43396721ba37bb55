use serde::{Deserialize, Serialize};

use super::{ParamStore, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip over trainable parameters; `0` disables.
    pub max_grad_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: 0.5,
        }
    }
}

/// Adaptive-moment optimizer. Frozen parameters are never written.
#[derive(Debug, Clone)]
pub struct Adam<F = f32> {
    pub cfg: AdamConfig,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    t: u64,
}

impl<F: Real> Adam<F> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<F>) -> Self {
        let m = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        let v = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self { cfg, m, v, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Norm of the trainable gradients before clipping.
    pub fn grad_norm(store: &ParamStore<F>) -> f64 {
        store
            .iter()
            .filter(|(_, p)| p.trainable)
            .flat_map(|(_, p)| p.grad.data().iter())
            .map(|g| {
                let g = g.to_f64().unwrap();
                g * g
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Applies one update from the `grad` buffers of trainable parameters.
    pub fn step(&mut self, store: &mut ParamStore<F>) {
        self.t += 1;
        let norm = Self::grad_norm(store);
        let clip = if self.cfg.max_grad_norm > 0.0 && norm > self.cfg.max_grad_norm {
            self.cfg.max_grad_norm / norm
        } else {
            1.0
        };
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let lr = F::of(self.cfg.lr * c2.sqrt() / c1);
        let (b1f, b2f) = (F::of(b1), F::of(b2));
        let eps = F::of(self.cfg.eps);
        let clip = F::of(clip);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for ((w, g), (mm, vv)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = *g * clip;
                *mm = b1f * *mm + (F::one() - b1f) * g;
                *vv = b2f * *vv + (F::one() - b2f) * g * g;
                *w = *w - lr * *mm / (vv.sqrt() + eps);
            }
        }
    }
}
