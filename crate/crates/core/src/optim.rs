//! Adaptive-moment optimizer, cosine schedule and gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Checkpoint, Module};
use crate::tensor::Real;

/// `lr0 · ½(1 + cos(π·t/T_max))`, held at zero past `T_max`.
pub fn cosine_lr(lr0: f64, step: u64, t_max: u64) -> f64 {
    if t_max == 0 {
        return lr0;
    }
    let frac = step.min(t_max) as f64 / t_max as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    steps: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, module: &dyn Module<T>) -> Self {
        let mut m = Vec::new();
        module.visit(&mut |p| m.push(vec![T::ZERO; p.len()]));
        let v = m.clone();
        Self {
            config,
            steps: 0,
            m,
            v,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update from the gradients currently stored in `module`.
    pub fn step(&mut self, module: &mut dyn Module<T>, lr: f64) {
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - beta1), T::from_f64(1.0 - beta2));
        let step_size = T::from_f64(lr / bc1);
        let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
        let eps = T::from_f64(eps);
        let mut k = 0;
        module.visit_mut(&mut |p| {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                p.value[i] -= step_size * m[i] / ((v[i]).sqrt() * inv_sqrt_bc2 + eps);
            }
            k += 1;
        });
    }

    /// Stores moments as `{prefix}.m.<param>` / `{prefix}.v.<param>`.
    pub fn save_into(&self, module: &dyn Module<T>, prefix: &str, ck: &mut Checkpoint) {
        let mut k = 0;
        module.visit(&mut |p| {
            let conv = |x: &[T]| x.iter().map(|v| v.to_f64() as f32).collect::<Vec<_>>();
            ck.push(
                &format!("{prefix}.m.{}", p.name),
                p.shape.clone(),
                conv(&self.m[k]),
            );
            ck.push(
                &format!("{prefix}.v.{}", p.name),
                p.shape.clone(),
                conv(&self.v[k]),
            );
            k += 1;
        });
    }

    pub fn load_from(
        config: AdamConfig,
        module: &dyn Module<T>,
        prefix: &str,
        ck: &Checkpoint,
        steps: u64,
    ) -> Result<Self> {
        let mut adam = Self::new(config, module);
        adam.steps = steps;
        let mut k = 0;
        let mut missing = None;
        module.visit(&mut |p| {
            for (store, tag) in [(&mut adam.m[k], "m"), (&mut adam.v[k], "v")] {
                let name = format!("{prefix}.{tag}.{}", p.name);
                match ck.get(&name) {
                    Some(data) if data.len() == store.len() => store
                        .iter_mut()
                        .zip(data)
                        .for_each(|(d, &s)| *d = T::from_f64(s as f64)),
                    _ => missing = Some(name),
                }
            }
            k += 1;
        });
        match missing {
            Some(name) => Err(Error::Checkpoint(format!(
                "optimizer state `{name}` missing"
            ))),
            None => Ok(adam),
        }
    }
}

pub fn grad_norm<T: Real>(module: &dyn Module<T>) -> f64 {
    let mut s = 0.0;
    module.visit(&mut |p| s += p.grad.iter().map(|g| g.to_f64() * g.to_f64()).sum::<f64>());
    s.sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(module: &mut dyn Module<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(module);
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64(max_norm / norm);
        module.visit_mut(&mut |p| p.grad.iter_mut().for_each(|g| *g *= s));
    }
    norm
}
