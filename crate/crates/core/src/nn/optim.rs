//! First-order optimizers with serializable state.

use candle_core::{backprop::GradStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{validation_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    config: AdamConfig,
    vars: Vec<Var>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, config: AdamConfig) -> Result<Self> {
        let first = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<_>>()?;
        let second = vars.iter().map(|v| v.zeros_like()).collect::<candle_core::Result<_>>()?;
        Ok(Self {
            config,
            vars,
            first,
            second,
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for ((var, m), v) in self.vars.iter().zip(&mut self.first).zip(&mut self.second) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            *m = ((&*m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            *v = ((&*v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let denom = ((&*v / bias2)?.sqrt()? + c.eps)?;
            let update = ((&*m / bias1)? / denom)?;
            var.set(&(var.as_tensor().detach() - (update * c.lr)?)?)?;
        }
        Ok(())
    }

    /// Moment estimates in variable order: first moments, then second moments.
    pub fn state_tensors(&self) -> Vec<Tensor> {
        self.first.iter().chain(&self.second).cloned().collect()
    }

    pub fn restore(&mut self, steps: u64, tensors: Vec<Tensor>) -> Result<()> {
        let n = self.vars.len();
        if tensors.len() != 2 * n {
            return Err(validation_err!("optimizer state has {} tensors, expected {}", tensors.len(), 2 * n));
        }
        for (i, t) in tensors.into_iter().enumerate() {
            let slot = if i < n { &mut self.first[i] } else { &mut self.second[i - n] };
            if slot.shape() != t.shape() {
                return Err(validation_err!("optimizer state shape mismatch at slot {i}"));
            }
            *slot = t;
        }
        self.steps = steps;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay.
pub struct Sgd {
    config: SgdConfig,
    vars: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(vars: Vec<Var>, config: SgdConfig) -> Self {
        let velocity = vec![None; vars.len()];
        Self {
            config,
            vars,
            velocity,
        }
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        let c = self.config;
        for (var, buf) in self.vars.iter().zip(&mut self.velocity) {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let p = var.as_tensor().detach();
            let mut g = g.detach();
            if c.weight_decay != 0.0 {
                g = (g + (&p * c.weight_decay)?)?;
            }
            let d = match buf.take() {
                Some(b) if c.momentum != 0.0 => ((b * c.momentum)? + g)?,
                _ => g,
            };
            var.set(&(p - (&d * lr)?)?)?;
            *buf = Some(d);
        }
        Ok(())
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction the first update is lr·sign(g) (up to eps).
        let v = Var::new(&[1.0f64, -2.0], &Device::Cpu).unwrap();
        let loss = (v.as_tensor() * Tensor::new(&[3.0f64, -0.5], &Device::Cpu).unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = Adam::new(vec![v.clone()], AdamConfig { lr: 0.1, ..Default::default() }).unwrap();
        opt.step(&grads).unwrap();
        let got: Vec<f64> = v.as_tensor().to_vec1().unwrap();
        assert!((got[0] - 0.9).abs() < 1e-6 && (got[1] + 1.9).abs() < 1e-6, "{got:?}");
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let v = Var::new(&[0.0f64], &Device::Cpu).unwrap();
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        let mut opt = Sgd::new(vec![v.clone()], cfg);
        for _ in 0..2 {
            let loss = v.as_tensor().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&grads, 0.1).unwrap();
        }
        // -0.1 then -(0.1 * 1.9)
        let got: Vec<f64> = v.as_tensor().to_vec1().unwrap();
        assert!((got[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.01, 0, 100), 0.01);
        assert!(cosine_lr(0.01, 100, 100).abs() < 1e-15);
        assert!((cosine_lr(0.01, 50, 100) - 0.005).abs() < 1e-15);
    }
}
