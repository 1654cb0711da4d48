//! AdamW with decoupled weight decay.

use alloc::vec;
use alloc::vec::Vec;

use libm::{pow, sqrt};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Optimizer state for a fixed, ordered list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    /// `sizes` lists the length of each parameter tensor in visiting order.
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. `params` and `grads` must follow the order given to
    /// [`AdamW::new`].
    pub fn step(&mut self, lr: f64, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len(), "parameter tensor count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient tensor count changed");
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - pow(beta1, t);
        let bc2 = 1.0 - pow(beta2, t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            assert_eq!(p.len(), m.len());
            assert_eq!(g.len(), m.len());
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamW::new(cfg, &[2]);
        let mut p = [1.0, -1.0];
        opt.step(0.1, &mut [&mut p], &[&[3.0, -0.5]]);
        // bias-corrected first step is lr * sign(g) up to eps
        assert!((p[0] - 0.9).abs() < 1e-8);
        assert!((p[1] + 0.9).abs() < 1e-8);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut opt = AdamW::new(AdamWConfig::default(), &[1]);
        let mut p = [2.0];
        opt.step(0.5, &mut [&mut p], &[&[0.0]]);
        assert!((p[0] - (2.0 - 0.5 * 0.01 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, &[3]);
        let target = [1.0, -2.0, 0.5];
        let mut p = [0.0; 3];
        for _ in 0..3000 {
            let g: Vec<f64> = p.iter().zip(target).map(|(x, t)| 2.0 * (x - t)).collect();
            opt.step(0.01, &mut [&mut p], &[&g]);
        }
        for (x, t) in p.iter().zip(target) {
            assert!((x - t).abs() < 1e-3);
        }
        assert_eq!(opt.steps_taken(), 3000);
    }
}
