//! Adaptive-moment optimizer and the step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::encoders::EncoderParams;
use crate::error::{MsrlError, Result};

/// Constant rate during warm-up, then halved every `halving_period` iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub warmup: usize,
    pub halving_period: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { initial: 4e-4, warmup: 8000, halving_period: 8000 }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial.is_finite() && self.initial > 0.0) {
            return Err(MsrlError::validation(format!("learning rate must be positive, got {}", self.initial)));
        }
        if self.halving_period == 0 {
            return Err(MsrlError::validation("halving_period must be at least 1"));
        }
        Ok(())
    }

    pub fn rate(&self, iteration: usize) -> f64 {
        if iteration < self.warmup {
            return self.initial;
        }
        let halvings = (iteration - self.warmup) / self.halving_period + 1;
        self.initial * 0.5f64.powi(halvings.min(1074) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Moment estimates for every parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub first: EncoderParams,
    pub second: EncoderParams,
    /// Number of steps taken so far.
    pub steps: u64,
}

impl Adam {
    pub fn new(params: &EncoderParams, config: AdamConfig) -> Self {
        let zeros = EncoderParams::zeros(params.dims());
        Adam { config, first: zeros.clone(), second: zeros, steps: 0 }
    }

    /// One bias-corrected step. Refuses non-finite gradients, naming the block.
    pub fn step(&mut self, params: &mut EncoderParams, grads: &EncoderParams, lr: f64) -> Result<()> {
        if let Some(block) = grads.first_non_finite() {
            return Err(MsrlError::NonFiniteGradient(block.to_string()));
        }
        self.steps += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let c1 = 1.0 - beta1.powf(self.steps as f64);
        let c2 = 1.0 - beta2.powf(self.steps as f64);
        let blocks = params.blocks_mut().into_iter().zip(grads.blocks()).zip(self.first.blocks_mut()).zip(self.second.blocks_mut());
        for ((((_, mut p), (_, g)), (_, mut m)), (_, mut v)) in blocks {
            ndarray::Zip::from(&mut p).and(&g).and(&mut m).and(&mut v).for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
            });
        }
        if let Some(block) = params.first_non_finite() {
            return Err(MsrlError::NonFiniteGradient(format!("{block} after update")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderDims;

    #[test]
    fn schedule_warmup_then_halving() {
        let s = LrSchedule::default();
        assert_eq!(s.rate(0), 4e-4);
        assert_eq!(s.rate(7999), 4e-4);
        assert_eq!(s.rate(8000), 2e-4);
        assert_eq!(s.rate(15999), 2e-4);
        assert_eq!(s.rate(16000), 1e-4);
    }

    #[test]
    fn first_step_on_square() {
        // f(x) = x^2 at x = 1: g = 2, m = 0.2, v = 0.004, corrected m = 2, v = 4
        let dims = EncoderDims { embed: 1, channels: 1 };
        let mut p = EncoderParams::zeros(dims);
        p.w_a[0] = 1.0;
        let mut g = EncoderParams::zeros(dims);
        g.w_a[0] = 2.0;
        let mut adam = Adam::new(&p, AdamConfig::default());
        adam.step(&mut p, &g, 0.1).unwrap();
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p.w_a[0] - expected).abs() < 1e-15);
        assert!((adam.first.w_a[0] - 0.2).abs() < 1e-15);
        assert!((adam.second.w_a[0] - 0.004).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_only_decays_moments() {
        let dims = EncoderDims { embed: 2, channels: 2 };
        let mut p = EncoderParams::zeros(dims);
        p.b_l.fill(0.3);
        let before = p.clone();
        let mut adam = Adam::new(&p, AdamConfig::default());
        adam.first.b_l.fill(0.5);
        adam.step(&mut p, &EncoderParams::zeros(dims), 0.1).unwrap();
        assert_eq!(adam.first.b_l[0], 0.45);
        assert_eq!(p.w_v, before.w_v);
    }

    #[test]
    fn nan_gradient_names_block() {
        let dims = EncoderDims { embed: 2, channels: 2 };
        let mut p = EncoderParams::zeros(dims);
        let mut g = EncoderParams::zeros(dims);
        g.region_mlp.w2[[0, 1]] = f64::NAN;
        let err = Adam::new(&p, AdamConfig::default()).step(&mut p, &g, 0.1).unwrap_err();
        assert!(err.to_string().contains("region_mlp.w2"));
    }
}
