//! Adaptive-moment (Adam) updates over person states with per-block
//! learning rates and frozen blocks.

use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods exist only with std
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::body_model::{ParamBlock, PersonState};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub tau: f64,
    pub phi: f64,
    pub beta: f64,
    pub theta: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            tau: 0.01,
            phi: 0.01,
            beta: 0.001,
            theta: 0.001,
        }
    }
}

impl LearningRates {
    pub fn uniform(lr: f64) -> Self {
        Self {
            tau: lr,
            phi: lr,
            beta: lr,
            theta: lr,
        }
    }

    pub fn get(&self, block: ParamBlock) -> f64 {
        match block {
            ParamBlock::Tau => self.tau,
            ParamBlock::Phi => self.phi,
            ParamBlock::Beta => self.beta,
            ParamBlock::Theta => self.theta,
        }
    }
}

/// Moment estimates for one optimisation run.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<PersonState>,
    v: Vec<PersonState>,
    t: i32,
}

impl Adam {
    pub fn new(config: AdamConfig, states: &[PersonState]) -> Self {
        let zeros: Vec<PersonState> = states.iter().map(|s| s.zeros_like()).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update of the `free` blocks; other blocks are not touched.
    pub fn step(
        &mut self,
        states: &mut [PersonState],
        grads: &[PersonState],
        free: &[ParamBlock],
        rates: &LearningRates,
    ) -> Result<()> {
        if states.len() != grads.len() || states.len() != self.m.len() {
            return Err(Error::Dimension {
                what: "optimizer persons",
                expected: self.m.len(),
                got: grads.len(),
            });
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (i, state) in states.iter_mut().enumerate() {
            for &block in free {
                let lr = rates.get(block);
                let g = grads[i].block(block);
                let m = self.m[i].block_mut(block);
                let v = self.v[i].block_mut(block);
                let x = state.block_mut(block);
                if g.len() != x.len() {
                    return Err(Error::Dimension {
                        what: "gradient block",
                        expected: x.len(),
                        got: g.len(),
                    });
                }
                for k in 0..x.len() {
                    m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                    v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                    let mh = m[k] / c1;
                    let vh = v[k] / c2;
                    x[k] -= lr * mh / (vh.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
