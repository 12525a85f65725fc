//! Adam and RMSprop with fixed moment constants.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const RMSPROP_RHO: f64 = 0.9;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Adam,
    RmsProp,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::RmsProp => "rmsprop",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Some(OptimizerKind::Adam),
            "rmsprop" => Some(OptimizerKind::RmsProp),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate,
        }
    }

    pub fn rmsprop(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::RmsProp,
            learning_rate,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: OptimizerConfig,
    /// First moments (Adam only; empty for RMSprop).
    first: Vec<Vec<f64>>,
    /// Second moments (Adam) or running mean of squared gradients (RMSprop).
    second: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &[&Tensor]) -> Result<Self> {
        if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
            return Err(Error::Parameter(alloc::format!(
                "learning rate must be positive, got {}",
                config.learning_rate
            )));
        }
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let first = match config.kind {
            OptimizerKind::Adam => zeros.clone(),
            OptimizerKind::RmsProp => Vec::new(),
        };
        Ok(OptimizerState {
            config,
            first,
            second: zeros,
            step: 0,
        })
    }

    pub fn config(&self) -> OptimizerConfig {
        self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every `(name, parameter, gradient)` triple.
    /// Parameters are left untouched if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor, &[f64])]) -> Result<()> {
        if params.len() != self.second.len() {
            return Err(Error::State(alloc::format!(
                "optimizer tracks {} parameters, got {}",
                self.second.len(),
                params.len()
            )));
        }
        for ((name, p, g), v) in params.iter().zip(&self.second) {
            if p.numel() != v.len() || g.len() != v.len() {
                return Err(Error::shape("optimizer_step", p.shape(), &[g.len()]));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(String::from(*name)));
            }
        }
        self.step += 1;
        let lr = self.config.learning_rate;
        match self.config.kind {
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - libm::pow(ADAM_BETA1, t as f64);
                let bc2 = 1.0 - libm::pow(ADAM_BETA2, t as f64);
                for (((_, p, g), m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    for (((w, gv), mv), vv) in p.data_mut().iter_mut().zip(g.iter()).zip(m).zip(v) {
                        *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                        *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                        let m_hat = *mv / bc1;
                        let v_hat = *vv / bc2;
                        *w -= lr * m_hat / (libm::sqrt(v_hat) + EPSILON);
                    }
                }
            }
            OptimizerKind::RmsProp => {
                for ((_, p, g), v) in params.iter_mut().zip(&mut self.second) {
                    for ((w, gv), vv) in p.data_mut().iter_mut().zip(g.iter()).zip(v) {
                        *vv = RMSPROP_RHO * *vv + (1.0 - RMSPROP_RHO) * gv * gv;
                        *w -= lr * gv / (libm::sqrt(*vv) + EPSILON);
                    }
                }
            }
        }
        Ok(())
    }
}
