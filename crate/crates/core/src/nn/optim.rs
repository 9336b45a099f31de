use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::error::{Error, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    pub decay_factor: f64,
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            algorithm: Algorithm::Adam,
            learning_rate,
            decay_factor: 1.0,
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            algorithm: Algorithm::Sgd,
            learning_rate,
            decay_factor: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    algorithm: Algorithm,
    learning_rate: f64,
    decay_factor: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: &OptimizerConfig) -> Result<Self> {
        if !(config.learning_rate > 0.0) || !(config.decay_factor > 0.0 && config.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive and decay in (0, 1], got {} / {}",
                config.learning_rate, config.decay_factor
            )));
        }
        Ok(Optimizer {
            algorithm: config.algorithm,
            learning_rate: config.learning_rate,
            decay_factor: config.decay_factor,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn decay_learning_rate(&mut self) {
        self.learning_rate *= self.decay_factor;
    }

    /// Applies one descent step. Non-finite gradients leave `params` untouched.
    pub fn step<P, G>(&mut self, params: &mut P, grads: &G) -> Result<()>
    where
        P: Parameters + ?Sized,
        G: Parameters + ?Sized,
    {
        let grads = grads.slices();
        if !grads.iter().all(|g| g.iter().all(|v| v.is_finite())) {
            return Err(Error::Training("non-finite gradient".into()));
        }
        let mut params = params.slices_mut();
        if params.len() != grads.len() {
            return Err(Error::shape(params.len(), grads.len()));
        }
        for (p, g) in params.iter().zip(&grads) {
            if p.len() != g.len() {
                return Err(Error::shape(p.len(), g.len()));
            }
        }
        let lr = self.learning_rate;
        match self.algorithm {
            Algorithm::Sgd => {
                for (p, g) in params.iter_mut().zip(&grads) {
                    for (p, g) in p.iter_mut().zip(g.iter()) {
                        *p -= lr * g;
                    }
                }
            }
            Algorithm::Adam => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.v = self.m.clone();
                }
                self.t += 1;
                let bc1 = 1.0 - BETA1.powi(self.t as i32);
                let bc2 = 1.0 - BETA2.powi(self.t as i32);
                for (((p, g), m), v) in params.iter_mut().zip(&grads).zip(&mut self.m).zip(&mut self.v) {
                    for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *p -= lr * m_hat / (v_hat.sqrt() + EPS);
                    }
                }
                return Ok(());
            }
        }
        self.t += 1;
        Ok(())
    }
}
