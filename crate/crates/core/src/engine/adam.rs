use serde::{Deserialize, Serialize};

use super::{EngineError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for a fixed list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor], config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    /// One bias-corrected Adam update in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), EngineError> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(EngineError::InvalidState(format!(
                "{} params, {} grads, optimizer tracks {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(EngineError::InvalidState(format!(
                    "param {i}: shape {:?}, grad {:?}, moments {:?}",
                    p.shape(),
                    g.shape(),
                    self.m[i].shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (pd, gd) = (p.data_mut(), g.data());
            let (md, vd) = (m.data_mut(), v.data_mut());
            for k in 0..pd.len() {
                md[k] = beta1 * md[k] + (1.0 - beta1) * gd[k];
                vd[k] = beta2 * vd[k] + (1.0 - beta2) * gd[k] * gd[k];
                let mhat = md[k] / c1;
                let vhat = vd[k] / c2;
                pd[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
