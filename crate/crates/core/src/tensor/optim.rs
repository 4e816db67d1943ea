use serde::{Deserialize, Serialize};

use super::{ParameterSet, Result, TensorError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-7;
pub const ADAM_DEFAULT_LR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(ADAM_DEFAULT_LR)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    first: ParameterSet,
    second: ParameterSet,
}

/// Plain SGD (no momentum) or Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    config: OptimizerConfig,
    step: u64,
    moments: Option<Moments>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ParameterSet) -> Result<Self> {
        if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
            return Err(TensorError::InvalidModel(format!(
                "learning rate must be positive, got {}",
                config.learning_rate
            )));
        }
        let moments = match config.kind {
            OptimizerKind::Sgd => None,
            OptimizerKind::Adam => Some(Moments {
                first: params.zeros_like(),
                second: params.zeros_like(),
            }),
        };
        Ok(Self {
            config,
            step: 0,
            moments,
        })
    }

    pub fn config(&self) -> OptimizerConfig {
        self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Non-finite gradients are rejected
    /// before anything is modified.
    pub fn step(&mut self, params: &mut ParameterSet, grad: &ParameterSet) -> Result<()> {
        params.check_compatible(grad)?;
        if let Some(name) = grad.first_non_finite() {
            return Err(TensorError::NonFinite(name.to_string()));
        }
        let lr = self.config.learning_rate;
        match &mut self.moments {
            None => {
                params.add_scaled(-lr, grad)?;
            }
            Some(m) => {
                m.first.check_compatible(params)?;
                let t = (self.step + 1) as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                let tensors = params
                    .iter_mut()
                    .zip(grad.iter())
                    .zip(m.first.iter_mut().zip(m.second.iter_mut()));
                for (((_, p), (_, g)), ((_, m1), (_, m2))) in tensors {
                    let rows = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m1.data_mut().iter_mut().zip(m2.data_mut().iter_mut()));
                    for ((pv, &gv), (mv, vv)) in rows {
                        *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                        *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                        let m_hat = *mv / c1;
                        let v_hat = *vv / c2;
                        *pv -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
                    }
                }
            }
        }
        self.step += 1;
        Ok(())
    }
}
