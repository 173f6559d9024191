//! SGD with momentum (weight decay folded into the gradient) and Adam.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter auxiliary buffers, created lazily on the first step and
/// shaped exactly like the parameters they track.
#[derive(Clone, Debug)]
pub enum OptimizerState {
    SgdMomentum {
        config: SgdConfig,
        velocity: Vec<Tensor>,
        steps: u64,
    },
    Adam {
        config: AdamConfig,
        first: Vec<Tensor>,
        second: Vec<Tensor>,
        steps: u64,
    },
}

impl OptimizerState {
    pub fn sgd(config: SgdConfig) -> Self {
        OptimizerState::SgdMomentum {
            config,
            velocity: Vec::new(),
            steps: 0,
        }
    }

    pub fn adam(config: AdamConfig) -> Self {
        OptimizerState::Adam {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        match self {
            OptimizerState::SgdMomentum { steps, .. } | OptimizerState::Adam { steps, .. } => {
                *steps
            }
        }
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        check_shapes(params, grads)?;
        match self {
            OptimizerState::SgdMomentum {
                config,
                velocity,
                steps,
            } => {
                init_buffers(velocity, params)?;
                for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
                    for ((pe, &ge), ve) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *ve = config.momentum * *ve + (ge + config.weight_decay * *pe);
                        *pe -= config.lr * *ve;
                    }
                }
                *steps += 1;
            }
            OptimizerState::Adam {
                config,
                first,
                second,
                steps,
            } => {
                init_buffers(first, params)?;
                init_buffers(second, params)?;
                *steps += 1;
                let t = *steps as i32;
                let c1 = 1.0 - config.beta1.powi(t);
                let c2 = 1.0 - config.beta2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(first.iter_mut())
                    .zip(second.iter_mut())
                {
                    for (((pe, &ge), me), ve) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *me = config.beta1 * *me + (1.0 - config.beta1) * ge;
                        *ve = config.beta2 * *ve + (1.0 - config.beta2) * ge * ge;
                        let m_hat = *me / c1;
                        let v_hat = *ve / c2;
                        *pe -= config.lr * m_hat / (v_hat.sqrt() + config.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

fn check_shapes(params: &[&mut Tensor], grads: &[&Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Dimension {
            op: "optimizer step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Dimension {
                op: "optimizer step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    Ok(())
}

fn init_buffers(buffers: &mut Vec<Tensor>, params: &[&mut Tensor]) -> Result<()> {
    if buffers.is_empty() {
        *buffers = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        return Ok(());
    }
    if buffers.len() != params.len()
        || buffers
            .iter()
            .zip(params)
            .any(|(b, p)| b.shape() != p.shape())
    {
        return Err(Error::Dimension {
            op: "optimizer state",
            lhs: buffers
                .first()
                .map(|b| b.shape().to_vec())
                .unwrap_or_default(),
            rhs: params
                .first()
                .map(|p| p.shape().to_vec())
                .unwrap_or_default(),
        });
    }
    Ok(())
}
