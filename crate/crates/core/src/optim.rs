//! Binary cross-entropy loss, the output-layer error seed, and SGD/Adam
//! weight updates.
//!
//! Gradients handed to the optimizer are *sums* over the mini-batch; the step
//! divides by the batch size so the learning rate is batch-size independent.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),
    #[error("gradient {index} has shape {grad:?}, parameter has {param:?}")]
    ShapeMismatch {
        index: usize,
        grad: Vec<usize>,
        param: Vec<usize>,
    },
    #[error("{params} parameters but {grads} gradients")]
    CountMismatch { params: usize, grads: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self { kind: OptimizerKind::Sgd, learning_rate, ..Default::default() }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self { kind: OptimizerKind::Adam, learning_rate, ..Default::default() }
    }
}

/// Per-model optimizer state: Adam moments shaped like each parameter tensor
/// and a step counter. Owned by a single training loop.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, param_shapes: &[Vec<usize>]) -> Self {
        let zeros: Vec<Tensor> = param_shapes.iter().map(|s| Tensor::zeros(s.clone())).collect();
        Self { config, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one update. `grads` are batch-summed; each is divided by
    /// `batch_size` before the rule:
    /// - SGD: `w -= lr * g`
    /// - Adam: bias-corrected moment update, then `w -= lr * m_hat / (sqrt(v_hat) + eps)`
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        batch_size: usize,
    ) -> Result<(), OptimError> {
        if params.len() != grads.len() {
            return Err(OptimError::CountMismatch { params: params.len(), grads: grads.len() });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(OptimError::ShapeMismatch {
                    index: i,
                    grad: g.shape().to_vec(),
                    param: p.shape().to_vec(),
                });
            }
        }
        let scale = 1.0 / batch_size.max(1) as f64;
        self.t += 1;
        match self.config.kind {
            OptimizerKind::Sgd => {
                let lr = self.config.learning_rate;
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * gv * scale;
                    }
                }
            }
            OptimizerKind::Adam => {
                let OptimizerConfig { learning_rate: lr, beta1, beta2, epsilon, .. } = self.config;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    for ((w, &gv), (mi, vi)) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut().zip(v.iter_mut()))
                    {
                        let gh = gv * scale;
                        *mi = beta1 * *mi + (1.0 - beta1) * gh;
                        *vi = beta2 * *vi + (1.0 - beta2) * gh * gh;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}

const P_CLAMP: f64 = 1e-12;

/// Binary cross-entropy `-[y ln p + (1-y) ln(1-p)]` with `p` clamped to
/// `[1e-12, 1 - 1e-12]` before the logs.
pub fn bce_loss(p: f64, y: u8) -> Result<f64, OptimError> {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return Err(OptimError::InvalidProbability(p));
    }
    let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    Ok(if y == 1 { -p.ln() } else { -(1.0 - p).ln() })
}

/// Gradient of the BCE loss with respect to the sigmoid output neuron's
/// pre-activation: `p - y`. This seeds the backward chain.
pub fn output_error(p: f64, y: u8) -> f64 {
    p - f64::from(y)
}
