//! SGD and AdamW over flat parameter lists.

use serde::{Deserialize, Serialize};

use crate::error::{ClpError, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    AdamW,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first_moment: Vec<Vec<Real>>,
    second_moment: Vec<Vec<Real>>,
}

impl Optimizer {
    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::build(OptimizerKind::Sgd, learning_rate, 0.0)
    }

    /// AdamW with betas (0.9, 0.999) and eps 1e-8.
    pub fn adamw(learning_rate: f64, weight_decay: f64) -> Result<Self> {
        Self::build(OptimizerKind::AdamW, learning_rate, weight_decay)
    }

    fn build(kind: OptimizerKind, learning_rate: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(ClpError::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if weight_decay < 0.0 {
            return Err(ClpError::Config(format!("negative weight decay {weight_decay}")));
        }
        Ok(Self {
            kind,
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite
    /// or any shape disagrees.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(ClpError::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(ClpError::Shape(format!(
                    "parameter {i}: shape {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if let Some(pos) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(ClpError::NumericDomain(format!(
                    "non-finite gradient in parameter {i} at element {pos} (step {})",
                    self.step + 1
                )));
            }
        }
        if self.kind == OptimizerKind::AdamW {
            if self.first_moment.is_empty() {
                self.first_moment = params.iter().map(|p| vec![0.0; p.numel()]).collect();
                self.second_moment = self.first_moment.clone();
            } else if self.first_moment.len() != params.len()
                || self.first_moment.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel())
            {
                return Err(ClpError::Shape("parameter list changed between optimizer steps".into()));
            }
        }

        self.step += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w = (*w as f64 - lr * *d as f64) as Real;
                    }
                }
            }
            OptimizerKind::AdamW => {
                let t = self.step as i32;
                let bc1 = 1.0 - self.beta1.powi(t);
                let bc2 = 1.0 - self.beta2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let m = &mut self.first_moment[i];
                    let v = &mut self.second_moment[i];
                    for (j, (w, d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        let d = *d as f64;
                        let mj = self.beta1 * m[j] as f64 + (1.0 - self.beta1) * d;
                        let vj = self.beta2 * v[j] as f64 + (1.0 - self.beta2) * d * d;
                        m[j] = mj as Real;
                        v[j] = vj as Real;
                        let update = (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                        let decayed = *w as f64 * (1.0 - lr * self.weight_decay);
                        *w = (decayed - lr * update) as Real;
                    }
                }
            }
        }
        Ok(())
    }
}
