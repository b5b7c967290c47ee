use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum {
        lr: f64,
        momentum: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl OptimizerKind {
    pub fn sgd(lr: f64) -> Self {
        OptimizerKind::SgdMomentum { lr, momentum: 0.9 }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerKind::SgdMomentum { lr, .. } | OptimizerKind::Adam { lr, .. } => lr,
        }
    }
}

/// Optimizer with its per-parameter accumulators. Buffers are sized on the
/// first step and every later step must present the same parameter count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind) -> Self {
        OptimizerState {
            kind,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Momentum (SGD) or first-moment (Adam) buffer.
    pub fn first_moment(&self) -> &[f64] {
        &self.first
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.second
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "optimizer_step",
                format!("{} gradients", params.len()),
                format!("{}", grads.len()),
            ));
        }
        if self.steps == 0 && self.first.is_empty() {
            self.first = vec![0.0; params.len()];
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = vec![0.0; params.len()];
            }
        }
        if self.first.len() != params.len() {
            return Err(Error::shape(
                "optimizer_step",
                format!("{} parameters", self.first.len()),
                format!("{}", params.len()),
            ));
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::SgdMomentum { lr, momentum } => {
                for ((p, v), g) in params.iter_mut().zip(&mut self.first).zip(grads) {
                    *v = momentum * *v + g;
                    *p -= lr * *v;
                }
            }
            OptimizerKind::Adam {
                lr,
                beta1,
                beta2,
                epsilon,
            } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, m), v), g) in params
                    .iter_mut()
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                    .zip(grads)
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
        Ok(())
    }
}
