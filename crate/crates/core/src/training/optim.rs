use std::str::FromStr;

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

/// Per-encoder optimizer state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, len: usize) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Adam => (vec![0.0; len], vec![0.0; len]),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m,
            v,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(params.len(), grad.len());
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let bc1 = 1.0 - self.beta1.powi(self.t as i32);
                let bc2 = 1.0 - self.beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
    }
}

/// Sums gradients over `every` micro-batches before releasing them.
#[derive(Debug, Clone)]
pub struct Accumulator {
    sum: Vec<f64>,
    pending: usize,
    every: usize,
}

impl Accumulator {
    pub fn new(len: usize, every: usize) -> Self {
        Self {
            sum: vec![0.0; len],
            pending: 0,
            every: every.max(1),
        }
    }

    /// Adds one micro-batch gradient; true once `every` have been added.
    pub fn add(&mut self, grad: &[f64]) -> bool {
        for (s, g) in self.sum.iter_mut().zip(grad) {
            *s += g;
        }
        self.pending += 1;
        self.pending >= self.every
    }

    pub fn has_pending(&self) -> bool {
        self.pending > 0
    }

    pub fn take(&mut self) -> Vec<f64> {
        self.pending = 0;
        let len = self.sum.len();
        std::mem::replace(&mut self.sum, vec![0.0; len])
    }
}
