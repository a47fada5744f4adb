//! Stochastic gradient descent with heavy-ball momentum.

use serde::{Deserialize, Serialize};

/// `g ← clip(g) + wd·θ`, `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescale the raw gradient to at most this Euclidean norm.
    pub max_grad_norm: Option<f64>,
    pub velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, n_params: usize) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay: 0.0,
            max_grad_norm: None,
            velocity: vec![0.0; n_params],
        }
    }

    pub fn with_regularization(mut self, weight_decay: f64, max_grad_norm: Option<f64>) -> Self {
        self.weight_decay = weight_decay;
        self.max_grad_norm = max_grad_norm;
        self
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        let scale = match self.max_grad_norm {
            Some(limit) => {
                let n = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if n > limit {
                    limit / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            let g = scale * g + self.weight_decay * *p;
            *v = self.momentum * *v + g;
            *p -= self.learning_rate * *v;
        }
    }
}
