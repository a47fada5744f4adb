//! Dense feed-forward layers with reverse-mode gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// `y = act(W x + b)`, with `W` stored row-major as `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    /// Weights uniform in `±sqrt(3/fan_in)` (unit output variance for unit-variance inputs),
    /// biases zero.
    pub fn init(inputs: usize, outputs: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let bound = (3.0 / inputs as f64).sqrt();
        let weights = (0..outputs)
            .map(|_| (0..inputs).map(|_| rng.random_range(-bound..bound)).collect())
            .collect();
        let bias = vec![0.0; outputs];
        Self {
            weights,
            bias,
            activation,
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weights: (0..dim)
                .map(|r| (0..dim).map(|c| f64::from(u8::from(r == c))).collect())
                .collect(),
            bias: vec![0.0; dim],
            activation: Activation::Identity,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn outputs(&self) -> usize {
        self.weights.len()
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| {
                let pre: f64 = w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b;
                self.activation.apply(pre)
            })
            .collect()
    }
}

/// A stack of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Every layer's input plus the final output for one sample.
#[derive(Debug, Clone)]
pub struct Trace {
    pub activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().map_or(&[], Vec::as_slice)
    }
}

impl Mlp {
    /// Layer widths `dims[0] → dims[1] → ...`, each layer using the matching entry of `acts`.
    pub fn init(dims: &[usize], acts: &[Activation], rng: &mut ChaCha8Rng) -> Self {
        let layers = dims
            .windows(2)
            .zip(acts)
            .map(|(w, &a)| Dense::init(w[0], w[1], a, rng))
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Dense::inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::outputs)
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.outputs() * (l.inputs() + 1))
            .sum()
    }

    pub fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Trace {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_vec());
        for layer in &self.layers {
            let next = layer.forward(activations.last().expect("nonempty"));
            activations.push(next);
        }
        Trace { activations }
    }

    pub fn output(&self, x: &[f64]) -> Vec<f64> {
        let mut v = x.to_vec();
        for layer in &self.layers {
            v = layer.forward(&v);
        }
        v
    }

    /// Accumulates `∂L/∂θ` into `grad` (flat, in [`Mlp::flatten`] order) and returns `∂L/∂x`.
    pub fn backward(&self, trace: &Trace, grad_output: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let mut upstream = grad_output.to_vec();
        let mut offset = self.n_params();
        for (k, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.activations[k];
            let output = &trace.activations[k + 1];
            let (n_out, n_in) = (layer.outputs(), layer.inputs());
            offset -= n_out * (n_in + 1);
            let delta: Vec<f64> = upstream
                .iter()
                .zip(output)
                .map(|(g, y)| g * layer.activation.derivative_from_output(*y))
                .collect();
            let mut downstream = vec![0.0; n_in];
            for (r, &d) in delta.iter().enumerate() {
                let row = offset + r * n_in;
                for (c, &x) in input.iter().enumerate() {
                    grad[row + c] += d * x;
                    downstream[c] += d * layer.weights[r][c];
                }
                grad[offset + n_out * n_in + r] += d;
            }
            upstream = downstream;
        }
        upstream
    }

    /// Parameters layer by layer: weights row-major, then biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            for row in &l.weights {
                out.extend_from_slice(row);
            }
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn assign(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for row in &mut l.weights {
                row.iter_mut().for_each(|w| *w = it.next().expect("length checked"));
            }
            l.bias.iter_mut().for_each(|b| *b = it.next().expect("length checked"));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.bias.iter().all(|v| v.is_finite())
                && l.weights.iter().flatten().all(|v| v.is_finite())
        })
    }
}
