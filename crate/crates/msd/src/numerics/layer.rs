//! Dense layers with hand-written backward passes.

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    ReLU,
    Identity,
    Sigmoid,
    Softmax,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax; output sums to 1 within 1e-9.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// log(softmax(z)) computed without overflow.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|&x| (x - m).exp()).sum::<f64>().ln() + m;
    z.iter().map(|&x| x - lse).collect()
}

/// One dense layer: y = activation(weight · x + bias).
///
/// `weight` is d_out×d_in, matching the row-major storage convention used by
/// checkpoints.
#[derive(Debug, Clone)]
pub struct MlpLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// Cached activations from a forward call; everything backward needs.
#[derive(Debug, Clone)]
pub struct MlpTape {
    pub input: Vec<f64>,
    pub pre: Vec<f64>,
    pub out: Vec<f64>,
}

/// Parameter gradients for one layer, same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub d_weight: Matrix,
    pub d_bias: Vec<f64>,
}

impl MlpGrads {
    pub fn zeros_like(layer: &MlpLayer) -> Self {
        MlpGrads {
            d_weight: Matrix::zeros(layer.weight.rows(), layer.weight.cols()),
            d_bias: vec![0.0; layer.bias.len()],
        }
    }

    pub fn add(&mut self, other: &MlpGrads) {
        for (a, b) in self
            .d_weight
            .as_mut_slice()
            .iter_mut()
            .zip(other.d_weight.as_slice())
        {
            *a += b;
        }
        for (a, b) in self.d_bias.iter_mut().zip(&other.d_bias) {
            *a += b;
        }
    }
}

impl MlpLayer {
    pub fn zeros(d_out: usize, d_in: usize, activation: Activation) -> Self {
        MlpLayer {
            weight: Matrix::zeros(d_out, d_in),
            bias: vec![0.0; d_out],
            activation,
        }
    }

    /// Xavier-uniform weights, zero bias.
    pub fn xavier(d_out: usize, d_in: usize, activation: Activation, rng: &mut Rng) -> Self {
        let scale = (6.0 / (d_in + d_out) as f64).sqrt();
        MlpLayer {
            weight: Matrix::uniform(d_out, d_in, scale, rng),
            bias: vec![0.0; d_out],
            activation,
        }
    }

    pub fn identity(n: usize) -> Self {
        MlpLayer {
            weight: Matrix::identity(n),
            bias: vec![0.0; n],
            activation: Activation::Identity,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpTape)> {
        if x.len() != self.d_in() {
            return Err(Error::LengthMismatch {
                op: "mlp_forward",
                expected: self.d_in(),
                got: x.len(),
            });
        }
        let mut pre = self.weight.matvec(x)?;
        for (p, b) in pre.iter_mut().zip(&self.bias) {
            *p += b;
        }
        let out = match self.activation {
            Activation::Identity => pre.clone(),
            Activation::ReLU => pre.iter().map(|&z| z.max(0.0)).collect(),
            Activation::Sigmoid => pre.iter().map(|&z| sigmoid(z)).collect(),
            Activation::Softmax => softmax(&pre),
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "mlp_forward",
                detail: format!("layer {}x{}", self.d_out(), self.d_in()),
            });
        }
        let tape = MlpTape {
            input: x.to_vec(),
            pre,
            out: out.clone(),
        };
        Ok((out, tape))
    }

    /// Backward through activation and affine map.
    ///
    /// Returns the gradient w.r.t. the input plus parameter gradients. The
    /// tape must come from a forward call on this layer; a shape disagreement
    /// means a stale or foreign tape and is rejected.
    pub fn backward(&self, tape: &MlpTape, upstream: &[f64]) -> Result<(Vec<f64>, MlpGrads)> {
        if tape.input.len() != self.d_in() || tape.pre.len() != self.d_out() {
            return Err(Error::LengthMismatch {
                op: "mlp_backward (stale tape)",
                expected: self.d_in(),
                got: tape.input.len(),
            });
        }
        if upstream.len() != self.d_out() {
            return Err(Error::LengthMismatch {
                op: "mlp_backward",
                expected: self.d_out(),
                got: upstream.len(),
            });
        }
        // dL/d pre
        let dpre: Vec<f64> = match self.activation {
            Activation::Identity => upstream.to_vec(),
            Activation::ReLU => tape
                .pre
                .iter()
                .zip(upstream)
                .map(|(&z, &g)| if z > 0.0 { g } else { 0.0 })
                .collect(),
            Activation::Sigmoid => tape
                .out
                .iter()
                .zip(upstream)
                .map(|(&y, &g)| g * y * (1.0 - y))
                .collect(),
            Activation::Softmax => {
                // dz_i = y_i (g_i - Σ_j g_j y_j)
                let gy: f64 = upstream.iter().zip(&tape.out).map(|(g, y)| g * y).sum();
                tape.out
                    .iter()
                    .zip(upstream)
                    .map(|(&y, &g)| y * (g - gy))
                    .collect()
            }
        };
        let mut grads = MlpGrads::zeros_like(self);
        grads.d_weight.add_outer(1.0, &dpre, &tape.input);
        grads.d_bias.copy_from_slice(&dpre);
        let input_grad = self.weight.t_matvec(&dpre)?;
        Ok((input_grad, grads))
    }
}
