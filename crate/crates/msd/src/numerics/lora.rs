//! Low-rank adaptation of a frozen weight matrix.
//!
//! A `LoraLayer` keeps the pretrained weight `w0` (d_out×d_in) untouched and
//! learns a rank-`r` update `b·a` with `b` d_out×r and `a` r×d_in. The
//! effective weight is `w0 + (alpha/r)·b·a`; with the default `alpha = r`
//! the update is exactly `b·a`. `b` starts at zero so training begins at the
//! frozen model.

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::rng::Rng;

#[derive(Debug, Clone)]
pub struct LoraLayer {
    /// Frozen base weight; never receives optimizer updates.
    pub w0: Matrix,
    /// Trainable down-projection, r×d_in.
    pub a: Matrix,
    /// Trainable up-projection, d_out×r. Zero-initialized.
    pub b: Matrix,
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct LoraTape {
    input: Vec<f64>,
    /// a·x, cached for the b-gradient.
    ax: Vec<f64>,
}

impl LoraTape {
    pub fn ax(&self) -> &[f64] {
        &self.ax
    }
}

/// Gradients for the trainable factors. The base weight is frozen, which the
/// backward pass reports as an explicitly zero `d_w0`.
#[derive(Debug, Clone)]
pub struct LoraGrads {
    pub d_a: Matrix,
    pub d_b: Matrix,
    pub d_w0: Matrix,
}

impl LoraGrads {
    pub fn zeros_like(layer: &LoraLayer) -> Self {
        LoraGrads {
            d_a: Matrix::zeros(layer.a.rows(), layer.a.cols()),
            d_b: Matrix::zeros(layer.b.rows(), layer.b.cols()),
            d_w0: Matrix::zeros(layer.w0.rows(), layer.w0.cols()),
        }
    }

    pub fn add(&mut self, other: &LoraGrads) {
        for (x, y) in self.d_a.as_mut_slice().iter_mut().zip(other.d_a.as_slice()) {
            *x += y;
        }
        for (x, y) in self.d_b.as_mut_slice().iter_mut().zip(other.d_b.as_slice()) {
            *x += y;
        }
    }
}

impl LoraLayer {
    /// Wraps a frozen weight. `a` is small-uniform, `b` is zero, so the layer
    /// initially computes exactly `w0·x`.
    pub fn wrap(w0: Matrix, rank: usize, alpha: f64, rng: &mut Rng) -> Result<Self> {
        let (d_out, d_in) = (w0.rows(), w0.cols());
        if rank == 0 || rank >= d_out.min(d_in) {
            return Err(Error::InvalidConfig(format!(
                "lora rank {rank} must be in [1, min({d_out}, {d_in}))"
            )));
        }
        if alpha <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "lora alpha {alpha} must be positive"
            )));
        }
        Ok(LoraLayer {
            a: Matrix::uniform(rank, d_in, 0.01, rng),
            b: Matrix::zeros(d_out, rank),
            w0,
            rank,
            alpha,
        })
    }

    pub fn d_in(&self) -> usize {
        self.w0.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w0.rows()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// The dense effective weight `w0 + (alpha/r)·b·a`. Test and export
    /// helper; the forward path never materializes this.
    pub fn effective_weight(&self) -> Result<Matrix> {
        let mut delta = self.b.matmul(&self.a)?;
        delta.scale(self.scaling());
        let mut w = self.w0.clone();
        for (x, d) in w.as_mut_slice().iter_mut().zip(delta.as_slice()) {
            *x += d;
        }
        Ok(w)
    }

    /// Computes `w0·x + (alpha/r)·b·(a·x)` without forming the dense update.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, LoraTape)> {
        if x.len() != self.d_in() {
            return Err(Error::LengthMismatch {
                op: "lora_forward",
                expected: self.d_in(),
                got: x.len(),
            });
        }
        let mut y = self.w0.matvec(x)?;
        let ax = self.a.matvec(x)?;
        let bax = self.b.matvec(&ax)?;
        let s = self.scaling();
        for (yi, d) in y.iter_mut().zip(&bax) {
            *yi += s * d;
        }
        Ok((
            y,
            LoraTape {
                input: x.to_vec(),
                ax,
            },
        ))
    }

    /// Backward pass. `d_w0` in the result is always zero: the base weight is
    /// frozen and must never be stepped.
    pub fn backward(&self, tape: &LoraTape, upstream: &[f64]) -> Result<(Vec<f64>, LoraGrads)> {
        if tape.input.len() != self.d_in() || tape.ax.len() != self.rank {
            return Err(Error::LengthMismatch {
                op: "lora_backward (stale tape)",
                expected: self.d_in(),
                got: tape.input.len(),
            });
        }
        if upstream.len() != self.d_out() {
            return Err(Error::LengthMismatch {
                op: "lora_backward",
                expected: self.d_out(),
                got: upstream.len(),
            });
        }
        let s = self.scaling();
        let mut grads = LoraGrads::zeros_like(self);
        // dL/db = s · g ⊗ (a x)
        grads.d_b.add_outer(s, upstream, &tape.ax);
        // dL/da = s · (bᵀ g) ⊗ x
        let btg = self.b.t_matvec(upstream)?;
        grads.d_a.add_outer(s, &btg, &tape.input);
        // dL/dx = w0ᵀ g + s · aᵀ (bᵀ g)
        let mut dx = self.w0.t_matvec(upstream)?;
        let at_btg = self.a.t_matvec(&btg)?;
        for (d, v) in dx.iter_mut().zip(&at_btg) {
            *d += s * v;
        }
        Ok((dx, grads))
    }
}
