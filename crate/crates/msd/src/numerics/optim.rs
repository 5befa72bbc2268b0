//! SGD and Adam over named parameter blocks.
//!
//! Models register each trainable block under a stable slot index and call
//! [`Optimizer::step`] with that slot every iteration. Moment buffers are
//! keyed by slot, so blocks may be stepped in any order. Frozen tensors are
//! simply never registered, which makes "the optimizer cannot touch w0" a
//! structural guarantee rather than a convention.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimKind {
    pub fn adam() -> Self {
        OptimKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimKind,
    pub learning_rate: f64,
    slots: Vec<Slot>,
}

impl Optimizer {
    pub fn new(kind: OptimKind, learning_rate: f64) -> Self {
        Optimizer {
            kind,
            learning_rate,
            slots: Vec::new(),
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimKind::adam(), learning_rate)
    }

    /// Applies one update to a parameter block. For SGD the per-coordinate
    /// change is exactly `learning_rate · grad`; for Adam the moments live in
    /// the slot, with bias correction driven by the slot's own step count.
    pub fn step(&mut self, slot: usize, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::LengthMismatch {
                op: "optimizer step",
                expected: params.len(),
                got: grads.len(),
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                op: "optimizer step",
                detail: format!("gradient in slot {slot}"),
            });
        }
        match self.kind {
            OptimKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= self.learning_rate * g;
                }
            }
            OptimKind::Adam { beta1, beta2, eps } => {
                if self.slots.len() <= slot {
                    self.slots.resize(slot + 1, Slot::default());
                }
                let s = &mut self.slots[slot];
                if s.m.is_empty() {
                    s.m = vec![0.0; params.len()];
                    s.v = vec![0.0; params.len()];
                } else if s.m.len() != params.len() {
                    return Err(Error::LengthMismatch {
                        op: "optimizer slot reuse",
                        expected: s.m.len(),
                        got: params.len(),
                    });
                }
                s.t += 1;
                let bc1 = 1.0 - beta1.powi(s.t as i32);
                let bc2 = 1.0 - beta2.powi(s.t as i32);
                for i in 0..params.len() {
                    let g = grads[i];
                    s.m[i] = beta1 * s.m[i] + (1.0 - beta1) * g;
                    s.v[i] = beta2 * s.v[i] + (1.0 - beta2) * g * g;
                    let mhat = s.m[i] / bc1;
                    let vhat = s.v[i] / bc2;
                    params[i] -= self.learning_rate * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}
