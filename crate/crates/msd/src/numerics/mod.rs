//! Deterministic dense linear algebra, trainable layers with analytic
//! gradients, LoRA wrapping, optimizers, and the seeded RNG.

pub mod gradcheck;
pub mod layer;
pub mod lora;
pub mod matrix;
pub mod optim;
pub mod rng;

pub use gradcheck::grad_check;
pub use layer::{log_softmax, sigmoid, softmax, Activation, MlpGrads, MlpLayer, MlpTape};
pub use lora::{LoraGrads, LoraLayer, LoraTape};
pub use matrix::{cosine, dot, norm, Matrix};
pub use optim::{OptimKind, Optimizer};
pub use rng::Rng;
