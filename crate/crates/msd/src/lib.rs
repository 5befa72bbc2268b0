//! End-to-end semantic distillation for click-through-rate prediction.
//!
//! The pipeline implemented by this crate:
//!
//! 1. [`synth`] generates a seeded synthetic corpus of items, users and click
//!    logs in which attribute semantics causally drive clicks.
//! 2. [`knowledge`] samples items/users, builds prompts with in-context
//!    examples and obtains key-phrase records from a pluggable teacher
//!    (a deterministic mock by default).
//! 3. [`distill`] trains a tiny fixed-window language model to reproduce the
//!    teacher records and exposes pooled hidden states as semantic embeddings.
//! 4. [`fusion`] projects those embeddings through feature adaptors and fuses
//!    the top-k target-similar history items with frequency-guided masking.
//! 5. [`ctr`] assembles the full predictor (ID embeddings + semantic blocks),
//!    trains it end to end with the student base frozen and LoRA adapters
//!    trainable, and evaluates AUC / RelaImpr.
//! 6. [`serving`] precomputes a hot embedding store, backs misses with an LRU
//!    tier, and replays request traces against a simulated cost model.
//!
//! Everything is deterministic given a seed; [`numerics`] provides the dense
//! linear algebra, hand-written backward passes and the portable RNG that the
//! rest of the crate builds on. [`pipeline`] ties the stages together behind
//! content-hashed artifacts; the `msd-cli` crate exposes them as subcommands.

pub mod config;
pub mod ctr;
pub mod distill;
pub mod error;
pub mod fusion;
pub mod knowledge;
pub mod numerics;
pub mod pipeline;
pub mod serving;
pub mod synth;
pub mod text;

pub use error::{Error, Result};
pub use numerics::rng::Rng;
