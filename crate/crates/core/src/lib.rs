//! Universal mobile-traffic forecasting at desk scale.
//!
//! The pipeline: city grids are cut into mobile tokens, a transformer
//! denoiser is pretrained with task-oriented masked diffusion, then
//! fine-tuned contrastively against urban context (user dynamics and POI
//! distributions). Forecasts feed two downstream network optimizers:
//! base-station deployment and RRU sleep control, both with exact
//! brute-force oracles.
//!
//! Everything is seeded and deterministic: the same inputs produce
//! bitwise-identical outputs whether or not the `parallel` feature is
//! enabled (parallel maps are order-preserving, reductions sequential).

pub mod context;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod finetune;
pub mod gradcheck;
pub mod grid_store;
pub mod masking;
pub mod model;
pub mod netopt;
pub mod par;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod tokenizer;

pub use error::{CoreError, Result};
pub use tensor::Tensor;
