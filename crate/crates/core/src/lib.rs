//! Patch-level autoregressive generation engine at desk scale:
//! order-planned patch generation with a bounded context pool,
//! order-aware relative position embeddings, a small trainable patch
//! decoder over a deterministic numeric kernel, and a mock visual
//! codec with procedural pattern datasets.

pub mod codec;
pub mod decoder;
pub mod error;
pub mod grid;
pub mod numerics;
pub mod pipeline;
pub mod plan;
pub mod pool;

pub use error::{Error, Result};
