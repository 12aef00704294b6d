//! Minimal deterministic differentiable numeric kernel.
//!
//! Dense 2D tensors, the handful of ops the decoder needs with
//! reverse-mode gradients, an Adam optimizer over a named parameter
//! store, a finite-difference gradient checker, and a binary
//! checkpoint format. Everything is single-threaded with a fixed
//! summation order so that identical seeds and inputs produce
//! bit-identical results.

mod checkpoint;
mod gradcheck;
mod rng;
mod store;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorRecord};
pub use gradcheck::{check_registered_ops, default_fd_step, default_tolerance, grad_check, OpCheck};
pub use rng::CounterRng;
pub use store::{AdamConfig, Param, ParamStore};
pub use tape::{attention, attention_biased, AttnMask, Tape, Var};
pub use tensor::Tensor;

/// Scalar element type. The default build is the 64-bit test mode;
/// the `f32` feature selects the 32-bit fast mode. Stated tolerances:
/// gradient checks 1e-4 (64-bit) / 1e-2 (32-bit), softmax row sums
/// 1e-12 (64-bit) / 1e-5 (32-bit).
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// Name of the active element type, as recorded in checkpoints.
#[cfg(not(feature = "f32"))]
pub const DTYPE: &str = "f64";
#[cfg(feature = "f32")]
pub const DTYPE: &str = "f32";

/// Bytes per element in the checkpoint blob.
pub const DTYPE_BYTES: usize = std::mem::size_of::<Real>();

/// Layer-norm variance epsilon, sized to the element precision.
#[cfg(not(feature = "f32"))]
pub const LN_EPS: Real = 1e-5;
#[cfg(feature = "f32")]
pub const LN_EPS: Real = 1e-3;

/// Tight comparison epsilon for the active mode: softmax row sums,
/// analytic-gradient identities, and similar exact-math checks.
#[cfg(not(feature = "f32"))]
pub const EPS_TIGHT: Real = 1e-12;
#[cfg(feature = "f32")]
pub const EPS_TIGHT: Real = 1e-4;
