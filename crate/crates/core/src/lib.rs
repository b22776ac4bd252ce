//! EverTale engine core: continual character customization on a deterministic
//! toy attention generator.
//!
//! A story world owns a single shared low-rank adapter per attention
//! projection. Each character occupies an isolated orthonormal subspace of
//! the adapter, so integrating a new character cannot disturb the ones
//! already learned. Training is wrapped in a judge-scored quality gate, and
//! multi-character scenes are rendered with a two-stage region-focused
//! sampler.

pub mod adapter;
pub mod error;
pub mod generator;
pub mod judge;
pub mod linalg;
pub mod sampler;
pub mod scalar;
pub mod subspace;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Engine-wide element type; the kernel is generic, the engine runs in f64.
pub type Mat = linalg::Matrix<f64>;
/// Single-precision alias, used by the compact snapshot payload.
pub type Mat32 = linalg::Matrix<f32>;
