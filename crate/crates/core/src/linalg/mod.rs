//! Deterministic dense linear-algebra kernel: seeded random matrices,
//! Householder orthonormalization, matrix products, row softmax, and the
//! finite-difference gradient oracle.
//!
//! All operations are pure functions over immutable inputs. [`DetRng`] is
//! single-owner mutable state; callers split named streams instead of
//! sharing one generator.

mod grad;
mod matrix;
mod qr;
mod rng;

pub use grad::finite_diff_grad;
pub use matrix::Matrix;
pub use qr::{householder_q, qr_orthonormal};
pub use rng::{fnv1a64, gaussian_matrix, uniform_matrix, DetRng};
