//! Dense linear algebra used throughout the crate.

mod matrix;
mod svd;

pub use matrix::{diag_rect, frobenius_norm, matmul, max_abs_diff, relative_frobenius, Matrix};
pub use svd::{reconstruct, svd, SvdFactors, CONVERGENCE_TOL, SWEEP_FACTOR};
