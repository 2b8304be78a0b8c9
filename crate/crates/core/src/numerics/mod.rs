//! Dense linear algebra, reductions, SVD and Adam.

mod adam;
mod matrix;
mod svd;
mod vector;

pub use adam::{adam_step, adam_update_in_place, AdamHyper, AdamState};
pub use matrix::{dot, matmul, Matrix};
pub use svd::{svd, svd_truncate, SvdResult, JACOBI_TOL, MAX_SWEEPS};
pub use vector::{log_sum_exp, softmax, topk_indices};
