//! Rank-compression baselines: clients receive an SVD truncation of the
//! global adapters and the server zero-pads their updates back to the global rank.
//!
//! This one "truncate down, pad up" scheme stands in for both the
//! heterogeneous-rank and the SVD-redistribution families of methods. It
//! reproduces their shared mechanism (rank compression) and none of their
//! method-specific regularizers or weighting rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LoraPair;
use crate::numerics::{svd_truncate, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionScheme {
    /// Every client trains a globally small rank; no SVD anywhere.
    TrivialGlobalSmallRank,
    /// Clients train an SVD truncation at their own rank.
    SvdTruncateToClientRank,
}

/// Rank-`r_i` approximation of one adapter, with alpha rescaled so that
/// `(alpha_i / r_i) · L · R ≈ (alpha / r) · A · B`.
pub fn compress_pair(pair: &LoraPair, r_i: usize) -> Result<LoraPair> {
    let r = pair.rank();
    if r_i == 0 || r_i > r {
        return Err(Error::domain(format!("client rank {r_i} outside [1, {r}]")));
    }
    let delta = pair.a.matmul(&pair.b)?;
    let q = delta.rows().min(delta.cols());
    let (left, right) = if r_i <= q {
        svd_truncate(&delta, r_i)?
    } else {
        // rank above min(m, n): the full SVD is exact, pad to keep the requested width
        let (l, rt) = svd_truncate(&delta, q)?;
        pad_factors(&l, &rt, r_i)
    };
    Ok(LoraPair {
        a: left,
        b: right,
        alpha: pair.alpha * r_i as f64 / r as f64,
    })
}

/// Per-expert compression of a global adapter set.
pub fn compress_for_client(global: &[LoraPair], r_i: usize) -> Result<Vec<LoraPair>> {
    global.iter().map(|p| compress_pair(p, r_i)).collect()
}

/// Zero-pads a rank-`r_i` pair to `r_global`, restoring the global alpha; the merged delta is unchanged.
pub fn decompress_update(pair: &LoraPair, r_global: usize) -> Result<LoraPair> {
    let r_i = pair.rank();
    if r_i > r_global {
        return Err(Error::domain(format!(
            "client rank {r_i} exceeds global rank {r_global}"
        )));
    }
    if r_i == r_global {
        return Ok(pair.clone());
    }
    let (a, b) = pad_factors(&pair.a, &pair.b, r_global);
    Ok(LoraPair {
        a,
        b,
        alpha: pair.alpha * r_global as f64 / r_i as f64,
    })
}

fn pad_factors(left: &Matrix, right: &Matrix, rank: usize) -> (Matrix, Matrix) {
    let mut a = Matrix::zeros(left.rows(), rank);
    for r in 0..left.rows() {
        for c in 0..left.cols() {
            a.set(r, c, left.get(r, c));
        }
    }
    let mut b = Matrix::zeros(rank, right.cols());
    for r in 0..right.rows() {
        for c in 0..right.cols() {
            b.set(r, c, right.get(r, c));
        }
    }
    (a, b)
}
