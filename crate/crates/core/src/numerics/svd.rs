//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! Columns of a working copy of the input are rotated pairwise until every
//! pair is orthogonal to within [`JACOBI_TOL`] (as a cosine). The column norms
//! are then the singular values, the normalized columns are `U`, and the
//! accumulated rotations are `V`.

use crate::error::{Error, Result};
use crate::numerics::matrix::{dot, Matrix};

pub const JACOBI_TOL: f64 = 1e-10;
pub const MAX_SWEEPS: usize = 100;

/// `u · diag(singular_values) · vt` with `q = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub vt: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (c, s) in self.singular_values.iter().enumerate() {
                let v = us.get(r, c) * s;
                us.set(r, c, v);
            }
        }
        us.matmul(&self.vt).expect("svd factors have consistent shapes")
    }
}

pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::domain("svd of an empty matrix"));
    }
    if !m.is_finite() {
        return Err(Error::Numeric("svd input contains non-finite entries".into()));
    }
    if m.rows() >= m.cols() {
        jacobi_tall(m)
    } else {
        let t = jacobi_tall(&m.transpose())?;
        Ok(SvdResult {
            u: t.vt.transpose(),
            singular_values: t.singular_values,
            vt: t.u.transpose(),
        })
    }
}

/// Best rank-`rank` approximation as `(U_r·diag(s_r), V_rᵀ)`.
pub fn svd_truncate(m: &Matrix, rank: usize) -> Result<(Matrix, Matrix)> {
    let q = m.rows().min(m.cols());
    if rank == 0 || rank > q {
        return Err(Error::domain(format!(
            "truncation rank {rank} outside [1, {q}] for a {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    let full = svd(m)?;
    let mut left = Matrix::zeros(m.rows(), rank);
    for r in 0..m.rows() {
        for c in 0..rank {
            left.set(r, c, full.u.get(r, c) * full.singular_values[c]);
        }
    }
    let mut right = Matrix::zeros(rank, m.cols());
    for r in 0..rank {
        for c in 0..m.cols() {
            right.set(r, c, full.vt.get(r, c));
        }
    }
    Ok((left, right))
}

// Works column-major internally: `cols[j]` is column j of the working matrix.
fn jacobi_tall(m: &Matrix) -> Result<SvdResult> {
    let (rows, n) = m.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| m.column(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "Jacobi SVD did not converge within {MAX_SWEEPS} sweeps"
        )));
    }

    let mut sigma: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));

    let sigma_max = sigma[order[0]];
    let cutoff = sigma_max * 1e-13 * rows as f64;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        if sigma[j] > cutoff && sigma[j] > 0.0 {
            u_cols.push(cols[j].iter().map(|x| x / sigma[j]).collect());
        } else {
            sigma[j] = 0.0;
            u_cols.push(Vec::new());
            deficient.push(slot);
        }
    }
    complete_orthonormal(&mut u_cols, &deficient, rows);

    let mut u = Matrix::zeros(rows, n);
    let mut vt = Matrix::zeros(n, n);
    let mut values = Vec::with_capacity(n);
    for (slot, &j) in order.iter().enumerate() {
        values.push(sigma[j]);
        for r in 0..rows {
            u.set(r, slot, u_cols[slot][r]);
        }
        for c in 0..n {
            vt.set(slot, c, v[j][c]);
        }
    }
    Ok(SvdResult {
        u,
        singular_values: values,
        vt,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the empty slots with unit vectors orthogonal to every filled column.
///
/// Each slot takes the standard basis vector with the largest residual after
/// projecting out the filled columns. While fewer than `dim` columns are
/// filled, that residual has squared norm at least `(dim - filled) / dim`.
fn complete_orthonormal(u_cols: &mut [Vec<f64>], slots: &[usize], dim: usize) {
    for &slot in slots {
        let best = (0..dim)
            .map(|candidate| {
                let mut e = vec![0.0; dim];
                e[candidate] = 1.0;
                // two passes of modified Gram-Schmidt
                for _ in 0..2 {
                    for other in u_cols.iter().filter(|c| !c.is_empty()) {
                        let proj = dot(&e, other);
                        for (x, o) in e.iter_mut().zip(other) {
                            *x -= proj * o;
                        }
                    }
                }
                let norm = dot(&e, &e).sqrt();
                (norm, e)
            })
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .expect("dim is at least 1");
        let (norm, e) = best;
        assert!(norm > 0.0, "no orthonormal completion available");
        u_cols[slot] = e.into_iter().map(|x| x / norm).collect();
    }
}
