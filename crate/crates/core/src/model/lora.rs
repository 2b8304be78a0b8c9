use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Standard deviation of the Gaussian used for the `a` factor at init.
pub const LORA_INIT_STD: f64 = 0.02;
pub const DEFAULT_LORA_ALPHA: f64 = 16.0;

/// Low-rank adapter contributing `(alpha / r) · a · b` to an `m × n` weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraPair {
    pub a: Matrix,
    pub b: Matrix,
    pub alpha: f64,
}

impl LoraPair {
    pub fn new(a: Matrix, b: Matrix, alpha: f64) -> Result<Self> {
        if a.cols() != b.rows() {
            return Err(Error::Dimension {
                op: "LoraPair::new",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        if a.cols() == 0 {
            return Err(Error::domain("LoRA rank must be at least 1"));
        }
        Ok(Self { a, b, alpha })
    }

    /// `a ~ N(0, 0.02²)`, `b = 0`, so the initial delta is exactly zero.
    pub fn init<R: Rng + ?Sized>(out_dim: usize, in_dim: usize, rank: usize, alpha: f64, rng: &mut R) -> Self {
        Self {
            a: Matrix::random_normal(out_dim, rank, LORA_INIT_STD, rng),
            b: Matrix::zeros(rank, in_dim),
            alpha,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.b.cols()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    /// The merged update `(alpha / r) · a · b`.
    pub fn delta(&self) -> Matrix {
        self.a
            .matmul(&self.b)
            .expect("LoraPair invariant: a.cols == b.rows")
            .scale(self.scaling())
    }

    /// `b · x`, the rank-space projection.
    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.b.matvec(x)
    }

    /// `(alpha / r) · a · (b · x)` without forming the merged delta.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let u = self.project(x)?;
        let scale = self.scaling();
        Ok(self.a.matvec(&u)?.into_iter().map(|v| v * scale).collect())
    }

    pub fn same_shape(&self, other: &LoraPair) -> bool {
        self.a.shape() == other.a.shape() && self.b.shape() == other.b.shape()
    }
}
