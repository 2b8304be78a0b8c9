use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::matrix::Matrix;

pub const DEFAULT_LR: f64 = 1.5e-4;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
        }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Matrix,
    pub second_moment: Matrix,
    pub step_count: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize, hyper: AdamHyper) -> Self {
        Self {
            first_moment: Matrix::zeros(rows, cols),
            second_moment: Matrix::zeros(rows, cols),
            step_count: 0,
            hyper,
        }
    }

    pub fn for_param(param: &Matrix, hyper: AdamHyper) -> Self {
        Self::new(param.rows(), param.cols(), hyper)
    }
}

/// One bias-corrected Adam step. Returns the new parameter and state; inputs are untouched.
pub fn adam_step(param: &Matrix, grad: &Matrix, state: &AdamState) -> Result<(Matrix, AdamState)> {
    param.check_same_shape("adam_step", grad)?;
    param.check_same_shape("adam_step", &state.first_moment)?;
    let mut next = state.clone();
    let mut out = param.clone();
    adam_update_in_place(&mut out, grad, &mut next)?;
    Ok((out, next))
}

/// In-place variant used by the training loop.
pub fn adam_update_in_place(param: &mut Matrix, grad: &Matrix, state: &mut AdamState) -> Result<()> {
    param.check_same_shape("adam_step", grad)?;
    param.check_same_shape("adam_step", &state.first_moment)?;
    let AdamHyper {
        lr,
        beta1,
        beta2,
        eps,
    } = state.hyper;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    for (((p, g), m), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
