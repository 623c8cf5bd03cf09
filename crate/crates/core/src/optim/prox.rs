//! Closed-form proximal operators of the ℓ1 and ℓ2,1 norms.

use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum ProxError {
    #[error("threshold must be finite and nonnegative, got {0}")]
    BadThreshold(f64),
}

fn check(tau: f64) -> Result<(), ProxError> {
    if tau.is_finite() && tau >= 0.0 {
        Ok(())
    } else {
        Err(ProxError::BadThreshold(tau))
    }
}

/// Soft-thresholding: `sign(y_i) · max(|y_i| − τ, 0)`, with exact `0.0` in
/// the dead zone.
pub fn prox_l1(y: &[f64], tau: f64) -> Result<Vec<f64>, ProxError> {
    let mut z = y.to_vec();
    prox_l1_in_place(&mut z, tau)?;
    Ok(z)
}

pub fn prox_l1_in_place(y: &mut [f64], tau: f64) -> Result<(), ProxError> {
    check(tau)?;
    for v in y.iter_mut() {
        let mag = v.abs();
        *v = if mag > tau { v.signum() * (mag - tau) } else { 0.0 };
    }
    Ok(())
}

/// Row-wise group shrinkage: row `i` is scaled by `(‖Y_i‖ − τ) / ‖Y_i‖` when
/// `τ < ‖Y_i‖` and set to exact zeros otherwise.
pub fn prox_l21(y: &DenseMatrix, tau: f64) -> Result<DenseMatrix, ProxError> {
    let mut z = y.clone();
    prox_l21_in_place(&mut z, tau)?;
    Ok(z)
}

pub fn prox_l21_in_place(y: &mut DenseMatrix, tau: f64) -> Result<(), ProxError> {
    check(tau)?;
    for i in 0..y.rows() {
        let norm = y.row_norm(i);
        let row = y.row_mut(i);
        if tau < norm {
            let shrink = (norm - tau) / norm;
            row.iter_mut().for_each(|v| *v *= shrink);
        } else {
            row.fill(0.0);
        }
    }
    Ok(())
}

pub fn l1_norm(p: &[f64]) -> f64 {
    p.iter().map(|v| v.abs()).sum()
}

/// Sum of the Euclidean norms of the rows.
pub fn l21_norm(p: &DenseMatrix) -> f64 {
    (0..p.rows()).map(|i| p.row_norm(i)).sum()
}

pub fn regularizer_l1(p: &[f64], lambda: f64) -> Result<f64, ProxError> {
    check(lambda)?;
    Ok(lambda * l1_norm(p))
}

pub fn regularizer_l21(p: &DenseMatrix, lambda: f64) -> Result<f64, ProxError> {
    check(lambda)?;
    Ok(lambda * l21_norm(p))
}

/// Nonzero rows of `p`.
pub fn nonzero_rows(p: &DenseMatrix) -> usize {
    (0..p.rows())
        .filter(|&i| p.row(i).iter().any(|&v| v != 0.0))
        .count()
}
