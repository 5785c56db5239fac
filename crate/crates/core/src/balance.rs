//! Magnitude balancing and scale extraction after ADMM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::precond::Preconditioner;

pub const DEFAULT_SCALE_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancedLatents {
    pub latent_u: DenseMatrix,
    pub latent_v: DenseMatrix,
    pub s1: Vec<f64>,
    pub s2: Vec<f64>,
    pub eta: f64,
}

/// Undoes preconditioning on the consensus pair, equalizes factor norms and reads
/// per-row scales off the balanced latents.
pub fn balance_and_extract_scales(
    p_u: &DenseMatrix,
    p_v: &DenseMatrix,
    precond: &Preconditioner,
    scale_floor: f64,
) -> Result<BalancedLatents> {
    if p_u.rows() != precond.diag_out.len() || p_v.rows() != precond.diag_in.len() {
        return Err(Error::dims(format!(
            "factors {}x{} / {}x{} vs preconditioner out {} in {}",
            p_u.rows(),
            p_u.cols(),
            p_v.rows(),
            p_v.cols(),
            precond.diag_out.len(),
            precond.diag_in.len()
        )));
    }
    if p_u.cols() != p_v.cols() {
        return Err(Error::dims("factor ranks differ"));
    }
    let inv_out: Vec<f64> = precond.diag_out.iter().map(|d| 1.0 / d).collect();
    let inv_in: Vec<f64> = precond.diag_in.iter().map(|d| 1.0 / d).collect();
    let u_hat = p_u.scale_rows(&inv_out)?;
    let v_hat = p_v.scale_rows(&inv_in)?;
    let (nu, nv) = (u_hat.frobenius_norm(), v_hat.frobenius_norm());
    let eta = if nu > 0.0 && nv > 0.0 {
        (nv / nu).sqrt()
    } else {
        1.0
    };
    let latent_u = u_hat.scale(eta);
    let latent_v = v_hat.scale(1.0 / eta);
    let s1 = row_mean_abs(&latent_u, scale_floor);
    let s2 = row_mean_abs(&latent_v, scale_floor);
    Ok(BalancedLatents {
        latent_u,
        latent_v,
        s1,
        s2,
        eta,
    })
}

fn row_mean_abs(m: &DenseMatrix, floor: f64) -> Vec<f64> {
    (0..m.rows())
        .map(|i| {
            let row = m.row(i);
            (row.iter().map(|v| v.abs()).sum::<f64>() / row.len() as f64).max(floor)
        })
        .collect()
}
