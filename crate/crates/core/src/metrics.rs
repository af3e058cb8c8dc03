//! Achievable sum-rate and UL MSE.

use crate::digital::{received_covariance, DlFilters};
use crate::error::{Error, Result};
use crate::linalg::{c64, frob2, identity, log2_det_hpd, pinv, CMatrix};

/// Closed-form UL MSE of combiner `f` for user `u` at one subcarrier:
/// `N_s - 2 Re tr(F^H H_u^H T_u) + tr(F^H R F)` with `R` the received covariance.
///
/// `f` may be a digital combiner or a hybrid product `F_RF F_BB`.
pub fn ul_mse(h_ul: &[CMatrix], t: &[CMatrix], f: &CMatrix, u: usize, noise_var: f64) -> f64 {
    let r = received_covariance(h_ul, t, noise_var);
    mse_with_covariance(&r, &(&h_ul[u] * &t[u]), f)
}

pub(crate) fn mse_with_covariance(r: &CMatrix, desired: &CMatrix, f: &CMatrix) -> f64 {
    let n_s = desired.ncols() as f64;
    n_s - 2.0 * f.ad_mul(desired).trace().re + (f.adjoint() * r * f).trace().re
}

/// Right-hand side of the Frobenius bound
/// `MMSE + ||F_MMSE - F||^2 ||R^{1/2}||^2` for user `u`, together with the MMSE.
pub fn frobenius_mse_bound(
    h_ul: &[CMatrix],
    t: &[CMatrix],
    f_mmse: &CMatrix,
    f: &CMatrix,
    u: usize,
    noise_var: f64,
) -> (f64, f64) {
    let r = received_covariance(h_ul, t, noise_var);
    let mmse = mse_with_covariance(&r, &(&h_ul[u] * &t[u]), f_mmse);
    // ||R^{1/2}||_F^2 = tr(R) for Hermitian PSD R
    let bound = mmse + frob2(&(f_mmse - f)) * r.trace().re;
    (mmse, bound)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateReport {
    /// Sum over users of the per-user rates, averaged over subcarriers (bits/s/Hz).
    pub sum_rate: f64,
    /// `(u, k)` terms whose interference-plus-noise matrix was singular.
    pub singular_terms: usize,
}

/// `log2 det(I + X^{-1} S)` with a pseudo-inverse fallback for singular `X`.
fn rate_term(x: &CMatrix, s: &CMatrix) -> Result<(f64, bool)> {
    if let (Ok(a), Ok(b)) = (log2_det_hpd(&(x + s)), log2_det_hpd(x)) {
        return Ok((a - b, false));
    }
    let m = identity(x.nrows()) + pinv(x, None)? * s;
    let det = m.determinant();
    if !(det.norm() > 0.0) {
        return Err(Error::NonFinite);
    }
    Ok((det.norm().log2(), true))
}

/// Achievable DL sum-rate on the true channels `h_dl[u][k]` (`n_ms x n_bs`).
pub fn sum_rate(h_dl: &[Vec<CMatrix>], dl: &DlFilters, noise_var: f64) -> Result<RateReport> {
    let n_users = h_dl.len();
    if dl.precoders.len() != n_users || dl.combiners.len() != n_users {
        return Err(Error::dim("sum_rate", format!("{n_users} channels, {} precoders", dl.precoders.len())));
    }
    let n_k = h_dl.first().map_or(0, |h| h.len());
    let mut total = 0.0;
    let mut singular = 0;
    for u in 0..n_users {
        for k in 0..n_k {
            let w = &dl.combiners[u][k];
            let wh = w.ad_mul(&h_dl[u][k]);
            let mut x = w.ad_mul(w) * c64::from(noise_var);
            let mut s = CMatrix::zeros(w.ncols(), w.ncols());
            for i in 0..n_users {
                let g = &wh * &dl.precoders[i][k];
                let cov = &g * g.adjoint();
                if i == u {
                    s = cov;
                } else {
                    x += cov;
                }
            }
            let (r, sing) = rate_term(&x, &s)?;
            total += r;
            singular += sing as usize;
        }
    }
    Ok(RateReport {
        sum_rate: total / n_k as f64,
        singular_terms: singular,
    })
}
