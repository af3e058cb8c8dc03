//! Simultaneous weighted OMP over a common support shared by all subcarriers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{c64, frob2, pinv, svd, CMatrix, CVector};
use crate::serial;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseEstimate {
    /// Selected dictionary columns in discovery order.
    pub support: Vec<usize>,
    /// Per-subcarrier gains on `support`.
    #[serde(with = "serial::vector_vec")]
    pub gains: Vec<CVector>,
    pub residual_mse: f64,
    pub iterations: usize,
    /// Residual MSE before the first and after every iteration.
    pub mse_trace: Vec<f64>,
    /// Set when the selected columns were numerically rank deficient.
    pub rank_deficient: bool,
}

fn stack_columns(ys: &[CVector]) -> Result<CMatrix> {
    let rows = ys.first().map_or(0, |y| y.len());
    if ys.iter().any(|y| y.len() != rows) {
        return Err(Error::dim("sw_omp", "measurement vectors differ in length"));
    }
    Ok(CMatrix::from_fn(rows, ys.len(), |i, k| ys[k][i]))
}

/// Column scores `sum_k |c_p[k]|`.
fn correlation_scores(c: &CMatrix) -> Vec<f64> {
    c.row_iter().map(|row| row.iter().map(|z| z.norm()).sum()).collect()
}

/// Runs SW-OMP on whitened measurements `y_w[k]` and whitened sensing matrix `a`.
///
/// Halts when the residual MSE drops below `epsilon` or the support reaches
/// `max_support`. Ties in the selection go to the lowest column index.
pub fn sw_omp(y_w: &[CVector], a: &CMatrix, epsilon: f64, max_support: usize) -> Result<SparseEstimate> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon = {epsilon} must be positive")));
    }
    let y = stack_columns(y_w)?;
    if y.nrows() != a.nrows() {
        return Err(Error::dim(
            "sw_omp",
            format!("{} measurements for a {}-row sensing matrix", y.nrows(), a.nrows()),
        ));
    }
    let denom = (y.nrows() * y.ncols()).max(1) as f64;
    let mut residual = y.clone();
    let mut mse = frob2(&residual) / denom;
    let mut support: Vec<usize> = Vec::new();
    let mut coeffs = CMatrix::zeros(0, y.ncols());
    let mut trace = vec![mse];
    let mut rank_deficient = false;
    let max_support = max_support.min(a.ncols());
    // A^H R = A^H Y - (A^H A_S) X
    let a_h_y = a.ad_mul(&y);
    let mut gram = CMatrix::zeros(a.ncols(), 0);

    while mse >= epsilon && support.len() < max_support {
        let corr = if support.is_empty() { a_h_y.clone() } else { &a_h_y - &gram * &coeffs };
        let scores = correlation_scores(&corr);
        let mut best: Option<(usize, f64)> = None;
        for (p, &s) in scores.iter().enumerate() {
            if support.contains(&p) || !s.is_finite() {
                continue;
            }
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((p, s));
            }
        }
        let Some((p, score)) = best else { break };
        if score <= 0.0 {
            break;
        }
        support.push(p);
        let g = gram.ncols();
        gram = gram.insert_column(g, c64::new(0.0, 0.0));
        gram.set_column(g, &a.ad_mul(&a.column(p)).column(0));
        let cols = a.select_columns(&support);
        let dec = svd(&cols)?;
        let tol = crate::linalg::default_pinv_tol(cols.shape(), dec.s[0]);
        if dec.rank(tol) < support.len() {
            rank_deficient = true;
        }
        coeffs = pinv(&cols, None)? * &y;
        residual = &y - &cols * &coeffs;
        mse = frob2(&residual) / denom;
        trace.push(mse);
    }

    let gains = (0..y.ncols()).map(|k| coeffs.column(k).into_owned()).collect();
    Ok(SparseEstimate {
        iterations: support.len(),
        support,
        gains,
        residual_mse: mse,
        mse_trace: trace,
        rank_deficient,
    })
}

impl SparseEstimate {
    /// Empty estimate for `n_subcarriers` subcarriers.
    pub fn empty(n_subcarriers: usize) -> SparseEstimate {
        SparseEstimate {
            support: Vec::new(),
            gains: vec![CVector::zeros(0); n_subcarriers],
            residual_mse: 0.0,
            iterations: 0,
            mse_trace: vec![0.0],
            rank_deficient: false,
        }
    }

    /// Sparse gain vector over all `n_columns` dictionary columns at subcarrier `k`.
    pub fn dense_gains(&self, k: usize, n_columns: usize) -> CVector {
        let mut x = CVector::from_element(n_columns, c64::new(0.0, 0.0));
        for (i, &p) in self.support.iter().enumerate() {
            x[p] = self.gains[k][i];
        }
        x
    }
}
