//! All-digital UL precoders and combiners, and their DL mapping.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::linalg::{
    c64, frob, hermitian_eigen, identity, nullspace_basis, pinv, solve_hpd, svd, CMatrix, NULLSPACE_RTOL,
};
use crate::serial;

/// Water-filling `p_i = max(0, mu - 1/g_i)` with `sum p_i = power`.
pub fn waterfill(gains: &[f64], power: f64) -> Result<Vec<f64>> {
    if !(power > 0.0) || !power.is_finite() {
        return Err(Error::Config(format!("waterfill power {power} must be positive")));
    }
    if gains.iter().any(|g| !(*g >= 0.0) || !g.is_finite()) {
        return Err(Error::Config("waterfill gains must be finite and non-negative".into()));
    }
    let mut order: Vec<usize> = (0..gains.len()).filter(|&i| gains[i] > 0.0).collect();
    if order.is_empty() {
        return Err(Error::AllGainsZero);
    }
    order.sort_by(|&a, &b| gains[b].total_cmp(&gains[a]));
    let mut active = order.len();
    let mut mu = 0.0;
    while active > 0 {
        let inv_sum: f64 = order[..active].iter().map(|&i| 1.0 / gains[i]).sum();
        mu = (power + inv_sum) / active as f64;
        if mu - 1.0 / gains[order[active - 1]] > 0.0 {
            break;
        }
        active -= 1;
    }
    let mut p = vec![0.0; gains.len()];
    for &i in &order[..active] {
        p[i] = mu - 1.0 / gains[i];
    }
    Ok(p)
}

/// Selfish UL precoder for one user and subcarrier.
///
/// `h_ul` is the UL channel `H_u^H[k]` (`n_bs x n_ms`). The leading `n_streams`
/// right singular vectors are loaded with water-filling over the gains
/// `s_i^2 / noise_var` and budget `power`. A zero channel yields a zero precoder.
pub fn ul_precoder(h_ul: &CMatrix, n_streams: usize, power: f64, noise_var: f64) -> Result<CMatrix> {
    let n_ms = h_ul.ncols();
    if n_streams > n_ms.min(h_ul.nrows()) {
        return Err(Error::dim("ul_precoder", format!("{n_streams} streams on a {:?} channel", h_ul.shape())));
    }
    let dec = svd(h_ul)?;
    let tol = crate::linalg::default_pinv_tol(h_ul.shape(), dec.s.first().copied().unwrap_or(0.0));
    let gains: Vec<f64> = dec.s[..n_streams]
        .iter()
        .map(|&s| if s > tol { s * s / noise_var } else { 0.0 })
        .collect();
    let alloc = match waterfill(&gains, power) {
        Ok(p) => p,
        Err(Error::AllGainsZero) => return Ok(CMatrix::zeros(n_ms, n_streams)),
        Err(e) => return Err(e),
    };
    let mut t = dec.v.columns(0, n_streams).into_owned();
    for (j, p) in alloc.iter().enumerate() {
        t.column_mut(j).scale_mut(p.sqrt());
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombinerKind {
    Mmse,
    Mrc,
    Cb,
}

impl fmt::Display for CombinerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CombinerKind::Mmse => "mmse",
            CombinerKind::Mrc => "mrc",
            CombinerKind::Cb => "cb",
        })
    }
}

impl FromStr for CombinerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mmse" => Ok(CombinerKind::Mmse),
            "mrc" => Ok(CombinerKind::Mrc),
            "cb" => Ok(CombinerKind::Cb),
            _ => Err(Error::UnknownMethod {
                name: s.to_string(),
                valid: "mmse, mrc, cb".into(),
            }),
        }
    }
}

/// `sum_{i in users} H_i^H T_i T_i^H H_i`.
pub fn signal_covariance(h_ul: &[CMatrix], t: &[CMatrix], users: impl Iterator<Item = usize>) -> CMatrix {
    let n = h_ul[0].nrows();
    let mut r = CMatrix::zeros(n, n);
    for i in users {
        let g = &h_ul[i] * &t[i];
        r += &g * g.adjoint();
    }
    r
}

/// Received UL covariance `sum_i H_i^H T_i T_i^H H_i + noise_var I`.
pub fn received_covariance(h_ul: &[CMatrix], t: &[CMatrix], noise_var: f64) -> CMatrix {
    signal_covariance(h_ul, t, 0..h_ul.len()) + identity(h_ul[0].nrows()) * c64::from(noise_var)
}

/// Interference matrix seen by user `u`.
pub fn interference_covariance(h_ul: &[CMatrix], t: &[CMatrix], u: usize) -> CMatrix {
    signal_covariance(h_ul, t, (0..h_ul.len()).filter(|&i| i != u))
}

/// MMSE combiners of all users at one subcarrier.
pub fn mmse_combiners(h_ul: &[CMatrix], t: &[CMatrix], noise_var: f64) -> Result<Vec<CMatrix>> {
    let r = received_covariance(h_ul, t, noise_var);
    let desired: Vec<CMatrix> = h_ul.iter().zip(t).map(|(h, ti)| h * ti).collect();
    if noise_var > 0.0 {
        desired.iter().map(|d| solve_hpd(&r, d)).collect()
    } else {
        let r_inv = pinv(&r, None)?;
        Ok(desired.iter().map(|d| &r_inv * d).collect())
    }
}

pub fn mrc_combiner(h_ul: &CMatrix, t: &CMatrix) -> CMatrix {
    h_ul * t
}

/// Orthonormal basis used to null the interference of `r_bar`.
///
/// Returns the nullspace when it has at least `min_dim` columns; otherwise the
/// eigenvectors of the `min_dim` weakest eigenvalues, flagged as a fallback.
pub fn interference_null_basis(r_bar: &CMatrix, min_dim: usize) -> Result<(CMatrix, bool)> {
    let basis = nullspace_basis(r_bar, NULLSPACE_RTOL)?;
    if basis.ncols() >= min_dim.max(1) {
        return Ok((basis, false));
    }
    let (_, vecs) = hermitian_eigen(r_bar)?;
    let n = vecs.ncols();
    let keep = min_dim.max(1).min(n);
    Ok((vecs.columns(n - keep, keep).into_owned(), true))
}

/// CB combiner of user `u`; the flag marks the weakest-eigenvector fallback.
pub fn cb_combiner(h_ul: &[CMatrix], t: &[CMatrix], u: usize) -> Result<(CMatrix, bool)> {
    let r_bar = interference_covariance(h_ul, t, u);
    let (basis, fallback) = interference_null_basis(&r_bar, t[u].ncols())?;
    let mrc = mrc_combiner(&h_ul[u], &t[u]);
    Ok((&basis * basis.ad_mul(&mrc), fallback))
}

/// Combiners of every user at one subcarrier and the number of CB fallbacks.
pub fn design_combiners(
    kind: CombinerKind,
    h_ul: &[CMatrix],
    t: &[CMatrix],
    noise_var: f64,
) -> Result<(Vec<CMatrix>, usize)> {
    match kind {
        CombinerKind::Mmse => Ok((mmse_combiners(h_ul, t, noise_var)?, 0)),
        CombinerKind::Mrc => Ok((h_ul.iter().zip(t).map(|(h, ti)| mrc_combiner(h, ti)).collect(), 0)),
        CombinerKind::Cb => {
            let mut out = Vec::with_capacity(h_ul.len());
            let mut fallbacks = 0;
            for u in 0..h_ul.len() {
                let (f, fb) = cb_combiner(h_ul, t, u)?;
                fallbacks += fb as usize;
                out.push(f);
            }
            Ok((out, fallbacks))
        }
    }
}

/// Digital UL precoders and combiners, indexed `[u][k]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DigitalFilterSet {
    #[serde(with = "serial::matrix_grid")]
    pub ul_precoders: Vec<Vec<CMatrix>>,
    #[serde(with = "serial::matrix_grid")]
    pub ul_combiners: Vec<Vec<CMatrix>>,
    pub combiner_kind: CombinerKind,
    /// CB fallbacks taken because the interference nullspace was too small.
    pub fallbacks: usize,
}

/// Reorders a `[u][k]` grid into per-subcarrier slices `[k][u]`.
pub fn per_subcarrier(grid: &[Vec<CMatrix>]) -> Vec<Vec<CMatrix>> {
    let n_k = grid.first().map_or(0, |g| g.len());
    (0..n_k).map(|k| grid.iter().map(|g| g[k].clone()).collect()).collect()
}

impl DigitalFilterSet {
    /// Designs precoders and combiners from UL channel estimates `h_ul[u][k]`.
    pub fn design(h_ul: &[Vec<CMatrix>], cfg: &SystemConfig, kind: CombinerKind) -> Result<DigitalFilterSet> {
        let noise_var = cfg.noise_var();
        let ul_precoders = h_ul
            .iter()
            .map(|hu| {
                hu.iter()
                    .map(|h| ul_precoder(h, cfg.n_streams, cfg.user_power(), noise_var))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let by_k = per_subcarrier(h_ul);
        let t_by_k = per_subcarrier(&ul_precoders);
        let mut ul_combiners = vec![Vec::with_capacity(by_k.len()); h_ul.len()];
        let mut fallbacks = 0;
        for (h, t) in by_k.iter().zip(&t_by_k) {
            let (fs, fb) = design_combiners(kind, h, t, noise_var)?;
            fallbacks += fb;
            for (u, f) in fs.into_iter().enumerate() {
                ul_combiners[u].push(f);
            }
        }
        Ok(DigitalFilterSet {
            ul_precoders,
            ul_combiners,
            combiner_kind: kind,
            fallbacks,
        })
    }
}

/// DL precoders `P_u[k]` and combiners `W_u[k]`, indexed `[u][k]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DlFilters {
    #[serde(with = "serial::matrix_grid")]
    pub precoders: Vec<Vec<CMatrix>>,
    #[serde(with = "serial::matrix_grid")]
    pub combiners: Vec<Vec<CMatrix>>,
}

/// Maps UL combiners to DL precoders rescaled to `P_tx / (U N_s)` and UL
/// precoders to DL combiners. A zero combiner (a user nobody can serve) maps to
/// a zero precoder.
pub fn dl_filters_from_ul(
    ul_combiners: &[Vec<CMatrix>],
    ul_precoders: &[Vec<CMatrix>],
    cfg: &SystemConfig,
) -> Result<DlFilters> {
    let target = cfg.stream_power().sqrt();
    let precoders = ul_combiners
        .iter()
        .map(|fu| {
            fu.iter()
                .map(|f| {
                    let n = frob(f);
                    if !n.is_finite() {
                        return Err(Error::NonFinite);
                    }
                    if n == 0.0 {
                        return Ok(f.clone());
                    }
                    Ok(f * c64::from(target / n))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DlFilters {
        precoders,
        combiners: ul_precoders.to_vec(),
    })
}
