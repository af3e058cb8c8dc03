//! Hybrid RF + baseband designs: projected-gradient factorization of digital
//! filters and alternating minimization.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::digital::{interference_covariance, interference_null_basis, received_covariance};
use crate::error::{Error, Result};
use crate::linalg::{
    c64, frob, frob2, hermitian_inv_sqrt, hstack, phase_project, pinv, solve_hpd, svd, vstack, CMatrix,
};
use crate::metrics::mse_with_covariance;
use crate::serial;

/// Which end of the link a hybrid filter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    BsCombiner,
    MsPrecoder,
}

/// Per-block squared norm `rho` that the finalized `rf * bb` must meet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerRule {
    /// Match the squared Frobenius norm of each target block.
    TargetNorm,
    /// Fixed budget for every block.
    Fixed(f64),
}

/// Digital filters to factorize, one block per (user, subcarrier), with their power targets.
#[derive(Debug, Clone)]
pub struct FactorizationTarget {
    pub blocks: Vec<CMatrix>,
    pub powers: Vec<f64>,
}

impl FactorizationTarget {
    pub fn new(blocks: Vec<CMatrix>, rule: PowerRule) -> Result<FactorizationTarget> {
        let Some(first) = blocks.first() else {
            return Err(Error::dim("factorization target", "no blocks"));
        };
        let rows = first.nrows();
        if blocks.iter().any(|b| b.nrows() != rows) {
            return Err(Error::dim("factorization target", "blocks differ in row count"));
        }
        let powers = match rule {
            PowerRule::TargetNorm => blocks.iter().map(frob2).collect(),
            PowerRule::Fixed(p) => vec![p; blocks.len()],
        };
        Ok(FactorizationTarget { blocks, powers })
    }

    /// Flattens a `[u][k]` grid in user-major order.
    pub fn from_grid(grid: &[Vec<CMatrix>], rule: PowerRule) -> Result<FactorizationTarget> {
        Self::new(grid.iter().flatten().cloned().collect(), rule)
    }

    pub fn n_antennas(&self) -> usize {
        self.blocks[0].nrows()
    }

    /// `[F_1 ... F_B]`.
    pub fn stacked(&self) -> CMatrix {
        hstack(&self.blocks).expect("blocks share row count")
    }

    fn energy(&self) -> f64 {
        self.blocks.iter().map(frob2).sum()
    }

    fn scaled(&self, c: f64) -> FactorizationTarget {
        FactorizationTarget {
            blocks: self.blocks.iter().map(|b| b * c64::from(c)).collect(),
            powers: self.powers.iter().map(|p| p * c * c).collect(),
        }
    }
}

/// One unit-modulus RF matrix and the baseband blocks it serves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HybridFilter {
    #[serde(with = "serial::matrix")]
    pub rf: CMatrix,
    /// Baseband blocks in the order of the factorization target (`u`-major over `(u, k)`).
    #[serde(with = "serial::matrix_vec")]
    pub bb: Vec<CMatrix>,
    pub side: Side,
}

impl HybridFilter {
    pub fn block(&self, i: usize) -> CMatrix {
        &self.rf * &self.bb[i]
    }

    /// Effective filters `rf * bb` regrouped as `[u][k]`.
    pub fn effective_grid(&self, n_subcarriers: usize) -> Vec<Vec<CMatrix>> {
        (0..self.bb.len())
            .map(|i| self.block(i))
            .collect::<Vec<_>>()
            .chunks(n_subcarriers)
            .map(|c| c.to_vec())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub distortion: f64,
    pub step: f64,
}

/// Distortion of every accepted HD-PG iterate (row 0 is the initializer).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FactorizationTrace {
    pub rows: Vec<TraceRow>,
    /// True when the step-size floor ended the run.
    pub step_floor_hit: bool,
}

impl FactorizationTrace {
    pub fn final_distortion(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.distortion)
    }

    pub fn is_monotone(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].distortion <= w[0].distortion)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Projection data of one block: `B = (X^H X)^{-1} X^H F` and `||A||_F = ||X B||_F`.
struct BlockProjection {
    coeffs: CMatrix,
    a_norm: f64,
}

fn project_blocks(target: &FactorizationTarget, rf: &CMatrix) -> Result<Vec<BlockProjection>> {
    if rf.nrows() != target.n_antennas() {
        return Err(Error::dim(
            "hybrid projection",
            format!("rf has {} rows, targets {}", rf.nrows(), target.n_antennas()),
        ));
    }
    let gram = rf.ad_mul(rf);
    let xh_f: Vec<CMatrix> = target.blocks.iter().map(|f| rf.ad_mul(f)).collect();
    let rhs = hstack(&xh_f)?;
    let coeffs_all = match solve_hpd(&gram, &rhs) {
        Ok(c) => c,
        Err(_) => pinv(rf, None)? * target.stacked(),
    };
    let mut col = 0;
    let mut out = Vec::with_capacity(target.blocks.len());
    for (f, xf) in target.blocks.iter().zip(&xh_f) {
        let coeffs = coeffs_all.columns(col, f.ncols()).into_owned();
        col += f.ncols();
        let a2 = xf.ad_mul(&coeffs).trace().re.max(0.0);
        out.push(BlockProjection { coeffs, a_norm: a2.sqrt() });
    }
    Ok(out)
}

/// Unnormalized least-squares baseband `F_RF^dagger F` per block.
pub fn ls_baseband_raw(target: &FactorizationTarget, rf: &CMatrix) -> Result<Vec<CMatrix>> {
    Ok(project_blocks(target, rf)?.into_iter().map(|p| p.coeffs).collect())
}

/// Least-squares baseband with every block scaled so that `||rf bb||_F^2 = rho`.
/// Blocks whose projection vanishes stay zero.
pub fn ls_baseband(target: &FactorizationTarget, rf: &CMatrix) -> Result<Vec<CMatrix>> {
    Ok(project_blocks(target, rf)?
        .into_iter()
        .zip(&target.powers)
        .map(|(p, &rho)| {
            if p.a_norm > 0.0 {
                p.coeffs * c64::from(rho.sqrt() / p.a_norm)
            } else {
                p.coeffs * c64::from(0.0)
            }
        })
        .collect())
}

/// `sum_b ||F_b||^2 - 2 sqrt(rho_b) ||A_b||_F + rho_b`.
pub fn distortion(target: &FactorizationTarget, rf: &CMatrix) -> Result<f64> {
    let proj = project_blocks(target, rf)?;
    Ok(target
        .blocks
        .iter()
        .zip(&proj)
        .zip(&target.powers)
        .map(|((f, p), &rho)| frob2(f) - 2.0 * rho.sqrt() * p.a_norm + rho)
        .sum())
}

/// Conjugate gradient `d d / d F_RF^*` and the number of skipped blocks with `A = 0`.
pub fn distortion_gradient(target: &FactorizationTarget, rf: &CMatrix) -> Result<(CMatrix, usize)> {
    let proj = project_blocks(target, rf)?;
    let mut grad = CMatrix::zeros(rf.nrows(), rf.ncols());
    let mut skipped = 0;
    for ((f, p), &rho) in target.blocks.iter().zip(&proj).zip(&target.powers) {
        if !(p.a_norm > 0.0) {
            skipped += 1;
            continue;
        }
        // (Pi - I) F F^H X (X^H X)^{-1} = (X B - F) B^H
        let resid = rf * &p.coeffs - f;
        grad += resid * p.coeffs.adjoint() * c64::from(rho.sqrt() / p.a_norm);
    }
    Ok((grad, skipped))
}

#[derive(Debug, Clone)]
pub struct EckartYoung {
    /// Rank-`l` truncation of the stacked target.
    pub approx: CMatrix,
    /// Phases of the leading `l` left singular vectors.
    pub rf_init: CMatrix,
    /// Squared truncation error (sum of discarded squared singular values).
    pub error2: f64,
}

pub fn eckart_young(stacked: &CMatrix, l_chains: usize) -> Result<EckartYoung> {
    if l_chains > stacked.nrows() {
        return Err(Error::dim("eckart_young", format!("{l_chains} chains for {} antennas", stacked.nrows())));
    }
    let dec = svd(stacked)?;
    let r = l_chains.min(dec.s.len());
    let mut approx = CMatrix::zeros(stacked.nrows(), stacked.ncols());
    for j in 0..r {
        approx += dec.u.column(j) * dec.v.column(j).adjoint() * c64::from(dec.s[j]);
    }
    let error2 = dec.s[r..].iter().map(|s| s * s).sum();
    let mut lead = CMatrix::zeros(stacked.nrows(), l_chains);
    lead.columns_mut(0, r).copy_from(&dec.u.columns(0, r));
    Ok(EckartYoung {
        approx,
        rf_init: phase_project(&lead),
        error2,
    })
}

#[derive(Debug, Clone)]
pub enum Init {
    /// Uniform random phases drawn from the supplied generator.
    Random,
    EckartYoung,
    Given(CMatrix),
}

#[derive(Debug, Clone)]
pub struct HdPgOptions {
    pub init: Init,
    pub s0: f64,
    /// Stop when one outer iteration improves the distortion by less than this;
    /// `None` means `1e-6` times the initial distortion.
    pub delta: Option<f64>,
    pub max_iter: usize,
}

impl Default for HdPgOptions {
    fn default() -> Self {
        HdPgOptions {
            init: Init::EckartYoung,
            s0: 1.0,
            delta: None,
            max_iter: 200,
        }
    }
}

pub const STEP_FLOOR: f64 = 1e-12;

/// Projected-gradient factorization of `target` with `l_chains` RF chains.
///
/// Iterates run on a copy of the target rescaled to the energy of a unit-modulus
/// `n x l` matrix so that `s0 = 1` is meaningful at any power level; the trace is
/// reported in the original units.
pub fn hd_pg(
    target: &FactorizationTarget,
    l_chains: usize,
    side: Side,
    opts: &HdPgOptions,
    rng: &mut impl Rng,
) -> Result<(HybridFilter, FactorizationTrace)> {
    let n = target.n_antennas();
    if l_chains == 0 || l_chains > n {
        return Err(Error::dim("hd_pg", format!("{l_chains} chains for {n} antennas")));
    }
    if !(opts.s0 > 0.0) {
        return Err(Error::Config("hd_pg step size must be positive".into()));
    }
    let energy = target.energy();
    if !(energy > 0.0) {
        return Err(Error::ZeroNorm("factorization target"));
    }
    let c2 = (n * l_chains) as f64 / energy;
    let work = target.scaled(c2.sqrt());

    let mut rf = match &opts.init {
        Init::Random => CMatrix::from_fn(n, l_chains, |_, _| {
            c64::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU))
        }),
        Init::EckartYoung => eckart_young(&target.stacked(), l_chains)?.rf_init,
        Init::Given(m) => phase_project(m),
    };
    if rf.shape() != (n, l_chains) {
        return Err(Error::dim("hd_pg", format!("initial rf {:?}", rf.shape())));
    }
    let mut d = distortion(&work, &rf)?;
    let delta = opts.delta.map_or(1e-6 * d, |x| x * c2);
    let mut trace = FactorizationTrace {
        rows: vec![TraceRow { iteration: 0, distortion: d / c2, step: 0.0 }],
        step_floor_hit: false,
    };
    for it in 1..=opts.max_iter {
        let (grad, _) = distortion_gradient(&work, &rf)?;
        let mut s = opts.s0;
        let accepted = loop {
            let cand = phase_project(&(&rf - &grad * c64::from(s)));
            let dc = distortion(&work, &cand)?;
            if dc <= d {
                break Some((cand, dc));
            }
            s /= 2.0;
            if s < STEP_FLOOR {
                break None;
            }
        };
        let Some((cand, dc)) = accepted else {
            trace.step_floor_hit = true;
            break;
        };
        let improvement = d - dc;
        rf = cand;
        d = dc;
        trace.rows.push(TraceRow { iteration: it, distortion: d / c2, step: s });
        if improvement < delta {
            break;
        }
    }
    let bb = ls_baseband(target, &rf)?;
    Ok((HybridFilter { rf, bb, side }, trace))
}

/// RF precoder from the phases of the leading `l_ms` right singular vectors of
/// the UL channels `H_u^H[k]` stacked over subcarriers.
pub fn am_rf_precoder(h_ul: &[CMatrix], l_ms: usize) -> Result<CMatrix> {
    let stack = vstack(h_ul)?;
    let n_ms = stack.ncols();
    if l_ms > n_ms {
        return Err(Error::dim("am_rf_precoder", format!("{l_ms} chains for {n_ms} antennas")));
    }
    let dec = svd(&stack)?;
    let r = l_ms.min(dec.s.len());
    let mut lead = CMatrix::zeros(n_ms, l_ms);
    lead.columns_mut(0, r).copy_from(&dec.v.columns(0, r));
    Ok(phase_project(&lead))
}

/// Hybrid UL precoder of one user: RF from [`am_rf_precoder`] and per-subcarrier
/// baseband water-filling on the equivalent channel `H_u^H[k] T_RF`.
///
/// The baseband is computed in the coordinates of `T_RF (T_RF^H T_RF)^{-1/2}`, so
/// `||T_RF T_BB||_F^2` equals the water-filled power `power` exactly.
pub fn am_precoder(h_ul: &[CMatrix], l_ms: usize, n_streams: usize, power: f64, noise_var: f64) -> Result<HybridFilter> {
    let rf = am_rf_precoder(h_ul, l_ms)?;
    let w = hermitian_inv_sqrt(&rf.ad_mul(&rf))?;
    let bb = h_ul
        .iter()
        .map(|h| {
            let eq = h * &rf * &w;
            let t = crate::digital::ul_precoder(&eq, n_streams, power, noise_var)?;
            Ok(&w * t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HybridFilter { rf, bb, side: Side::MsPrecoder })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AmVariant {
    Mmse,
    Mrc,
    Cb,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AmTrace {
    /// Sum over `(u, k)` of the scale-optimized UL MSE after each baseband update.
    pub sum_mse: Vec<f64>,
    /// Best-so-far value after each update.
    pub best: Vec<f64>,
    /// CB updates that used the weakest-eigenvector fallback.
    pub fallbacks: usize,
}

/// UL MSE of `f` minimized over a complex scalar gain; equals the plain MSE
/// for the MMSE-type baseband.
fn scale_free_mse(r: &CMatrix, desired: &CMatrix, f: &CMatrix) -> f64 {
    let n_s = desired.ncols() as f64;
    let num = f.ad_mul(desired).trace().norm_sqr();
    let den = (f.adjoint() * r * f).trace().re;
    if den > 0.0 {
        n_s - num / den
    } else {
        n_s
    }
}

struct AmSubcarrier {
    r_i: CMatrix,
    r_bar: Vec<CMatrix>,
    desired: Vec<CMatrix>,
}

/// Alternating minimization of the BS RF and baseband combiners for fixed UL
/// precoders `t[u][k]` and channel estimates `h_ul[u][k]`.
///
/// Blocks are finalized to `||F_RF F_BB||_F^2 = stream_power`. The best iterate
/// seen (lowest sum-MSE) is returned.
#[allow(clippy::too_many_arguments)]
pub fn am_combiner(
    h_ul: &[Vec<CMatrix>],
    t: &[Vec<CMatrix>],
    noise_var: f64,
    variant: AmVariant,
    l_bs: usize,
    stream_power: f64,
    max_iter: usize,
    tol: f64,
) -> Result<(HybridFilter, AmTrace)> {
    let n_users = h_ul.len();
    let n_k = h_ul.first().map_or(0, |h| h.len());
    let subs: Vec<AmSubcarrier> = (0..n_k)
        .map(|k| {
            let hk: Vec<CMatrix> = h_ul.iter().map(|h| h[k].clone()).collect();
            let tk: Vec<CMatrix> = t.iter().map(|ti| ti[k].clone()).collect();
            AmSubcarrier {
                r_i: received_covariance(&hk, &tk, noise_var),
                r_bar: (0..n_users).map(|u| interference_covariance(&hk, &tk, u)).collect(),
                desired: hk.iter().zip(&tk).map(|(h, ti)| h * ti).collect(),
            }
        })
        .collect();
    let desired_grid: Vec<CMatrix> = (0..n_users)
        .flat_map(|u| subs.iter().map(move |s| s.desired[u].clone()))
        .collect();
    let mut rf = eckart_young(&hstack(&desired_grid)?, l_bs)?.rf_init;
    let mut trace = AmTrace::default();

    let baseband = |rf: &CMatrix, fallbacks: &mut usize| -> Result<Vec<CMatrix>> {
        let mut out = Vec::with_capacity(n_users * n_k);
        for u in 0..n_users {
            for s in &subs {
                let rhs = rf.ad_mul(&s.desired[u]);
                let bb = match variant {
                    AmVariant::Mmse => {
                        let m = rf.adjoint() * &s.r_i * rf;
                        solve_hpd(&m, &rhs).or_else(|_| Ok::<_, Error>(pinv(&m, None)? * &rhs))?
                    }
                    AmVariant::Mrc => pinv(&(rf.ad_mul(rf) * c64::from(noise_var)), None)? * &rhs,
                    AmVariant::Cb => {
                        let m = rf.adjoint() * &s.r_bar[u] * rf;
                        let (basis, fb) = interference_null_basis(&m, s.desired[u].ncols())?;
                        *fallbacks += fb as usize;
                        &basis * basis.ad_mul(&rhs)
                    }
                };
                out.push(bb);
            }
        }
        Ok(out)
    };
    let metric = |rf: &CMatrix, bb: &[CMatrix]| -> f64 {
        let mut total = 0.0;
        for u in 0..n_users {
            for (k, s) in subs.iter().enumerate() {
                total += scale_free_mse(&s.r_i, &s.desired[u], &(rf * &bb[u * n_k + k]));
            }
        }
        total
    };

    let mut bb = baseband(&rf, &mut trace.fallbacks)?;
    let mut m = metric(&rf, &bb);
    let mut best = (rf.clone(), bb.clone(), m);
    trace.sum_mse.push(m);
    trace.best.push(m);
    for _ in 0..max_iter {
        let mut acc = CMatrix::zeros(rf.nrows(), rf.ncols());
        for (d, b) in desired_grid.iter().zip(&bb) {
            acc += d * b.adjoint();
        }
        rf = phase_project(&acc);
        bb = baseband(&rf, &mut trace.fallbacks)?;
        let prev = m;
        m = metric(&rf, &bb);
        if m < best.2 {
            best = (rf.clone(), bb.clone(), m);
        }
        trace.sum_mse.push(m);
        trace.best.push(best.2);
        if (prev - m).abs() < tol * prev.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    let (rf, bb, _) = best;
    let bb = bb
        .into_iter()
        .map(|b| {
            let n = frob(&(&rf * &b));
            if n > 0.0 {
                b * c64::from(stream_power.sqrt() / n)
            } else {
                b * c64::from(0.0)
            }
        })
        .collect();
    Ok((HybridFilter { rf, bb, side: Side::BsCombiner }, trace))
}

/// Sum over blocks of the UL MSE of a hybrid combiner, for diagnostics.
pub fn hybrid_sum_mse(h_ul: &[Vec<CMatrix>], t: &[Vec<CMatrix>], filter: &HybridFilter, noise_var: f64) -> f64 {
    let n_k = h_ul.first().map_or(0, |h| h.len());
    let mut total = 0.0;
    for k in 0..n_k {
        let hk: Vec<CMatrix> = h_ul.iter().map(|h| h[k].clone()).collect();
        let tk: Vec<CMatrix> = t.iter().map(|ti| ti[k].clone()).collect();
        let r = received_covariance(&hk, &tk, noise_var);
        for u in 0..h_ul.len() {
            total += mse_with_covariance(&r, &(&hk[u] * &tk[u]), &filter.block(u * n_k + k));
        }
    }
    total
}
