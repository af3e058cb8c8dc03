//! Fast invariant suite behind the `selftest` subcommand.

use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::channel::ChannelRealization;
use crate::config::{GridMode, SystemConfig};
use crate::digital::{mmse_combiners, waterfill, CombinerKind, DigitalFilterSet, DlFilters};
use crate::error::Result;
use crate::estimation::{estimate_uplink, sw_omp};
use crate::hybrid::{distortion, distortion_gradient, eckart_young, hd_pg, FactorizationTarget, HdPgOptions, Init, PowerRule, Side};
use crate::linalg::{c64, frob, phase_project, pinv, CMatrix, CVector};
use crate::metrics::{frobenius_mse_bound, sum_rate, ul_mse};
use crate::rng::{substream, SimRng, Stream};

pub type GradientFn = fn(&FactorizationTarget, &CMatrix) -> Result<(CMatrix, usize)>;

#[derive(Debug, Clone)]
pub struct SelftestOptions {
    /// Gradient under test; replaced by a faulty one in negative-control tests.
    pub gradient: GradientFn,
    pub seed: u64,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        SelftestOptions {
            gradient: distortion_gradient,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
}

impl SelftestReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn table(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}  {:<6}  {:>8}  detail\n", "check", "status", "time_s");
        for c in &self.checks {
            out += &format!(
                "{:<width$}  {:<6}  {:>8.3}  {}\n",
                c.name,
                if c.passed { "PASS" } else { "FAIL" },
                c.seconds,
                c.detail
            );
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        out += &format!("{} checks, {} failed\n", self.checks.len(), failed);
        out
    }
}

fn gaussian(rng: &mut SimRng, m: usize, n: usize) -> CMatrix {
    CMatrix::from_fn(m, n, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        c64::new(re, im)
    })
}

/// Central differences of the distortion, `(d/dRe + j d/dIm) / 2`.
pub fn finite_difference_gradient(target: &FactorizationTarget, rf: &CMatrix, h: f64) -> Result<CMatrix> {
    let mut g = CMatrix::zeros(rf.nrows(), rf.ncols());
    for i in 0..rf.nrows() {
        for j in 0..rf.ncols() {
            let mut parts = [0.0; 2];
            for (p, dir) in [c64::new(h, 0.0), c64::new(0.0, h)].into_iter().enumerate() {
                let mut plus = rf.clone();
                plus[(i, j)] += dir;
                let mut minus = rf.clone();
                minus[(i, j)] -= dir;
                parts[p] = (distortion(target, &plus)? - distortion(target, &minus)?) / (2.0 * h);
            }
            g[(i, j)] = c64::new(parts[0], parts[1]) / 2.0;
        }
    }
    Ok(g)
}

/// Worst relative error of `grad` against central differences over `seeds`
/// random instances with `n_bs = 16`, `l = 3` and `U K = 8` blocks.
pub fn gradient_error(grad: GradientFn, seeds: std::ops::Range<u64>) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seed in seeds {
        let mut rng = substream(seed, 0, Stream::Design);
        let blocks = (0..8).map(|_| gaussian(&mut rng, 16, 2)).collect();
        let target = FactorizationTarget::new(blocks, PowerRule::Fixed(1.0))?;
        let rf = phase_project(&gaussian(&mut rng, 16, 3));
        let (g, _) = grad(&target, &rf)?;
        let fd = finite_difference_gradient(&target, &rf, 1e-6)?;
        worst = worst.max(frob(&(g - &fd)) / frob(&fd));
    }
    Ok(worst)
}

type Outcome = std::result::Result<String, String>;

fn check(name: &'static str, f: impl FnOnce() -> Outcome) -> CheckResult {
    let t = Instant::now();
    let res = f();
    let seconds = t.elapsed().as_secs_f64();
    match res {
        Ok(detail) => CheckResult { name, passed: true, detail, seconds },
        Err(detail) => CheckResult { name, passed: false, detail, seconds },
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn check_gradient(opts: &SelftestOptions) -> Outcome {
    let e = gradient_error(opts.gradient, opts.seed..opts.seed + 3).map_err(err)?;
    if e <= 1e-5 {
        Ok(format!("max rel err {e:.2e}"))
    } else {
        Err(format!("max rel err {e:.2e} > 1e-5"))
    }
}

fn check_hd_pg(opts: &SelftestOptions) -> Outcome {
    let cfg = SystemConfig { n_subcarriers: 8, ..SystemConfig::desk() };
    let mut worst_gap = f64::INFINITY;
    for trial in 0..3 {
        let ch = ChannelRealization::generate(&cfg, &mut substream(opts.seed, trial, Stream::Channel));
        let set = DigitalFilterSet::design(&ch.uplink_grid(), &cfg, CombinerKind::Mmse).map_err(err)?;
        let target = FactorizationTarget::from_grid(&set.ul_combiners, PowerRule::TargetNorm).map_err(err)?;
        let bound = eckart_young(&target.stacked(), cfg.l_bs).map_err(err)?.error2;
        for init in [Init::EckartYoung, Init::Random] {
            let hd = HdPgOptions { init, ..Default::default() };
            let mut rng = substream(opts.seed, trial, Stream::Design);
            let (_, trace) = hd_pg(&target, cfg.l_bs, Side::BsCombiner, &hd, &mut rng).map_err(err)?;
            if !trace.is_monotone() {
                return Err(format!("trial {trial}: distortion increased"));
            }
            let d = trace.final_distortion();
            if d < bound * (1.0 - 1e-9) {
                return Err(format!("trial {trial}: distortion {d:.4e} below truncation bound {bound:.4e}"));
            }
            worst_gap = worst_gap.min(d - bound);
        }
    }
    Ok(format!("6 runs monotone, min excess over bound {worst_gap:.2e}"))
}

fn check_omp_oracle(opts: &SelftestOptions) -> Outcome {
    for seed in 0..10 {
        let mut rng = substream(opts.seed + seed, 0, Stream::Training);
        let a = gaussian(&mut rng, 12, 12);
        let idx = sample(&mut rng, 12, 2).into_vec();
        let ys: Vec<CVector> = (0..3)
            .map(|_| a.select_columns(&idx) * gaussian(&mut rng, 2, 1).column(0))
            .collect();
        let y = CMatrix::from_fn(12, ys.len(), |i, k| ys[k][i]);
        let mut best = (f64::INFINITY, vec![]);
        for i in 0..12 {
            for j in i + 1..12 {
                let cols = a.select_columns(&[i, j]);
                let r = &y - &cols * (pinv(&cols, None).map_err(err)? * &y);
                if r.norm_squared() < best.0 {
                    best = (r.norm_squared(), vec![i, j]);
                }
            }
        }
        let est = sw_omp(&ys, &a, 1e-20, 2).map_err(err)?;
        let mut got = est.support.clone();
        got.sort();
        if got != best.1 {
            return Err(format!("instance {seed}: support {got:?}, oracle {:?}", best.1));
        }
    }
    Ok("10/10 supports match exhaustive search".into())
}

fn check_noiseless_recovery(opts: &SelftestOptions) -> Outcome {
    let cfg = SystemConfig {
        grid_mode: GridMode::OnGrid,
        snr_db: 300.0,
        n_subcarriers: 4,
        seed: opts.seed,
        ..SystemConfig::desk()
    };
    let ch = ChannelRealization::generate(&cfg, &mut substream(opts.seed, 0, Stream::Channel));
    let out = estimate_uplink(&ch, &cfg, 0).map_err(err)?;
    let db = 10.0 * out.nmse.log10();
    if db <= -80.0 {
        Ok(format!("NMSE {db:.1} dB"))
    } else {
        Err(format!("NMSE {db:.1} dB > -80 dB"))
    }
}

fn check_waterfill(opts: &SelftestOptions) -> Outcome {
    let mut rng = substream(opts.seed, 0, Stream::Design);
    for case in 0..200 {
        let n = rng.random_range(1..8);
        let gains: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let power = rng.random_range(0.01..10.0);
        let p = waterfill(&gains, power).map_err(err)?;
        let total: f64 = p.iter().sum();
        if (total - power).abs() > 1e-10 * power || p.iter().any(|&x| x < 0.0) {
            return Err(format!("case {case}: budget or sign violated"));
        }
        let levels: Vec<f64> = (0..n).filter(|&i| p[i] > 0.0).map(|i| p[i] + 1.0 / gains[i]).collect();
        let mu = levels[0];
        if levels.iter().any(|l| (l - mu).abs() > 1e-9 * mu) {
            return Err(format!("case {case}: unequal water level"));
        }
        if (0..n).any(|i| p[i] == 0.0 && gains[i] > 0.0 && 1.0 / gains[i] < mu * (1.0 - 1e-12)) {
            return Err(format!("case {case}: inactive channel below water level"));
        }
    }
    Ok("200 random allocations satisfy KKT".into())
}

fn check_mse_bound(opts: &SelftestOptions) -> Outcome {
    let mut rng = substream(opts.seed, 1, Stream::Design);
    let noise_var = 0.3;
    for case in 0..100 {
        let h: Vec<CMatrix> = (0..2).map(|_| gaussian(&mut rng, 12, 4) * c64::from(0.5)).collect();
        let t: Vec<CMatrix> = (0..2).map(|_| gaussian(&mut rng, 4, 2) * c64::from(0.5)).collect();
        let f_mmse = mmse_combiners(&h, &t, noise_var).map_err(err)?;
        let rf = phase_project(&gaussian(&mut rng, 12, 4));
        let f = &rf * gaussian(&mut rng, 4, 2) * c64::from(0.1);
        for u in 0..2 {
            let (mmse, bound) = frobenius_mse_bound(&h, &t, &f_mmse[u], &f, u, noise_var);
            let mse = ul_mse(&h, &t, &f, u, noise_var);
            if mse > bound * (1.0 + 1e-12) || mse < mmse * (1.0 - 1e-12) {
                return Err(format!("case {case}, user {u}: mse {mse:.4e} outside [{mmse:.4e}, {bound:.4e}]"));
            }
        }
    }
    Ok("100/100 hybrid instances within [MMSE, bound]".into())
}

fn check_rate_scale_invariance(opts: &SelftestOptions) -> Outcome {
    let cfg = SystemConfig { n_subcarriers: 4, ..SystemConfig::desk() };
    let ch = ChannelRealization::generate(&cfg, &mut substream(opts.seed, 5, Stream::Channel));
    let set = DigitalFilterSet::design(&ch.uplink_grid(), &cfg, CombinerKind::Mmse).map_err(err)?;
    let dl = crate::digital::dl_filters_from_ul(&set.ul_combiners, &set.ul_precoders, &cfg).map_err(err)?;
    let base = sum_rate(&ch.downlink_grid(), &dl, cfg.noise_var()).map_err(err)?.sum_rate;
    for scale in [0.1, 10.0] {
        let scaled = DlFilters {
            precoders: dl.precoders.clone(),
            combiners: dl
                .combiners
                .iter()
                .map(|wu| wu.iter().map(|w| w * c64::from(scale)).collect())
                .collect(),
        };
        let r = sum_rate(&ch.downlink_grid(), &scaled, cfg.noise_var()).map_err(err)?.sum_rate;
        if (r - base).abs() > 1e-9 * base {
            return Err(format!("scale {scale}: {r} vs {base}"));
        }
    }
    Ok(format!("rate {base:.3} b/s/Hz unchanged at scales 0.1, 10"))
}

pub fn run_selftest(opts: &SelftestOptions) -> SelftestReport {
    let checks = vec![
        check("gradient", || check_gradient(opts)),
        check("hd-pg-bound", || check_hd_pg(opts)),
        check("sw-omp-oracle", || check_omp_oracle(opts)),
        check("noiseless-recovery", || check_noiseless_recovery(opts)),
        check("waterfill-kkt", || check_waterfill(opts)),
        check("mse-bound", || check_mse_bound(opts)),
        check("rate-scale-invariance", || check_rate_scale_invariance(opts)),
    ];
    SelftestReport { checks }
}
