//! Acceptance checks, one line per criterion.
//!
//! Run with `cargo test -p mmwave-mu --test acceptance`. Criteria listed in
//! `KNOWN_FAILURES` are still evaluated against their full tolerance and
//! reported as FAIL; they do not abort the run.

use std::time::Instant;

use nalgebra::SymmetricEigen;
use rand::Rng;
use rand_distr::StandardNormal;

use mmwave_mu::channel::{virtual_support, ChannelRealization};
use mmwave_mu::config::{GridMode, SystemConfig};
use mmwave_mu::digital::{mmse_combiners, ul_precoder, CombinerKind, DigitalFilterSet};
use mmwave_mu::estimation::{
    estimate_link, estimate_uplink, max_support, sw_omp, LinkDictionary, TrainingEnsemble,
};
use mmwave_mu::experiment::{run_experiment, Csi, Design, ExperimentResult, ExperimentSpec, Method, Sweep};
use mmwave_mu::hybrid::{distortion, distortion_gradient, hd_pg, FactorizationTarget, HdPgOptions, Init, PowerRule, Side};
use mmwave_mu::linalg::{c64, phase_project, pinv, CMatrix, CVector};
use mmwave_mu::metrics::ul_mse;
use mmwave_mu::rng::{substream, Stream};
use mmwave_mu::selftest::{run_selftest, SelftestOptions};

const KNOWN_FAILURES: &[u32] = &[3, 5, 6];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gaussian(rng: &mut impl Rng, m: usize, n: usize) -> CMatrix {
    CMatrix::from_fn(m, n, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        c64::new(re, im) / 2f64.sqrt()
    })
}

fn mean_of(r: &ExperimentResult, m: Method, v: f64) -> f64 {
    r.row(m, v).and_then(|row| row.mean).unwrap_or(f64::NAN)
}

fn stderr_of(r: &ExperimentResult, m: Method, v: f64) -> f64 {
    r.row(m, v).and_then(|row| row.stderr).unwrap_or(f64::NAN)
}

/// Mean over trials of `a - b`, skipping trials where either failed.
fn paired_mean(r: &ExperimentResult, a: Method, b: Method, v: f64) -> f64 {
    let (ra, rb) = (r.row(a, v).unwrap(), r.row(b, v).unwrap());
    let d: Vec<f64> = ra
        .samples
        .iter()
        .zip(&rb.samples)
        .filter_map(|(x, y)| Some((*x)? - (*y)?))
        .collect();
    d.iter().sum::<f64>() / d.len() as f64
}

fn rate(d: Design, c: Csi) -> Method {
    Method::Rate(d, c)
}

fn c1_gradient() -> Outcome {
    let cfg = SystemConfig {
        n_bs: 16,
        l_bs: 4,
        n_subcarriers: 4,
        g_bs: 32,
        ..SystemConfig::desk()
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let ch = ChannelRealization::generate(&cfg, &mut substream(seed, 0, Stream::Channel));
        let set = DigitalFilterSet::design(&ch.uplink_grid(), &cfg, CombinerKind::Mmse).unwrap();
        let target = FactorizationTarget::from_grid(&set.ul_combiners, PowerRule::TargetNorm).unwrap();
        let mut rng = substream(seed, 0, Stream::Design);
        let rf = phase_project(&gaussian(&mut rng, 16, 3));
        let (g, _) = distortion_gradient(&target, &rf).unwrap();
        let mut fd = CMatrix::zeros(16, 3);
        for i in 0..16 {
            for j in 0..3 {
                let eval = |delta: c64| {
                    let mut x = rf.clone();
                    x[(i, j)] += delta;
                    distortion(&target, &x).unwrap()
                };
                let d_re = (eval(c64::new(h, 0.0)) - eval(c64::new(-h, 0.0))) / (2.0 * h);
                let d_im = (eval(c64::new(0.0, h)) - eval(c64::new(0.0, -h))) / (2.0 * h);
                fd[(i, j)] = c64::new(d_re, d_im) / 2.0;
            }
        }
        let scale = fd.iter().map(|z| z.norm()).fold(0.0, f64::max);
        let err = g.iter().zip(fd.iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max) / scale;
        worst = worst.max(err);
    }
    outcome(worst <= 1e-5, format!("max relative error {worst:.2e} over 10 seeds (tol 1e-5)"))
}

fn c2_hd_pg() -> Outcome {
    let cfg = SystemConfig::desk();
    let mut max_bound: f64 = 0.0;
    let mut min_final = f64::INFINITY;
    let mut violations = Vec::new();
    for seed in 0..20u64 {
        let ch = ChannelRealization::generate(&cfg, &mut substream(seed, 0, Stream::Channel));
        let set = DigitalFilterSet::design(&ch.uplink_grid(), &cfg, CombinerKind::Mmse).unwrap();
        let target = FactorizationTarget::from_grid(&set.ul_combiners, PowerRule::TargetNorm).unwrap();
        let stacked = CMatrix::from_columns(
            &set.ul_combiners.iter().flatten().flat_map(|b| b.column_iter().map(|c| c.into_owned())).collect::<Vec<CVector>>(),
        );
        let s = stacked.clone().svd(false, false).singular_values;
        let mut sv: Vec<f64> = s.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let bound: f64 = sv[cfg.l_bs..].iter().map(|x| x * x).sum();
        let opts = HdPgOptions { init: Init::Random, ..Default::default() };
        let mut rng = substream(seed, 0, Stream::Design);
        let (_, trace) = hd_pg(&target, cfg.l_bs, Side::BsCombiner, &opts, &mut rng).unwrap();
        let monotone = trace.rows.windows(2).all(|w| w[1].distortion <= w[0].distortion);
        let fin = trace.final_distortion();
        if !monotone || fin < bound {
            violations.push(seed);
        }
        max_bound = max_bound.max(bound);
        min_final = min_final.min(fin);
    }
    outcome(
        violations.is_empty(),
        format!("20 runs, violations {violations:?}, final distortion >= {min_final:.3e}, truncation error^2 <= {max_bound:.3e}"),
    )
}

fn c3_sparse_recovery() -> Outcome {
    let cfg = SystemConfig {
        grid_mode: GridMode::OnGrid,
        snr_db: 300.0,
        ..SystemConfig::desk()
    };
    assert!(cfg.n_frames * cfg.l_bs >= 4 * cfg.n_users * cfg.n_paths);
    let mut exact = 0;
    let mut worst_db = f64::NEG_INFINITY;
    for seed in 0..50u64 {
        let c = SystemConfig { seed, ..cfg.clone() };
        let ch = ChannelRealization::generate(&c, &mut substream(seed, 0, Stream::Channel));
        let out = estimate_uplink(&ch, &c, 0).unwrap();
        let block = c.g_bs * c.g_ms;
        let mut expect: Vec<usize> = ch
            .users
            .iter()
            .enumerate()
            .flat_map(|(u, uc)| virtual_support(&uc.paths, &c).unwrap().into_iter().map(move |i| u * block + i))
            .collect();
        expect.sort();
        let mut got = out.estimate.sparse.support.clone();
        got.sort();
        let db = 10.0 * out.nmse.log10();
        worst_db = worst_db.max(db);
        exact += (got == expect && db <= -80.0) as usize;
    }

    // 2 users x 3 x 2 grid cells = 12 dictionary columns
    let tiny = SystemConfig {
        n_bs: 3,
        n_ms: 2,
        n_users: 2,
        l_bs: 1,
        l_ms: 1,
        n_streams: 1,
        n_subcarriers: 4,
        n_paths: 1,
        g_bs: 3,
        g_ms: 2,
        n_frames: 8,
        grid_mode: GridMode::OnGrid,
        snr_db: 300.0,
        ..SystemConfig::desk()
    };
    let mut oracle_match = 0;
    for seed in 0..50u64 {
        let ch = ChannelRealization::generate(&tiny, &mut substream(seed, 0, Stream::Channel));
        let ens = TrainingEnsemble::uplink(&tiny, &mut substream(seed, 0, Stream::Training));
        let y = ens.simulate(&ch.uplink_grid(), tiny.noise_var(), &mut substream(seed, 0, Stream::Noise)).unwrap();
        let dict = LinkDictionary::uplink(&tiny);
        assert_eq!(dict.n_columns(), 12);
        let est = estimate_link(&ens, &dict, &y, tiny.noise_var(), max_support(&tiny, 2)).unwrap();
        let w = ens.whitener().unwrap();
        let a = w.apply(&dict.sensing_matrix(&ens).unwrap()).unwrap();
        let yw: Vec<CVector> = y.iter().map(|v| w.apply_vec(v).unwrap()).collect();
        let ymat = CMatrix::from_fn(a.nrows(), yw.len(), |i, k| yw[k][i]);
        let mut best = (f64::INFINITY, vec![]);
        for i in 0..12 {
            for j in i + 1..12 {
                let cols = a.select_columns(&[i, j]);
                let r = &ymat - &cols * (pinv(&cols, None).unwrap() * &ymat);
                if r.norm_squared() < best.0 {
                    best = (r.norm_squared(), vec![i, j]);
                }
            }
        }
        let direct = sw_omp(&yw, &a, 1e-30, 2).unwrap();
        let mut got = est.sparse.support.clone();
        got.sort();
        let mut got_direct = direct.support.clone();
        got_direct.sort();
        oracle_match += (got == best.1 && got_direct == best.1) as usize;
    }
    outcome(
        exact == 50 && oracle_match == 50,
        format!(
            "exact support {exact}/50 (worst NMSE {worst_db:.1} dB, need <= -80), 12-column oracle agreement {oracle_match}/50"
        ),
    )
}

fn c4_crlb() -> Outcome {
    let spec = ExperimentSpec {
        config: SystemConfig { grid_mode: GridMode::OnGrid, ..SystemConfig::desk() },
        sweep: Sweep::Snr(vec![-10.0, -5.0, 0.0]),
        methods: vec![Method::UlNmse, Method::CrlbUl],
        trials: 100,
        trace_trials: 0,
    };
    let r = run_experiment(&spec).unwrap();
    let mut pass = r.total_failures() == 0;
    let mut parts = Vec::new();
    for v in [-10.0, -5.0, 0.0] {
        let gap = mean_of(&r, Method::UlNmse, v) - mean_of(&r, Method::CrlbUl, v);
        pass &= gap.abs() <= 3.0;
        parts.push(format!("{v} dB: {gap:+.2}"));
    }
    outcome(pass, format!("NMSE minus CRLB floor [{}] dB (tol 3 dB, 100 trials)", parts.join(", ")))
}

fn c5_ul_vs_dl() -> Outcome {
    let snrs = vec![-10.0, -5.0, 0.0, 5.0, 10.0];
    let spec = ExperimentSpec {
        config: SystemConfig::desk(),
        sweep: Sweep::Snr(snrs.clone()),
        methods: vec![Method::UlNmse, Method::DlNmse],
        trials: 100,
        trace_trials: 0,
    };
    let r = run_experiment(&spec).unwrap();
    let mut pass = r.total_failures() == 0;
    let mut parts = Vec::new();
    for v in snrs {
        let gap = mean_of(&r, Method::DlNmse, v) - mean_of(&r, Method::UlNmse, v);
        pass &= gap >= 5.0;
        parts.push(format!("{v}: {gap:.2}"));
    }
    outcome(pass, format!("DL minus UL NMSE [{}] dB (need >= 5 dB, M = 60, 100 trials)", parts.join(", ")))
}

fn c6_digital_ordering() -> Outcome {
    let snrs = vec![0.0, 5.0, 10.0];
    let spec = ExperimentSpec {
        config: SystemConfig::desk(),
        sweep: Sweep::Snr(snrs.clone()),
        methods: Method::parse_list("digital-mmse,digital-cb,digital-mrc", &[Csi::Perfect]).unwrap(),
        trials: 100,
        trace_trials: 0,
    };
    let r = run_experiment(&spec).unwrap();
    let (mmse, cb, mrc) = (
        rate(Design::DigitalMmse, Csi::Perfect),
        rate(Design::DigitalCb, Csi::Perfect),
        rate(Design::DigitalMrc, Csi::Perfect),
    );
    let mut pass = r.total_failures() == 0;
    let mut rel = Vec::new();
    let mut gaps = Vec::new();
    for &v in &snrs {
        let d = paired_mean(&r, mmse, cb, v).abs() / mean_of(&r, mmse, v);
        pass &= d <= 0.10;
        rel.push(format!("{:.1}%", 100.0 * d));
        gaps.push(paired_mean(&r, mmse, mrc, v));
    }
    pass &= gaps.windows(2).all(|w| w[1] > w[0]);
    outcome(
        pass,
        format!(
            "|MMSE-CB|/MMSE [{}] (tol 10%), MMSE-MRC [{}] b/s/Hz (must increase)",
            rel.join(", "),
            gaps.iter().map(|g| format!("{g:.3}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn c7_rf_chains() -> Outcome {
    let cfg = SystemConfig::desk();
    let chains = Sweep::default_rf_chains(&cfg);
    let spec = ExperimentSpec {
        config: cfg.clone(),
        sweep: Sweep::RfChains(chains.clone()),
        methods: Method::parse_list("hd-pg,digital-mmse", &[Csi::Perfect]).unwrap(),
        trials: 100,
        trace_trials: 0,
    };
    let r = run_experiment(&spec).unwrap();
    let hd = rate(Design::HdPg, Csi::Perfect);
    let dig = rate(Design::DigitalMmse, Csi::Perfect);
    let vals: Vec<f64> = chains.iter().map(|&l| l as f64).collect();
    let means: Vec<f64> = vals.iter().map(|&v| mean_of(&r, hd, v)).collect();
    let ses: Vec<f64> = vals.iter().map(|&v| stderr_of(&r, hd, v)).collect();
    let mut pass = r.total_failures() == 0;
    for i in 1..means.len() {
        pass &= means[i] >= means[i - 1] - ses[i].max(ses[i - 1]);
    }
    let last = *vals.last().unwrap();
    let ratio = mean_of(&r, hd, last) / mean_of(&r, dig, last);
    pass &= ratio >= 0.95;
    outcome(
        pass,
        format!(
            "HD-PG rate over l_bs {chains:?}: [{}] b/s/Hz, at l_bs = n_bs {:.1}% of digital MMSE (need >= 95%)",
            means.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>().join(", "),
            100.0 * ratio
        ),
    )
}

fn c8_mrc_robustness() -> Outcome {
    let spec = ExperimentSpec {
        config: SystemConfig::desk(),
        sweep: Sweep::Snr(vec![0.0]),
        methods: Method::parse_list("digital-mrc,digital-mmse", &Csi::ALL).unwrap(),
        trials: 100,
        trace_trials: 0,
    };
    let r = run_experiment(&spec).unwrap();
    let mrc = paired_mean(&r, rate(Design::DigitalMrc, Csi::Perfect), rate(Design::DigitalMrc, Csi::Estimated), 0.0);
    let mmse = paired_mean(&r, rate(Design::DigitalMmse, Csi::Perfect), rate(Design::DigitalMmse, Csi::Estimated), 0.0);
    let failures = r.total_failures();
    outcome(
        failures == 0 && mrc.abs() <= 0.5 * mmse.abs(),
        format!("CSI loss MRC {mrc:.3}, MMSE {mmse:.3} b/s/Hz (need |MRC| <= 0.5 |MMSE|), failed trials {failures}"),
    )
}

fn c9_on_grid() -> Outcome {
    let spec = ExperimentSpec {
        config: SystemConfig { grid_mode: GridMode::OnGrid, ..SystemConfig::desk() },
        sweep: Sweep::Snr(vec![0.0]),
        methods: vec![rate(Design::HdPgEy, Csi::Estimated), rate(Design::DigitalMmse, Csi::Perfect)],
        trials: 100,
        trace_trials: 0,
    };
    let r = run_experiment(&spec).unwrap();
    let hyb = mean_of(&r, rate(Design::HdPgEy, Csi::Estimated), 0.0);
    let dig = mean_of(&r, rate(Design::DigitalMmse, Csi::Perfect), 0.0);
    let ratio = hyb / dig;
    outcome(
        r.total_failures() == 0 && ratio >= 0.90,
        format!("estimated-CSI HD-PG (EY init) {hyb:.3} vs perfect digital MMSE {dig:.3} b/s/Hz = {:.1}% (need >= 90%)", 100.0 * ratio),
    )
}

fn hermitian_sqrt(r: &CMatrix) -> CMatrix {
    let eig = SymmetricEigen::new(r.clone());
    let d = CMatrix::from_diagonal(&eig.eigenvalues.map(|l| c64::from(l.max(0.0).sqrt())));
    &eig.eigenvectors * d * eig.eigenvectors.adjoint()
}

fn c10_mse() -> Outcome {
    let cfg = SystemConfig::desk();
    let noise_var = cfg.noise_var();

    // closed form against symbol-level simulation
    let ch = ChannelRealization::generate(&cfg, &mut substream(5, 0, Stream::Channel));
    let h: Vec<CMatrix> = ch.users.iter().map(|u| u.uplink(0)).collect();
    let t: Vec<CMatrix> = h.iter().map(|hu| ul_precoder(hu, 2, cfg.user_power(), noise_var).unwrap()).collect();
    let f_mmse = mmse_combiners(&h, &t, noise_var).unwrap();
    let mut rng = substream(5, 0, Stream::Design);
    let rf = phase_project(&gaussian(&mut rng, cfg.n_bs, cfg.l_bs));
    let f = &rf * (pinv(&rf, None).unwrap() * &f_mmse[0]);
    let closed = ul_mse(&h, &t, &f, 0, noise_var);
    let eff: Vec<CMatrix> = h.iter().zip(&t).map(|(a, b)| a * b).collect();
    let mut rng = substream(5, 1, Stream::Noise);
    let draws = 100_000;
    let mut acc = 0.0;
    for _ in 0..draws {
        let s: Vec<CMatrix> = (0..2).map(|_| gaussian(&mut rng, 2, 1)).collect();
        let n = gaussian(&mut rng, cfg.n_bs, 1) * c64::from(noise_var.sqrt());
        let y = &eff[0] * &s[0] + &eff[1] * &s[1] + n;
        acc += (&s[0] - f.adjoint() * y).norm_squared();
    }
    let mc = acc / draws as f64;
    let rel = (mc - closed).abs() / closed;

    // Frobenius bound on perturbed hybrid combiners
    let mut held = 0;
    for trial in 0..100u64 {
        let ch = ChannelRealization::generate(&cfg, &mut substream(7, trial, Stream::Channel));
        let k = (trial as usize) % cfg.n_subcarriers;
        let h: Vec<CMatrix> = ch.users.iter().map(|u| u.uplink(k)).collect();
        let t: Vec<CMatrix> = h.iter().map(|hu| ul_precoder(hu, 2, cfg.user_power(), noise_var).unwrap()).collect();
        let fm = mmse_combiners(&h, &t, noise_var).unwrap();
        let mut rng = substream(7, trial, Stream::Design);
        let rf = phase_project(&gaussian(&mut rng, cfg.n_bs, cfg.l_bs));
        let bb = pinv(&rf, None).unwrap() * &fm[0] + gaussian(&mut rng, cfg.l_bs, 2) * c64::from(0.05);
        let fh = &rf * bb;
        let mut r = CMatrix::identity(cfg.n_bs, cfg.n_bs) * c64::from(noise_var);
        for (a, b) in h.iter().zip(&t) {
            let e = a * b;
            r += &e * e.adjoint();
        }
        let r_half = hermitian_sqrt(&r);
        let mmse = ul_mse(&h, &t, &fm[0], 0, noise_var);
        let bound = mmse + (&fm[0] - &fh).norm_squared() * r_half.norm_squared();
        held += (ul_mse(&h, &t, &fh, 0, noise_var) <= bound) as usize;
    }
    outcome(
        rel <= 0.01 && held == 100,
        format!("closed form {closed:.5} vs simulated {mc:.5} ({:.2}% , tol 1%), bound held {held}/100", 100.0 * rel),
    )
}

fn c11_selftest() -> Outcome {
    let t = Instant::now();
    let report = run_selftest(&SelftestOptions::default());
    let secs = t.elapsed().as_secs_f64();
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    outcome(
        failed == 0 && secs < 60.0,
        format!("{} checks, {failed} failed, {secs:.1} s (limit 60 s)", report.checks.len()),
    )
}

fn main() {
    let criteria: Vec<(u32, &str, fn() -> Outcome)> = vec![
        (1, "gradient correctness", c1_gradient),
        (2, "HD-PG monotonicity and bound", c2_hd_pg),
        (3, "exact sparse recovery", c3_sparse_recovery),
        (4, "CRLB proximity", c4_crlb),
        (5, "UL vs DL gap", c5_ul_vs_dl),
        (6, "digital ordering", c6_digital_ordering),
        (7, "RF-chain convergence", c7_rf_chains),
        (8, "MRC robustness", c8_mrc_robustness),
        (9, "on-grid near-optimality", c9_on_grid),
        (10, "MSE fidelity and Frobenius bound", c10_mse),
        (11, "selftest", c11_selftest),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut unexpected = Vec::new();
    for (id, name, run) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let o = run();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id:>2} [PRIMARY] {status} {name}: {} ({:.1} s)",
            o.detail,
            t.elapsed().as_secs_f64()
        );
        if !o.pass && !KNOWN_FAILURES.contains(&id) {
            unexpected.push(id);
        }
        if o.pass && KNOWN_FAILURES.contains(&id) {
            println!("  note: criterion {id} is listed as a known failure but passed");
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
