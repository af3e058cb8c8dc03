//! Seeded Monte-Carlo sweeps: channel draw, optional estimation, filter design
//! and evaluation on the true channel.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelRealization;
use crate::config::{Checks, SystemConfig};
use crate::digital::{dl_filters_from_ul, mmse_combiners, per_subcarrier, CombinerKind, DigitalFilterSet};
use crate::error::{Error, Result};
use crate::estimation::{
    downlink_crlb_nmse, estimate_uplink, simulate_downlink_training, uplink_crlb_nmse, UplinkOutcome,
};
use crate::hybrid::{
    am_combiner, am_precoder, eckart_young, hd_pg, AmVariant, FactorizationTarget, FactorizationTrace, HdPgOptions,
    Init, PowerRule, Side,
};
use crate::linalg::{c64, frob, hstack, CMatrix};
use crate::metrics::sum_rate;
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Csi {
    Perfect,
    Estimated,
}

impl Csi {
    pub const ALL: [Csi; 2] = [Csi::Perfect, Csi::Estimated];

    pub fn name(self) -> &'static str {
        match self {
            Csi::Perfect => "perfect-csi",
            Csi::Estimated => "estimated-csi",
        }
    }
}

/// Filter design pipelines evaluated by sum-rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Design {
    DigitalMmse,
    DigitalMrc,
    DigitalCb,
    /// HD-PG on both sides from random RF phases.
    HdPg,
    /// HD-PG on both sides from the Eckart-Young phases.
    HdPgEy,
    /// Unconstrained rank-`l` truncations on both sides.
    EckartYoungBound,
    AmMmse,
    AmMrc,
    AmCb,
}

impl Design {
    pub const ALL: [Design; 9] = [
        Design::DigitalMmse,
        Design::DigitalMrc,
        Design::DigitalCb,
        Design::HdPg,
        Design::HdPgEy,
        Design::EckartYoungBound,
        Design::AmMmse,
        Design::AmMrc,
        Design::AmCb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Design::DigitalMmse => "digital-mmse",
            Design::DigitalMrc => "digital-mrc",
            Design::DigitalCb => "digital-cb",
            Design::HdPg => "hd-pg",
            Design::HdPgEy => "hd-pg-ey",
            Design::EckartYoungBound => "eckart-young-bound",
            Design::AmMmse => "am-mmse",
            Design::AmMrc => "am-mrc",
            Design::AmCb => "am-cb",
        }
    }
}

/// One curve of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Method {
    Rate(Design, Csi),
    UlNmse,
    DlNmse,
    CrlbUl,
    CrlbDl,
}

const ESTIMATION_ONLY: [(&str, Method); 4] = [
    ("ul-nmse", Method::UlNmse),
    ("dl-nmse", Method::DlNmse),
    ("crlb-ul", Method::CrlbUl),
    ("crlb-dl", Method::CrlbDl),
];

impl Method {
    /// Comma-separated list of every accepted base name.
    pub fn valid_names() -> String {
        Design::ALL
            .iter()
            .map(|d| d.name())
            .chain(ESTIMATION_ONLY.iter().map(|(n, _)| *n))
            .collect::<Vec<_>>()
            .join(", ")
    }

    /// Parses `name` or `name/perfect-csi`; bare design names expand over `csi`.
    pub fn parse_with(name: &str, csi: &[Csi]) -> Result<Vec<Method>> {
        let name = name.trim();
        let unknown = || Error::UnknownMethod {
            name: name.to_string(),
            valid: Method::valid_names(),
        };
        if let Some((_, m)) = ESTIMATION_ONLY.iter().find(|(n, _)| *n == name) {
            return Ok(vec![*m]);
        }
        let (base, suffix) = match name.split_once('/') {
            Some((b, s)) => (b, Some(s)),
            None => (name, None),
        };
        let design = *Design::ALL.iter().find(|d| d.name() == base).ok_or_else(unknown)?;
        match suffix {
            None => Ok(csi.iter().map(|&c| Method::Rate(design, c)).collect()),
            Some(s) => {
                let c = *Csi::ALL.iter().find(|c| c.name() == s).ok_or_else(unknown)?;
                Ok(vec![Method::Rate(design, c)])
            }
        }
    }

    pub fn parse_list(list: &str, csi: &[Csi]) -> Result<Vec<Method>> {
        let mut out = Vec::new();
        for item in list.split(',').filter(|s| !s.trim().is_empty()) {
            for m in Method::parse_with(item, csi)? {
                if !out.contains(&m) {
                    out.push(m);
                }
            }
        }
        Ok(out)
    }

    fn needs_ul_estimate(self) -> bool {
        matches!(self, Method::Rate(_, Csi::Estimated) | Method::UlNmse | Method::CrlbUl)
    }

    fn needs_dl_estimate(self) -> bool {
        matches!(self, Method::DlNmse | Method::CrlbDl)
    }

    /// Whether values are reported in dB (NMSE) rather than bits/s/Hz.
    pub fn is_nmse(self) -> bool {
        !matches!(self, Method::Rate(..))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Rate(d, c) => write!(f, "{}/{}", d.name(), c.name()),
            other => {
                let name = ESTIMATION_ONLY.iter().find(|(_, m)| m == other).map(|(n, _)| *n).unwrap_or("?");
                f.write_str(name)
            }
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        let v = Method::parse_with(s, &[Csi::Perfect])?;
        Ok(v[0])
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Method> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "variable", content = "values")]
pub enum Sweep {
    Snr(Vec<f64>),
    Frames(Vec<usize>),
    RfChains(Vec<usize>),
}

impl Sweep {
    pub fn var_name(&self) -> &'static str {
        match self {
            Sweep::Snr(_) => "snr_db",
            Sweep::Frames(_) => "n_frames",
            Sweep::RfChains(_) => "l_bs",
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            Sweep::Snr(v) => v.clone(),
            Sweep::Frames(v) | Sweep::RfChains(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Sweep::Snr(v) => v.len(),
            Sweep::Frames(v) | Sweep::RfChains(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `base` with the `i`-th sweep value applied.
    pub fn apply(&self, base: &SystemConfig, i: usize) -> SystemConfig {
        let mut cfg = base.clone();
        match self {
            Sweep::Snr(v) => cfg.snr_db = v[i],
            Sweep::Frames(v) => cfg.n_frames = v[i],
            Sweep::RfChains(v) => cfg.l_bs = v[i],
        }
        cfg
    }

    /// `U N_s, 2 U N_s, ...` up to and including `n_bs`.
    pub fn default_rf_chains(cfg: &SystemConfig) -> Vec<usize> {
        let mut out = Vec::new();
        let mut l = cfg.n_users * cfg.n_streams;
        while l < cfg.n_bs {
            out.push(l);
            l *= 2;
        }
        out.push(cfg.n_bs);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub config: SystemConfig,
    pub sweep: Sweep,
    pub methods: Vec<Method>,
    pub trials: usize,
    /// Factorization traces are kept for the first `trace_trials` trials of every point.
    #[serde(default)]
    pub trace_trials: usize,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be positive".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        if self.sweep.is_empty() {
            return Err(Error::Config("sweep has no values".into()));
        }
        let checks = Checks {
            estimation: self.methods.iter().any(|m| m.needs_ul_estimate() || m.needs_dl_estimate()),
            allow_full_rf: matches!(self.sweep, Sweep::RfChains(_)),
        };
        for i in 0..self.sweep.len() {
            self.sweep.apply(&self.config, i).validate(checks)?;
        }
        Ok(())
    }
}

/// Aggregate of one method at one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: Method,
    pub sweep_var: String,
    pub sweep_value: f64,
    /// `None` when every trial failed.
    pub mean: Option<f64>,
    pub stderr: Option<f64>,
    /// Successful trials.
    pub trials: usize,
    pub failed: usize,
    /// Per-trial values in trial order, `None` for failed trials.
    pub samples: Vec<Option<f64>>,
    /// Distinct failure messages.
    pub failures: Vec<String>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    method: String,
    sweep_var: &'a str,
    sweep_value: f64,
    mean: Option<f64>,
    stderr: Option<f64>,
    trials: usize,
}

#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub method: Method,
    pub sweep_value: f64,
    pub trial: usize,
    /// `ms<u>` for the precoder of user `u`, `bs` for the combiner.
    pub label: String,
    pub trace: FactorizationTrace,
}

impl TraceRecord {
    pub fn file_name(&self) -> String {
        format!(
            "trace_{}_{}{}_t{}_{}.csv",
            self.method.to_string().replace('/', "_"),
            "v",
            self.sweep_value,
            self.trial,
            self.label
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub rows: Vec<ResultRow>,
    #[serde(skip)]
    pub traces: Vec<TraceRecord>,
}

impl ExperimentResult {
    pub fn row(&self, method: Method, sweep_value: f64) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.method == method && r.sweep_value == sweep_value)
    }

    /// Rows of one method in sweep order.
    pub fn curve(&self, method: Method) -> Vec<&ResultRow> {
        self.rows.iter().filter(|r| r.method == method).collect()
    }

    pub fn total_failures(&self) -> usize {
        self.rows.iter().map(|r| r.failed).sum()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in &self.rows {
            wr.serialize(CsvRow {
                method: r.method.to_string(),
                sweep_var: &r.sweep_var,
                sweep_value: r.sweep_value,
                mean: r.mean,
                stderr: r.stderr,
                trials: r.trials,
            })?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}

/// Mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    let n = xs.len();
    if n == 0 {
        return (None, None);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (Some(mean), Some(0.0));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (Some(mean), Some((var / n as f64).sqrt()))
}

pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

struct TrialOutcome {
    values: Vec<std::result::Result<f64, String>>,
    traces: Vec<(Method, String, FactorizationTrace)>,
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    spec.validate()?;
    let values = spec.sweep.values();
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for (i, &v) in values.iter().enumerate() {
        let cfg = spec.sweep.apply(&spec.config, i);
        let outcomes: Vec<TrialOutcome> = (0..spec.trials)
            .into_par_iter()
            .map(|t| run_trial(&cfg, &spec.methods, t as u64, t < spec.trace_trials))
            .collect();
        for (mi, &method) in spec.methods.iter().enumerate() {
            let samples: Vec<Option<f64>> = outcomes.iter().map(|o| o.values[mi].as_ref().ok().copied()).collect();
            let ok: Vec<f64> = samples.iter().flatten().copied().collect();
            let mut failures: Vec<String> = Vec::new();
            for o in &outcomes {
                if let Err(e) = &o.values[mi] {
                    if !failures.contains(e) {
                        failures.push(e.clone());
                    }
                }
            }
            let (mean, stderr) = mean_stderr(&ok);
            rows.push(ResultRow {
                method,
                sweep_var: spec.sweep.var_name().to_string(),
                sweep_value: v,
                mean,
                stderr,
                trials: ok.len(),
                failed: spec.trials - ok.len(),
                samples,
                failures,
            });
        }
        for (t, o) in outcomes.into_iter().enumerate() {
            for (method, label, trace) in o.traces {
                traces.push(TraceRecord { method, sweep_value: v, trial: t, label, trace });
            }
        }
    }
    Ok(ExperimentResult { spec: spec.clone(), rows, traces })
}

fn run_trial(cfg: &SystemConfig, methods: &[Method], trial: u64, keep_traces: bool) -> TrialOutcome {
    let ch = ChannelRealization::generate(cfg, &mut substream(cfg.seed, trial, Stream::Channel));
    let ul: Option<std::result::Result<UplinkOutcome, String>> = methods
        .iter()
        .any(|m| m.needs_ul_estimate())
        .then(|| estimate_uplink(&ch, cfg, trial).map_err(|e| e.to_string()));
    let dl = methods
        .iter()
        .any(|m| m.needs_dl_estimate())
        .then(|| simulate_downlink_training(&ch, cfg, trial).map_err(|e| e.to_string()));
    let truth_ul = ch.uplink_grid();
    let truth_dl = ch.downlink_grid();
    let mut traces = Vec::new();
    let values = methods
        .iter()
        .map(|&m| -> std::result::Result<f64, String> {
            let ul = || ul.as_ref().expect("estimated when needed").as_ref().map_err(Clone::clone);
            let dl = || dl.as_ref().expect("estimated when needed").as_ref().map_err(Clone::clone);
            match m {
                Method::UlNmse => Ok(to_db(ul()?.nmse)),
                Method::DlNmse => Ok(to_db(dl()?.nmse)),
                Method::CrlbUl => uplink_crlb_nmse(&ch, &ul()?.ensemble, cfg).map(to_db).map_err(|e| e.to_string()),
                Method::CrlbDl => downlink_crlb_nmse(&ch, &dl()?.ensembles, cfg).map(to_db).map_err(|e| e.to_string()),
                Method::Rate(design, csi) => {
                    let h = match csi {
                        Csi::Perfect => &truth_ul,
                        Csi::Estimated => &ul()?.estimate.channels,
                    };
                    let mut rng = substream(cfg.seed, trial, Stream::Design);
                    let mut local = Vec::new();
                    let filters = design_filters(design, h, cfg, &mut rng, &mut local).map_err(|e| e.to_string())?;
                    if keep_traces {
                        traces.extend(local.into_iter().map(|(l, t)| (m, l, t)));
                    }
                    let rate = sum_rate(&truth_dl, &filters, cfg.noise_var()).map_err(|e| e.to_string())?;
                    if !rate.sum_rate.is_finite() {
                        return Err(Error::NonFinite.to_string());
                    }
                    Ok(rate.sum_rate)
                }
            }
        })
        .collect();
    TrialOutcome { values, traces }
}

fn split_columns(m: &CMatrix, widths: impl Iterator<Item = usize>) -> Vec<CMatrix> {
    let mut col = 0;
    widths
        .map(|w| {
            let b = m.columns(col, w).into_owned();
            col += w;
            b
        })
        .collect()
}

fn rescale(m: CMatrix, power: f64) -> CMatrix {
    let n = frob(&m);
    if n > 0.0 {
        m * c64::from(power.sqrt() / n)
    } else {
        m
    }
}

fn regroup(blocks: Vec<CMatrix>, n_k: usize) -> Vec<Vec<CMatrix>> {
    blocks.chunks(n_k).map(|c| c.to_vec()).collect()
}

/// MMSE combiners `[u][k]` for precoders `t[u][k]`.
fn mmse_grid(h_ul: &[Vec<CMatrix>], t: &[Vec<CMatrix>], noise_var: f64) -> Result<Vec<Vec<CMatrix>>> {
    let hk = per_subcarrier(h_ul);
    let tk = per_subcarrier(t);
    let mut out = vec![Vec::with_capacity(hk.len()); h_ul.len()];
    for (h, t) in hk.iter().zip(&tk) {
        for (u, f) in mmse_combiners(h, t, noise_var)?.into_iter().enumerate() {
            out[u].push(f);
        }
    }
    Ok(out)
}

/// Designs DL filters from UL channel knowledge `h_ul[u][k]`.
pub fn design_filters(
    design: Design,
    h_ul: &[Vec<CMatrix>],
    cfg: &SystemConfig,
    rng: &mut crate::rng::SimRng,
    traces: &mut Vec<(String, FactorizationTrace)>,
) -> Result<crate::digital::DlFilters> {
    let n_k = cfg.n_subcarriers;
    let noise_var = cfg.noise_var();
    let digital = |kind| -> Result<_> {
        let set = DigitalFilterSet::design(h_ul, cfg, kind)?;
        dl_filters_from_ul(&set.ul_combiners, &set.ul_precoders, cfg)
    };
    match design {
        Design::DigitalMmse => digital(CombinerKind::Mmse),
        Design::DigitalMrc => digital(CombinerKind::Mrc),
        Design::DigitalCb => digital(CombinerKind::Cb),
        Design::HdPg | Design::HdPgEy => {
            let init = if design == Design::HdPg { Init::Random } else { Init::EckartYoung };
            let opts = HdPgOptions { init, ..Default::default() };
            let set = DigitalFilterSet::design(h_ul, cfg, CombinerKind::Mmse)?;
            let mut t_hyb = Vec::with_capacity(h_ul.len());
            for (u, tu) in set.ul_precoders.iter().enumerate() {
                if tu.iter().all(|t| frob(t) == 0.0) {
                    // nothing to factorize for an unserved user
                    t_hyb.push(tu.clone());
                    continue;
                }
                let target = FactorizationTarget::new(tu.clone(), PowerRule::Fixed(cfg.user_power()))?;
                let (f, trace) = hd_pg(&target, cfg.l_ms, Side::MsPrecoder, &opts, rng)?;
                traces.push((format!("ms{u}"), trace));
                t_hyb.push((0..n_k).map(|k| f.block(k)).collect::<Vec<_>>());
            }
            let combiners = mmse_grid(h_ul, &t_hyb, noise_var)?;
            let target = FactorizationTarget::from_grid(&combiners, PowerRule::TargetNorm)?;
            let (f, trace) = hd_pg(&target, cfg.l_bs, Side::BsCombiner, &opts, rng)?;
            traces.push(("bs".into(), trace));
            dl_filters_from_ul(&f.effective_grid(n_k), &t_hyb, cfg)
        }
        Design::EckartYoungBound => {
            let set = DigitalFilterSet::design(h_ul, cfg, CombinerKind::Mmse)?;
            let mut t_ey = Vec::with_capacity(h_ul.len());
            for tu in &set.ul_precoders {
                let ey = eckart_young(&hstack(tu)?, cfg.l_ms)?;
                t_ey.push(
                    split_columns(&ey.approx, tu.iter().map(|t| t.ncols()))
                        .into_iter()
                        .map(|b| rescale(b, cfg.user_power()))
                        .collect(),
                );
            }
            let combiners = mmse_grid(h_ul, &t_ey, noise_var)?;
            let flat: Vec<CMatrix> = combiners.iter().flatten().cloned().collect();
            let ey = eckart_young(&hstack(&flat)?, cfg.l_bs)?;
            let f = regroup(split_columns(&ey.approx, flat.iter().map(|b| b.ncols())), n_k);
            dl_filters_from_ul(&f, &t_ey, cfg)
        }
        Design::AmMmse | Design::AmMrc | Design::AmCb => {
            let variant = match design {
                Design::AmMmse => AmVariant::Mmse,
                Design::AmMrc => AmVariant::Mrc,
                _ => AmVariant::Cb,
            };
            let t = h_ul
                .iter()
                .map(|hu| {
                    let f = am_precoder(hu, cfg.l_ms, cfg.n_streams, cfg.user_power(), noise_var)?;
                    Ok((0..n_k).map(|k| f.block(k)).collect::<Vec<_>>())
                })
                .collect::<Result<Vec<_>>>()?;
            let (f, _) = am_combiner(h_ul, &t, noise_var, variant, cfg.l_bs, cfg.stream_power(), 50, 1e-6)?;
            dl_filters_from_ul(&f.effective_grid(n_k), &t, cfg)
        }
    }
}
