//! `mmwave-mu`: run channel-estimation and precoder-design sweeps.
//!
//!   mmwave-mu estimate configs/desk.json --sweep snr --mode both --grid on
//!   mmwave-mu design configs/desk.json --methods digital-mmse,hd-pg-ey --csi perfect --sweep snr
//!   mmwave-mu selftest
//!   mmwave-mu rerun results/manifest.json --out results-again
//!
//! Output goes to `--out`, else `$MMWAVE_MU_OUT`, else `./results`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use mmwave_mu::config::{GridMode, SystemConfig};
use mmwave_mu::experiment::{run_experiment, Csi, ExperimentResult, ExperimentSpec, Method, Sweep};
use mmwave_mu::selftest::{run_selftest, SelftestOptions};

const OUT_ENV: &str = "MMWAVE_MU_OUT";
const DEFAULT_OUT: &str = "results";
const MANIFEST: &str = "manifest.json";
const RESULTS_CSV: &str = "results.csv";
const RESULTS_JSON: &str = "results.json";
const TRACE_DIR: &str = "traces";

#[derive(Parser)]
#[command(name = "mmwave-mu", version, about = "Multiuser mmWave channel estimation and hybrid precoding experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// NMSE and CRLB sweeps of UL/DL channel estimation.
    Estimate(EstimateArgs),
    /// Sum-rate sweeps of digital and hybrid designs.
    Design(DesignArgs),
    /// Fast invariant checks.
    Selftest,
    /// Re-run an experiment from its manifest.
    Rerun {
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON system configuration (missing keys take desk-scale values).
    config: PathBuf,
    #[arg(long, value_enum)]
    grid: Option<Grid>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Comma-separated sweep values (defaults depend on the sweep).
    #[arg(long, allow_hyphen_values = true)]
    values: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value_t = EstimateSweep::Snr)]
    sweep: EstimateSweep,
    #[arg(long, value_enum, default_value_t = Mode::Both)]
    mode: Mode,
}

#[derive(Args)]
struct DesignArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value = "digital-mmse,hd-pg-ey")]
    methods: String,
    #[arg(long, value_enum, default_value_t = CsiArg::Perfect)]
    csi: CsiArg,
    #[arg(long, value_enum, default_value_t = DesignSweep::Snr)]
    sweep: DesignSweep,
    /// Write HD-PG distortion traces of the first trial of every point.
    #[arg(long)]
    trace: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Grid {
    On,
    Off,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Mode {
    Ul,
    Dl,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum CsiArg {
    Perfect,
    Estimated,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimateSweep {
    Snr,
    Frames,
}

#[derive(Clone, Copy, ValueEnum)]
enum DesignSweep {
    Snr,
    Rfchains,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Outputs {
    results_csv: String,
    results_json: String,
    traces_dir: Option<String>,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunManifest {
    tool_version: String,
    command: String,
    seed: u64,
    spec: ExperimentSpec,
    /// File names relative to `output_dir`.
    outputs: Outputs,
    output_dir: PathBuf,
    started_unix_s: u64,
    wall_clock_s: Option<f64>,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn input(msg: impl Into<String>) -> Failure {
        Failure { code: 2, msg: msg.into() }
    }

    fn runtime(msg: impl Into<String>) -> Failure {
        Failure { code: 1, msg: msg.into() }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Estimate(a) => cmd_estimate(a),
        Command::Design(a) => cmd_design(a),
        Command::Selftest => cmd_selftest(),
        Command::Rerun { manifest, out } => cmd_rerun(&manifest, out),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

/// 1-based line of the first `"key"` occurrence in `text`.
fn key_line(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map(|i| i + 1)
}

fn load_config(path: &Path) -> Result<SystemConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    serde_json::from_str::<SystemConfig>(&text).map_err(|e| {
        Failure::input(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column()))
    })
}

/// Validation errors anchored at the line of the offending key when present.
fn anchored(path: &Path, text: &str, err: &mmwave_mu::Error) -> Failure {
    let msg = err.to_string();
    let detail = msg.strip_prefix("invalid configuration: ").unwrap_or(&msg);
    let key: String = detail.chars().take_while(|c| c.is_ascii_alphanumeric() || *c == '_').collect();
    match key_line(text, &key) {
        Some(line) => Failure::input(format!("{}:{line}: {msg}", path.display())),
        None => Failure::input(format!("{}: {msg}", path.display())),
    }
}

fn resolve_config(c: &Common) -> Result<SystemConfig, Failure> {
    let mut cfg = load_config(&c.config)?;
    if let Some(g) = c.grid {
        cfg.grid_mode = match g {
            Grid::On => GridMode::OnGrid,
            Grid::Off => GridMode::OffGrid,
        };
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, Failure> {
    s.split(',')
        .filter(|x| !x.trim().is_empty())
        .map(|x| x.trim().parse::<T>().map_err(|_| Failure::input(format!("bad sweep value `{x}`"))))
        .collect()
}

fn out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn validate(spec: &ExperimentSpec, c: &Common) -> Result<(), Failure> {
    spec.validate().map_err(|e| {
        let text = fs::read_to_string(&c.config).unwrap_or_default();
        anchored(&c.config, &text, &e)
    })
}

fn cmd_estimate(a: EstimateArgs) -> Result<(), Failure> {
    let config = resolve_config(&a.common)?;
    let sweep = match a.sweep {
        EstimateSweep::Snr => Sweep::Snr(match &a.common.values {
            Some(v) => parse_list(v)?,
            None => vec![-10.0, -5.0, 0.0, 5.0, 10.0],
        }),
        EstimateSweep::Frames => Sweep::Frames(match &a.common.values {
            Some(v) => parse_list(v)?,
            None => vec![20, 40, 60, 80, 100],
        }),
    };
    let mut methods = Vec::new();
    if a.mode != Mode::Dl {
        methods.extend([Method::UlNmse, Method::CrlbUl]);
    }
    if a.mode != Mode::Ul {
        methods.extend([Method::DlNmse, Method::CrlbDl]);
    }
    let spec = ExperimentSpec { config, sweep, methods, trials: a.common.trials, trace_trials: 0 };
    validate(&spec, &a.common)?;
    execute("estimate", spec, out_dir(a.common.out))
}

fn cmd_design(a: DesignArgs) -> Result<(), Failure> {
    let config = resolve_config(&a.common)?;
    let csi: &[Csi] = match a.csi {
        CsiArg::Perfect => &[Csi::Perfect],
        CsiArg::Estimated => &[Csi::Estimated],
        CsiArg::Both => &Csi::ALL,
    };
    let methods = Method::parse_list(&a.methods, csi).map_err(|e| Failure::input(e.to_string()))?;
    let sweep = match a.sweep {
        DesignSweep::Snr => Sweep::Snr(match &a.common.values {
            Some(v) => parse_list(v)?,
            None => vec![-10.0, -5.0, 0.0, 5.0, 10.0],
        }),
        DesignSweep::Rfchains => Sweep::RfChains(match &a.common.values {
            Some(v) => parse_list(v)?,
            None => Sweep::default_rf_chains(&config),
        }),
    };
    let spec = ExperimentSpec {
        config,
        sweep,
        methods,
        trials: a.common.trials,
        trace_trials: usize::from(a.trace),
    };
    validate(&spec, &a.common)?;
    execute("design", spec, out_dir(a.common.out))
}

fn cmd_rerun(path: &Path, out: Option<PathBuf>) -> Result<(), Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    let m: RunManifest = serde_json::from_str(&text)
        .map_err(|e| Failure::input(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column())))?;
    m.spec.validate().map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    let dir = out.unwrap_or_else(|| out_dir(None));
    execute(&m.command, m.spec, dir)
}

fn cmd_selftest() -> Result<(), Failure> {
    let t = Instant::now();
    let report = run_selftest(&SelftestOptions::default());
    print!("{}", report.table());
    println!("total {:.2} s", t.elapsed().as_secs_f64());
    if report.all_passed() {
        Ok(())
    } else {
        Err(Failure::runtime("selftest failed"))
    }
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::runtime(format!("{}: {e}", path.display()))
}

fn write_manifest(dir: &Path, m: &RunManifest) -> Result<(), Failure> {
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(m).map_err(|e| Failure::runtime(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(io(&path))
}

fn execute(command: &str, spec: ExperimentSpec, dir: PathBuf) -> Result<(), Failure> {
    let started = Instant::now();
    fs::create_dir_all(&dir).map_err(io(&dir))?;
    let mut manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        seed: spec.config.seed,
        outputs: Outputs {
            results_csv: RESULTS_CSV.into(),
            results_json: RESULTS_JSON.into(),
            traces_dir: (spec.trace_trials > 0).then(|| TRACE_DIR.to_string()),
        },
        output_dir: fs::canonicalize(&dir).unwrap_or_else(|_| dir.clone()),
        started_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        wall_clock_s: None,
        spec,
    };
    write_manifest(&dir, &manifest)?;

    let result = run_experiment(&manifest.spec).map_err(|e| Failure::runtime(e.to_string()))?;
    write_results(&dir, &result)?;

    manifest.wall_clock_s = Some(started.elapsed().as_secs_f64());
    write_manifest(&dir, &manifest)?;
    print_summary(&result);
    let failed = result.total_failures();
    if failed > 0 {
        eprintln!("warning: {failed} trial evaluations failed; see results.json");
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn write_results(dir: &Path, result: &ExperimentResult) -> Result<(), Failure> {
    let csv_path = dir.join(RESULTS_CSV);
    let f = fs::File::create(&csv_path).map_err(io(&csv_path))?;
    result.write_csv(f).map_err(|e| Failure::runtime(e.to_string()))?;
    let json_path = dir.join(RESULTS_JSON);
    let f = fs::File::create(&json_path).map_err(io(&json_path))?;
    result.write_json(f).map_err(|e| Failure::runtime(e.to_string()))?;
    if !result.traces.is_empty() {
        let tdir = dir.join(TRACE_DIR);
        fs::create_dir_all(&tdir).map_err(io(&tdir))?;
        for t in &result.traces {
            let p = tdir.join(t.file_name());
            let f = fs::File::create(&p).map_err(io(&p))?;
            t.trace.write_csv(f).map_err(|e| Failure::runtime(e.to_string()))?;
        }
    }
    Ok(())
}

fn print_summary(result: &ExperimentResult) {
    let var = result.spec.sweep.var_name();
    println!("{:<32} {:>8} {:>10} {:>8} {:>6}", "method", var, "mean", "stderr", "n");
    for r in &result.rows {
        let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.3}"));
        println!(
            "{:<32} {:>8} {:>10} {:>8} {:>6}",
            r.method.to_string(),
            r.sweep_value,
            fmt(r.mean),
            fmt(r.stderr),
            r.trials
        );
    }
}
