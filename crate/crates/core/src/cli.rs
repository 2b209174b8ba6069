//! Command-line front end for the `rdpt` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{parse_config, ConfigError, Resolved, TheoryKind};
use crate::harness::{run_sweep, Row, Source, SweepResult};
use crate::rcc::{chain_decode, chain_encode, pfr_select, DiagGaussian, StepChannel, StepStream};
use crate::schedule::NoiseSchedule;
use crate::sources::GaussianSource;
use crate::ssode::RhoParam;
use crate::stats::{kolmogorov_critical, ks_uniform, normal_cdf};
use crate::theory::{dp_multivariate, dp_multivariate_parts, dp_scalar, mutual_info_multivariate, rate_bounds, rdp_scalar};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const SWEEP_COLUMNS: &str = "t,rho,alpha_bar_t,rate_bits_emp,rate_bits_se,rate_bits_theory,mse_emp,mse_se,mse_theory,w2sq_emp,w2sq_se,w2sq_theory,rate_mode,decode_mode,cap_hits,check";
pub const THEORY_COLUMNS: &str = "kind,t,alpha_bar_t,sigma0,p,d,rate_bits,feasible";

#[derive(Debug, Parser)]
#[command(name = "rdpt", version, about = "Rate-distortion-perception traversal on Gaussian sources")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output file; standard output when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Overrides `sweep.seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Exit with status 2 when a tolerance check fails.
    #[arg(long, global = true)]
    pub check: bool,

    /// Worker threads for the Monte Carlo engine.
    #[arg(long, global = true, env = "RDPT_THREADS")]
    pub threads: Option<usize>,

    /// Progress messages on standard error.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tabulate closed-form tradeoff functions.
    Theory,
    /// Run the Monte Carlo sweep over (t, rho).
    Sweep,
    /// Exercise the channel simulator and the progressive codec.
    RccSelftest {
        /// Chains to round-trip.
        #[arg(long, default_value_t = 1000)]
        chains: usize,
        /// Independent selections for the distribution test.
        #[arg(long, default_value_t = 20_000)]
        draws: usize,
    },
    /// Parse a configuration and print its canonical form.
    ValidateConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] crate::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Usage(String),
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn header(out: &mut String, command: &str, resolved: Option<&Resolved>) {
    out.push_str(&format!("# rdpt {VERSION} {command}\n"));
    if let Some(r) = resolved {
        for d in &r.defaulted {
            out.push_str(&format!("# default: {d}\n"));
        }
    }
}

fn rho_field(rho: &RhoParam) -> String {
    match rho {
        RhoParam::Uniform(r) => fmt_f64(*r),
        RhoParam::PerDim(v) => v.iter().map(|r| fmt_f64(*r)).collect::<Vec<_>>().join(";"),
    }
}

pub fn sweep_row(r: &Row) -> String {
    let check = match r.check {
        Some(true) => "pass",
        Some(false) => "fail",
        None => "na",
    };
    [
        r.t.to_string(),
        rho_field(&r.rho),
        fmt_f64(r.alpha_bar_t),
        fmt_f64(r.rate_bits.value),
        fmt_f64(r.rate_bits.se),
        fmt_opt(r.rate_bits_theory),
        fmt_f64(r.mse.value),
        fmt_f64(r.mse.se),
        fmt_opt(r.mse_theory),
        fmt_f64(r.w2sq.value),
        fmt_f64(r.w2sq.se),
        fmt_opt(r.w2sq_theory),
        r.rate_mode.as_str().to_string(),
        r.decode_mode.as_str().to_string(),
        r.cap_hits.to_string(),
        check.to_string(),
    ]
    .join(",")
}

pub fn sweep_csv(result: &SweepResult, resolved: Option<&Resolved>, seed: u64) -> String {
    let mut out = String::new();
    header(&mut out, "sweep", resolved);
    out.push_str(&format!("# seed: {seed}\n"));
    out.push_str(SWEEP_COLUMNS);
    out.push('\n');
    for r in &result.rows {
        out.push_str(&sweep_row(r));
        out.push('\n');
    }
    out
}

fn linspace(hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| hi * i as f64 / (n - 1) as f64).collect()
}

/// Theory table for a resolved configuration.
pub fn theory_csv(resolved: &Resolved) -> Result<String, CliError> {
    let source = resolved.source();
    let sched = resolved.schedule();
    let th = &resolved.file.theory;
    let points = th.points.unwrap();
    let ts = resolved.file.sweep.t.clone().unwrap();
    let mut out = String::new();
    header(&mut out, "theory", Some(resolved));
    out.push_str(THEORY_COLUMNS);
    out.push('\n');
    let g = source.gaussian().ok_or_else(|| CliError::Usage("theory needs a Gaussian source".into()))?;
    let lambdas: Vec<f64> = g.eigenvalues().iter().copied().collect();
    let ln2 = std::f64::consts::LN_2;
    let mut row = |kind: &str, t: Option<usize>, sigma0: Option<f64>, p: f64, d: Option<f64>, rate: Option<f64>| {
        let fields = [
            kind.to_string(),
            t.map(|t| t.to_string()).unwrap_or_default(),
            fmt_opt(t.map(|t| sched.alpha_bar(t))),
            fmt_opt(sigma0),
            fmt_f64(p),
            fmt_opt(d),
            fmt_opt(rate),
            rate.is_some().to_string(),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    };
    match th.kind.expect("filled for Gaussian sources") {
        TheoryKind::Dp => {
            let sigma0 = g.sigma0().expect("validated");
            for &t in &ts {
                let ab = sched.alpha_bar(t);
                let (s, _) = dp_multivariate_parts(&lambdas, ab)?;
                let grid = th.p.clone().unwrap_or_else(|| linspace(1.2 * s, points));
                for p in grid {
                    let d = dp_scalar(sigma0, ab, p)?;
                    let rate = rdp_scalar(sigma0, d, p).ok().map(|r| r / ln2);
                    row("dp", Some(t), Some(sigma0), p, Some(d), rate);
                }
            }
        }
        TheoryKind::DpMultivariate => {
            for &t in &ts {
                let ab = sched.alpha_bar(t);
                let (s, _) = dp_multivariate_parts(&lambdas, ab)?;
                let rate = mutual_info_multivariate(&lambdas, ab) / ln2;
                let grid = th.p.clone().unwrap_or_else(|| linspace(1.2 * s, points));
                for p in grid {
                    let d = dp_multivariate(&lambdas, ab, p)?;
                    row("dp-multivariate", Some(t), None, p, Some(d), Some(rate));
                }
            }
        }
        TheoryKind::Rdp => {
            let sigma0 = g.sigma0().expect("validated");
            let var0 = sigma0 * sigma0;
            let dgrid = th.d.clone().unwrap_or_else(|| linspace(1.2 * var0, points + 1)[1..].to_vec());
            let pgrid = th.p.clone().unwrap_or_else(|| linspace(var0, points));
            for &d in &dgrid {
                for &p in &pgrid {
                    let rate = if d > 0.0 { rdp_scalar(sigma0, d, p).ok().map(|r| r / ln2) } else { None };
                    row("rdp", None, Some(sigma0), p, Some(d), rate);
                }
            }
        }
    }
    Ok(out)
}

/// Outcome of the channel-coding self test.
#[derive(Debug, Clone, PartialEq)]
pub struct SelftestReport {
    pub lines: Vec<String>,
    pub transcripts: Vec<String>,
    pub pass: bool,
}

/// Round-trips `chains` progressive codes, runs a distribution test on a
/// 1-bit channel and compares measured bits with the stepwise bound.
pub fn rcc_selftest(
    source: &GaussianSource,
    sched: &NoiseSchedule,
    seed: u64,
    chains: usize,
    draws: usize,
    caps: crate::rcc::CapPolicy,
) -> Result<SelftestReport, CliError> {
    let mut lines = Vec::new();
    let mut transcripts = Vec::new();

    let target = DiagGaussian::new(vec![0.75f64.sqrt()], vec![0.25])?;
    let proposal = DiagGaussian::new(vec![0.0], vec![1.0])?;
    let channel = StepChannel::new(target, proposal)?;
    let mut pits = Vec::with_capacity(draws);
    for i in 0..draws {
        let stream = StepStream { seed, trial: i as u64, step: 0 };
        let (_, z) = pfr_select(&channel, stream, caps.cap(channel.kl_nats))?;
        pits.push(normal_cdf((z[0] - channel.target.mean[0]) / channel.target.var[0].sqrt()));
    }
    let ks = ks_uniform(&pits) * (draws as f64).sqrt();
    let crit = kolmogorov_critical(0.01);
    let ks_ok = ks <= crit;
    lines.push(format!(
        "pfr-distribution: KL {:.4} bits, sqrt(n) D = {ks:.4}, critical {crit:.4}: {}",
        channel.kl_nats / std::f64::consts::LN_2,
        if ks_ok { "pass" } else { "fail" }
    ));

    let lambdas: Vec<f64> = source.eigenvalues().iter().copied().collect();
    let t_max = sched.steps() - 1;
    let t = (1..=t_max)
        .min_by(|&a, &b| {
            let ia = mutual_info_multivariate(&lambdas, sched.alpha_bar(a)) / std::f64::consts::LN_2;
            let ib = mutual_info_multivariate(&lambdas, sched.alpha_bar(b)) / std::f64::consts::LN_2;
            (ia - 1.0).abs().total_cmp(&(ib - 1.0).abs())
        })
        .ok_or_else(|| CliError::Usage("schedule too short".into()))?;
    let (mut mismatches, mut bits, mut bound, mut hits) = (0usize, 0.0, 0.0, 0usize);
    for i in 0..chains {
        let mut x = nalgebra::DVector::zeros(source.dim());
        source.sample_into(
            &crate::rng::StreamKey::new(seed, i as u64, 0, 0, crate::rng::Role::Source),
            x.as_mut_slice(),
        );
        let code = chain_encode(&x, t, source, sched, seed, i as u64, caps)?;
        let back = chain_decode(&code.transcripts, t, source, sched, seed, i as u64)?;
        if back != code.z_t {
            mismatches += 1;
        }
        bits += code.total_bits;
        hits += code.cap_hits;
        for tr in &code.transcripts {
            bound += rate_bounds(tr.kl_nats)?.1;
            transcripts.push(tr.to_json_line());
        }
    }
    let n = chains.max(1) as f64;
    let (bits, bound) = (bits / n, bound / n);
    let rt_ok = mismatches == 0;
    let rate_ok = bits <= bound + 1.0;
    lines.push(format!(
        "chain-round-trip: {chains} chains at t = {t}, {mismatches} mismatches: {}",
        if rt_ok { "pass" } else { "fail" }
    ));
    lines.push(format!(
        "chain-rate: mean {bits:.4} bits, stepwise bound {bound:.4} + 1, cap hits {hits}: {}",
        if rate_ok { "pass" } else { "fail" }
    ));
    Ok(SelftestReport { lines, transcripts, pass: ks_ok && rt_ok && rate_ok })
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn load(cli: &Cli) -> Result<Option<Resolved>, CliError> {
    let Some(path) = &cli.config else {
        return Ok(None);
    };
    let mut r = parse_config(path)?;
    if let Some(seed) = cli.seed {
        r.file.sweep.seed = Some(seed);
    }
    Ok(Some(r))
}

fn require_config(r: Option<Resolved>) -> Result<Resolved, CliError> {
    r.ok_or_else(|| CliError::Usage("--config is required for this subcommand".into()))
}

fn out_path(cli: &Cli, r: Option<&Resolved>) -> Option<PathBuf> {
    cli.out.clone().or_else(|| r.and_then(|r| r.file.output.path.clone()).map(PathBuf::from))
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: &Cli) -> Result<i32, CliError> {
    if let Some(n) = cli.threads {
        // A pool may already exist when called repeatedly in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let resolved = load(cli)?;
    match &cli.command {
        Command::ValidateConfig => {
            let r = require_config(resolved)?;
            let mut text = String::new();
            for d in &r.defaulted {
                text.push_str(&format!("# default: {d}\n"));
            }
            text.push_str(&r.canonical());
            write_output(cli.out.as_deref(), &text)?;
            Ok(0)
        }
        Command::Theory => {
            let r = require_config(resolved)?;
            write_output(out_path(cli, Some(&r)).as_deref(), &theory_csv(&r)?)?;
            Ok(0)
        }
        Command::Sweep => {
            let r = require_config(resolved)?;
            let cfg = r.experiment();
            if cli.verbose > 0 {
                eprintln!(
                    "sweep: {} levels x {} rho values, {} trials each",
                    cfg.t_grid.len(),
                    cfg.rho_grid.len(),
                    cfg.trials
                );
            }
            let result = run_sweep(&cfg)?;
            write_output(out_path(cli, Some(&r)).as_deref(), &sweep_csv(&result, Some(&r), cfg.seed))?;
            if cli.check && !result.all_pass() {
                return Ok(2);
            }
            Ok(0)
        }
        Command::RccSelftest { chains, draws } => {
            let (source, sched, seed, caps) = match &resolved {
                Some(r) => {
                    let Source::Gaussian(g) = r.source() else {
                        return Err(CliError::Usage("rcc-selftest needs a Gaussian source".into()));
                    };
                    (g, r.schedule(), r.file.sweep.seed.unwrap(), r.experiment().caps)
                }
                None => (
                    GaussianSource::scalar(0.0, 1.0)?,
                    NoiseSchedule::ddpm_scaled(200)?,
                    cli.seed.unwrap_or(0),
                    crate::rcc::CapPolicy::default(),
                ),
            };
            let report = rcc_selftest(&source, &sched, seed, *chains, *draws, caps)?;
            for line in &report.lines {
                println!("{line}");
            }
            if let Some(p) = out_path(cli, resolved.as_ref()) {
                let mut text = report.transcripts.join("\n");
                text.push('\n');
                std::fs::write(p, text)?;
            }
            if cli.check && !report.pass {
                return Ok(2);
            }
            Ok(0)
        }
    }
}
