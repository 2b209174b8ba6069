//! Monte Carlo engine: encode, decode, and compare against the closed forms.
//!
//! For each time level an ensemble of `(x, z_t)` pairs is built once and
//! then decoded under every `rho`, so all points of one level share the
//! same encoder output. Trials are split into contiguous batches that are
//! processed in parallel and merged in batch order; the same batches drive
//! the delete-one-batch jackknife.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rcc::{chain_decode, chain_encode, CapPolicy};
use crate::rng::{Role, StreamKey};
use crate::schedule::NoiseSchedule;
use crate::sources::{empirical_w2_1d, w2_moments, GaussianSource, GmmSource, ScoreOracle};
use crate::ssode::{decode_into, f_factor, DecodeScratch, RhoParam};
use crate::stats::{batch_ranges, jackknife_se, pairwise_sum};
use crate::theory::{dp_from_f, dp_scalar, mutual_info_multivariate};

const LN_2: f64 = std::f64::consts::LN_2;

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Gaussian(GaussianSource),
    Gmm(GmmSource),
}

impl Source {
    pub fn dim(&self) -> usize {
        match self {
            Source::Gaussian(g) => g.dim(),
            Source::Gmm(_) => 1,
        }
    }

    pub fn oracle(&self) -> &dyn ScoreOracle {
        match self {
            Source::Gaussian(g) => g,
            Source::Gmm(g) => g,
        }
    }

    pub fn sample_into(&self, key: &StreamKey, out: &mut [f64]) {
        match self {
            Source::Gaussian(g) => g.sample_into(key, out),
            Source::Gmm(g) => out[0] = g.sample_one(key),
        }
    }

    pub fn gaussian(&self) -> Option<&GaussianSource> {
        match self {
            Source::Gaussian(g) => Some(g),
            Source::Gmm(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateMode {
    Kl,
    Zipf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecodeMode {
    ClosedForm,
    FullChain,
}

impl RateMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RateMode::Kl => "kl",
            RateMode::Zipf => "zipf",
        }
    }
}

impl DecodeMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DecodeMode::ClosedForm => "closed-form",
            DecodeMode::FullChain => "full-chain",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub source: Source,
    pub schedule: NoiseSchedule,
    pub t_grid: Vec<usize>,
    pub rho_grid: Vec<f64>,
    pub trials: usize,
    pub batches: usize,
    pub rate_mode: RateMode,
    pub decode_mode: DecodeMode,
    pub seed: u64,
    pub caps: CapPolicy,
}

impl ExperimentConfig {
    /// Scalar Gaussian defaults: `n = 10^5`, `T = 1000`, kl rate, closed-form `z_t`.
    pub fn new(source: Source, schedule: NoiseSchedule, t_grid: Vec<usize>, rho_grid: Vec<f64>) -> Self {
        Self {
            source,
            schedule,
            t_grid,
            rho_grid,
            trials: 100_000,
            batches: 50,
            rate_mode: RateMode::Kl,
            decode_mode: DecodeMode::ClosedForm,
            seed: 0,
            caps: CapPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidRange("trials must be at least 1".into()));
        }
        if self.batches < 2 {
            return Err(Error::InvalidRange("need at least 2 batches for standard errors".into()));
        }
        if self.t_grid.is_empty() || self.rho_grid.is_empty() {
            return Err(Error::InvalidRange("t and rho grids must be nonempty".into()));
        }
        let t_max = match self.decode_mode {
            DecodeMode::ClosedForm => self.schedule.steps(),
            DecodeMode::FullChain => self.schedule.steps() - 1,
        };
        for &t in &self.t_grid {
            crate::error::check_index(t, 1, t_max)?;
        }
        for &r in &self.rho_grid {
            RhoParam::Uniform(r).validate(1)?;
        }
        if self.decode_mode == DecodeMode::FullChain && self.source.gaussian().is_none() {
            return Err(Error::Domain("full-chain decoding needs a Gaussian source".into()));
        }
        if self.rate_mode == RateMode::Zipf && self.decode_mode != DecodeMode::FullChain {
            return Err(Error::Domain("zipf rates are measured on the full chain".into()));
        }
        Ok(())
    }
}

/// Point estimate with its jackknife standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub t: usize,
    pub rho: RhoParam,
    pub alpha_bar_t: f64,
    pub rate_bits: Estimate,
    pub rate_bits_theory: Option<f64>,
    pub mse: Estimate,
    pub mse_theory: Option<f64>,
    pub w2sq: Estimate,
    pub w2sq_theory: Option<f64>,
    pub rate_mode: RateMode,
    pub decode_mode: DecodeMode,
    pub cap_hits: usize,
    /// Tolerance check against theory; `None` when no closed form exists.
    pub check: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<Row>,
}

impl SweepResult {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.check != Some(false))
    }
}

/// Encoder side of one time level: source draws, transmitted `z_t`, and
/// per-trial rates. Vectors are stored row-major, `trials x dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub t: usize,
    pub dim: usize,
    pub xs: Vec<f64>,
    pub zs: Vec<f64>,
    pub rate_bits: Vec<f64>,
    pub cap_hits: usize,
}

fn batches_of(cfg: &ExperimentConfig) -> Vec<std::ops::Range<usize>> {
    batch_ranges(cfg.trials, cfg.batches)
}

fn gaussian_log_pdf(z: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((std::f64::consts::TAU * var).ln() + (z - mean).powi(2) / var)
}

pub fn build_ensemble(cfg: &ExperimentConfig, t: usize) -> Result<Ensemble> {
    cfg.validate()?;
    let d = cfg.source.dim();
    let sched = &cfg.schedule;
    let ab = sched.alpha_bar(t);
    let parts: Vec<Result<(Vec<f64>, Vec<f64>, Vec<f64>, usize)>> = batches_of(cfg)
        .into_par_iter()
        .map(|range| {
            let len = range.len();
            let (mut xs, mut zs, mut rates) = (vec![0.0; len * d], vec![0.0; len * d], vec![0.0; len]);
            let mut hits = 0;
            for (j, i) in range.enumerate() {
                let x = &mut xs[j * d..(j + 1) * d];
                cfg.source.sample_into(&StreamKey::new(cfg.seed, i as u64, 0, 0, Role::Source), x);
                let z = &mut zs[j * d..(j + 1) * d];
                match cfg.decode_mode {
                    DecodeMode::ClosedForm => {
                        let mut rng = StreamKey::new(cfg.seed, i as u64, t as u64, 0, Role::Noise).rng();
                        for l in 0..d {
                            z[l] = ab.sqrt() * x[l] + (1.0 - ab).sqrt() * rng.normal();
                        }
                        if let Source::Gmm(g) = &cfg.source {
                            let cond = gaussian_log_pdf(z[0], ab.sqrt() * x[0], 1.0 - ab);
                            rates[j] = (cond - g.log_density(sched, t, z[0])?) / LN_2;
                        }
                    }
                    DecodeMode::FullChain => {
                        let g = cfg.source.gaussian().expect("validated");
                        let xv = DVector::from_column_slice(x);
                        let code = chain_encode(&xv, t, g, sched, cfg.seed, i as u64, cfg.caps)?;
                        let back = chain_decode(&code.transcripts, t, g, sched, cfg.seed, i as u64)?;
                        if back != code.z_t {
                            return Err(Error::Domain(format!("trial {i}: decoder diverged from encoder")));
                        }
                        z.copy_from_slice(back.as_slice());
                        rates[j] = match cfg.rate_mode {
                            RateMode::Kl => code.total_kl_nats / LN_2,
                            RateMode::Zipf => code.total_bits,
                        };
                        hits += code.cap_hits;
                    }
                }
            }
            Ok((xs, zs, rates, hits))
        })
        .collect();
    let mut ens = Ensemble { t, dim: d, xs: Vec::new(), zs: Vec::new(), rate_bits: Vec::new(), cap_hits: 0 };
    for part in parts {
        let (xs, zs, rates, hits) = part?;
        ens.xs.extend(xs);
        ens.zs.extend(zs);
        ens.rate_bits.extend(rates);
        ens.cap_hits += hits;
    }
    if let (Source::Gaussian(g), DecodeMode::ClosedForm) = (&cfg.source, cfg.decode_mode) {
        let lambdas: Vec<f64> = g.eigenvalues().iter().copied().collect();
        ens.rate_bits.fill(mutual_info_multivariate(&lambdas, ab) / LN_2);
    }
    Ok(ens)
}

/// Batch sums of a per-trial quantity, merged into the full-sample mean and
/// the delete-one-batch replicates.
fn mean_with_replicates(values: &[f64], ranges: &[std::ops::Range<usize>]) -> (f64, Vec<f64>) {
    let sums: Vec<f64> = ranges.iter().map(|r| pairwise_sum(&values[r.clone()])).collect();
    let total = pairwise_sum(&sums);
    let n = values.len() as f64;
    let reps = ranges.iter().zip(&sums).map(|(r, s)| (total - s) / (n - r.len() as f64)).collect();
    (total / n, reps)
}

fn estimate(values: &[f64], ranges: &[std::ops::Range<usize>]) -> (Estimate, Vec<f64>) {
    let (value, reps) = mean_with_replicates(values, ranges);
    (Estimate { value, se: jackknife_se(&reps) }, reps)
}

/// Mean squared Euclidean error with its jackknife standard error over 50 batches.
pub fn mse(xs: &[DVector<f64>], xhats: &[DVector<f64>]) -> Result<Estimate> {
    if xs.len() != xhats.len() {
        return Err(Error::LengthMismatch { left: xs.len(), right: xhats.len() });
    }
    if xs.is_empty() {
        return Err(Error::InvalidRange("need at least one pair".into()));
    }
    let sq: Vec<f64> = xs.iter().zip(xhats).map(|(x, y)| (x - y).norm_squared()).collect();
    let (est, _) = estimate(&sq, &batch_ranges(sq.len(), 50));
    Ok(est)
}

/// Moment sums of one batch: count, first moments, second moments.
struct Moments {
    n: f64,
    s1: DVector<f64>,
    s2: DMatrix<f64>,
}

fn batch_moments(v: &[f64], d: usize, range: &std::ops::Range<usize>, shift: &DVector<f64>) -> Moments {
    let mut s1 = DVector::zeros(d);
    let mut s2 = DMatrix::zeros(d, d);
    let rows: Vec<usize> = range.clone().collect();
    for a in 0..d {
        let col: Vec<f64> = rows.iter().map(|&i| v[i * d + a] - shift[a]).collect();
        s1[a] = pairwise_sum(&col);
        for b in a..d {
            let prod: Vec<f64> = rows.iter().map(|&i| (v[i * d + a] - shift[a]) * (v[i * d + b] - shift[b])).collect();
            s2[(a, b)] = pairwise_sum(&prod);
            s2[(b, a)] = s2[(a, b)];
        }
    }
    Moments { n: range.len() as f64, s1, s2 }
}

fn fitted_w2(n: f64, s1: &DVector<f64>, s2: &DMatrix<f64>, shift: &DVector<f64>, g: &GaussianSource) -> f64 {
    let m = s1 / n;
    let cov = (s2 - &m * m.transpose() * n) / (n - 1.0);
    w2_moments(&(m + shift), &cov, g.mean(), g.cov())
}

fn perception_gaussian(xhat: &[f64], d: usize, ranges: &[std::ops::Range<usize>], g: &GaussianSource) -> (Estimate, Vec<f64>) {
    let shift = g.mean().clone();
    let parts: Vec<Moments> = ranges.par_iter().map(|r| batch_moments(xhat, d, r, &shift)).collect();
    let n: f64 = parts.iter().map(|p| p.n).sum();
    let s1 = parts.iter().fold(DVector::zeros(d), |acc, p| acc + &p.s1);
    let s2 = parts.iter().fold(DMatrix::zeros(d, d), |acc, p| acc + &p.s2);
    let value = fitted_w2(n, &s1, &s2, &shift, g);
    let reps: Vec<f64> = parts.iter().map(|p| fitted_w2(n - p.n, &(&s1 - &p.s1), &(&s2 - &p.s2), &shift, g)).collect();
    (Estimate { value, se: jackknife_se(&reps) }, reps)
}

fn perception_gmm(
    cfg: &ExperimentConfig,
    xhat: &[f64],
    ranges: &[std::ops::Range<usize>],
    g: &GmmSource,
) -> Result<(Estimate, Vec<f64>)> {
    let reference: Vec<f64> = (0..xhat.len())
        .into_par_iter()
        .map(|i| g.sample_one(&StreamKey::new(cfg.seed, i as u64, 0, 0, Role::Reference)))
        .collect();
    let value = empirical_w2_1d(xhat, &reference)?;
    let reps: Vec<f64> = ranges
        .par_iter()
        .map(|r| {
            let keep = |v: &[f64]| -> Vec<f64> { v[..r.start].iter().chain(&v[r.end..]).copied().collect() };
            empirical_w2_1d(&keep(xhat), &keep(&reference))
        })
        .collect::<Result<_>>()?;
    Ok((Estimate { value, se: jackknife_se(&reps) }, reps))
}

/// Decodes the ensemble under every trial's shared `rho`.
pub fn decode_ensemble(cfg: &ExperimentConfig, ens: &Ensemble, rho: &RhoParam) -> Result<Vec<f64>> {
    let d = ens.dim;
    let oracle = cfg.source.oracle();
    let parts: Vec<Result<Vec<f64>>> = batches_of(cfg)
        .into_par_iter()
        .map(|range| {
            let mut out = ens.zs[range.start * d..range.end * d].to_vec();
            let mut scratch = DecodeScratch::default();
            for chunk in out.chunks_mut(d) {
                decode_into(chunk, ens.t, rho, &cfg.schedule, oracle, &mut scratch)?;
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::with_capacity(ens.zs.len());
    for p in parts {
        all.extend(p?);
    }
    Ok(all)
}

/// Theoretical `(D, P)` of the decoder at `(t, rho)` for a Gaussian source.
pub fn theory_point(g: &GaussianSource, sched: &NoiseSchedule, t: usize, rho: &RhoParam) -> Result<(f64, f64)> {
    let ab = sched.alpha_bar(t);
    let (mut d, mut p) = (0.0, 0.0);
    for (l, &lam) in g.eigenvalues().iter().enumerate() {
        let r = match rho {
            RhoParam::Uniform(r) => *r,
            RhoParam::PerDim(v) => v[l],
        };
        let pt = dp_from_f(lam, ab, f_factor(lam, sched, t, r)?);
        d += pt.d;
        p += pt.p;
    }
    Ok((d, p))
}

fn within(emp: f64, theory: f64, se: f64) -> bool {
    (emp - theory).abs() <= 0.02 * theory.abs() + 3.0 * se
}

/// Decodes one ensemble at one `rho` and scores it.
pub fn evaluate(cfg: &ExperimentConfig, ens: &Ensemble, rho: &RhoParam) -> Result<Row> {
    rho.validate(ens.dim)?;
    let d = ens.dim;
    let t = ens.t;
    let ab = cfg.schedule.alpha_bar(t);
    let ranges = batches_of(cfg);
    let xhat = decode_ensemble(cfg, ens, rho)?;
    let sq: Vec<f64> = ens
        .xs
        .chunks(d)
        .zip(xhat.chunks(d))
        .map(|(x, y)| x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum())
        .collect();
    let (mse_est, mse_reps) = estimate(&sq, &ranges);
    let (rate_est, _) = estimate(&ens.rate_bits, &ranges);
    let (w2_est, w2_reps) = match &cfg.source {
        Source::Gaussian(g) => perception_gaussian(&xhat, d, &ranges, g),
        Source::Gmm(g) => perception_gmm(cfg, &xhat, &ranges, g)?,
    };

    let mut row = Row {
        t,
        rho: rho.clone(),
        alpha_bar_t: ab,
        rate_bits: rate_est,
        rate_bits_theory: None,
        mse: mse_est,
        mse_theory: None,
        w2sq: w2_est,
        w2sq_theory: None,
        rate_mode: cfg.rate_mode,
        decode_mode: cfg.decode_mode,
        cap_hits: ens.cap_hits,
        check: None,
    };
    let Source::Gaussian(g) = &cfg.source else {
        return Ok(row);
    };
    let lambdas: Vec<f64> = g.eigenvalues().iter().copied().collect();
    let rate_th = mutual_info_multivariate(&lambdas, ab) / LN_2;
    let (d_th, p_th) = theory_point(g, &cfg.schedule, t, rho)?;
    row.rate_bits_theory = Some(rate_th);
    row.mse_theory = Some(d_th);
    row.w2sq_theory = Some(p_th);

    let dp_ok = if d == 1 {
        let sigma0 = g.sigma0().expect("scalar");
        let on_curve = |dd: f64, pp: f64| -> Result<f64> { Ok(dd - dp_scalar(sigma0, ab, pp.max(0.0))?) };
        let resid = on_curve(mse_est.value, w2_est.value)?;
        let reps: Vec<f64> =
            mse_reps.iter().zip(&w2_reps).map(|(&a, &b)| on_curve(a, b)).collect::<Result<_>>()?;
        let curve = dp_scalar(sigma0, ab, w2_est.value.max(0.0))?;
        resid.abs() <= 0.02 * curve + 3.0 * jackknife_se(&reps)
    } else {
        within(mse_est.value, d_th, mse_est.se) && within(w2_est.value, p_th, w2_est.se)
    };
    if (cfg.rate_mode, cfg.decode_mode) == (RateMode::Kl, DecodeMode::ClosedForm) {
        row.rate_bits = Estimate { value: rate_th, se: 0.0 };
    }
    let rate_est = row.rate_bits;
    let rate_ok = match (cfg.rate_mode, cfg.decode_mode) {
        (RateMode::Kl, DecodeMode::ClosedForm) => rate_est.value == rate_th,
        (RateMode::Kl, DecodeMode::FullChain) => within(rate_est.value, rate_th, rate_est.se),
        (RateMode::Zipf, _) => rate_est.value >= rate_th - 3.0 * rate_est.se,
    };
    row.check = Some(dp_ok && rate_ok);
    Ok(row)
}

pub fn run_point_with(cfg: &ExperimentConfig, t: usize, rho: &RhoParam) -> Result<Row> {
    let ens = build_ensemble(cfg, t)?;
    evaluate(cfg, &ens, rho)
}

pub fn run_point(cfg: &ExperimentConfig, t: usize, rho: f64) -> Result<Row> {
    run_point_with(cfg, t, &RhoParam::Uniform(rho))
}

pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(cfg.t_grid.len() * cfg.rho_grid.len());
    for &t in &cfg.t_grid {
        let ens = build_ensemble(cfg, t)?;
        for &rho in &cfg.rho_grid {
            rows.push(evaluate(cfg, &ens, &RhoParam::Uniform(rho))?);
        }
    }
    Ok(SweepResult { rows })
}
