//! TOML experiment configuration.
//!
//! ```toml
//! [source]
//! kind = "scalar-gaussian"   # or "multivariate-gaussian", "gmm-1d"
//! mu0 = 0.0
//! sigma0 = 1.0
//!
//! [schedule]
//! T = 1000
//! beta_min = 1e-4
//! beta_max = 0.02
//!
//! [sweep]
//! info_bits = [0.25, 0.5, 1.0, 2.0]   # or t = [...]
//! rho = [0.0, 0.25, 0.5, 0.75, 1.0]
//! trials = 100000
//! rate_mode = "kl"                     # or "zipf"
//! decode_mode = "closed-form"          # or "full-chain"
//! seed = 0
//! ```
//!
//! Multivariate sources take `mean = [...]` and `cov = [[...], ...]`;
//! mixtures take `weights`, `means` and `variances`. Unset fields are filled
//! with defaults and reported by [`Resolved::defaulted`].

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::harness::{DecodeMode, ExperimentConfig, RateMode, Source};
use crate::rcc::CapPolicy;
use crate::schedule::NoiseSchedule;
use crate::sources::{GaussianSource, GmmSource};
use crate::theory::mutual_info_multivariate;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{field}: {message}")]
    Semantic { field: String, message: String },
}

fn semantic(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Semantic { field: field.into(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    ScalarGaussian,
    MultivariateGaussian,
    #[serde(rename = "gmm-1d")]
    Gmm1d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSection {
    pub kind: SourceKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cov: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub means: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variances: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_max: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub info_bits: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batches: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate_mode: Option<RateMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decode_mode: Option<DecodeMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RccSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cap_margin_log2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cap_max_log2: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TheoryKind {
    /// Distortion-perception curve of a scalar source at each sweep level.
    Dp,
    /// Rate over a (D, P) grid.
    Rdp,
    /// Distortion-perception curve of a multivariate source.
    DpMultivariate,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheorySection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<TheoryKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub source: SourceSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub rcc: RccSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub theory: TheorySection,
}

/// A configuration with every field set, plus the list of fields that were
/// filled from defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub file: ConfigFile,
    pub defaulted: Vec<String>,
}

pub const DEFAULT_INFO_BITS: [f64; 4] = [0.25, 0.5, 1.0, 2.0];
pub const DEFAULT_RHO: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

fn fill<T: Clone + Serialize>(slot: &mut Option<T>, value: T, name: &str, log: &mut Vec<String>) {
    if slot.is_none() {
        let shown = toml::Value::try_from(&value).map(|v| v.to_string()).unwrap_or_default();
        log.push(format!("{name} = {shown}"));
        *slot = Some(value);
    }
}

fn forbid<T>(slot: &Option<T>, field: &str, kind: &str) -> Result<(), ConfigError> {
    if slot.is_some() {
        return Err(semantic(field, format!("not used by source kind {kind}")));
    }
    Ok(())
}

fn require<'a, T>(slot: &'a Option<T>, field: &str) -> Result<&'a T, ConfigError> {
    slot.as_ref().ok_or_else(|| semantic(field, "required for this source kind"))
}

impl SourceSection {
    pub fn build(&self) -> Result<Source, ConfigError> {
        let err = |field: &str| {
            let field = field.to_string();
            move |e: crate::Error| semantic(field, e.to_string())
        };
        match self.kind {
            SourceKind::ScalarGaussian => {
                forbid(&self.mean, "source.mean", "scalar-gaussian")?;
                forbid(&self.weights, "source.weights", "scalar-gaussian")?;
                forbid(&self.cov, "source.cov", "scalar-gaussian")?;
                forbid(&self.means, "source.means", "scalar-gaussian")?;
                forbid(&self.variances, "source.variances", "scalar-gaussian")?;
                let sigma0 = self.sigma0.unwrap_or(1.0);
                let g = GaussianSource::scalar(self.mu0.unwrap_or(0.0), sigma0).map_err(err("source.sigma0"))?;
                Ok(Source::Gaussian(g))
            }
            SourceKind::MultivariateGaussian => {
                forbid(&self.mu0, "source.mu0", "multivariate-gaussian")?;
                forbid(&self.sigma0, "source.sigma0", "multivariate-gaussian")?;
                forbid(&self.weights, "source.weights", "multivariate-gaussian")?;
                forbid(&self.means, "source.means", "multivariate-gaussian")?;
                forbid(&self.variances, "source.variances", "multivariate-gaussian")?;
                let cov = require(&self.cov, "source.cov")?;
                let d = cov.len();
                for (i, row) in cov.iter().enumerate() {
                    if row.len() != d {
                        return Err(semantic(format!("source.cov[{i}]"), format!("expected {d} entries")));
                    }
                }
                let mean = self.mean.clone().unwrap_or_else(|| vec![0.0; d]);
                if mean.len() != d {
                    return Err(semantic("source.mean", format!("expected {d} entries")));
                }
                let flat: Vec<f64> = cov.iter().flatten().copied().collect();
                let g = GaussianSource::new(DVector::from_vec(mean), DMatrix::from_row_slice(d, d, &flat))
                    .map_err(err("source.cov"))?;
                Ok(Source::Gaussian(g))
            }
            SourceKind::Gmm1d => {
                forbid(&self.mu0, "source.mu0", "gmm-1d")?;
                forbid(&self.sigma0, "source.sigma0", "gmm-1d")?;
                forbid(&self.mean, "source.mean", "gmm-1d")?;
                forbid(&self.cov, "source.cov", "gmm-1d")?;
                let g = GmmSource::new(
                    require(&self.weights, "source.weights")?.clone(),
                    require(&self.means, "source.means")?.clone(),
                    require(&self.variances, "source.variances")?.clone(),
                )
                .map_err(err("source"))?;
                Ok(Source::Gmm(g))
            }
        }
    }
}

pub fn parse_str(text: &str) -> Result<Resolved, ConfigError> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    resolve(file)
}

pub fn parse_config(path: &Path) -> Result<Resolved, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    parse_str(&text)
}

/// Fills defaults, resolves `info_bits` to time indices and validates.
pub fn resolve(mut file: ConfigFile) -> Result<Resolved, ConfigError> {
    let mut log = Vec::new();
    let source = file.source.build()?;
    if file.source.kind == SourceKind::ScalarGaussian {
        fill(&mut file.source.mu0, 0.0, "source.mu0", &mut log);
        fill(&mut file.source.sigma0, 1.0, "source.sigma0", &mut log);
    }
    if file.source.kind == SourceKind::MultivariateGaussian {
        let d = source.dim();
        fill(&mut file.source.mean, vec![0.0; d], "source.mean", &mut log);
    }

    let sch = &mut file.schedule;
    fill(&mut sch.steps, 1000, "schedule.T", &mut log);
    fill(&mut sch.beta_min, 1e-4, "schedule.beta_min", &mut log);
    fill(&mut sch.beta_max, 0.02, "schedule.beta_max", &mut log);
    let schedule = NoiseSchedule::linear(sch.steps.unwrap(), sch.beta_min.unwrap(), sch.beta_max.unwrap())
        .map_err(|e| semantic("schedule", e.to_string()))?;

    let sw = &mut file.sweep;
    fill(&mut sw.rate_mode, RateMode::Kl, "sweep.rate_mode", &mut log);
    fill(&mut sw.decode_mode, DecodeMode::ClosedForm, "sweep.decode_mode", &mut log);
    let t_max = match sw.decode_mode.unwrap() {
        DecodeMode::ClosedForm => schedule.steps(),
        DecodeMode::FullChain => schedule.steps() - 1,
    };
    match (&sw.t, &sw.info_bits) {
        (Some(_), Some(_)) => return Err(semantic("sweep", "give either t or info_bits, not both")),
        (Some(ts), None) => {
            if ts.is_empty() {
                return Err(semantic("sweep.t", "must be nonempty"));
            }
            for (i, &t) in ts.iter().enumerate() {
                if t < 1 || t > t_max {
                    return Err(semantic(format!("sweep.t[{i}]"), format!("{t} outside [1, {t_max}]")));
                }
            }
        }
        (None, bits) => {
            let bits = match bits {
                Some(b) => b.clone(),
                None => {
                    log.push(format!("sweep.info_bits = {DEFAULT_INFO_BITS:?}"));
                    DEFAULT_INFO_BITS.to_vec()
                }
            };
            let Source::Gaussian(g) = &source else {
                return Err(semantic("sweep.info_bits", "needs a Gaussian source; give sweep.t instead"));
            };
            if bits.is_empty() {
                return Err(semantic("sweep.info_bits", "must be nonempty"));
            }
            let lambdas: Vec<f64> = g.eigenvalues().iter().copied().collect();
            let info = |t: usize| mutual_info_multivariate(&lambdas, schedule.alpha_bar(t)) / std::f64::consts::LN_2;
            let mut ts = Vec::with_capacity(bits.len());
            for (i, &b) in bits.iter().enumerate() {
                if !(b > 0.0) {
                    return Err(semantic(format!("sweep.info_bits[{i}]"), "must be positive"));
                }
                let t = (1..=t_max)
                    .min_by(|&a, &c| (info(a) - b).abs().total_cmp(&(info(c) - b).abs()))
                    .expect("nonempty range");
                ts.push(t);
            }
            sw.t = Some(ts);
            sw.info_bits = None;
        }
    }
    fill(&mut sw.rho, DEFAULT_RHO.to_vec(), "sweep.rho", &mut log);
    fill(&mut sw.trials, 100_000, "sweep.trials", &mut log);
    fill(&mut sw.batches, 50, "sweep.batches", &mut log);
    fill(&mut sw.seed, 0, "sweep.seed", &mut log);
    let rho = sw.rho.as_ref().unwrap();
    if rho.is_empty() {
        return Err(semantic("sweep.rho", "must be nonempty"));
    }
    for (i, &r) in rho.iter().enumerate() {
        if !(0.0..=1.0).contains(&r) {
            return Err(semantic(format!("sweep.rho[{i}]"), format!("{r} outside [0, 1]")));
        }
    }
    if sw.trials == Some(0) {
        return Err(semantic("sweep.trials", "must be at least 1"));
    }
    if sw.batches.unwrap() < 2 {
        return Err(semantic("sweep.batches", "must be at least 2"));
    }
    if sw.rate_mode == Some(RateMode::Zipf) && sw.decode_mode != Some(DecodeMode::FullChain) {
        return Err(semantic("sweep.rate_mode", "zipf needs decode_mode = \"full-chain\""));
    }
    if sw.decode_mode == Some(DecodeMode::FullChain) && source.gaussian().is_none() {
        return Err(semantic("sweep.decode_mode", "full-chain needs a Gaussian source"));
    }

    let defaults = CapPolicy::default();
    fill(&mut file.rcc.cap_margin_log2, defaults.margin_log2, "rcc.cap_margin_log2", &mut log);
    fill(&mut file.rcc.cap_max_log2, defaults.max_log2, "rcc.cap_max_log2", &mut log);
    if !(file.rcc.cap_margin_log2.unwrap() >= 0.0) {
        return Err(semantic("rcc.cap_margin_log2", "must be nonnegative"));
    }
    if !(1..=40).contains(&file.rcc.cap_max_log2.unwrap()) {
        return Err(semantic("rcc.cap_max_log2", "must lie in [1, 40]"));
    }

    let th = &mut file.theory;
    if let Some(g) = source.gaussian() {
        let default_kind = if g.dim() > 1 { TheoryKind::DpMultivariate } else { TheoryKind::Dp };
        fill(&mut th.kind, default_kind, "theory.kind", &mut log);
    }
    fill(&mut th.points, 50, "theory.points", &mut log);
    if th.points.unwrap() < 2 {
        return Err(semantic("theory.points", "must be at least 2"));
    }
    for (name, grid) in [("theory.p", &th.p), ("theory.d", &th.d)] {
        if let Some(g) = grid {
            if let Some(i) = g.iter().position(|v| !(*v >= 0.0)) {
                return Err(semantic(format!("{name}[{i}]"), "must be nonnegative"));
            }
        }
    }
    match th.kind {
        None => {}
        Some(TheoryKind::Dp | TheoryKind::Rdp) if source.gaussian().and_then(|g| g.sigma0()).is_none() => {
            return Err(semantic("theory.kind", "needs a scalar Gaussian source"));
        }
        Some(TheoryKind::DpMultivariate) if source.gaussian().is_none() => {
            return Err(semantic("theory.kind", "needs a Gaussian source"));
        }
        _ => {}
    }

    Ok(Resolved { file, defaulted: log })
}

impl Resolved {
    pub fn source(&self) -> Source {
        self.file.source.build().expect("validated")
    }

    pub fn schedule(&self) -> NoiseSchedule {
        let s = &self.file.schedule;
        NoiseSchedule::linear(s.steps.unwrap(), s.beta_min.unwrap(), s.beta_max.unwrap()).expect("validated")
    }

    pub fn experiment(&self) -> ExperimentConfig {
        let sw = &self.file.sweep;
        ExperimentConfig {
            source: self.source(),
            schedule: self.schedule(),
            t_grid: sw.t.clone().unwrap(),
            rho_grid: sw.rho.clone().unwrap(),
            trials: sw.trials.unwrap(),
            batches: sw.batches.unwrap(),
            rate_mode: sw.rate_mode.unwrap(),
            decode_mode: sw.decode_mode.unwrap(),
            seed: sw.seed.unwrap(),
            caps: CapPolicy {
                margin_log2: self.file.rcc.cap_margin_log2.unwrap(),
                max_log2: self.file.rcc.cap_max_log2.unwrap(),
            },
        }
    }

    /// Fully explicit TOML; parsing it yields the same resolved configuration.
    pub fn canonical(&self) -> String {
        toml::to_string(&self.file).expect("config serializes")
    }
}
