//! Discrete-time variance schedule of the forward noising process.
//!
//! Time indices are 1-based: `beta(k)` for `k` in `1..=T`. Index 0 denotes the
//! clean source, with `alpha_bar(0) == 1`.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_index, Error, Result};
use crate::sources::GaussianSource;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    // length T + 1, alpha_bar[0] = 1
    alpha_bar: Vec<f64>,
}

/// Running product kept as an unevaluated sum `hi + lo`.
#[derive(Clone, Copy)]
struct DoubleDouble {
    hi: f64,
    lo: f64,
}

impl DoubleDouble {
    fn mul_f64(self, b: f64) -> Self {
        let p = self.hi * b;
        let e = self.hi.mul_add(b, -p) + self.lo * b;
        let hi = p + e;
        let lo = e - (hi - p);
        Self { hi, lo }
    }
}

impl NoiseSchedule {
    /// Builds a schedule from explicit per-step variances `beta_1..beta_T`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidRange("schedule needs at least one step".into()));
        }
        for (i, &b) in beta.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidRange(format!("beta_{} = {b} not in (0, 1)", i + 1)));
            }
        }
        if beta.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidRange("betas must be nondecreasing".into()));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(1.0);
        let mut acc = DoubleDouble { hi: 1.0, lo: 0.0 };
        for &a in &alpha {
            acc = acc.mul_f64(a);
            alpha_bar.push(acc.hi + acc.lo);
        }
        Ok(Self { beta, alpha, alpha_bar })
    }

    /// Linear schedule `beta_k = beta_min + (k-1)(beta_max-beta_min)/(T-1)`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidRange("T must be at least 1".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let beta = if steps == 1 {
            vec![beta_min]
        } else {
            let span = beta_max - beta_min;
            (0..steps).map(|i| beta_min + span * i as f64 / (steps - 1) as f64).collect()
        };
        Self::from_betas(beta)
    }

    /// The usual DDPM schedule: T = 1000, beta linear from 1e-4 to 0.02.
    pub fn ddpm_default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }

    /// Linear schedule whose betas scale as `1/T`, i.e. an Euler grid of the
    /// continuous rate `beta(tau)` running from 0.1 to 20. Coincides with
    /// [`NoiseSchedule::ddpm_default`] at `T = 1000`; used for step-size studies.
    pub fn ddpm_scaled(steps: usize) -> Result<Self> {
        let t = steps as f64;
        Self::linear(steps, 0.1 / t, 20.0 / t)
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `beta_k`, `1 <= k <= T`.
    pub fn beta(&self, k: usize) -> f64 {
        self.beta[k - 1]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha[k - 1]
    }

    /// `alpha_bar_k`, `0 <= k <= T`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        check_index(t, 1, self.steps())
    }

    /// Index `t >= 1` whose `alpha_bar_t` is closest to `target`.
    pub fn t_nearest_alpha_bar(&self, target: f64) -> usize {
        (1..=self.steps())
            .min_by(|&a, &b| {
                let da = (self.alpha_bar(a) - target).abs();
                let db = (self.alpha_bar(b) - target).abs();
                da.total_cmp(&db)
            })
            .expect("schedule has at least one step")
    }

    /// Variance of coordinate `lambda` after `k` forward steps:
    /// `alpha_bar_k * lambda + 1 - alpha_bar_k`.
    #[inline]
    pub fn noisy_variance(&self, lambda: f64, k: usize) -> f64 {
        let ab = self.alpha_bar[k];
        ab * lambda + (1.0 - ab)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::ddpm_default()
    }
}

/// Law of `Z_t = sqrt(alpha_bar_t) X + sqrt(1 - alpha_bar_t) N` for a Gaussian `X`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbStats {
    pub t: usize,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Eigenvalues `alpha_bar_t lambda_l + 1 - alpha_bar_t`, in the source's eigen order.
    pub eigenvalues: DVector<f64>,
}

pub fn perturb_stats(source: &GaussianSource, sched: &NoiseSchedule, t: usize) -> Result<PerturbStats> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let d = source.dim();
    let mean = source.mean() * ab.sqrt();
    let cov = source.cov() * ab + DMatrix::identity(d, d) * (1.0 - ab);
    let eigenvalues = source.eigenvalues().map(|l| sched.noisy_variance(l, t));
    Ok(PerturbStats { t, mean, cov, eigenvalues })
}
