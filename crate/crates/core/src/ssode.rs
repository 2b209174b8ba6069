//! Score-scaled probability-flow ODE decoder.
//!
//! The iteration runs from `k = t-1` down to `0`:
//!
//! ```text
//! z_k = (z_{k+1} + (2 - rho)/2 * beta_{k+1} * score_{k+1}(z_{k+1})) / sqrt(1 - beta_{k+1})
//! ```
//!
//! `rho = 1` is the plain probability-flow ODE, `rho = 0` tracks the
//! posterior mean. For Gaussian sources the composed map is affine,
//! `x_hat = A z_t + B mu0`, and all covariances share the source eigenbasis,
//! so `A`, `B` and the reconstruction marginal reduce to scalar functions of
//! each eigenvalue.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::sources::{GaussianSource, ScoreOracle};

#[derive(Debug, Clone, PartialEq)]
pub enum RhoParam {
    Uniform(f64),
    /// One value per eigen-coordinate.
    PerDim(Vec<f64>),
}

fn check_rho(rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidRange(format!("rho = {rho} outside [0, 1]")));
    }
    Ok(())
}

impl RhoParam {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            RhoParam::Uniform(r) => check_rho(*r),
            RhoParam::PerDim(v) => {
                if v.len() != dim {
                    return Err(Error::LengthMismatch { left: v.len(), right: dim });
                }
                v.iter().try_for_each(|&r| check_rho(r))
            }
        }
    }
}

impl From<f64> for RhoParam {
    fn from(r: f64) -> Self {
        RhoParam::Uniform(r)
    }
}

/// One reverse step of the score-scaled iteration.
pub fn ode_step(z_next: &DVector<f64>, grad: &DVector<f64>, beta_step: f64, rho: f64) -> DVector<f64> {
    let w = 0.5 * (2.0 - rho) * beta_step;
    (z_next + grad * w) / (1.0 - beta_step).sqrt()
}

#[inline]
fn step_in_place(z: &mut [f64], grad: &[f64], beta_step: f64, rho: f64) {
    let w = 0.5 * (2.0 - rho) * beta_step;
    let inv = 1.0 / (1.0 - beta_step).sqrt();
    for (zi, gi) in z.iter_mut().zip(grad) {
        *zi = (*zi + w * gi) * inv;
    }
}

/// Reusable buffers for [`decode_into`].
#[derive(Debug, Default, Clone)]
pub struct DecodeScratch {
    grad: Vec<f64>,
    rot: Vec<f64>,
}

/// Runs the iteration in place: on entry `z` holds `z_t`, on exit `x_hat`.
pub fn decode_into(
    z: &mut [f64],
    t: usize,
    rho: &RhoParam,
    sched: &NoiseSchedule,
    oracle: &dyn ScoreOracle,
    scratch: &mut DecodeScratch,
) -> Result<()> {
    sched.check_t(t)?;
    let d = oracle.dim();
    if z.len() != d {
        return Err(Error::LengthMismatch { left: z.len(), right: d });
    }
    rho.validate(d)?;
    scratch.grad.resize(d, 0.0);
    match rho {
        RhoParam::Uniform(r) => {
            for k in (0..t).rev() {
                oracle.score_into(sched, k + 1, z, &mut scratch.grad)?;
                step_in_place(z, &scratch.grad, sched.beta(k + 1), *r);
            }
        }
        RhoParam::PerDim(rs) => {
            let q = oracle.eigenbasis().ok_or(Error::BasisMismatch)?;
            scratch.rot.resize(d, 0.0);
            let y = &mut scratch.rot;
            for l in 0..d {
                y[l] = (0..d).map(|i| q[(i, l)] * z[i]).sum();
            }
            for k in (0..t).rev() {
                oracle.rotated_score_into(sched, k + 1, y, &mut scratch.grad)?;
                let beta = sched.beta(k + 1);
                let inv = 1.0 / (1.0 - beta).sqrt();
                for l in 0..d {
                    y[l] = (y[l] + 0.5 * (2.0 - rs[l]) * beta * scratch.grad[l]) * inv;
                }
            }
            for i in 0..d {
                z[i] = (0..d).map(|l| q[(i, l)] * y[l]).sum();
            }
        }
    }
    Ok(())
}

pub fn decode(
    z_t: &DVector<f64>,
    t: usize,
    rho: &RhoParam,
    sched: &NoiseSchedule,
    oracle: &dyn ScoreOracle,
) -> Result<DVector<f64>> {
    let mut z = z_t.clone();
    decode_into(z.as_mut_slice(), t, rho, sched, oracle, &mut DecodeScratch::default())?;
    Ok(z)
}

/// Affine reconstruction map `x_hat = A z_t + B mu0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconCoeffs {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl ReconCoeffs {
    pub fn apply(&self, z_t: &DVector<f64>, mu0: &DVector<f64>) -> DVector<f64> {
        &self.a * z_t + &self.b * mu0
    }
}

fn from_eigen(source: &GaussianSource, diag: &[f64]) -> DMatrix<f64> {
    let q = source.eigenvectors();
    q * DMatrix::from_diagonal(&DVector::from_column_slice(diag)) * q.transpose()
}

fn check_args(sched: &NoiseSchedule, t: usize, rho: f64) -> Result<()> {
    sched.check_t(t)?;
    check_rho(rho)
}

/// Per-eigenvalue coefficients `(a, b)` from the finite products and sums.
pub fn recon_coeffs_exact_scalar(lambda: f64, sched: &NoiseSchedule, t: usize, rho: f64) -> (f64, f64) {
    let s = |k: usize| sched.noisy_variance(lambda, k);
    let gain = |j: usize| 1.0 + 0.5 * rho * sched.beta(j + 1) / (sched.alpha(j + 1) * s(j));
    // prod_{j=0}^{i-2} gain(j), carried across the B sum
    let mut prod = 1.0;
    let mut sum = 0.0;
    for i in 2..=t {
        prod *= gain(i - 2);
        sum += sched.alpha_bar(i - 1) * sched.beta(i) * lambda * prod / (s(i - 1) * s(i));
    }
    let b = 0.5 * (2.0 - rho) * (sum + sched.beta(1) / s(1));
    let a = sched.alpha_bar(t).sqrt() * lambda * prod * gain(t - 1) / s(t);
    (a, b)
}

/// Exact affine coefficients of the discrete iteration for a Gaussian source.
pub fn recon_coeffs_exact(source: &GaussianSource, sched: &NoiseSchedule, t: usize, rho: f64) -> Result<ReconCoeffs> {
    check_args(sched, t, rho)?;
    let (a, b): (Vec<f64>, Vec<f64>) =
        source.eigenvalues().iter().map(|&l| recon_coeffs_exact_scalar(l, sched, t, rho)).unzip();
    Ok(ReconCoeffs { a: from_eigen(source, &a), b: from_eigen(source, &b) })
}

/// Log of `f_i` for `i = 0..=t`, where `f_i` is the partial product up to `i`.
fn log_f_partials(lambda: f64, sched: &NoiseSchedule, t: usize, rho: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(t + 1);
    let mut acc = 0.0;
    out.push(0.0);
    let mut s_prev = lambda;
    for i in 0..t {
        let s_next = sched.noisy_variance(lambda, i + 1);
        let factor = rho + (1.0 - rho) * sched.alpha(i + 1) * s_prev / s_next;
        acc += 0.5 * factor.ln();
        out.push(acc);
        s_prev = s_next;
    }
    out
}

/// `f = prod_{i<t} sqrt(rho + (1 - rho) alpha_{i+1} s_i / s_{i+1})` for one eigenvalue.
pub fn f_factor(lambda: f64, sched: &NoiseSchedule, t: usize, rho: f64) -> Result<f64> {
    check_args(sched, t, rho)?;
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("eigenvalue must be positive, got {lambda}")));
    }
    Ok(log_f_partials(lambda, sched, t, rho)[t].exp())
}

/// Per-eigenvalue coefficients from the square-root product form.
pub fn recon_coeffs_alt_scalar(lambda: f64, sched: &NoiseSchedule, t: usize, rho: f64) -> (f64, f64) {
    let logf = log_f_partials(lambda, sched, t, rho);
    let s = |k: usize| sched.noisy_variance(lambda, k);
    let root_l = lambda.sqrt();
    let a = root_l * logf[t].exp() / s(t).sqrt();
    let mut tail = 0.0;
    for i in 1..t {
        let fi = logf[i].exp();
        tail += 0.5 * sched.alpha_bar(i).sqrt() * sched.beta(i + 1) * root_l * (1.0 - fi) / (s(i + 1) * s(i).sqrt());
    }
    let b = (2.0 - rho) * (1.0 - sched.alpha_bar(t).sqrt() * root_l / s(t).sqrt() - tail);
    (a, b)
}

/// Approximate coefficients that drop the second-order terms in `beta`.
pub fn recon_coeffs_alt(source: &GaussianSource, sched: &NoiseSchedule, t: usize, rho: f64) -> Result<ReconCoeffs> {
    check_args(sched, t, rho)?;
    let (a, b): (Vec<f64>, Vec<f64>) =
        source.eigenvalues().iter().map(|&l| recon_coeffs_alt_scalar(l, sched, t, rho)).unzip();
    Ok(ReconCoeffs { a: from_eigen(source, &a), b: from_eigen(source, &b) })
}

/// Law of the reconstruction when `z_t` follows the noisy marginal.
pub fn marginal_of_recon(source: &GaussianSource, sched: &NoiseSchedule, t: usize, rho: f64) -> Result<GaussianSource> {
    check_args(sched, t, rho)?;
    let diag: Vec<f64> = source
        .eigenvalues()
        .iter()
        .map(|&l| l * (2.0 * log_f_partials(l, sched, t, rho)[t]).exp())
        .collect();
    let cov = from_eigen(source, &diag);
    GaussianSource::new(source.mean().clone(), (&cov + cov.transpose()) * 0.5)
}
