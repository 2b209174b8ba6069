//! Closed-form distortion-perception and rate-distortion-perception evaluators.
//!
//! Rates are in nats unless a name says `bits`. Perception is squared W2.

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::ssode::f_factor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpPoint {
    pub d: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Theoretical,
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdpTriplet {
    pub rate_nats: f64,
    pub d: f64,
    pub p: f64,
    pub provenance: Provenance,
}

impl RdpTriplet {
    pub fn rate_bits(&self) -> f64 {
        self.rate_nats / std::f64::consts::LN_2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub nu0: f64,
    pub f: Vec<f64>,
    pub rho: Vec<f64>,
}

fn check_alpha_bar(ab: f64) -> Result<()> {
    if !(ab > 0.0 && ab < 1.0) {
        return Err(Error::Domain(format!("alpha_bar_t = {ab} outside (0, 1)")));
    }
    Ok(())
}

fn check_p(p: f64) -> Result<()> {
    if !(p >= 0.0) {
        return Err(Error::Domain(format!("perception budget must be nonnegative, got {p}")));
    }
    Ok(())
}

fn check_lambdas(lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() || lambdas.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::Domain("eigenvalues must be positive".into()));
    }
    Ok(())
}

/// Minimum MSE from `Z_t` under a squared-W2 budget `p`, scalar source.
pub fn dp_scalar(sigma0: f64, alpha_bar_t: f64, p: f64) -> Result<f64> {
    if !(sigma0 > 0.0) {
        return Err(Error::Domain(format!("sigma0 must be positive, got {sigma0}")));
    }
    check_alpha_bar(alpha_bar_t)?;
    check_p(p)?;
    let var0 = sigma0 * sigma0;
    let var_t = alpha_bar_t * var0 + 1.0 - alpha_bar_t;
    let sigma_t = var_t.sqrt();
    let floor = (1.0 - alpha_bar_t) * var0 / var_t;
    let knee = sigma0 - alpha_bar_t.sqrt() * var0 / sigma_t;
    let rp = p.sqrt();
    if rp < knee {
        Ok(floor + (knee - rp).powi(2))
    } else {
        Ok(floor)
    }
}

/// `(S, floor)`: the perception at which the MMSE estimator becomes
/// admissible, and the MMSE itself.
pub fn dp_multivariate_parts(lambdas: &[f64], alpha_bar_t: f64) -> Result<(f64, f64)> {
    check_lambdas(lambdas)?;
    check_alpha_bar(alpha_bar_t)?;
    let mut s = 0.0;
    let mut floor = 0.0;
    for &l in lambdas {
        let lt = alpha_bar_t * l + 1.0 - alpha_bar_t;
        s += l / lt * (lt.sqrt() - alpha_bar_t.sqrt() * l.sqrt()).powi(2);
        floor += (1.0 - alpha_bar_t) * l / lt;
    }
    Ok((s, floor))
}

pub fn dp_multivariate(lambdas: &[f64], alpha_bar_t: f64, p: f64) -> Result<f64> {
    check_p(p)?;
    let (s, floor) = dp_multivariate_parts(lambdas, alpha_bar_t)?;
    if p >= s {
        return Ok(floor);
    }
    Ok((s.sqrt() - p.sqrt()).powi(2) + floor)
}

/// `(D, P)` reached by the decoder at level `t` with a uniform `rho`.
pub fn achievable_dp_scalar(sigma0: f64, sched: &NoiseSchedule, t: usize, rho: f64) -> Result<DpPoint> {
    if !(sigma0 > 0.0) {
        return Err(Error::Domain(format!("sigma0 must be positive, got {sigma0}")));
    }
    let var0 = sigma0 * sigma0;
    let f = f_factor(var0, sched, t, rho)?;
    let ab = sched.alpha_bar(t);
    let var_t = ab * var0 + 1.0 - ab;
    let d = var0 * (f - ab.sqrt() * sigma0 / var_t.sqrt()).powi(2) + var0 - ab * var0 * var0 / var_t;
    let p = var0 * (1.0 - f).powi(2);
    Ok(DpPoint { d, p })
}

/// Per-eigenvalue `(D_l, P_l)` for a given contraction factor `f`.
pub fn dp_from_f(lambda: f64, alpha_bar_t: f64, f: f64) -> DpPoint {
    let lt = alpha_bar_t * lambda + 1.0 - alpha_bar_t;
    let target = (alpha_bar_t * lambda / lt).sqrt();
    DpPoint {
        d: lambda * (f - target).powi(2) + (1.0 - alpha_bar_t) * lambda / lt,
        p: lambda * (1.0 - f).powi(2),
    }
}

/// Scalar rate-distortion-perception function.
pub fn rdp_scalar(sigma0: f64, d: f64, p: f64) -> Result<f64> {
    if !(sigma0 > 0.0) {
        return Err(Error::Domain(format!("sigma0 must be positive, got {sigma0}")));
    }
    if !(d > 0.0) {
        return Err(Error::Domain(format!("distortion must be positive, got {d}")));
    }
    check_p(p)?;
    let var0 = sigma0 * sigma0;
    let rp = p.sqrt();
    if rp < sigma0 - (sigma0 - d).abs().sqrt() {
        let m = (sigma0 - rp).powi(2);
        let num = var0 * m;
        let den = num - (var0 + m - d).powi(2) / 4.0;
        if !(den > 0.0) {
            return Err(Error::Infeasible { d, p });
        }
        Ok(0.5 * (num / den).ln())
    } else {
        Ok((0.5 * (var0 / d).ln()).max(0.0))
    }
}

/// `I(X; Z_t)` for a scalar Gaussian source.
pub fn mutual_info_t(sigma0: f64, alpha_bar_t: f64) -> f64 {
    0.5 * (alpha_bar_t * sigma0 * sigma0 / (1.0 - alpha_bar_t) + 1.0).ln()
}

/// `I(X; Z_t)` for a Gaussian source with covariance eigenvalues `lambdas`.
pub fn mutual_info_multivariate(lambdas: &[f64], alpha_bar_t: f64) -> f64 {
    lambdas.iter().map(|&l| mutual_info_t(l.sqrt(), alpha_bar_t)).sum()
}

/// Lower and upper bounds, in bits, on the expected index length of a
/// channel simulation that carries `info_nats` of mutual information.
pub fn rate_bounds(info_nats: f64) -> Result<(f64, f64)> {
    if !(info_nats >= 0.0) {
        return Err(Error::Domain(format!("information must be nonnegative, got {info_nats}")));
    }
    let bits = info_nats / std::f64::consts::LN_2;
    Ok((bits, bits + (bits + 1.0).log2() + 4.0))
}

/// KKT solution of the multivariate perception-constrained problem.
/// The `rho` field is left empty; see [`achievable_dp_multivariate`].
pub fn kkt_allocation(lambdas: &[f64], alpha_bar_t: f64, p: f64) -> Result<Allocation> {
    check_p(p)?;
    let (s, _) = dp_multivariate_parts(lambdas, alpha_bar_t)?;
    let targets: Vec<f64> = lambdas
        .iter()
        .map(|&l| (alpha_bar_t * l / (alpha_bar_t * l + 1.0 - alpha_bar_t)).sqrt())
        .collect();
    if p >= s {
        return Ok(Allocation { nu0: 0.0, f: targets, rho: Vec::new() });
    }
    if p == 0.0 {
        return Ok(Allocation { nu0: f64::INFINITY, f: vec![1.0; lambdas.len()], rho: Vec::new() });
    }
    let shrink = (p / s).sqrt();
    let f = targets.iter().map(|&g| 1.0 - (1.0 - g) * shrink).collect();
    Ok(Allocation { nu0: (s / p).sqrt() - 1.0, f, rho: Vec::new() })
}

/// Finds `rho` in `[0, 1]` with `f_factor(lambda, t, rho) = f_target`.
pub fn solve_rho_per_dim(lambda: f64, sched: &NoiseSchedule, t: usize, f_target: f64) -> Result<f64> {
    let lo_f = f_factor(lambda, sched, t, 0.0)?;
    const TOL: f64 = 1e-12;
    if !(f_target >= lo_f - TOL && f_target <= 1.0 + TOL) {
        return Err(Error::TargetOutOfRange { target: f_target, min: lo_f, max: 1.0 });
    }
    if f_target <= lo_f {
        return Ok(0.0);
    }
    if f_target >= 1.0 {
        return Ok(1.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let f = f_factor(lambda, sched, t, mid)?;
        if (f - f_target).abs() <= TOL {
            return Ok(mid);
        }
        if f < f_target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// KKT allocation realised through per-coordinate `rho` values; returns the
/// resulting `(D, P)` and the completed allocation.
pub fn achievable_dp_multivariate(
    lambdas: &[f64],
    sched: &NoiseSchedule,
    t: usize,
    p: f64,
) -> Result<(DpPoint, Allocation)> {
    sched.check_t(t)?;
    let ab = sched.alpha_bar(t);
    let mut alloc = kkt_allocation(lambdas, ab, p)?;
    let mut point = DpPoint { d: 0.0, p: 0.0 };
    let mut rho = Vec::with_capacity(lambdas.len());
    for (&l, &f) in lambdas.iter().zip(&alloc.f) {
        let r = solve_rho_per_dim(l, sched, t, f)?;
        let part = dp_from_f(l, ab, f_factor(l, sched, t, r)?);
        point.d += part.d;
        point.p += part.p;
        rho.push(r);
    }
    alloc.rho = rho;
    Ok((point, alloc))
}
