//! Module invariants as deterministic checks, shared by the property suites
//! and the acceptance run.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rdp_core::harness::{build_ensemble, evaluate, run_sweep, theory_point, ExperimentConfig, Source};
use rdp_core::rcc::{
    chain_decode, chain_encode, forward_posterior, model_step_marginal, pfr_reconstruct, CapPolicy, DiagGaussian,
};
use rdp_core::rng::{Role, StreamKey};
use rdp_core::sources::{empirical_w2_1d, score, w2_gaussian};
use rdp_core::ssode::{decode, f_factor, marginal_of_recon, recon_coeffs_alt_scalar, recon_coeffs_exact, recon_coeffs_exact_scalar};
use rdp_core::stats::{kolmogorov_critical, ks_uniform, normal_cdf};
use rdp_core::theory::{
    achievable_dp_scalar, dp_multivariate, dp_multivariate_parts, dp_scalar, kkt_allocation, mutual_info_t,
    rate_bounds, rdp_scalar,
};
use rdp_core::{perturb_stats, GaussianSource, NoiseSchedule, RhoParam};

use super::{moments, tweedie_scalar};

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn aux(tag: u64, i: u64) -> rdp_core::rng::CounterRng {
    StreamKey::new(0xA11CE, tag, i, 0, Role::Aux).rng()
}

/// Random orthogonal matrix from the QR factor of a Gaussian matrix.
pub fn random_rotation(d: usize, tag: u64, i: u64) -> DMatrix<f64> {
    let mut rng = aux(tag, i);
    let m = DMatrix::from_fn(d, d, |_, _| rng.normal());
    m.qr().q()
}

/// Random Gaussian source with eigenvalues in `[0.2, 5]`.
pub fn random_source(d: usize, tag: u64, i: u64) -> GaussianSource {
    let q = random_rotation(d, tag, i);
    let mut rng = aux(tag + 1000, i);
    let lambdas = DVector::from_fn(d, |_, _| 0.2 + 4.8 * rng.uniform());
    let mean = DVector::from_fn(d, |_, _| 2.0 * rng.normal());
    let cov = &q * DMatrix::from_diagonal(&lambdas) * q.transpose();
    GaussianSource::new(mean, (&cov + cov.transpose()) * 0.5).unwrap()
}

// ---- schedule ----

pub fn schedule_recurrence() -> Check {
    for s in [NoiseSchedule::ddpm_default(), NoiseSchedule::ddpm_scaled(200).unwrap()] {
        for k in 1..=s.steps() {
            let want = s.alpha(k) * s.alpha_bar(k - 1);
            let got = s.alpha_bar(k);
            let ulp = f64::EPSILON * got;
            ensure!((got - want).abs() <= ulp, "k={k}: {got} vs {want}");
        }
    }
    Ok(())
}

pub fn perturb_eigenvalues() -> Check {
    let s = NoiseSchedule::ddpm_default();
    for i in 0..20 {
        let src = random_source(3, 1, i);
        for t in [1, 250, 999] {
            let ps = perturb_stats(&src, &s, t).map_err(|e| e.to_string())?;
            let ab = s.alpha_bar(t);
            let mut got: Vec<f64> = ps.cov.clone().symmetric_eigen().eigenvalues.iter().copied().collect();
            let mut want: Vec<f64> = src.eigenvalues().iter().map(|l| ab * l + 1.0 - ab).collect();
            got.sort_by(f64::total_cmp);
            want.sort_by(f64::total_cmp);
            for (g, w) in got.iter().zip(&want) {
                ensure!((g - w).abs() < 1e-10, "t={t}: {g} vs {w}");
            }
            for (g, w) in ps.eigenvalues.iter().zip(src.eigenvalues().iter()) {
                ensure!((g - (ab * w + 1.0 - ab)).abs() < 1e-12, "cached eigenvalue t={t}");
            }
        }
    }
    Ok(())
}

pub fn trace_monotone() -> Check {
    let s = NoiseSchedule::ddpm_default();
    let src = GaussianSource::diagonal(&[0.0, 1.0, -1.0], &[0.3, 0.9, 1.0]).unwrap();
    let mut prev = f64::NEG_INFINITY;
    for t in 1..=s.steps() {
        let tr = perturb_stats(&src, &s, t).unwrap().cov.trace();
        ensure!(tr >= prev, "trace decreased at t={t}");
        prev = tr;
    }
    Ok(())
}

// ---- sources ----

pub fn score_finite_differences() -> Check {
    let s = NoiseSchedule::ddpm_default();
    let src = random_source(3, 2, 0);
    let h = 1e-5;
    for i in 0..100u64 {
        let mut rng = aux(3, i);
        let k = (rng.uniform() * 1001.0) as usize;
        let z = DVector::from_fn(3, |_, _| 3.0 * rng.normal());
        let g = score(&src, &s, k.max(1), &z).map_err(|e| e.to_string())?;
        for a in 0..3 {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[a] += h;
            zm[a] -= h;
            let fd = (src.log_density(&s, k.max(1), zp.as_slice()).unwrap()
                - src.log_density(&s, k.max(1), zm.as_slice()).unwrap())
                / (2.0 * h);
            ensure!((fd - g[a]).abs() <= 1e-6 * g[a].abs().max(1.0), "k={k} axis {a}: {fd} vs {}", g[a]);
        }
    }
    Ok(())
}

pub fn w2_axioms() -> Check {
    for i in 0..30 {
        let q = random_rotation(3, 4, i);
        let mut rng = aux(5, i);
        let mk = |rng: &mut rdp_core::rng::CounterRng| {
            let l = DVector::from_fn(3, |_, _| 0.1 + 3.0 * rng.uniform());
            let m = DVector::from_fn(3, |_, _| rng.normal());
            let c = &q * DMatrix::from_diagonal(&l) * q.transpose();
            GaussianSource::new(m, (&c + c.transpose()) * 0.5).unwrap()
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let ab = w2_gaussian(&a, &b).map_err(|e| e.to_string())?;
        let ba = w2_gaussian(&b, &a).map_err(|e| e.to_string())?;
        ensure!((ab - ba).abs() <= 1e-10 * ab.max(1.0), "asymmetric: {ab} vs {ba}");
        ensure!(ab > 0.0, "distinct laws at distance {ab}");
        let aa = w2_gaussian(&a, &a).map_err(|e| e.to_string())?;
        ensure!(aa.abs() < 1e-12, "self distance {aa}");
    }
    Ok(())
}

pub fn empirical_w2_shrinks() -> Check {
    let g = GaussianSource::scalar(0.0, 1.0).unwrap();
    let mut prev = f64::INFINITY;
    for (n, bound) in [(1_000usize, 0.05), (10_000, 0.01), (100_000, 0.002)] {
        let a: Vec<f64> = g.sample(n, 11).iter().map(|v| v[0]).collect();
        let b: Vec<f64> = g.sample(n, 12).iter().map(|v| v[0]).collect();
        let w = empirical_w2_1d(&a, &b).map_err(|e| e.to_string())?;
        ensure!(w < bound && w < prev, "n={n}: {w}");
        prev = w;
    }
    Ok(())
}

pub fn w2_tensorizes() -> Check {
    for i in 0..20 {
        let mut rng = aux(6, i);
        let m1: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let m2: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let v1: Vec<f64> = (0..4).map(|_| 0.1 + 4.0 * rng.uniform()).collect();
        let v2: Vec<f64> = (0..4).map(|_| 0.1 + 4.0 * rng.uniform()).collect();
        let joint = w2_gaussian(
            &GaussianSource::diagonal(&m1, &v1).unwrap(),
            &GaussianSource::diagonal(&m2, &v2).unwrap(),
        )
        .map_err(|e| e.to_string())?;
        let mut sum = 0.0;
        for l in 0..4 {
            sum += w2_gaussian(
                &GaussianSource::scalar(m1[l], v1[l].sqrt()).unwrap(),
                &GaussianSource::scalar(m2[l], v2[l].sqrt()).unwrap(),
            )
            .map_err(|e| e.to_string())?;
        }
        ensure!((joint - sum).abs() < 1e-12 * sum.max(1.0), "{joint} vs {sum}");
    }
    Ok(())
}

// ---- ssode ----

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

pub fn decode_is_affine() -> Check {
    let s = NoiseSchedule::ddpm_default();
    for i in 0..10 {
        let src = random_source(2, 7, i);
        let mut rng = aux(8, i);
        let t = 1 + (rng.uniform() * 999.0) as usize;
        let rho = RhoParam::Uniform(rng.uniform());
        let z1 = dv(&[3.0 * rng.normal(), 3.0 * rng.normal()]);
        let z2 = dv(&[3.0 * rng.normal(), 3.0 * rng.normal()]);
        let run = |z: &DVector<f64>| decode(z, t, &rho, &s, &src).unwrap();
        let zero = run(&DVector::zeros(2));
        let lhs = run(&(&z1 + &z2)) - &zero;
        let rhs = (run(&z1) - &zero) + (run(&z2) - &zero);
        let dev = (&lhs - &rhs).amax();
        ensure!(dev <= 1e-9 * lhs.amax().max(1.0), "superposition deviates by {dev}");
    }
    Ok(())
}

/// Slope and intercept of `decode` by probing, compared with the exact coefficients.
pub fn extracted_map_error(src: &GaussianSource, s: &NoiseSchedule, t: usize, rho: f64) -> f64 {
    let d = src.dim();
    let r = RhoParam::Uniform(rho);
    let zero = decode(&DVector::zeros(d), t, &r, s, src).unwrap();
    let mut a = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut e = DVector::zeros(d);
        e[j] = 1.0;
        a.set_column(j, &(decode(&e, t, &r, s, src).unwrap() - &zero));
    }
    let c = recon_coeffs_exact(src, s, t, rho).unwrap();
    let slope = (&a - &c.a).amax();
    let intercept = (&zero - &c.b * src.mean()).amax();
    slope.max(intercept)
}

pub fn coefficients_agree() -> Check {
    let src = random_source(2, 9, 0);
    for tt in [250, 500, 1000, 2000] {
        let s = NoiseSchedule::ddpm_scaled(tt).unwrap();
        for target in [0.1, 0.25, 0.5] {
            let t = s.t_nearest_alpha_bar(target);
            for rho in [0.0, 0.5, 1.0] {
                let e = extracted_map_error(&src, &s, t, rho);
                ensure!(e < 1e-10, "T={tt} t={t} rho={rho}: {e}");
            }
        }
    }
    // the square-root product form converges to the exact one at rate 1/T
    let mut gaps = Vec::new();
    for tt in [250, 500, 1000, 2000] {
        let s = NoiseSchedule::ddpm_scaled(tt).unwrap();
        let t = s.t_nearest_alpha_bar(0.25);
        let (a, _) = recon_coeffs_exact_scalar(1.0, &s, t, 0.5);
        let (b, _) = recon_coeffs_alt_scalar(1.0, &s, t, 0.5);
        gaps.push((a - b).abs());
    }
    for w in gaps.windows(2) {
        let ratio = w[0] / w[1];
        ensure!((1.7..2.3).contains(&ratio), "halving ratio {ratio} in {gaps:?}");
    }
    Ok(())
}

pub fn rho_zero_is_tweedie() -> Check {
    let s = NoiseSchedule::ddpm_default();
    for (mu0, sigma0) in [(0.0, 1.0), (1.5, 0.5), (-2.0, 2.0)] {
        let src = GaussianSource::scalar(mu0, sigma0).unwrap();
        for t in [1, 100, 500, 900] {
            let ab = s.alpha_bar(t);
            for z in [-3.0, 0.2, 4.0] {
                let got = decode(&dv(&[z]), t, &RhoParam::Uniform(0.0), &s, &src).unwrap()[0];
                let want = tweedie_scalar(mu0, sigma0 * sigma0, ab, z);
                ensure!((got - want).abs() < 1e-10 * want.abs().max(1.0), "t={t} z={z}: {got} vs {want}");
            }
        }
    }
    Ok(())
}

/// Decodes `n` draws of `Z_t` with a scalar source and returns the reconstructions.
pub fn decode_cloud(src: &GaussianSource, s: &NoiseSchedule, t: usize, rho: f64, n: usize, seed: u64) -> Vec<f64> {
    let ab = s.alpha_bar(t);
    let mu = src.mean()[0];
    let var_t = s.noisy_variance(src.eigenvalues()[0], t);
    (0..n)
        .map(|i| {
            let e = StreamKey::new(seed, i as u64, t as u64, 0, Role::Noise).rng().normal();
            let z = ab.sqrt() * mu + var_t.sqrt() * e;
            decode(&dv(&[z]), t, &RhoParam::Uniform(rho), s, src).unwrap()[0]
        })
        .collect()
}

pub fn rho_one_preserves_law() -> Check {
    let s = NoiseSchedule::ddpm_default();
    let src = GaussianSource::scalar(0.7, 1.3).unwrap();
    let t = s.t_nearest_alpha_bar(0.25);
    let n = 100_000;
    let xs = decode_cloud(&src, &s, t, 1.0, n, 21);
    let (m, v) = moments(&xs);
    ensure!((m - 0.7).abs() <= 4.0 * 1.3 / (n as f64).sqrt(), "mean {m}");
    ensure!((v / 1.69 - 1.0).abs() <= 0.02, "variance {v}");
    Ok(())
}

pub fn f_factor_properties() -> Check {
    let s = NoiseSchedule::ddpm_default();
    let src = random_source(3, 10, 0);
    for t in [5, 300, 800] {
        for &lam in src.eigenvalues().iter() {
            let mut prev = f64::NEG_INFINITY;
            for i in 0..=40 {
                let f = f_factor(lam, &s, t, i as f64 / 40.0).unwrap();
                ensure!(f >= prev, "f not monotone at t={t}");
                prev = f;
            }
        }
        for rho in [0.0, 0.3, 1.0] {
            let m = marginal_of_recon(&src, &s, t, rho).unwrap();
            let q = src.eigenvectors();
            let diag = (q.transpose() * m.cov() * q).diagonal();
            for (l, &lam) in src.eigenvalues().iter().enumerate() {
                let f = f_factor(lam, &s, t, rho).unwrap();
                ensure!((f * f - diag[l] / lam).abs() < 1e-10, "f^2 vs marginal at t={t} rho={rho}");
            }
        }
    }
    Ok(())
}

pub fn per_dim_equals_scalar_decodes() -> Check {
    let s = NoiseSchedule::ddpm_default();
    let means = [0.3, -1.0, 2.0];
    let vars = [0.4, 1.0, 3.0];
    let src = GaussianSource::diagonal(&means, &vars).unwrap();
    for i in 0..10 {
        let mut rng = aux(11, i);
        let t = 1 + (rng.uniform() * 999.0) as usize;
        let rhos: Vec<f64> = (0..3).map(|_| rng.uniform()).collect();
        let z = dv(&[rng.normal(), rng.normal(), rng.normal()]);
        let joint = decode(&z, t, &RhoParam::PerDim(rhos.clone()), &s, &src).unwrap();
        for l in 0..3 {
            let one = GaussianSource::scalar(means[l], vars[l].sqrt()).unwrap();
            let x = decode(&dv(&[z[l]]), t, &RhoParam::Uniform(rhos[l]), &s, &one).unwrap()[0];
            ensure!((x - joint[l]).abs() <= 1e-12 * x.abs().max(1.0), "coordinate {l}: {x} vs {}", joint[l]);
        }
    }
    Ok(())
}

// ---- theory ----

fn convex_nonincreasing(vals: &[f64], what: &str) -> Check {
    for w in vals.windows(2) {
        ensure!(w[1] <= w[0] + 1e-12, "{what} increases");
    }
    for w in vals.windows(3) {
        ensure!(w[0] + w[2] - 2.0 * w[1] >= -1e-12, "{what} not convex");
    }
    Ok(())
}

pub fn dp_shape() -> Check {
    for sigma0 in [0.5, 1.0, 2.0] {
        for ab in [0.1, 0.5, 0.9] {
            let vals: Vec<f64> = (0..200).map(|i| dp_scalar(sigma0, ab, (i as f64 * 0.01).powi(2)).unwrap()).collect();
            convex_nonincreasing(&vals, "dp_scalar")?;
        }
    }
    for i in 0..10 {
        let src = random_source(3, 12, i);
        let lambdas: Vec<f64> = src.eigenvalues().iter().copied().collect();
        let (s, _) = dp_multivariate_parts(&lambdas, 0.4).unwrap();
        let vals: Vec<f64> =
            (0..200).map(|k| dp_multivariate(&lambdas, 0.4, (1.2 * s.sqrt() * k as f64 / 199.0).powi(2)).unwrap()).collect();
        convex_nonincreasing(&vals, "dp_multivariate")?;
    }
    Ok(())
}

pub fn rdp_monotone() -> Check {
    let sigma0 = 1.0;
    let ds: Vec<f64> = (1..=60).map(|i| 0.025 * i as f64).collect();
    let ps: Vec<f64> = (0..=60).map(|i| 0.02 * i as f64).collect();
    let r = |d: f64, p: f64| rdp_scalar(sigma0, d, p).ok();
    for &d in &ds {
        for w in ps.windows(2) {
            if let (Some(a), Some(b)) = (r(d, w[0]), r(d, w[1])) {
                ensure!(b <= a + 1e-12, "increasing in P at d={d} p={}", w[1]);
            }
        }
    }
    for &p in &ps {
        for w in ds.windows(2) {
            if let (Some(a), Some(b)) = (r(w[0], p), r(w[1], p)) {
                ensure!(b <= a + 1e-12, "increasing in D at p={p} d={}", w[1]);
            }
        }
    }
    Ok(())
}

/// Largest deviation of the rate along the decoder curve from `I_t`, over 101 rho values.
pub fn rdp_along_curve_deviation(sigma0: f64, s: &NoiseSchedule, t: usize) -> Result<f64, String> {
    let info = mutual_info_t(sigma0, s.alpha_bar(t));
    let mut worst: f64 = 0.0;
    for i in 0..=100 {
        let pt = achievable_dp_scalar(sigma0, s, t, i as f64 / 100.0).map_err(|e| e.to_string())?;
        let r = rdp_scalar(sigma0, pt.d, pt.p).map_err(|e| format!("rho={}: {e}", i as f64 / 100.0))?;
        worst = worst.max((r - info).abs());
    }
    Ok(worst)
}

pub fn rdp_constant_along_curve() -> Check {
    let s = NoiseSchedule::ddpm_default();
    for t in [50, 200, 400, 700] {
        let dev = rdp_along_curve_deviation(1.0, &s, t)?;
        ensure!(dev <= 1e-10, "t={t}: deviation {dev}");
    }
    Ok(())
}

pub fn identical_eigenvalues_tensorize() -> Check {
    for lam in [0.3, 1.0, 4.0] {
        for d in [2usize, 3, 5] {
            for ab in [0.2, 0.7] {
                let lambdas = vec![lam; d];
                let (s, _) = dp_multivariate_parts(&lambdas, ab).unwrap();
                for frac in [0.0, 0.3, 0.9, 1.5] {
                    let p = frac * s;
                    let joint = dp_multivariate(&lambdas, ab, p).unwrap();
                    let per = d as f64 * dp_scalar(lam.sqrt(), ab, p / d as f64).unwrap();
                    ensure!((joint - per).abs() < 1e-12 * joint.max(1.0), "lam={lam} d={d}: {joint} vs {per}");
                }
            }
        }
    }
    Ok(())
}

pub fn kkt_stationarity() -> Check {
    for i in 0..20 {
        let src = random_source(3, 13, i);
        let lambdas: Vec<f64> = src.eigenvalues().iter().copied().collect();
        let ab = 0.3 + 0.4 * aux(14, i).uniform();
        let (s, _) = dp_multivariate_parts(&lambdas, ab).unwrap();
        for frac in [0.05, 0.5, 0.95, 1.2] {
            let a = kkt_allocation(&lambdas, ab, frac * s).map_err(|e| e.to_string())?;
            for (l, &lam) in lambdas.iter().enumerate() {
                let c = (ab * lam / (ab * lam + 1.0 - ab)).sqrt();
                let g = 2.0 * lam * (a.f[l] - c) + 2.0 * a.nu0 * lam * (a.f[l] - 1.0);
                ensure!(g.abs() < 1e-10, "stationarity residual {g} at frac={frac}");
            }
        }
    }
    Ok(())
}

// ---- rcc ----

pub fn rcc_setup() -> (GaussianSource, NoiseSchedule, usize) {
    let src = GaussianSource::scalar(0.0, 1.0).unwrap();
    let s = NoiseSchedule::ddpm_scaled(200).unwrap();
    let t = (1..s.steps())
        .min_by(|&a, &b| {
            let ia = mutual_info_t(1.0, s.alpha_bar(a)) / std::f64::consts::LN_2 - 1.0;
            let ib = mutual_info_t(1.0, s.alpha_bar(b)) / std::f64::consts::LN_2 - 1.0;
            ia.abs().total_cmp(&ib.abs())
        })
        .unwrap();
    (src, s, t)
}

/// Round-trips `n` chains; returns the number of bit-level mismatches.
pub fn chain_round_trips(src: &GaussianSource, s: &NoiseSchedule, t: usize, n: usize, seed: u64) -> Result<usize, String> {
    let mut bad = 0;
    for i in 0..n as u64 {
        let mut x = DVector::zeros(src.dim());
        src.sample_into(&StreamKey::new(seed, i, 0, 0, Role::Source), x.as_mut_slice());
        let code = chain_encode(&x, t, src, s, seed, i, CapPolicy::default()).map_err(|e| e.to_string())?;
        let back = chain_decode(&code.transcripts, t, src, s, seed, i).map_err(|e| e.to_string())?;
        if back.iter().zip(code.z_t.iter()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            bad += 1;
        }
    }
    Ok(bad)
}

pub fn chain_determinism() -> Check {
    let (src, s, t) = rcc_setup();
    let bad = chain_round_trips(&src, &s, t, 1000, 5)?;
    ensure!(bad == 0, "{bad} chains failed to round-trip");
    let src2 = random_source(2, 15, 0);
    let bad = chain_round_trips(&src2, &s, t, 200, 6)?;
    ensure!(bad == 0, "{bad} bivariate chains failed to round-trip");
    Ok(())
}

/// Per-step KS statistics of the probability integral transform of each
/// chain step's output under its target law.
pub struct StepKs {
    pub worst_scaled: f64,
    pub critical: f64,
    pub steps: usize,
}

pub fn per_step_ks(src: &GaussianSource, s: &NoiseSchedule, t: usize, n: usize, seed: u64) -> Result<StepKs, String> {
    let steps = s.steps() - t;
    let mut pits = vec![Vec::with_capacity(n); steps];
    for i in 0..n as u64 {
        let mut x = DVector::zeros(1);
        src.sample_into(&StreamKey::new(seed, i, 0, 0, Role::Source), x.as_mut_slice());
        let code = chain_encode(&x, t, src, s, seed, i, CapPolicy::default()).map_err(|e| e.to_string())?;
        // replay the chain to recover every intermediate state
        let mut y = vec![StreamKey::new(seed, i, s.steps() as u64, 0, Role::ChainInit).rng().normal()];
        for (j, (tr, k)) in code.transcripts.iter().zip((t..s.steps()).rev()).enumerate() {
            let target = forward_posterior(x.as_slice(), &y, s, k).map_err(|e| e.to_string())?;
            let proposal = model_step_marginal(src, s, k).map_err(|e| e.to_string())?.law(&y);
            let z = pfr_reconstruct(tr.index, &proposal, &tr.stream).map_err(|e| e.to_string())?;
            pits[j].push(normal_cdf((z[0] - target.mean[0]) / target.var[0].sqrt()));
            y = z;
        }
    }
    let critical = kolmogorov_critical(0.01 / steps as f64);
    let worst_scaled = pits.iter().map(|u| ks_uniform(u) * (n as f64).sqrt()).fold(0.0, f64::max);
    Ok(StepKs { worst_scaled, critical, steps })
}

pub struct RateReport {
    pub mean_bits: f64,
    pub bound: f64,
    pub info_bits: f64,
    pub mean_kl_bits: f64,
    pub worst_step_excess: f64,
    pub cap_hits: usize,
}

pub fn chain_rates(src: &GaussianSource, s: &NoiseSchedule, t: usize, n: usize, seed: u64) -> Result<RateReport, String> {
    let steps = s.steps() - t;
    let (mut bits, mut bound, mut kl, mut hits) = (0.0, 0.0, 0.0, 0);
    let mut log_index = vec![0.0; steps];
    let mut step_kl = vec![0.0; steps];
    for i in 0..n as u64 {
        let mut x = DVector::zeros(1);
        src.sample_into(&StreamKey::new(seed, i, 0, 0, Role::Source), x.as_mut_slice());
        let code = chain_encode(&x, t, src, s, seed, i, CapPolicy::default()).map_err(|e| e.to_string())?;
        bits += code.total_bits;
        kl += code.total_kl_nats / std::f64::consts::LN_2;
        hits += code.cap_hits;
        for (j, tr) in code.transcripts.iter().enumerate() {
            bound += rate_bounds(tr.kl_nats).map_err(|e| e.to_string())?.1;
            log_index[j] += (tr.index as f64).log2();
            step_kl[j] += tr.kl_nats / std::f64::consts::LN_2;
        }
    }
    let nf = n as f64;
    let worst_step_excess = log_index
        .iter()
        .zip(&step_kl)
        .map(|(li, kb)| {
            let kb = kb / nf;
            li / nf - (kb + (kb + 1.0).log2())
        })
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(RateReport {
        mean_bits: bits / nf,
        bound: bound / nf,
        info_bits: mutual_info_t(1.0, s.alpha_bar(t)) / std::f64::consts::LN_2,
        mean_kl_bits: kl / nf,
        worst_step_excess,
        cap_hits: hits,
    })
}

pub fn pfr_step_laws() -> Check {
    let (src, s, t) = rcc_setup();
    let r = per_step_ks(&src, &s, t, 2000, 7)?;
    ensure!(r.worst_scaled <= r.critical, "worst step KS {} above {} over {} steps", r.worst_scaled, r.critical, r.steps);
    Ok(())
}

pub fn rate_accounting() -> Check {
    let (src, s, t) = rcc_setup();
    let r = chain_rates(&src, &s, t, 2000, 8)?;
    ensure!(r.mean_bits <= r.bound + 1.0, "bits {} above bound {}", r.mean_bits, r.bound);
    ensure!(r.worst_step_excess <= 4.0, "per-step excess {}", r.worst_step_excess);
    Ok(())
}

/// Runs `n` forward chains from `z_T ~ N(0, 1)` down to `t` by exact sampling
/// from the forward posterior. Returns the summed expected step KL and the
/// final states.
pub fn forward_chains(src: &GaussianSource, s: &NoiseSchedule, t: usize, n: usize, seed: u64) -> (f64, Vec<f64>) {
    let mut kl = 0.0;
    let mut ends = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let mut x = [0.0];
        src.sample_into(&StreamKey::new(seed, i, 0, 0, Role::Source), &mut x);
        let mut rng = StreamKey::new(seed, i, 0, 0, Role::Aux).rng();
        let mut y = vec![rng.normal()];
        for k in (t..s.steps()).rev() {
            let target = forward_posterior(&x, &y, s, k).unwrap();
            let proposal: DiagGaussian = model_step_marginal(src, s, k).unwrap().law(&y);
            kl += target.kl(&proposal);
            y = vec![target.mean[0] + target.var[0].sqrt() * rng.normal()];
        }
        ends.push(y[0]);
    }
    (kl / n as f64, ends)
}

pub fn kl_chain_identity() -> Check {
    let (src, s, t) = rcc_setup();
    let (kl, _) = forward_chains(&src, &s, t, 100_000, 9);
    let info = mutual_info_t(1.0, s.alpha_bar(t));
    ensure!((kl / info - 1.0).abs() <= 0.03, "sum KL {kl} vs I_t {info}");
    Ok(())
}

pub fn forward_chain_marginal() -> Check {
    let src = GaussianSource::scalar(1.0, 1.5).unwrap();
    let s = NoiseSchedule::ddpm_scaled(200).unwrap();
    let t = s.t_nearest_alpha_bar(0.3);
    let (_, ends) = forward_chains(&src, &s, t, 100_000, 10);
    let (m, v) = moments(&ends);
    let ab = s.alpha_bar(t);
    let ps = perturb_stats(&src, &s, t).unwrap();
    ensure!((m / ps.mean[0] - 1.0).abs() <= 0.02, "mean {m} vs {}", ab.sqrt());
    ensure!((v / ps.cov[(0, 0)] - 1.0).abs() <= 0.02, "variance {v} vs {}", ps.cov[(0, 0)]);
    Ok(())
}

// ---- harness ----

pub fn small_config(trials: usize) -> ExperimentConfig {
    let s = NoiseSchedule::ddpm_default();
    let t_grid = vec![s.t_nearest_alpha_bar(0.6), s.t_nearest_alpha_bar(0.25), s.t_nearest_alpha_bar(0.05)];
    let mut cfg = ExperimentConfig::new(
        Source::Gaussian(GaussianSource::scalar(0.0, 1.0).unwrap()),
        s,
        t_grid,
        vec![0.0, 0.25, 0.5, 0.75, 1.0],
    );
    cfg.trials = trials;
    cfg.seed = 3;
    cfg
}

pub fn sweep_thread_invariant() -> Check {
    let cfg = small_config(20_000);
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = one.install(|| run_sweep(&cfg)).map_err(|e| e.to_string())?;
    let b = four.install(|| run_sweep(&cfg)).map_err(|e| e.to_string())?;
    let c = four.install(|| run_sweep(&cfg)).map_err(|e| e.to_string())?;
    ensure!(a == b && b == c, "sweep depends on scheduling");
    Ok(())
}

pub fn sweep_monotone() -> Check {
    let cfg = small_config(20_000);
    let res = run_sweep(&cfg).map_err(|e| e.to_string())?;
    let n_rho = cfg.rho_grid.len();
    let rates: Vec<f64> = res.rows.chunks(n_rho).map(|c| c[0].rate_bits.value).collect();
    for w in rates.windows(2) {
        ensure!(w[1] < w[0], "rate not decreasing in t: {rates:?}");
    }
    for chunk in res.rows.chunks(n_rho) {
        for w in chunk.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            let dse = 2.0 * (a.mse.se.powi(2) + b.mse.se.powi(2)).sqrt();
            let pse = 2.0 * (a.w2sq.se.powi(2) + b.w2sq.se.powi(2)).sqrt();
            ensure!(b.mse.value >= a.mse.value - dse, "D decreased in rho at t={}", a.t);
            ensure!(b.w2sq.value <= a.w2sq.value + pse, "P increased in rho at t={}", a.t);
        }
    }
    Ok(())
}

pub fn universality() -> Check {
    let cfg = small_config(20_000);
    let s = &cfg.schedule;
    let t = cfg.t_grid[1];
    let g = cfg.source.gaussian().unwrap().clone();
    let ens = build_ensemble(&cfg, t).map_err(|e| e.to_string())?;
    let sweep = run_sweep(&cfg).map_err(|e| e.to_string())?;
    for (j, &rho) in cfg.rho_grid.iter().enumerate() {
        let r = RhoParam::Uniform(rho);
        let row = evaluate(&cfg, &ens, &r).map_err(|e| e.to_string())?;
        ensure!(row == sweep.rows[cfg.rho_grid.len() + j], "row differs from sweep at rho={rho}");
        let (d, p) = theory_point(&g, s, t, &r).map_err(|e| e.to_string())?;
        ensure!((row.mse.value - d).abs() <= 0.02 * d + 3.0 * row.mse.se, "D off the curve at rho={rho}");
        ensure!((row.w2sq.value - p).abs() <= 0.02 * p + 3.0 * row.w2sq.se + 1e-3, "P off the curve at rho={rho}");
    }
    Ok(())
}

/// All module checks by name, cheapest first.
pub fn all() -> Vec<(&'static str, fn() -> Check)> {
    vec![
        ("schedule_recurrence", schedule_recurrence as fn() -> Check),
        ("perturb_eigenvalues", perturb_eigenvalues),
        ("trace_monotone", trace_monotone),
        ("score_finite_differences", score_finite_differences),
        ("w2_axioms", w2_axioms),
        ("empirical_w2_shrinks", empirical_w2_shrinks),
        ("w2_tensorizes", w2_tensorizes),
        ("decode_is_affine", decode_is_affine),
        ("coefficients_agree", coefficients_agree),
        ("rho_zero_is_tweedie", rho_zero_is_tweedie),
        ("rho_one_preserves_law", rho_one_preserves_law),
        ("f_factor_properties", f_factor_properties),
        ("per_dim_equals_scalar_decodes", per_dim_equals_scalar_decodes),
        ("dp_shape", dp_shape),
        ("rdp_monotone", rdp_monotone),
        ("rdp_constant_along_curve", rdp_constant_along_curve),
        ("identical_eigenvalues_tensorize", identical_eigenvalues_tensorize),
        ("kkt_stationarity", kkt_stationarity),
        ("chain_determinism", chain_determinism),
        ("pfr_step_laws", pfr_step_laws),
        ("rate_accounting", rate_accounting),
        ("kl_chain_identity", kl_chain_identity),
        ("forward_chain_marginal", forward_chain_marginal),
        ("sweep_thread_invariant", sweep_thread_invariant),
        ("sweep_monotone", sweep_monotone),
        ("universality", universality),
    ]
}
