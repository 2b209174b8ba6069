//! Sources with exact samplers and score oracles, plus Gaussian geometry.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::rng::{Role, StreamKey};
use crate::schedule::NoiseSchedule;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Multivariate Gaussian `N(mu0, Sigma0)` with a cached eigendecomposition
/// `Sigma0 = Q diag(lambda) Q^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSource {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    q: DMatrix<f64>,
    lambdas: DVector<f64>,
    // Q^T mu0, the mean in eigen coordinates
    mean_eig: DVector<f64>,
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] == 0.0))
}

impl GaussianSource {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::InvalidRange("source dimension must be at least 1".into()));
        }
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::LengthMismatch { left: d, right: cov.nrows() });
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("source parameters must be finite".into()));
        }
        let scale = cov.amax().max(f64::MIN_POSITIVE);
        for i in 0..d {
            for j in 0..i {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::Domain("covariance is not symmetric".into()));
                }
            }
        }
        let sym = (&cov + cov.transpose()) * 0.5;
        let (q, lambdas) = if is_diagonal(&sym) {
            (DMatrix::identity(d, d), sym.diagonal())
        } else {
            let eig = SymmetricEigen::new(sym.clone());
            (eig.eigenvectors, eig.eigenvalues)
        };
        let lmax = lambdas.max();
        if lmax <= 0.0 || lambdas.iter().any(|&l| l <= 1e-12 * lmax) {
            return Err(Error::SingularCovariance(format!(
                "eigenvalues {:?} are not all positive",
                lambdas.as_slice()
            )));
        }
        let mean_eig = q.transpose() * &mean;
        Ok(Self { mean, cov: sym, q, lambdas, mean_eig })
    }

    /// Scalar `N(mu0, sigma0^2)`; `sigma0` is the standard deviation.
    pub fn scalar(mu0: f64, sigma0: f64) -> Result<Self> {
        if !(sigma0 > 0.0) {
            return Err(Error::Domain(format!("sigma0 must be positive, got {sigma0}")));
        }
        Self::new(DVector::from_element(1, mu0), DMatrix::from_element(1, 1, sigma0 * sigma0))
    }

    pub fn diagonal(means: &[f64], variances: &[f64]) -> Result<Self> {
        if means.len() != variances.len() {
            return Err(Error::LengthMismatch { left: means.len(), right: variances.len() });
        }
        Self::new(
            DVector::from_column_slice(means),
            DMatrix::from_diagonal(&DVector::from_column_slice(variances)),
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.lambdas
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn mean_eig(&self) -> &DVector<f64> {
        &self.mean_eig
    }

    /// Standard deviation of a 1-D source.
    pub fn sigma0(&self) -> Option<f64> {
        (self.dim() == 1).then(|| self.lambdas[0].sqrt())
    }

    pub fn to_eig(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for l in 0..d {
            out[l] = (0..d).map(|i| self.q[(i, l)] * x[i]).sum();
        }
    }

    pub fn from_eig(&self, y: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for i in 0..d {
            out[i] = (0..d).map(|l| self.q[(i, l)] * y[l]).sum();
        }
    }

    /// One draw written into `out`, using the stream at `key`.
    pub fn sample_into(&self, key: &StreamKey, out: &mut [f64]) {
        let d = self.dim();
        let mut rng = key.rng();
        let mut y = vec![0.0; d];
        for l in 0..d {
            y[l] = self.mean_eig[l] + self.lambdas[l].sqrt() * rng.normal();
        }
        self.from_eig(&y, out);
    }

    /// `n` i.i.d. draws; draw `i` uses stream `(seed, i, 0, 0, Source)`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut buf = vec![0.0; self.dim()];
        (0..n)
            .map(|i| {
                self.sample_into(&StreamKey::new(seed, i as u64, 0, 0, Role::Source), &mut buf);
                DVector::from_column_slice(&buf)
            })
            .collect()
    }

    /// Log density of `Z_k`, with `k = 0` the source itself.
    pub fn log_density(&self, sched: &NoiseSchedule, k: usize, z: &[f64]) -> Result<f64> {
        crate::error::check_index(k, 0, sched.steps())?;
        let d = self.dim();
        let root = sched.alpha_bar(k).sqrt();
        let mut y = vec![0.0; d];
        self.to_eig(z, &mut y);
        let mut acc = -0.5 * d as f64 * LN_2PI;
        for l in 0..d {
            let s = sched.noisy_variance(self.lambdas[l], k);
            let r = y[l] - root * self.mean_eig[l];
            acc -= 0.5 * (s.ln() + r * r / s);
        }
        Ok(acc)
    }
}

/// Finite 1-D Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmSource {
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
}

impl GmmSource {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidRange("mixture needs at least one component".into()));
        }
        if weights.len() != means.len() {
            return Err(Error::LengthMismatch { left: weights.len(), right: means.len() });
        }
        if weights.len() != variances.len() {
            return Err(Error::LengthMismatch { left: weights.len(), right: variances.len() });
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Domain("mixture weights must be positive".into()));
        }
        if ((weights.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Domain("mixture weights must sum to 1".into()));
        }
        if variances.iter().any(|&v| !(v > 0.0)) || means.iter().any(|m| !m.is_finite()) {
            return Err(Error::Domain("mixture variances must be positive, means finite".into()));
        }
        Ok(Self { weights, means, variances })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().zip(&self.means).map(|(w, m)| w * m).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.variances))
            .map(|(w, (mu, v))| w * (v + (mu - m).powi(2)))
            .sum()
    }

    pub fn sample_one(&self, key: &StreamKey) -> f64 {
        let mut rng = key.rng();
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut j = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                j = i;
                break;
            }
        }
        self.means[j] + self.variances[j].sqrt() * rng.normal()
    }

    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        (0..n)
            .map(|i| self.sample_one(&StreamKey::new(seed, i as u64, 0, 0, Role::Source)))
            .collect()
    }

    fn component_logs(&self, sched: &NoiseSchedule, k: usize, z: f64, out: &mut Vec<(f64, f64, f64)>) {
        let ab = sched.alpha_bar(k);
        out.clear();
        for ((w, m), v) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            let mk = ab.sqrt() * m;
            let sk = ab * v + 1.0 - ab;
            let r = z - mk;
            let lp = w.ln() - 0.5 * (LN_2PI + sk.ln() + r * r / sk);
            out.push((lp, mk, sk));
        }
    }

    pub fn log_density(&self, sched: &NoiseSchedule, k: usize, z: f64) -> Result<f64> {
        crate::error::check_index(k, 0, sched.steps())?;
        let mut comps = Vec::with_capacity(self.weights.len());
        self.component_logs(sched, k, z, &mut comps);
        let top = comps.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
        Ok(top + comps.iter().map(|c| (c.0 - top).exp()).sum::<f64>().ln())
    }

    fn score_scalar(&self, sched: &NoiseSchedule, k: usize, z: f64) -> f64 {
        let mut comps = Vec::with_capacity(self.weights.len());
        self.component_logs(sched, k, z, &mut comps);
        let top = comps.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
        let (mut num, mut den) = (0.0, 0.0);
        for &(lp, mk, sk) in &comps {
            let r = (lp - top).exp();
            num += r * (mk - z) / sk;
            den += r;
        }
        num / den
    }
}

/// Gradient of the log density of the noisy marginal `Z_k`.
pub trait ScoreOracle: Sync {
    fn dim(&self) -> usize;

    /// Writes the score at `(k, z)` into `out`. `k` must lie in `1..=T`.
    fn score_into(&self, sched: &NoiseSchedule, k: usize, z: &[f64], out: &mut [f64]) -> Result<()>;

    /// Orthogonal basis in which the score is coordinate-wise, if any.
    fn eigenbasis(&self) -> Option<&DMatrix<f64>> {
        None
    }

    /// Score in eigen coordinates `y = Q^T z`, returned in the same coordinates.
    fn rotated_score_into(
        &self,
        _sched: &NoiseSchedule,
        _k: usize,
        _y: &[f64],
        _out: &mut [f64],
    ) -> Result<()> {
        Err(Error::BasisMismatch)
    }
}

impl ScoreOracle for GaussianSource {
    fn dim(&self) -> usize {
        self.dim()
    }

    fn score_into(&self, sched: &NoiseSchedule, k: usize, z: &[f64], out: &mut [f64]) -> Result<()> {
        sched.check_t(k)?;
        let d = self.dim();
        if d == 1 {
            let s = sched.noisy_variance(self.lambdas[0], k);
            out[0] = (sched.alpha_bar(k).sqrt() * self.mean[0] - z[0]) / s;
            return Ok(());
        }
        let mut y = vec![0.0; d];
        self.to_eig(z, &mut y);
        let mut g = vec![0.0; d];
        self.rotated_score_into(sched, k, &y, &mut g)?;
        self.from_eig(&g, out);
        Ok(())
    }

    fn eigenbasis(&self) -> Option<&DMatrix<f64>> {
        Some(&self.q)
    }

    fn rotated_score_into(&self, sched: &NoiseSchedule, k: usize, y: &[f64], out: &mut [f64]) -> Result<()> {
        sched.check_t(k)?;
        let root = sched.alpha_bar(k).sqrt();
        for l in 0..self.dim() {
            let s = sched.noisy_variance(self.lambdas[l], k);
            out[l] = (root * self.mean_eig[l] - y[l]) / s;
        }
        Ok(())
    }
}

impl ScoreOracle for GmmSource {
    fn dim(&self) -> usize {
        1
    }

    fn score_into(&self, sched: &NoiseSchedule, k: usize, z: &[f64], out: &mut [f64]) -> Result<()> {
        sched.check_t(k)?;
        out[0] = self.score_scalar(sched, k, z[0]);
        Ok(())
    }
}

/// Score as a fresh vector.
pub fn score(oracle: &dyn ScoreOracle, sched: &NoiseSchedule, k: usize, z: &DVector<f64>) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(z.len());
    oracle.score_into(sched, k, z.as_slice(), out.as_mut_slice())?;
    Ok(out)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Squared 2-Wasserstein distance between two Gaussians given by moments
/// (Bures formula, no commutation requirement).
pub fn w2_moments(m1: &DVector<f64>, c1: &DMatrix<f64>, m2: &DVector<f64>, c2: &DMatrix<f64>) -> f64 {
    let r1 = sym_sqrt(c1);
    let cross = sym_sqrt(&(&r1 * c2 * &r1));
    let bures = c1.trace() + c2.trace() - 2.0 * cross.trace();
    ((m1 - m2).norm_squared() + bures).max(0.0)
}

/// Squared W2 between co-diagonalizable Gaussians; the coordinate-wise form
/// `sum (mu_a - mu_b)^2 + (sqrt(lambda_a) - sqrt(lambda_b))^2`.
pub fn w2_gaussian(a: &GaussianSource, b: &GaussianSource) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::LengthMismatch { left: a.dim(), right: b.dim() });
    }
    let comm = (a.cov() * b.cov() - b.cov() * a.cov()).amax();
    if comm > 1e-8 {
        return Err(Error::NonCommutingCovariance(comm));
    }
    // b's covariance in a's eigenbasis is diagonal up to the check above,
    // except within repeated eigenvalues of a, where Bures is still exact.
    let qa = a.eigenvectors();
    let cb = qa.transpose() * b.cov() * qa;
    if is_nearly_diagonal(&cb) {
        let dm = (a.mean() - b.mean()).norm_squared();
        let dv: f64 =
            a.eigenvalues().iter().zip(cb.diagonal().iter()).map(|(la, lb)| (la.sqrt() - lb.sqrt()).powi(2)).sum();
        return Ok(dm + dv);
    }
    Ok(w2_moments(a.mean(), a.cov(), b.mean(), b.cov()))
}

fn is_nearly_diagonal(m: &DMatrix<f64>) -> bool {
    let scale = m.amax().max(1.0);
    (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)].abs() <= 1e-12 * scale))
}

/// KL(a || b) in nats.
pub fn kl_gaussian(a: &GaussianSource, b: &GaussianSource) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::LengthMismatch { left: a.dim(), right: b.dim() });
    }
    let d = a.dim() as f64;
    let cb = b.cov().clone().cholesky().ok_or_else(|| Error::SingularCovariance("KL reference".into()))?;
    let ca = a.cov().clone().cholesky().ok_or_else(|| Error::SingularCovariance("KL argument".into()))?;
    let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let tr = cb.solve(a.cov()).trace();
    let dm = b.mean() - a.mean();
    let maha = dm.dot(&cb.solve(&dm));
    Ok(0.5 * (tr + maha - d + logdet(&cb.l()) - logdet(&ca.l())))
}

/// Squared W2 between two equal-size 1-D empirical measures.
pub fn empirical_w2_1d(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch { left: xs.len(), right: ys.len() });
    }
    if xs.is_empty() {
        return Err(Error::InvalidRange("need at least one sample".into()));
    }
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let sq: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).collect();
    Ok(crate::stats::mean(&sq))
}
