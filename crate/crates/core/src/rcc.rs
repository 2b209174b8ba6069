//! Reverse channel coding with the Poisson functional representation.
//!
//! Encoder and decoder share a counter-based candidate stream. Candidate `n`
//! of step `k` in trial `i` is drawn from the proposal using the stream key
//! `(seed, i, k, n, Candidate)`, and its arrival weight from
//! `(seed, i, k, n, Weight)`, so the decoder regenerates candidate `index`
//! directly. The progressive codec runs the selection once per reverse
//! diffusion step, in the eigen coordinates of the source, where every law
//! involved is a product of independent 1-D Gaussians.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{check_index, Error, Result};
use crate::rng::{Role, StreamKey};
use crate::schedule::NoiseSchedule;
use crate::sources::GaussianSource;

/// Gaussian with independent coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::LengthMismatch { left: mean.len(), right: var.len() });
        }
        if var.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::SingularCovariance("diagonal variances must be positive".into()));
        }
        Ok(Self { mean, var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// KL(self || other) in nats.
    pub fn kl(&self, other: &DiagGaussian) -> f64 {
        self.mean
            .iter()
            .zip(&self.var)
            .zip(other.mean.iter().zip(&other.var))
            .map(|((m1, v1), (m0, v0))| 0.5 * (v1 / v0 + (m1 - m0).powi(2) / v0 - 1.0 + (v0 / v1).ln()))
            .sum()
    }

    /// `log self(z) - log other(z)`.
    pub fn log_ratio(&self, other: &DiagGaussian, z: &[f64]) -> f64 {
        let mut acc = 0.0;
        for l in 0..self.dim() {
            let (m1, v1, m0, v0) = (self.mean[l], self.var[l], other.mean[l], other.var[l]);
            acc += -0.5 * (v1 / v0).ln() - (z[l] - m1).powi(2) / (2.0 * v1) + (z[l] - m0).powi(2) / (2.0 * v0);
        }
        acc
    }

    /// `sup_z log self(z)/other(z)` when finite.
    pub fn sup_log_ratio(&self, other: &DiagGaussian) -> Option<f64> {
        let mut acc = 0.0;
        for l in 0..self.dim() {
            let (m1, v1, m0, v0) = (self.mean[l], self.var[l], other.mean[l], other.var[l]);
            if v1 < v0 {
                acc += -0.5 * (v1 / v0).ln() + (m1 - m0).powi(2) / (2.0 * (v0 - v1));
            } else if !(v1 == v0 && m1 == m0) {
                return None;
            }
        }
        Some(acc)
    }
}

/// One channel use: the encoder wants a sample of `target`, the decoder
/// knows only `proposal`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepChannel {
    pub target: DiagGaussian,
    pub proposal: DiagGaussian,
    pub kl_nats: f64,
}

impl StepChannel {
    pub fn new(target: DiagGaussian, proposal: DiagGaussian) -> Result<Self> {
        if target.dim() != proposal.dim() {
            return Err(Error::LengthMismatch { left: target.dim(), right: proposal.dim() });
        }
        let kl_nats = target.kl(&proposal).max(0.0);
        Ok(Self { target, proposal, kl_nats })
    }
}

/// Identifies the shared randomness of one channel use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct StepStream {
    pub seed: u64,
    pub trial: u64,
    pub step: u64,
}

impl StepStream {
    fn key(&self, n: u64, role: Role) -> StreamKey {
        StreamKey::new(self.seed, self.trial, self.step, n, role)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PfrTranscript {
    pub index: u64,
    pub codelength_bits: f64,
    pub candidates_examined: u64,
    pub kl_nats: f64,
    /// The scan reached the cap before the stopping rule was certified.
    pub cap_hit: bool,
    pub stream: StepStream,
}

impl PfrTranscript {
    /// One diagnostic record as a JSON object on a single line.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "k": self.stream.step,
            "index": self.index,
            "bits": self.codelength_bits,
            "kl_nats": self.kl_nats,
            "cap_hit": self.cap_hit,
        })
        .to_string()
    }
}

/// Candidate limit `2^(KL_bits + margin)`, clamped to `2^max_log2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapPolicy {
    pub margin_log2: f64,
    pub max_log2: u32,
}

impl Default for CapPolicy {
    fn default() -> Self {
        Self { margin_log2: 8.0, max_log2: 20 }
    }
}

impl CapPolicy {
    pub fn cap(&self, kl_nats: f64) -> u64 {
        let e = (kl_nats / std::f64::consts::LN_2 + self.margin_log2).min(self.max_log2 as f64);
        (e.exp2().ceil() as u64).clamp(1, 1u64 << self.max_log2)
    }
}

/// Candidate `n` (1-based) of the proposal stream.
pub fn candidate(proposal: &DiagGaussian, stream: &StepStream, n: u64, out: &mut [f64]) {
    let mut rng = stream.key(n, Role::Candidate).rng();
    for l in 0..proposal.dim() {
        out[l] = proposal.mean[l] + proposal.var[l].sqrt() * rng.normal();
    }
}

/// Runs the selection and returns the transcript with the chosen sample.
pub fn pfr_select(channel: &StepChannel, stream: StepStream, n_max: u64) -> Result<(PfrTranscript, Vec<f64>)> {
    if n_max == 0 {
        return Err(Error::InvalidRange("candidate cap must be at least 1".into()));
    }
    let d = channel.target.dim();
    let sup = channel.target.sup_log_ratio(&channel.proposal);
    let mut z = vec![0.0; d];
    let mut best = vec![0.0; d];
    let mut best_score = f64::INFINITY;
    let mut best_index = 0u64;
    let mut arrival = 0.0f64;
    let mut certified = false;
    let mut n = 0u64;
    while n < n_max {
        n += 1;
        arrival += stream.key(n, Role::Weight).rng().exponential();
        candidate(&channel.proposal, &stream, n, &mut z);
        let score = arrival.ln() - channel.target.log_ratio(&channel.proposal, &z);
        if score < best_score {
            best_score = score;
            best_index = n;
            best.copy_from_slice(&z);
        }
        if let Some(s) = sup {
            if arrival.ln() - s >= best_score {
                certified = true;
                break;
            }
        }
    }
    let transcript = PfrTranscript {
        index: best_index,
        codelength_bits: zipf_codelength(best_index, channel.kl_nats),
        candidates_examined: n,
        kl_nats: channel.kl_nats,
        cap_hit: !certified,
        stream,
    };
    Ok((transcript, best))
}

/// Decoder side: regenerates candidate `index`.
pub fn pfr_reconstruct(index: u64, proposal: &DiagGaussian, stream: &StepStream) -> Result<Vec<f64>> {
    if index == 0 {
        return Err(Error::InvalidRange("candidate index is 1-based".into()));
    }
    let mut z = vec![0.0; proposal.dim()];
    candidate(proposal, stream, index, &mut z);
    Ok(z)
}

const BERNOULLI_2K: [f64; 6] = [1.0 / 6.0, -1.0 / 30.0, 1.0 / 42.0, -1.0 / 30.0, 5.0 / 66.0, -691.0 / 2730.0];

/// Riemann zeta for real `s > 1`, by Euler-Maclaurin summation.
pub fn zeta(s: f64) -> f64 {
    assert!(s > 1.0, "zeta needs s > 1");
    const N: f64 = 16.0;
    let mut acc: f64 = (1..16).map(|n| (n as f64).powf(-s)).sum();
    acc += N.powf(1.0 - s) / (s - 1.0) + 0.5 * N.powf(-s);
    // rising factorial s (s+1) ... (s+2k-2), divided by (2k)!
    let mut coef = s / 2.0;
    let mut power = N.powf(-s - 1.0);
    for (k, b) in BERNOULLI_2K.iter().enumerate() {
        acc += b * coef * power;
        let j = 2.0 * (k as f64 + 1.0);
        coef *= (s + j - 1.0) * (s + j) / ((j + 1.0) * (j + 2.0));
        power /= N * N;
    }
    acc
}

/// Zipf exponent used for a channel carrying `info_nats`.
pub fn zipf_exponent(info_nats: f64) -> f64 {
    let bits = info_nats.max(0.0) / std::f64::consts::LN_2;
    (1.0 + 1.0 / (bits + 1.0)).max(1.0 + 1e-6)
}

/// Ideal codelength in bits of `index` under the Zipf law for `info_nats`.
pub fn zipf_codelength(index: u64, info_nats: f64) -> f64 {
    let s = zipf_exponent(info_nats);
    s * (index.max(1) as f64).log2() + zeta(s).log2()
}

/// Law of `Z_k` given `Z_{k+1} = z_next` and `X = x`; `0 <= k < T`.
/// The covariance is isotropic, so any orthonormal coordinates may be used.
pub fn forward_posterior(x: &[f64], z_next: &[f64], sched: &NoiseSchedule, k: usize) -> Result<DiagGaussian> {
    check_index(k, 0, sched.steps() - 1)?;
    if x.len() != z_next.len() {
        return Err(Error::LengthMismatch { left: x.len(), right: z_next.len() });
    }
    let (a, b) = (sched.alpha(k + 1), sched.beta(k + 1));
    let (ab_k, ab_n) = (sched.alpha_bar(k), sched.alpha_bar(k + 1));
    let den = 1.0 - ab_n;
    let mean = x
        .iter()
        .zip(z_next)
        .map(|(xi, zi)| (a.sqrt() * (1.0 - ab_k) * zi + ab_k.sqrt() * b * xi) / den)
        .collect();
    let var = vec![b * (1.0 - ab_k) / den; x.len()];
    Ok(DiagGaussian { mean, var })
}

/// Law of `Z_k` given `Z_{k+1}` under the source, in its eigen coordinates:
/// mean `offset + gain * y`, variance `var`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepModel {
    pub k: usize,
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
    pub var: Vec<f64>,
}

impl StepModel {
    pub fn law(&self, y_next: &[f64]) -> DiagGaussian {
        let mean = (0..self.gain.len()).map(|l| self.offset[l] + self.gain[l] * y_next[l]).collect();
        DiagGaussian { mean, var: self.var.clone() }
    }
}

pub fn model_step_marginal(source: &GaussianSource, sched: &NoiseSchedule, k: usize) -> Result<StepModel> {
    check_index(k, 0, sched.steps() - 1)?;
    let a = sched.alpha(k + 1);
    let (rk, rn) = (sched.alpha_bar(k).sqrt(), sched.alpha_bar(k + 1).sqrt());
    let d = source.dim();
    let (mut gain, mut offset, mut var) = (Vec::with_capacity(d), Vec::with_capacity(d), Vec::with_capacity(d));
    for l in 0..d {
        let lam = source.eigenvalues()[l];
        let (sk, sn) = (sched.noisy_variance(lam, k), sched.noisy_variance(lam, k + 1));
        let g = a.sqrt() * sk / sn;
        let m = source.mean_eig()[l];
        gain.push(g);
        offset.push(rk * m - g * rn * m);
        var.push(sk - a * sk * sk / sn);
    }
    Ok(StepModel { k, gain, offset, var })
}

/// Encoder output for one source sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainCode {
    /// One transcript per step, from `k = T-1` down to `target_t`.
    pub transcripts: Vec<PfrTranscript>,
    pub z_t: DVector<f64>,
    pub total_bits: f64,
    pub total_kl_nats: f64,
    pub cap_hits: usize,
}

fn chain_init(source: &GaussianSource, sched: &NoiseSchedule, seed: u64, trial: u64) -> Vec<f64> {
    let mut rng = StreamKey::new(seed, trial, sched.steps() as u64, 0, Role::ChainInit).rng();
    (0..source.dim()).map(|_| rng.normal()).collect()
}

fn check_target(sched: &NoiseSchedule, target_t: usize) -> Result<()> {
    if sched.steps() < 2 {
        return Err(Error::InvalidRange("progressive coding needs T >= 2".into()));
    }
    check_index(target_t, 1, sched.steps() - 1)
}

/// Progressive encoder: transmits `z_T -> z_{T-1} -> ... -> z_t`. The
/// starting point `z_T ~ N(0, I)` comes from shared randomness and costs no bits.
pub fn chain_encode(
    x: &DVector<f64>,
    target_t: usize,
    source: &GaussianSource,
    sched: &NoiseSchedule,
    seed: u64,
    trial: u64,
    caps: CapPolicy,
) -> Result<ChainCode> {
    check_target(sched, target_t)?;
    if x.len() != source.dim() {
        return Err(Error::LengthMismatch { left: x.len(), right: source.dim() });
    }
    let mut x_eig = vec![0.0; x.len()];
    source.to_eig(x.as_slice(), &mut x_eig);
    let mut y = chain_init(source, sched, seed, trial);
    let mut transcripts = Vec::with_capacity(sched.steps() - target_t);
    let (mut bits, mut kl, mut hits) = (0.0, 0.0, 0usize);
    for k in (target_t..sched.steps()).rev() {
        let target = forward_posterior(&x_eig, &y, sched, k)?;
        let proposal = model_step_marginal(source, sched, k)?.law(&y);
        let channel = StepChannel::new(target, proposal)?;
        let stream = StepStream { seed, trial, step: k as u64 };
        let (tr, z) = pfr_select(&channel, stream, caps.cap(channel.kl_nats))?;
        bits += tr.codelength_bits;
        kl += tr.kl_nats;
        hits += usize::from(tr.cap_hit);
        transcripts.push(tr);
        y = z;
    }
    let mut z_t = DVector::zeros(y.len());
    source.from_eig(&y, z_t.as_mut_slice());
    Ok(ChainCode { transcripts, z_t, total_bits: bits, total_kl_nats: kl, cap_hits: hits })
}

/// Progressive decoder: replays the shared stream and picks the transmitted
/// candidates.
pub fn chain_decode(
    transcripts: &[PfrTranscript],
    target_t: usize,
    source: &GaussianSource,
    sched: &NoiseSchedule,
    seed: u64,
    trial: u64,
) -> Result<DVector<f64>> {
    check_target(sched, target_t)?;
    let expected = sched.steps() - target_t;
    if transcripts.len() != expected {
        return Err(Error::TranscriptMismatch { got: transcripts.len(), expected });
    }
    let mut y = chain_init(source, sched, seed, trial);
    for (tr, k) in transcripts.iter().zip((target_t..sched.steps()).rev()) {
        let stream = StepStream { seed, trial, step: k as u64 };
        if tr.stream != stream {
            return Err(Error::StreamMismatch { step: k });
        }
        let proposal = model_step_marginal(source, sched, k)?.law(&y);
        y = pfr_reconstruct(tr.index, &proposal, &stream)?;
    }
    let mut z_t = DVector::zeros(y.len());
    source.from_eig(&y, z_t.as_mut_slice());
    Ok(z_t)
}
