//! Counter-based random streams.
//!
//! Every random quantity in the crate is addressed by a key built from
//! `(seed, trial, step, index, role)`. A key is hashed into a SplitMix64
//! state, so candidate `n` of a channel-simulation step can be regenerated
//! in O(1) by the decoder without replaying earlier draws, and Monte Carlo
//! trials never share generator state across threads.
//!
//! Uniforms take the top 53 bits of each output and are mapped to the open
//! interval (0, 1). Normals use the Box-Muller transform; exponentials use
//! the inverse CDF `-ln(1 - u)`. Only `ln`, `sqrt`, `sin` and `cos` from the
//! platform libm are involved, all of which are correctly rounded or
//! faithfully rounded on the targets we build for.

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// What a random draw is used for. Part of the stream key so that, e.g., the
/// source draw and the channel noise of one trial are independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Role {
    Source = 1,
    Noise = 2,
    Candidate = 3,
    Weight = 4,
    ChainInit = 5,
    Reference = 6,
    Aux = 7,
}

/// Address of one independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub trial: u64,
    pub step: u64,
    pub index: u64,
    pub role: Role,
}

impl StreamKey {
    pub fn new(seed: u64, trial: u64, step: u64, index: u64, role: Role) -> Self {
        Self { seed, trial, step, index, role }
    }

    fn hash(&self) -> u64 {
        let mut h = mix64(self.seed ^ 0x5bd1_e995_1234_5678);
        for part in [self.trial, self.step, self.index, self.role as u64] {
            h = mix64(h ^ mix64(part.wrapping_add(GOLDEN_GAMMA)));
        }
        h
    }

    pub fn rng(&self) -> CounterRng {
        CounterRng::from_key(self)
    }
}

/// SplitMix64 generator whose state is derived from a [`StreamKey`].
#[derive(Debug, Clone)]
pub struct CounterRng {
    base: u64,
    counter: u64,
    spare: Option<f64>,
}

impl CounterRng {
    pub fn from_key(key: &StreamKey) -> Self {
        Self { base: key.hash(), counter: 0, spare: None }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.base.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Uniform on the open interval (0, 1).
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    #[inline]
    pub fn exponential(&mut self) -> f64 {
        -(1.0 - self.uniform()).ln()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.normal();
        }
    }
}
