//! Rate-distortion-perception traversal for analytically tractable sources.
//!
//! A source sample is noised to a diffusion level `t`, transmitted by
//! reverse channel coding, and reconstructed by a score-scaled
//! probability-flow ODE whose parameter `rho` moves the output along the
//! distortion-perception curve of that level. For Gaussian sources every
//! stage has a closed form, which [`theory`] evaluates and [`harness`]
//! checks by Monte Carlo.

pub mod cli;
pub mod config;
pub mod error;
pub mod harness;
pub mod rcc;
pub mod rng;
pub mod schedule;
pub mod sources;
pub mod ssode;
pub mod stats;
pub mod theory;

pub use error::{Error, Result};
pub use harness::{DecodeMode, Ensemble, Estimate, ExperimentConfig, RateMode, Row, Source, SweepResult};
pub use schedule::{perturb_stats, NoiseSchedule, PerturbStats};
pub use sources::{GaussianSource, GmmSource, ScoreOracle};
pub use ssode::{ReconCoeffs, RhoParam};
