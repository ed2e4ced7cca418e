//! Mono-exponential transverse decay, the ODE it solves, and seeded
//! synthetic echo trains.
//!
//! All times are in milliseconds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tissue parameters of one voxel: decay amplitude and T2 (ms).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueParams {
    pub m0: f64,
    pub t2: f64,
}

impl TissueParams {
    pub fn new(m0: f64, t2: f64) -> Result<Self> {
        if !(m0.is_finite() && m0 >= 0.0) {
            return Err(Error::InvalidParams(format!(
                "m0 must be finite and >= 0, got {m0}"
            )));
        }
        if !(t2.is_finite() && t2 > 0.0) {
            return Err(Error::InvalidParams(format!(
                "t2 must be finite and > 0, got {t2}"
            )));
        }
        Ok(Self { m0, t2 })
    }
}

/// Transverse magnetization `m0 * exp(-t / t2)` at time `t` (ms).
#[inline]
pub fn model_signal(p: &TissueParams, t: f64) -> f64 {
    p.m0 * (-t / p.t2).exp()
}

/// Time derivative of [`model_signal`].
#[inline]
pub fn model_derivative(p: &TissueParams, t: f64) -> f64 {
    -model_signal(p, t) / p.t2
}

/// Residual of `dM/dt + M / t2 = 0`.
#[inline]
pub fn ode_residual(value: f64, derivative: f64, t2: f64) -> f64 {
    derivative + value / t2
}

/// Measured echo train of a single voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct EchoSeries {
    times: Vec<f64>,
    signals: Vec<f64>,
}

impl EchoSeries {
    /// Validates `I >= 2`, equal lengths, strictly increasing positive times
    /// and finite signals. Signals may be negative: additive Gaussian noise
    /// pushes late echoes of short-T2 tissue below zero.
    pub fn new(times: Vec<f64>, signals: Vec<f64>) -> Result<Self> {
        validate_times(&times)?;
        if times.len() < 2 {
            return Err(Error::InvalidSeries(format!(
                "at least 2 echoes required, got {}",
                times.len()
            )));
        }
        if times.len() != signals.len() {
            return Err(Error::InvalidSeries(format!(
                "{} times but {} signals",
                times.len(),
                signals.len()
            )));
        }
        if let Some(s) = signals.iter().find(|s| !s.is_finite()) {
            return Err(Error::InvalidSeries(format!("signal {s} is not finite")));
        }
        Ok(Self { times, signals })
    }

    /// Builds a series from echoes in any order; they are sorted by time.
    pub fn from_unordered(mut pairs: Vec<(f64, f64)>) -> Result<Self> {
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (times, signals) = pairs.into_iter().unzip();
        Self::new(times, signals)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn signals(&self) -> &[f64] {
        &self.signals
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn t_max(&self) -> f64 {
        *self.times.last().expect("series is never empty")
    }

    pub fn max_signal(&self) -> f64 {
        self.signals.iter().copied().fold(0.0, f64::max)
    }

    /// Same echo times, every signal multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            times: self.times.clone(),
            signals: self.signals.iter().map(|s| s * c).collect(),
        }
    }
}

pub(crate) fn validate_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::InvalidSeries("no echo times".into()));
    }
    if let Some(t) = times.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(Error::InvalidSeries(format!(
            "echo time {t} is not finite and > 0"
        )));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidSeries(
            "echo times must be strictly increasing".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    None,
    #[default]
    Gaussian,
    Rician,
}

/// Additive noise model. `sigma` is a fraction of the voxel's `m0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub const NONE: NoiseSpec = NoiseSpec {
        kind: NoiseKind::None,
        sigma: 0.0,
        seed: 0,
    };

    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Gaussian,
            sigma,
            seed,
        }
    }

    pub fn rician(sigma: f64, seed: u64) -> Self {
        Self {
            kind: NoiseKind::Rician,
            sigma,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    /// Copy with the seed replaced by one mixed from `stream`.
    pub fn with_stream(&self, stream: u64) -> Self {
        Self {
            seed: mix_seed(self.seed, stream),
            ..*self
        }
    }
}

/// SplitMix64 finalizer over `seed ^ stream`, used to derive independent
/// per-voxel seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Noisy samples of the decay model at `times`.
///
/// Gaussian noise is purely additive and unbiased; samples can fall below
/// zero. Rician noise takes the modulus of a complex sample with
/// independent real and imaginary perturbations.
pub fn synthesize_signals(p: &TissueParams, times: &[f64], noise: &NoiseSpec) -> Result<Vec<f64>> {
    validate_times(times)?;
    noise.validate()?;
    let clean = times.iter().map(|&t| model_signal(p, t));
    let std = noise.sigma * p.m0;
    if noise.kind == NoiseKind::None || std == 0.0 {
        return Ok(clean.collect());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(match noise.kind {
        NoiseKind::Gaussian => clean.map(|s| s + normal.sample(&mut rng)).collect(),
        NoiseKind::Rician => clean
            .map(|s| {
                let re = s + normal.sample(&mut rng);
                let im = normal.sample(&mut rng);
                re.hypot(im)
            })
            .collect(),
        NoiseKind::None => unreachable!(),
    })
}

pub fn synthesize_series(p: &TissueParams, times: &[f64], noise: &NoiseSpec) -> Result<EchoSeries> {
    let signals = synthesize_signals(p, times, noise)?;
    EchoSeries::new(times.to_vec(), signals)
}
