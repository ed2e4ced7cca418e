//! TOML run configuration and the manifest recorded next to outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lsq::{LsqMethod, LsqOptions};
use crate::phantom::PhantomLayout;
use crate::pipeline::PinnConfig;
use crate::signal::{validate_times, NoiseKind, NoiseSpec};

/// Everything that determines the outputs of a run. Missing keys take
/// their defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Echo times (ms) for simulation. The default puts the first echo at
    /// 5 ms so the shortest-T2 tube still has three echoes above 1% noise.
    pub times: Vec<f64>,
    /// Foreground threshold as a fraction of the first frame's maximum.
    pub mask_fraction: f64,
    pub noise: NoiseSpec,
    pub phantom: PhantomLayout,
    pub lsq: LsqOptions,
    pub pinn: PinnConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            times: (0..9).map(|i| 5.0 + 10.0 * i as f64).collect(),
            mask_fraction: 0.05,
            noise: NoiseSpec {
                kind: NoiseKind::Gaussian,
                sigma: 0.01,
                seed: 0,
            },
            phantom: PhantomLayout::fourteen_tubes(),
            // log-linear fits weight late, noisy echoes heavily; refine by default
            lsq: LsqOptions {
                method: LsqMethod::NonlinearRefined,
                ..Default::default()
            },
            pinn: PinnConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        validate_times(&self.times).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(Error::InvalidConfig(format!(
                "mask_fraction must lie in [0, 1), got {}",
                self.mask_fraction
            )));
        }
        self.noise.validate()?;
        self.lsq.validate()?;
        self.pinn.validate()
    }

    /// Applies a seed override to both the noise and the network seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.noise.seed = seed;
        self.pinn.train.seed = seed;
        self
    }
}

/// Record of one command invocation, written as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub threads: usize,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}
