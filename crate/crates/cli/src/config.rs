//! Fusion configuration, read from TOML.
//!
//! ```toml
//! [subspace]
//! threshold = 0.99          # retained energy of the HS principal components
//! centering = "centered"    # or "uncentered"
//! interpolation = "bilinear"
//! # dim = 4                 # fixes the subspace size, overriding threshold
//!
//! [model]
//! noise_mode = "sample"     # "fixed" keeps the declared sensor variances
//! covariance_mode = "sample"
//! noise_prior = "literal"   # or "hierarchical"
//! # eta = 7.0               # defaults to subspace size + 3
//!
//! [sampler]
//! n_mc = 500
//! n_bi = 500
//! seed = 0
//!
//! [preview]
//! # bands = [30, 20, 10]    # explicit RGB band indices
//! ```

use std::path::Path;

use bayesfuse_core::model::{CovarianceMode, NoiseMode, NoisePrior};
use bayesfuse_core::sampler::SamplerConfig;
use bayesfuse_core::subspace::{Centering, Interpolation};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubspaceConfig {
    pub threshold: f64,
    pub centering: Centering,
    pub interpolation: Interpolation,
    pub dim: Option<usize>,
}

impl Default for SubspaceConfig {
    fn default() -> Self {
        Self { threshold: 0.99, centering: Centering::Centered, interpolation: Interpolation::Bilinear, dim: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub noise_mode: NoiseMode,
    pub covariance_mode: CovarianceMode,
    pub noise_prior: NoisePrior,
    pub eta: Option<f64>,
    pub nu: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreviewConfig {
    /// Red, green and blue band indices.
    pub bands: Option<[usize; 3]>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuseConfig {
    pub subspace: SubspaceConfig,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub preview: PreviewConfig,
}

impl FuseConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if !(self.subspace.threshold > 0.0 && self.subspace.threshold <= 1.0) {
            return Err(CliError::user("subspace.threshold must lie in (0, 1]"));
        }
        if self.subspace.dim == Some(0) {
            return Err(CliError::user("subspace.dim must be positive"));
        }
        self.sampler.validate()?;
        Ok(())
    }
}
