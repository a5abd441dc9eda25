//! Hybrid Gibbs sampler: inverse-Wishart and inverse-gamma conditionals around
//! a Hamiltonian Monte Carlo update of the projected image.

mod adapt;
mod distributions;
mod gibbs;
mod hmc;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};

pub use adapt::{adapt_stepsize, damped_factor, record_decision, window_rate};
pub use distributions::{sample_inverse_gamma, sample_inverse_wishart, sample_std_gaussian_vec};
pub use gibbs::{initial_state, run_gibbs, Chain, ChainOutput, Checkpoint, NoiseSummary, Traces, CHECKPOINT_VERSION};
pub use hmc::{hmc_move, leapfrog, DiagonalGaussian, HmcStep, PotentialTarget, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Iterations averaged into the estimate.
    pub n_mc: usize,
    /// Burn-in iterations discarded before averaging.
    pub n_bi: usize,
    pub n_leap_min: usize,
    pub n_leap_max: usize,
    /// Initial leapfrog stepsize; `None` means `0.01 / sqrt(M~)`.
    pub eps0: Option<f64>,
    pub window: usize,
    pub alpha_d: f64,
    pub alpha_u: f64,
    pub beta_grow: f64,
    pub beta_shrink: f64,
    pub adapt_decay: f64,
    pub paper_literal_adapt: bool,
    pub seed: u64,
    /// Keep every `thin`-th post-burn-in `u` sample; 0 keeps none.
    /// Never affects the estimate, which averages every sample.
    pub thin: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_mc: 500,
            n_bi: 500,
            n_leap_min: 50,
            n_leap_max: 55,
            eps0: None,
            window: 50,
            alpha_d: 0.3,
            alpha_u: 0.9,
            beta_grow: 1.1,
            beta_shrink: 0.9,
            adapt_decay: 0.01,
            paper_literal_adapt: false,
            seed: 0,
            thin: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mc == 0 {
            return param_err("n_mc must be positive");
        }
        if self.n_leap_min == 0 || self.n_leap_min > self.n_leap_max {
            return param_err("need 1 <= n_leap_min <= n_leap_max");
        }
        if self.window == 0 {
            return param_err("window must be positive");
        }
        if !(0.0 < self.alpha_d && self.alpha_d < self.alpha_u && self.alpha_u < 1.0) {
            return param_err("need 0 < alpha_d < alpha_u < 1");
        }
        if !(0.0 < self.beta_shrink && self.beta_shrink < 1.0 && 1.0 < self.beta_grow && self.beta_grow.is_finite()) {
            return param_err("need 0 < beta_shrink < 1 < beta_grow");
        }
        if !(self.adapt_decay >= 0.0 && self.adapt_decay.is_finite()) {
            return param_err("adapt_decay must be non-negative");
        }
        if let Some(e) = self.eps0 {
            if !(e > 0.0 && e.is_finite()) {
                return param_err("eps0 must be positive");
            }
        }
        Ok(())
    }

    pub fn initial_stepsize(&self, dim: usize) -> f64 {
        self.eps0.unwrap_or(0.01 / (dim.max(1) as f64).sqrt())
    }

    pub fn total_iterations(&self) -> u64 {
        (self.n_mc + self.n_bi) as u64
    }
}
