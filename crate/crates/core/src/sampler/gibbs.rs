use std::collections::VecDeque;

use log::debug;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::adapt::{adapt_stepsize, record_decision, window_rate};
use super::distributions::{sample_inverse_gamma, sample_inverse_wishart};
use super::hmc::hmc_move;
use super::SamplerConfig;
use crate::cube::{backproject, BipVector};
use crate::error::{FusionError, Result};
use crate::model::{
    conditional_sigma_u_params, ChainState, ConditionalTarget, CovarianceMode, HierModel, NoiseMode, NoisePrior,
};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Relative size of the variance floor, against the per-pixel band energy.
const VARIANCE_FLOOR: f64 = 1e-12;

/// Per-iteration diagnostics, all of length `n_bi + n_mc` once finished.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Traces {
    /// Windowed acceptance rate after each move.
    pub acceptance: Vec<f64>,
    pub accept_prob: Vec<f64>,
    pub accepted: Vec<bool>,
    /// Potential energy of the retained `u`.
    pub energy: Vec<f64>,
    /// Stepsize used by each move.
    pub stepsize: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSummary {
    pub mean: f64,
    /// 2.5% empirical quantile.
    pub lower: f64,
    /// 97.5% empirical quantile.
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Accumulators {
    kept: usize,
    sum_u: Vec<f64>,
    sum_sq_u: Vec<f64>,
    sum_sigma: DMatrix<f64>,
    sum_gamma: f64,
    /// `[sensor][band][kept sample]`.
    noise: Vec<Vec<Vec<f64>>>,
    stored: Vec<Vec<f64>>,
}

impl Accumulators {
    fn new(model: &HierModel) -> Self {
        let d = model.reduced_dim();
        Self {
            kept: 0,
            sum_u: vec![0.0; model.dim()],
            sum_sq_u: vec![0.0; model.dim()],
            sum_sigma: DMatrix::zeros(d, d),
            sum_gamma: 0.0,
            noise: (0..model.n_sensors()).map(|p| vec![Vec::new(); model.sensor(p).out_bands()]).collect(),
            stored: Vec::new(),
        }
    }
}

/// Everything needed to continue a chain bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: SamplerConfig,
    pub state: ChainState,
    rng: ChaCha8Rng,
    acc: Accumulators,
    traces: Traces,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainOutput {
    pub mmse_u: BipVector,
    pub mmse_x: BipVector,
    /// Per-coordinate sample variance of the kept `u` draws.
    pub variance_u: Vec<f64>,
    pub sigma_u_mean: DMatrix<f64>,
    /// `[sensor][band]`.
    pub noise: Vec<Vec<NoiseSummary>>,
    pub gamma_mean: Option<f64>,
    pub traces: Traces,
    /// Thinned post-burn-in samples of `u`, if requested.
    pub samples: Vec<BipVector>,
    pub n_kept: usize,
    pub final_state: ChainState,
}

/// `u = mu`, `Sigma_u` at its prior mean, and noise variances from the sensor
/// declarations or, where those are zero, from the residual at `mu`.
pub fn initial_state(model: &HierModel, config: &SamplerConfig) -> Result<ChainState> {
    let d = model.reduced_dim() as f64;
    let h = model.hyper();
    let sigma_u = if h.eta > d + 1.0 { &h.psi / (h.eta - d - 1.0) } else { h.psi.clone() };
    let u = model.prior_mean().clone();
    let floors = variance_floors(model);
    let energies = model.residual_band_energies(&u)?;
    let mut noise_vars = model.nominal_noise_variances();
    for (p, vars) in noise_vars.iter_mut().enumerate() {
        let n = model.sensor(p).out_pixels() as f64;
        for (i, v) in vars.iter_mut().enumerate() {
            if !(*v > 0.0) {
                *v = (energies[p][i] / n).max(floors[p][i]);
            }
        }
    }
    let gamma = match model.noise_prior {
        NoisePrior::Literal => None,
        NoisePrior::Hierarchical => {
            let inv: f64 = noise_vars.iter().flatten().map(|s| 1.0 / s).sum();
            let count = noise_vars.iter().map(Vec::len).sum::<usize>() as f64;
            Some(if inv > 0.0 { count / inv } else { 1.0 })
        }
    };
    Ok(ChainState {
        u,
        sigma_u,
        noise_vars,
        gamma,
        epsilon: config.initial_stepsize(model.dim()),
        accept_window: VecDeque::with_capacity(config.window),
        iteration: 0,
    })
}

fn variance_floors(model: &HierModel) -> Vec<Vec<f64>> {
    (0..model.n_sensors())
        .map(|p| {
            let z = model.observation(p);
            let n = z.n_pixels() as f64;
            let mut e = vec![0.0; z.n_bands()];
            for px in z.pixels() {
                for (acc, v) in e.iter_mut().zip(px) {
                    *acc += v * v;
                }
            }
            e.into_iter().map(|v| (VARIANCE_FLOOR * v / n).max(f64::MIN_POSITIVE)).collect()
        })
        .collect()
}

/// Linear-interpolation empirical quantile of unsorted data.
fn quantile(samples: &[f64], q: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

/// A single Markov chain over `(Sigma_u, u, s^2)`.
pub struct Chain<'a> {
    model: &'a HierModel,
    config: SamplerConfig,
    state: ChainState,
    rng: ChaCha8Rng,
    acc: Accumulators,
    traces: Traces,
    floors: Vec<Vec<f64>>,
}

impl<'a> Chain<'a> {
    pub fn new(model: &'a HierModel, config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        let state = initial_state(model, &config)?;
        Self::with_state(model, config, state)
    }

    pub fn with_state(model: &'a HierModel, config: SamplerConfig, state: ChainState) -> Result<Self> {
        config.validate()?;
        state.validate(model)?;
        Ok(Self {
            model,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            state,
            acc: Accumulators::new(model),
            traces: Traces::default(),
            floors: variance_floors(model),
        })
    }

    pub fn from_checkpoint(model: &'a HierModel, ck: Checkpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(FusionError::Parse(format!("checkpoint version {} is not supported", ck.version)));
        }
        ck.config.validate()?;
        ck.state.validate(model)?;
        if ck.acc.sum_u.len() != model.dim() || ck.acc.noise.len() != model.n_sensors() {
            return Err(FusionError::Shape("checkpoint does not match the model".into()));
        }
        Ok(Self {
            model,
            config: ck.config,
            state: ck.state,
            rng: ck.rng,
            acc: ck.acc,
            traces: ck.traces,
            floors: variance_floors(model),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            state: self.state.clone(),
            rng: self.rng.clone(),
            acc: self.acc.clone(),
            traces: self.traces.clone(),
        }
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn traces(&self) -> &Traces {
        &self.traces
    }

    pub fn is_finished(&self) -> bool {
        self.state.iteration >= self.config.total_iterations()
    }

    /// One Gibbs sweep: `Sigma_u`, then `u` by HMC, then the noise variances.
    pub fn step(&mut self) -> Result<()> {
        let model = self.model;
        let t = self.state.iteration + 1;

        if model.covariance_mode == CovarianceMode::Sample {
            let (scale, dof) = conditional_sigma_u_params(model, &self.state.u)?;
            self.state.sigma_u = sample_inverse_wishart(&scale, dof, &mut self.rng)?;
        }

        let target = ConditionalTarget::new(model, &self.state.sigma_u, &self.state.noise_vars)?;
        let mut u = std::mem::replace(&mut self.state.u, BipVector::zeros(0, 0)).into_vec();
        let eps = self.state.epsilon;
        let mv = hmc_move(&target, &mut u, eps, self.config.n_leap_min, self.config.n_leap_max, &mut self.rng);
        self.state.u = BipVector::new(model.n_pixels(), model.reduced_dim(), u)?;

        record_decision(&mut self.state.accept_window, mv.accepted, self.config.window);
        let rate = window_rate(&self.state.accept_window).unwrap_or(0.0);
        self.state.epsilon = adapt_stepsize(eps, rate, t, &self.config);
        if !(self.state.epsilon.is_finite() && self.state.epsilon > 0.0) {
            return Err(FusionError::Numerical(format!("stepsize degenerated to {}", self.state.epsilon)));
        }

        if model.noise_mode == NoiseMode::Sample {
            self.sample_noise()?;
        }

        self.traces.acceptance.push(rate);
        self.traces.accept_prob.push(mv.accept_prob);
        self.traces.accepted.push(mv.accepted);
        self.traces.energy.push(mv.potential);
        self.traces.stepsize.push(eps);
        self.state.iteration = t;

        if t > self.config.n_bi as u64 {
            self.accumulate();
        }
        if t % 100 == 0 {
            debug!("iteration {t}: rate {rate:.3}, eps {:.3e}, U {:.6e}", self.state.epsilon, mv.potential);
        }
        Ok(())
    }

    fn sample_noise(&mut self) -> Result<()> {
        let model = self.model;
        let energies = model.residual_band_energies(&self.state.u)?;
        match model.noise_prior {
            NoisePrior::Literal => {
                for (p, vars) in self.state.noise_vars.iter_mut().enumerate() {
                    let shape = model.sensor(p).out_pixels() as f64 / 2.0;
                    for (i, v) in vars.iter_mut().enumerate() {
                        *v = sample_inverse_gamma(shape, energies[p][i] / 2.0, self.floors[p][i], &mut self.rng)?;
                    }
                }
            }
            NoisePrior::Hierarchical => {
                let nu = model.hyper().nu;
                let count = self.state.noise_vars.iter().map(Vec::len).sum::<usize>() as f64;
                let rate: f64 = self.state.noise_vars.iter().flatten().map(|s| 0.5 / s).sum();
                let gamma = Gamma::new(count * nu / 2.0, 1.0 / rate)
                    .map_err(|e| FusionError::Numerical(e.to_string()))?
                    .sample(&mut self.rng);
                self.state.gamma = Some(gamma);
                for (p, vars) in self.state.noise_vars.iter_mut().enumerate() {
                    let shape = nu / 2.0 + model.sensor(p).out_pixels() as f64 / 2.0;
                    for (i, v) in vars.iter_mut().enumerate() {
                        *v = sample_inverse_gamma(shape, (gamma + energies[p][i]) / 2.0, self.floors[p][i], &mut self.rng)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self) {
        let acc = &mut self.acc;
        for ((s, q), u) in acc.sum_u.iter_mut().zip(acc.sum_sq_u.iter_mut()).zip(self.state.u.as_slice()) {
            *s += u;
            *q += u * u;
        }
        acc.sum_sigma += &self.state.sigma_u;
        acc.sum_gamma += self.state.gamma.unwrap_or(0.0);
        for (dst, src) in acc.noise.iter_mut().zip(&self.state.noise_vars) {
            for (d, s) in dst.iter_mut().zip(src) {
                d.push(*s);
            }
        }
        if self.config.thin > 0 && acc.kept % self.config.thin == 0 {
            acc.stored.push(self.state.u.as_slice().to_vec());
        }
        acc.kept += 1;
    }

    /// Advances by up to `n` iterations without passing the configured total.
    pub fn run_for(&mut self, n: u64) -> Result<()> {
        for _ in 0..n {
            if self.is_finished() {
                break;
            }
            self.step()?;
        }
        Ok(())
    }

    /// Runs to completion and forms the MMSE estimates.
    pub fn finish(mut self) -> Result<ChainOutput> {
        while !self.is_finished() {
            self.step()?;
        }
        let model = self.model;
        let acc = self.acc;
        let n = acc.kept as f64;
        let mean: Vec<f64> = acc.sum_u.iter().map(|s| s / n).collect();
        let variance_u = acc
            .sum_sq_u
            .iter()
            .zip(&mean)
            .map(|(q, m)| if acc.kept > 1 { ((q - n * m * m) / (n - 1.0)).max(0.0) } else { 0.0 })
            .collect();
        let mmse_u = BipVector::new(model.n_pixels(), model.reduced_dim(), mean)?;
        let mmse_x = backproject(&mmse_u, model.basis())?;
        let noise = acc
            .noise
            .iter()
            .map(|bands| {
                bands
                    .iter()
                    .map(|s| NoiseSummary {
                        mean: s.iter().sum::<f64>() / s.len() as f64,
                        lower: quantile(s, 0.025),
                        upper: quantile(s, 0.975),
                    })
                    .collect()
            })
            .collect();
        let samples = acc
            .stored
            .into_iter()
            .map(|v| BipVector::new(model.n_pixels(), model.reduced_dim(), v))
            .collect::<Result<_>>()?;
        Ok(ChainOutput {
            mmse_u,
            mmse_x,
            variance_u,
            sigma_u_mean: acc.sum_sigma / n,
            noise,
            gamma_mean: self.state.gamma.map(|_| acc.sum_gamma / n),
            traces: self.traces,
            samples,
            n_kept: acc.kept,
            final_state: self.state,
        })
    }
}

/// Runs a fresh chain for `n_bi + n_mc` iterations.
pub fn run_gibbs(model: &HierModel, config: &SamplerConfig) -> Result<ChainOutput> {
    Chain::new(model, config.clone())?.finish()
}
