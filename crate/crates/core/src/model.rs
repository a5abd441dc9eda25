//! The hierarchical Bayesian fusion model.
//!
//! Unknowns: the projected scene `u` (BIP over the reduced bands), the per-band
//! noise variances `s^2_{p,i}` of every sensor, and the common pixel
//! covariance `Sigma_u`. Every observation is `z_p = F_p (V^T u_i + offset) + n_p`
//! with `n_p ~ N(0, diag(s^2_p))` per band; the prior is `u_i ~ N(mu_i, Sigma_u)`
//! with `Sigma_u ~ IW(Psi, eta)`.

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cube::{BipVector, SubspaceBasis};
use crate::error::{param_err, shape_err, FusionError, Result};
use crate::forward::{ProjectedSensor, SensorModel};
use crate::sampler::PotentialTarget;

/// Hyper-hyperparameters of the covariance and noise priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub psi: DMatrix<f64>,
    pub eta: f64,
    /// Shape of the per-variance prior. Only read by [`NoisePrior::Hierarchical`].
    pub nu: f64,
}

impl HyperParams {
    /// `Psi = I`, `eta = dim + 3`.
    pub fn non_informative(dim: usize) -> Self {
        Self { psi: DMatrix::identity(dim, dim), eta: dim as f64 + 3.0, nu: 1.0 }
    }

    pub fn dim(&self) -> usize {
        self.psi.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.psi.ncols() != d || d == 0 {
            return shape_err("Psi must be square and non-empty");
        }
        if (&self.psi - self.psi.transpose()).amax() > 1e-12 * self.psi.amax().max(1.0) {
            return param_err("Psi must be symmetric");
        }
        if Cholesky::new(self.psi.clone()).is_none() {
            return param_err("Psi must be positive definite");
        }
        if !(self.eta > d as f64 - 1.0) {
            return param_err(format!("eta = {} must exceed dim - 1 = {}", self.eta, d as f64 - 1.0));
        }
        if !(self.nu > 0.0) {
            return param_err("nu must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    /// Gibbs step on every `s^2_{p,i}`.
    #[default]
    Sample,
    /// Variances are known and held at their initial values.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMode {
    #[default]
    Sample,
    Fixed,
}

/// Form of the noise-variance conditional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoisePrior {
    /// `IG(N_p / 2, ||r_{p,i}||^2 / 2)`, no prior contribution.
    #[default]
    Literal,
    /// `s^2 ~ IG(nu/2, gamma/2)` with a Jeffreys prior on `gamma`, which is
    /// sampled as an extra Gibbs block.
    Hierarchical,
}

/// Per-sensor, per-band noise variances.
pub type NoiseVariances = Vec<Vec<f64>>;

#[derive(Debug, Clone)]
pub struct HierModel {
    rows: usize,
    cols: usize,
    basis: SubspaceBasis,
    sensors: Vec<ProjectedSensor>,
    observations: Vec<BipVector>,
    prior_mean: BipVector,
    hyper: HyperParams,
    pub noise_mode: NoiseMode,
    pub covariance_mode: CovarianceMode,
    pub noise_prior: NoisePrior,
}

impl HierModel {
    /// `observations[p]` is the data seen by `sensors[p]`.
    pub fn new(
        rows: usize,
        cols: usize,
        basis: SubspaceBasis,
        prior_mean: BipVector,
        sensors: Vec<SensorModel>,
        observations: Vec<BipVector>,
        hyper: HyperParams,
    ) -> Result<Self> {
        if sensors.len() != observations.len() {
            return shape_err(format!("{} sensors but {} observations", sensors.len(), observations.len()));
        }
        if prior_mean.n_pixels() != rows * cols || prior_mean.n_bands() != basis.reduced_dim() {
            return shape_err(format!(
                "prior mean is {} x {}, expected {} x {}",
                prior_mean.n_pixels(),
                prior_mean.n_bands(),
                rows * cols,
                basis.reduced_dim()
            ));
        }
        hyper.validate()?;
        if hyper.dim() != basis.reduced_dim() {
            return shape_err(format!("Psi is {0}x{0}, subspace has {1} dims", hyper.dim(), basis.reduced_dim()));
        }
        let mut projected = Vec::with_capacity(sensors.len());
        for (s, z) in sensors.iter().zip(&observations) {
            if (s.rows, s.cols, s.bands) != (rows, cols, basis.full_dim()) {
                return shape_err(format!(
                    "sensor {} consumes a {}x{}x{} grid, scene is {rows}x{cols}x{}",
                    s.name,
                    s.rows,
                    s.cols,
                    s.bands,
                    basis.full_dim()
                ));
            }
            if z.n_pixels() != s.out_pixels() || z.n_bands() != s.out_bands() {
                return shape_err(format!("observation for sensor {} has the wrong shape", s.name));
            }
            projected.push(s.through_subspace(&basis)?);
        }
        Ok(Self {
            rows,
            cols,
            basis,
            sensors: projected,
            observations,
            prior_mean,
            hyper,
            noise_mode: NoiseMode::default(),
            covariance_mode: CovarianceMode::default(),
            noise_prior: NoisePrior::default(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn n_pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn reduced_dim(&self) -> usize {
        self.basis.reduced_dim()
    }

    /// `M~`, the length of `u`.
    pub fn dim(&self) -> usize {
        self.n_pixels() * self.reduced_dim()
    }

    pub fn basis(&self) -> &SubspaceBasis {
        &self.basis
    }

    pub fn prior_mean(&self) -> &BipVector {
        &self.prior_mean
    }

    pub fn hyper(&self) -> &HyperParams {
        &self.hyper
    }

    pub fn n_sensors(&self) -> usize {
        self.sensors.len()
    }

    pub fn sensor(&self, p: usize) -> &SensorModel {
        self.sensors[p].sensor()
    }

    pub fn projected_sensor(&self, p: usize) -> &ProjectedSensor {
        &self.sensors[p]
    }

    pub fn observation(&self, p: usize) -> &BipVector {
        &self.observations[p]
    }

    /// Declared variances of every sensor, in sensor order.
    pub fn nominal_noise_variances(&self) -> NoiseVariances {
        self.sensors.iter().map(|s| s.sensor().noise_variances.clone()).collect()
    }

    pub(crate) fn check_u(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.dim() {
            return shape_err(format!("u has {} entries, model needs {}", u.len(), self.dim()));
        }
        Ok(())
    }

    pub(crate) fn check_noise(&self, noise: &[Vec<f64>]) -> Result<()> {
        if noise.len() != self.sensors.len() {
            return shape_err("one variance list per sensor required");
        }
        for (p, (v, s)) in noise.iter().zip(&self.sensors).enumerate() {
            if v.len() != s.sensor().out_bands() {
                return shape_err(format!("sensor {p}: {} variances for {} bands", v.len(), s.sensor().out_bands()));
            }
            if v.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
                return param_err(format!("sensor {p}: noise variances must be positive"));
            }
        }
        Ok(())
    }

    /// `z_p - F_p (V^T u + offset)` for sensor `p`.
    pub(crate) fn residual(&self, p: usize, u: &[f64]) -> Vec<f64> {
        let mut r = self.sensors[p].forward_slice(u);
        for (ri, zi) in r.iter_mut().zip(self.observations[p].as_slice()) {
            *ri = zi - *ri;
        }
        r
    }

    /// `||(z_p - F_p V^T u)_i||^2` for every sensor `p` and band `i`.
    pub fn residual_band_energies(&self, u: &BipVector) -> Result<Vec<Vec<f64>>> {
        self.check_u(u.as_slice())?;
        Ok((0..self.sensors.len()).map(|p| band_energies(&self.residual(p, u.as_slice()), self.sensor(p).out_bands())).collect())
    }
}

fn band_energies(r: &[f64], bands: usize) -> Vec<f64> {
    let mut e = vec![0.0; bands];
    for px in r.chunks_exact(bands) {
        for (acc, v) in e.iter_mut().zip(px) {
            *acc += v * v;
        }
    }
    e
}

/// One Gibbs iterate plus the stepsize-adaptation bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub u: BipVector,
    pub sigma_u: DMatrix<f64>,
    pub noise_vars: NoiseVariances,
    /// Jeffreys-level noise scale, present only under [`NoisePrior::Hierarchical`].
    #[serde(default)]
    pub gamma: Option<f64>,
    pub epsilon: f64,
    /// Most recent accept/reject decisions, oldest first.
    pub accept_window: VecDeque<bool>,
    pub iteration: u64,
}

impl ChainState {
    pub fn validate(&self, model: &HierModel) -> Result<()> {
        model.check_u(self.u.as_slice())?;
        model.check_noise(&self.noise_vars)?;
        let d = model.reduced_dim();
        if self.sigma_u.shape() != (d, d) || Cholesky::new(self.sigma_u.clone()).is_none() {
            return param_err("Sigma_u must be a positive-definite matrix of the subspace size");
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return param_err("stepsize must be positive");
        }
        Ok(())
    }
}

/// `log f(z | u, s^2)`, Gaussian with per-band variances.
pub fn log_likelihood(model: &HierModel, u: &BipVector, noise_vars: &[Vec<f64>]) -> Result<f64> {
    model.check_u(u.as_slice())?;
    model.check_noise(noise_vars)?;
    let mut ll = 0.0;
    for (p, vars) in noise_vars.iter().enumerate() {
        let n = model.sensor(p).out_pixels() as f64;
        let energy = band_energies(&model.residual(p, u.as_slice()), vars.len());
        for (e, s2) in energy.iter().zip(vars) {
            ll -= 0.5 * n * (2.0 * PI * s2).ln() + 0.5 * e / s2;
        }
    }
    Ok(ll)
}

/// The Gaussian conditional of `u` given `Sigma_u` and `s^2`, as an HMC target.
///
/// Holds `Sigma_u^{-1}` from a Cholesky factorization computed once, so each
/// leapfrog step costs one forward and one adjoint per sensor.
#[derive(Debug, Clone)]
pub struct ConditionalTarget<'a> {
    model: &'a HierModel,
    precision: Vec<f64>,
    inv_vars: Vec<Vec<f64>>,
    likelihood_norm: f64,
}

impl<'a> ConditionalTarget<'a> {
    pub fn new(model: &'a HierModel, sigma_u: &DMatrix<f64>, noise_vars: &[Vec<f64>]) -> Result<Self> {
        model.check_noise(noise_vars)?;
        let d = model.reduced_dim();
        if sigma_u.shape() != (d, d) {
            return shape_err(format!("Sigma_u must be {d}x{d}"));
        }
        let chol = Cholesky::new(sigma_u.clone())
            .ok_or_else(|| FusionError::Numerical("Sigma_u is not positive definite".into()))?;
        let inv = chol.inverse();
        let precision = (0..d * d).map(|i| 0.5 * (inv[(i / d, i % d)] + inv[(i % d, i / d)])).collect();
        let mut likelihood_norm = 0.0;
        for (p, vars) in noise_vars.iter().enumerate() {
            let n = model.sensor(p).out_pixels() as f64;
            likelihood_norm += vars.iter().map(|s2| 0.5 * n * (2.0 * PI * s2).ln()).sum::<f64>();
        }
        Ok(Self {
            model,
            precision,
            inv_vars: noise_vars.iter().map(|v| v.iter().map(|s| 1.0 / s).collect()).collect(),
            likelihood_norm,
        })
    }

    pub fn model(&self) -> &HierModel {
        self.model
    }

    /// Applies `Sigma_u^{-1}` to `(u_i - mu_i)` for every pixel, accumulating
    /// into `out` and returning the quadratic form.
    fn prior_term(&self, u: &[f64], out: Option<&mut [f64]>) -> f64 {
        let d = self.model.reduced_dim();
        let mu = self.model.prior_mean.as_slice();
        let mut quad = 0.0;
        let mut diff = vec![0.0; d];
        let mut out = out;
        for (i, (ui, mi)) in u.chunks_exact(d).zip(mu.chunks_exact(d)).enumerate() {
            for k in 0..d {
                diff[k] = ui[k] - mi[k];
            }
            for r in 0..d {
                let row = &self.precision[r * d..(r + 1) * d];
                let pr: f64 = row.iter().zip(&diff).map(|(a, b)| a * b).sum();
                quad += diff[r] * pr;
                if let Some(g) = out.as_deref_mut() {
                    g[i * d + r] += pr;
                }
            }
        }
        quad
    }
}

impl PotentialTarget for ConditionalTarget<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn potential(&self, u: &[f64]) -> f64 {
        let mut misfit = 0.0;
        for (p, iv) in self.inv_vars.iter().enumerate() {
            let energy = band_energies(&self.model.residual(p, u), iv.len());
            misfit += energy.iter().zip(iv).map(|(e, w)| e * w).sum::<f64>();
        }
        self.likelihood_norm + 0.5 * misfit + 0.5 * self.prior_term(u, None)
    }

    fn gradient(&self, u: &[f64], grad: &mut [f64]) {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (p, iv) in self.inv_vars.iter().enumerate() {
            let mut r = self.model.residual(p, u);
            for px in r.chunks_exact_mut(iv.len()) {
                for (v, w) in px.iter_mut().zip(iv) {
                    *v *= w;
                }
            }
            let back = self.model.sensors[p].adjoint_slice(&r);
            for (g, b) in grad.iter_mut().zip(&back) {
                *g -= b;
            }
        }
        self.prior_term(u, Some(grad));
    }
}

/// `U(u) = -log f(z | u, s^2) + 1/2 sum_i (u_i - mu_i)^T Sigma_u^{-1} (u_i - mu_i)`.
pub fn potential_energy(model: &HierModel, state: &ChainState) -> Result<f64> {
    model.check_u(state.u.as_slice())?;
    let target = ConditionalTarget::new(model, &state.sigma_u, &state.noise_vars)?;
    Ok(target.potential(state.u.as_slice()))
}

pub fn grad_potential(model: &HierModel, state: &ChainState) -> Result<BipVector> {
    model.check_u(state.u.as_slice())?;
    let target = ConditionalTarget::new(model, &state.sigma_u, &state.noise_vars)?;
    let mut g = vec![0.0; model.dim()];
    target.gradient(state.u.as_slice(), &mut g);
    state.u.with_data(g)
}

/// Scale and degrees of freedom of the inverse-Wishart conditional of `Sigma_u`.
pub fn conditional_sigma_u_params(model: &HierModel, u: &BipVector) -> Result<(DMatrix<f64>, f64)> {
    model.check_u(u.as_slice())?;
    let d = model.reduced_dim();
    let mut scale = model.hyper.psi.clone();
    let mut diff = DVector::zeros(d);
    for (ui, mi) in u.pixels().zip(model.prior_mean.pixels()) {
        for k in 0..d {
            diff[k] = ui[k] - mi[k];
        }
        scale.syger(1.0, &diff, &diff, 1.0);
    }
    scale.fill_upper_triangle_with_lower_triangle();
    Ok((scale, model.n_pixels() as f64 + model.hyper.eta))
}

/// Shape and rate of the inverse-gamma conditional of `s^2_{p,band}`.
pub fn conditional_noise_var_params(model: &HierModel, u: &BipVector, p: usize, band: usize) -> Result<(f64, f64)> {
    model.check_u(u.as_slice())?;
    if p >= model.n_sensors() || band >= model.sensor(p).out_bands() {
        return shape_err(format!("no band {band} on sensor {p}"));
    }
    let energy = band_energies(&model.residual(p, u.as_slice()), model.sensor(p).out_bands());
    Ok((model.sensor(p).out_pixels() as f64 / 2.0, energy[band] / 2.0))
}

pub const DEFAULT_ORACLE_CAP: usize = 4096;

/// Dense mean and covariance of `u | Sigma_u, s^2, z` by explicit assembly.
///
/// Cost is cubic in `M~`; refuses above `cap`.
pub fn exact_conditional_gaussian(
    model: &HierModel,
    sigma_u: &DMatrix<f64>,
    noise_vars: &[Vec<f64>],
    cap: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = model.dim();
    if n > cap {
        return Err(FusionError::OracleCap { dim: n, cap });
    }
    let target = ConditionalTarget::new(model, sigma_u, noise_vars)?;
    let d = model.reduced_dim();

    let mut precision = DMatrix::zeros(n, n);
    for px in 0..model.n_pixels() {
        for r in 0..d {
            for c in 0..d {
                precision[(px * d + r, px * d + c)] = target.precision[r * d + c];
            }
        }
    }
    let zero = vec![0.0; n];
    let mut rhs = DVector::zeros(n);
    for (p, iv) in target.inv_vars.iter().enumerate() {
        let sensor = &model.sensors[p];
        let base = sensor.forward_slice(&zero);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let mut col = sensor.forward_slice(&e);
            e[j] = 0.0;
            for (px_c, px_b) in col.chunks_exact_mut(iv.len()).zip(base.chunks_exact(iv.len())) {
                for ((v, b), w) in px_c.iter_mut().zip(px_b).zip(iv) {
                    *v = (*v - b) * w;
                }
            }
            let back = sensor.adjoint_slice(&col);
            for (i, b) in back.iter().enumerate() {
                precision[(i, j)] += b;
            }
        }
        let mut wz: Vec<f64> = model.observations[p].as_slice().iter().zip(&base).map(|(z, b)| z - b).collect();
        for px in wz.chunks_exact_mut(iv.len()) {
            for (v, w) in px.iter_mut().zip(iv) {
                *v *= w;
            }
        }
        rhs += DVector::from_vec(sensor.adjoint_slice(&wz));
    }
    let mut prior_rhs = vec![0.0; n];
    let mu = model.prior_mean.as_slice();
    for (px, m) in mu.chunks_exact(d).enumerate() {
        for r in 0..d {
            prior_rhs[px * d + r] = (0..d).map(|c| target.precision[r * d + c] * m[c]).sum();
        }
    }
    rhs += DVector::from_vec(prior_rhs);

    let sym = 0.5 * (&precision + precision.transpose());
    let chol = Cholesky::new(sym).ok_or_else(|| FusionError::Numerical("posterior precision not PD".into()))?;
    let mean = chol.solve(&rhs);
    Ok((mean, chol.inverse()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{Boundary, SpatialBlur, SpectralResponse};
    use crate::testutil::random_orthonormal;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rvec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn random_spd(rng: &mut impl Rng, d: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(d, d) * 0.5
    }

    /// A tiny model with a decimating HS sensor and a blurring MS sensor.
    pub(crate) fn tiny_model(rng: &mut impl Rng, rows: usize, cols: usize, m: usize, d: usize, offset: bool) -> HierModel {
        let vmat = random_orthonormal(d, m, rng);
        let off = if offset { DVector::from_fn(m, |_, _| rng.random_range(0.0..1.0)) } else { DVector::zeros(m) };
        let basis = SubspaceBasis::with_offset(vmat, off).unwrap();
        let mut hs = SensorModel::builder("hs", rows, cols, m);
        if rows % 2 == 0 && cols % 2 == 0 {
            hs = hs.decimation(2);
        } else {
            hs = hs.blur(SpatialBlur::gaussian(3, 1.0, Boundary::Periodic).unwrap());
        }
        let hs = hs
            .noise_variances((0..m).map(|_| rng.random_range(0.1..0.5)).collect())
            .build()
            .unwrap();
        let resp = SpectralResponse::normalized(DMatrix::from_fn(2, m, |_, _| rng.random_range(0.0..1.0))).unwrap();
        let ms = SensorModel::builder("ms", rows, cols, m)
            .blur(SpatialBlur::gaussian(3, 0.7, Boundary::Symmetric).unwrap())
            .spectral(resp)
            .noise_variances(vec![0.2, 0.3])
            .build()
            .unwrap();
        let z_hs = BipVector::new(hs.out_pixels(), m, rvec(rng, hs.out_pixels() * m)).unwrap();
        let z_ms = BipVector::new(rows * cols, 2, rvec(rng, rows * cols * 2)).unwrap();
        let mu = BipVector::new(rows * cols, d, rvec(rng, rows * cols * d)).unwrap();
        HierModel::new(rows, cols, basis, mu, vec![hs, ms], vec![z_hs, z_ms], HyperParams::non_informative(d)).unwrap()
    }

    fn state_for(model: &HierModel, rng: &mut impl Rng) -> ChainState {
        ChainState {
            u: BipVector::new(model.n_pixels(), model.reduced_dim(), rvec(rng, model.dim())).unwrap(),
            sigma_u: random_spd(rng, model.reduced_dim()),
            noise_vars: model.nominal_noise_variances(),
            gamma: None,
            epsilon: 0.1,
            accept_window: VecDeque::new(),
            iteration: 0,
        }
    }

    /// Explicit sensor matrix built by looping over the definition, independent
    /// of the operator code paths.
    fn explicit_matrix(s: &SensorModel) -> DMatrix<f64> {
        let (rows, cols, m) = (s.rows, s.cols, s.bands);
        let nb = s.out_bands();
        let spec = s.spectral.as_ref().map_or(DMatrix::identity(m, m), |r| r.matrix().clone());
        let mut spatial = DMatrix::<f64>::identity(rows * cols, rows * cols);
        if let Some(b) = &s.blur {
            let mut blur = DMatrix::<f64>::zeros(rows * cols, rows * cols);
            let h = (b.size() / 2) as isize;
            for r in 0..rows as isize {
                for c in 0..cols as isize {
                    for a in 0..b.size() as isize {
                        for bb in 0..b.size() as isize {
                            let (mut sr, mut sc) = (r - (a - h), c - (bb - h));
                            // symmetric reflection for small offsets
                            if sr < 0 { sr = -sr - 1; }
                            if sr >= rows as isize { sr = 2 * rows as isize - sr - 1; }
                            if sc < 0 { sc = -sc - 1; }
                            if sc >= cols as isize { sc = 2 * cols as isize - sc - 1; }
                            blur[((r * cols as isize + c) as usize, (sr * cols as isize + sc) as usize)] +=
                                b.kernel()[(a * b.size() as isize + bb) as usize];
                        }
                    }
                }
            }
            spatial = blur * spatial;
        }
        if let Some(dec) = s.decimation {
            let f = dec.factor;
            let (orows, ocols) = (rows / f, cols / f);
            let mut dm = DMatrix::zeros(orows * ocols, rows * cols);
            for r in 0..rows {
                for c in 0..cols {
                    dm[((r / f) * ocols + c / f, r * cols + c)] = 1.0 / (f * f) as f64;
                }
            }
            spatial = dm * spatial;
        }
        // BIP: spatial (x) spectral
        { let _ = nb; spatial.kronecker(&spec) }
    }

    fn block_lift(model: &HierModel) -> (DMatrix<f64>, DVector<f64>) {
        let n = model.n_pixels();
        let lift = DMatrix::identity(n, n).kronecker(&model.basis().matrix().transpose());
        let off = DVector::from_iterator(n * model.basis().full_dim(), (0..n).flat_map(|_| model.basis().offset().iter().copied()));
        (lift, off)
    }

    /// Dense multivariate-normal log density of all observations.
    fn dense_loglik(model: &HierModel, u: &[f64], noise: &[Vec<f64>]) -> f64 {
        let (lift, off) = block_lift(model);
        let x = &lift * DVector::from_column_slice(u) + off;
        let mut ll = 0.0;
        for p in 0..model.n_sensors() {
            let f = explicit_matrix(model.sensor(p));
            let mean = &f * &x;
            let nb = noise[p].len();
            let lambda = DVector::from_fn(mean.len(), |i, _| noise[p][i % nb]);
            let r = DVector::from_column_slice(model.observation(p).as_slice()) - mean;
            let k = r.len() as f64;
            ll += -0.5 * k * (2.0 * PI).ln() - 0.5 * lambda.iter().map(|v| v.ln()).sum::<f64>()
                - 0.5 * r.iter().zip(lambda.iter()).map(|(a, l)| a * a / l).sum::<f64>();
        }
        ll
    }

    /// Dense conditional Gaussian from explicit matrices.
    fn dense_conditional(model: &HierModel, sigma: &DMatrix<f64>, noise: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
        let (lift, off) = block_lift(model);
        let n = model.n_pixels();
        let sig_inv = sigma.clone().try_inverse().unwrap();
        let mut prec = DMatrix::identity(n, n).kronecker(&sig_inv);
        let mut rhs = &prec * DVector::from_column_slice(model.prior_mean().as_slice());
        for p in 0..model.n_sensors() {
            let g = explicit_matrix(model.sensor(p)) * &lift;
            let nb = noise[p].len();
            let w = DMatrix::from_diagonal(&DVector::from_fn(g.nrows(), |i, _| 1.0 / noise[p][i % nb]));
            let zeff = DVector::from_column_slice(model.observation(p).as_slice()) - explicit_matrix(model.sensor(p)) * &off;
            prec += g.transpose() * &w * &g;
            rhs += g.transpose() * &w * zeff;
        }
        let cov = prec.try_inverse().unwrap();
        (&cov * rhs, cov)
    }

    #[test]
    fn zero_residual_unit_variance_likelihood() {
        let m = 3;
        let s = SensorModel::builder("id", 2, 2, m).spectral(SpectralResponse::identity(m)).build().unwrap();
        let basis = SubspaceBasis::identity(m);
        let u = BipVector::new(4, m, (0..12).map(f64::from).collect()).unwrap();
        let z = s.apply_forward(&u).unwrap();
        let model = HierModel::new(2, 2, basis, u.clone(), vec![s], vec![z], HyperParams::non_informative(m)).unwrap();
        let n = 12.0;
        let ll = log_likelihood(&model, &u, &[vec![1.0; m]]).unwrap();
        assert!((ll + 0.5 * n * (2.0 * PI).ln()).abs() < 1e-12);
        let ll2 = log_likelihood(&model, &u, &[vec![2.0; m]]).unwrap();
        assert!((ll - ll2 - 0.5 * n * 2f64.ln()).abs() < 1e-12);

        // potential at u = mu with zero residual is the likelihood normalization
        let state = ChainState {
            u: u.clone(),
            sigma_u: DMatrix::identity(m, m),
            noise_vars: vec![vec![1.0; m]],
            gamma: None,
            epsilon: 0.1,
            accept_window: VecDeque::new(),
            iteration: 0,
        };
        assert!((potential_energy(&model, &state).unwrap() + ll).abs() < 1e-12);
    }

    #[test]
    fn likelihood_matches_dense_mvn() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for offset in [false, true] {
            let model = tiny_model(&mut rng, 4, 4, 5, 3, offset);
            let st = state_for(&model, &mut rng);
            let ll = log_likelihood(&model, &st.u, &st.noise_vars).unwrap();
            let oracle = dense_loglik(&model, st.u.as_slice(), &st.noise_vars);
            assert!((ll - oracle).abs() < 1e-9 * oracle.abs().max(1.0), "{ll} vs {oracle}");
        }
    }

    #[test]
    fn likelihood_rejects_bad_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let model = tiny_model(&mut rng, 2, 2, 3, 2, false);
        let st = state_for(&model, &mut rng);
        let mut nv = st.noise_vars.clone();
        nv[1][0] = 0.0;
        assert!(matches!(log_likelihood(&model, &st.u, &nv), Err(FusionError::Parameter(_))));
    }

    #[test]
    fn potential_is_quadratic_along_lines() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let model = tiny_model(&mut rng, 4, 4, 4, 2, true);
        let st = state_for(&model, &mut rng);
        let t = ConditionalTarget::new(&model, &st.sigma_u, &st.noise_vars).unwrap();
        let dir = rvec(&mut rng, model.dim());
        let at = |s: f64| {
            let u: Vec<f64> = st.u.as_slice().iter().zip(&dir).map(|(a, b)| a + s * b).collect();
            t.potential(&u)
        };
        let h = 0.3;
        let sd: Vec<f64> = (0..5).map(|k| {
            let s = k as f64 * 0.7 - 1.0;
            at(s + h) - 2.0 * at(s) + at(s - h)
        }).collect();
        for v in &sd {
            assert!((v - sd[0]).abs() < 1e-8 * sd[0].abs().max(1.0));
        }
    }

    #[test]
    fn potential_differences_match_dense_conditional() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let model = tiny_model(&mut rng, 4, 4, 4, 2, true);
        let st = state_for(&model, &mut rng);
        let (mean, cov) = dense_conditional(&model, &st.sigma_u, &st.noise_vars);
        let prec = cov.try_inverse().unwrap();
        let t = ConditionalTarget::new(&model, &st.sigma_u, &st.noise_vars).unwrap();
        let neg_log = |u: &DVector<f64>| 0.5 * ((u - &mean).transpose() * &prec * (u - &mean))[(0, 0)];
        let base = DVector::from_column_slice(st.u.as_slice());
        for _ in 0..5 {
            let other = DVector::from_vec(rvec(&mut rng, model.dim()));
            let lhs = t.potential(other.as_slice()) - t.potential(base.as_slice());
            let rhs = neg_log(&other) - neg_log(&base);
            assert!((lhs - rhs).abs() < 1e-8 * rhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let model = tiny_model(&mut rng, 3, 3, 4, 3, true);
        let st = state_for(&model, &mut rng);
        let t = ConditionalTarget::new(&model, &st.sigma_u, &st.noise_vars).unwrap();
        let g = grad_potential(&model, &st).unwrap();
        let mut u = st.u.as_slice().to_vec();
        for j in 0..model.dim() {
            let h = 1e-5 * u[j].abs().max(1.0);
            let orig = u[j];
            u[j] = orig + h;
            let up = t.potential(&u);
            u[j] = orig - h;
            let dn = t.potential(&u);
            u[j] = orig;
            let fd = (up - dn) / (2.0 * h);
            let rel = (fd - g.as_slice()[j]).abs() / g.as_slice()[j].abs().max(1e-2);
            assert!(rel < 1e-6, "coord {j}: {fd} vs {}", g.as_slice()[j]);
        }
    }

    #[test]
    fn gradient_vanishes_at_conditional_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let model = tiny_model(&mut rng, 4, 4, 5, 3, true);
        let mut st = state_for(&model, &mut rng);
        let (mean, cov) = exact_conditional_gaussian(&model, &st.sigma_u, &st.noise_vars, DEFAULT_ORACLE_CAP).unwrap();
        let (dm, dc) = dense_conditional(&model, &st.sigma_u, &st.noise_vars);
        assert!((&mean - &dm).amax() < 1e-9);
        assert!((&cov - &dc).amax() < 1e-9);
        st.u = st.u.with_data(mean.as_slice().to_vec()).unwrap();
        let g = grad_potential(&model, &st).unwrap();
        assert!(g.as_slice().iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn prior_only_gradient_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let d = 3;
        let mu = BipVector::new(4, d, rvec(&mut rng, 12)).unwrap();
        let model = HierModel::new(2, 2, SubspaceBasis::identity(d), mu.clone(), vec![], vec![], HyperParams::non_informative(d)).unwrap();
        let sigma = random_spd(&mut rng, d);
        let st = ChainState {
            u: BipVector::new(4, d, rvec(&mut rng, 12)).unwrap(),
            sigma_u: sigma.clone(),
            noise_vars: vec![],
            gamma: None,
            epsilon: 0.1,
            accept_window: VecDeque::new(),
            iteration: 0,
        };
        let g = grad_potential(&model, &st).unwrap();
        let inv = sigma.clone().try_inverse().unwrap();
        for i in 0..4 {
            let diff = DVector::from_iterator(d, st.u.pixel(i).iter().zip(mu.pixel(i)).map(|(a, b)| a - b));
            let expect = &inv * diff;
            for k in 0..d {
                assert!((g.pixel(i)[k] - expect[k]).abs() < 1e-12);
            }
        }
        let (mean, cov) = exact_conditional_gaussian(&model, &sigma, &[], DEFAULT_ORACLE_CAP).unwrap();
        assert!((mean - DVector::from_column_slice(mu.as_slice())).amax() < 1e-12);
        let block = cov.view((0, 0), (d, d)).into_owned();
        assert!((block - sigma).amax() < 1e-10);
        assert!(cov[(0, d)].abs() < 1e-12);
    }

    #[test]
    fn scalar_conjugate_posterior() {
        let (z, mu, s2, t2) = (2.0, -1.0, 0.5, 2.0);
        let s = SensorModel::builder("id", 1, 1, 1).spectral(SpectralResponse::identity(1)).noise_variances(vec![s2]).build().unwrap();
        let model = HierModel::new(
            1, 1,
            SubspaceBasis::identity(1),
            BipVector::new(1, 1, vec![mu]).unwrap(),
            vec![s],
            vec![BipVector::new(1, 1, vec![z]).unwrap()],
            HyperParams::non_informative(1),
        ).unwrap();
        let (mean, cov) = exact_conditional_gaussian(&model, &DMatrix::from_element(1, 1, t2), &[vec![s2]], 16).unwrap();
        let expect = (z / s2 + mu / t2) / (1.0 / s2 + 1.0 / t2);
        assert!((mean[0] - expect).abs() < 1e-14);
        assert!((cov[(0, 0)] - 1.0 / (1.0 / s2 + 1.0 / t2)).abs() < 1e-14);
    }

    #[test]
    fn oracle_refuses_large_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let model = tiny_model(&mut rng, 4, 4, 4, 2, false);
        let st = state_for(&model, &mut rng);
        assert!(matches!(
            exact_conditional_gaussian(&model, &st.sigma_u, &st.noise_vars, 8),
            Err(FusionError::OracleCap { dim: 32, cap: 8 })
        ));
    }

    #[test]
    fn sigma_conditional_params() {
        let mu = BipVector::new(1, 1, vec![1.0]).unwrap();
        let mut hyper = HyperParams::non_informative(1);
        hyper.eta = 4.0;
        let model = HierModel::new(1, 1, SubspaceBasis::identity(1), mu.clone(), vec![], vec![], hyper).unwrap();
        let (s, k) = conditional_sigma_u_params(&model, &mu).unwrap();
        assert_eq!((s[(0, 0)], k), (1.0, 5.0));
        let u = BipVector::new(1, 1, vec![4.0]).unwrap();
        let (s, k) = conditional_sigma_u_params(&model, &u).unwrap();
        assert_eq!((s[(0, 0)], k), (10.0, 5.0));
    }

    #[test]
    fn sigma_scatter_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let model = tiny_model(&mut rng, 4, 4, 5, 3, false);
        let st = state_for(&model, &mut rng);
        let (s, k) = conditional_sigma_u_params(&model, &st.u).unwrap();
        let mut naive = model.hyper().psi.clone();
        for i in 0..model.n_pixels() {
            let diff = DVector::from_iterator(3, st.u.pixel(i).iter().zip(model.prior_mean().pixel(i)).map(|(a, b)| a - b));
            naive += &diff * diff.transpose();
        }
        assert!((s.clone() - naive).amax() < 1e-12);
        assert_eq!(k, 16.0 + 6.0);
        assert!(Cholesky::new(s).is_some());
    }

    #[test]
    fn noise_conditional_params() {
        let s = SensorModel::builder("id", 1, 2, 1).spectral(SpectralResponse::identity(1)).build().unwrap();
        let model = HierModel::new(
            1, 2,
            SubspaceBasis::identity(1),
            BipVector::zeros(2, 1),
            vec![s],
            vec![BipVector::new(2, 1, vec![3.0, 4.0]).unwrap()],
            HyperParams::non_informative(1),
        ).unwrap();
        let (a, b) = conditional_noise_var_params(&model, &BipVector::zeros(2, 1), 0, 0).unwrap();
        assert_eq!((a, b), (1.0, 12.5));
        let exact = BipVector::new(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(conditional_noise_var_params(&model, &exact, 0, 0).unwrap().1, 0.0);
        assert!(conditional_noise_var_params(&model, &exact, 1, 0).is_err());
    }

    #[test]
    fn noise_rate_matches_dense_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let model = tiny_model(&mut rng, 4, 4, 4, 2, true);
        let st = state_for(&model, &mut rng);
        let (lift, off) = block_lift(&model);
        let x = &lift * DVector::from_column_slice(st.u.as_slice()) + off;
        for p in 0..model.n_sensors() {
            let r = DVector::from_column_slice(model.observation(p).as_slice()) - explicit_matrix(model.sensor(p)) * &x;
            let nb = model.sensor(p).out_bands();
            for band in 0..nb {
                let e: f64 = r.iter().skip(band).step_by(nb).map(|v| v * v).sum();
                let (_, rate) = conditional_noise_var_params(&model, &st.u, p, band).unwrap();
                assert!((rate - e / 2.0).abs() < 1e-12 * e.max(1.0));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn likelihood_invariant_to_sensor_order(seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = tiny_model(&mut rng, 4, 2, 3, 2, true);
            let st = state_for(&model, &mut rng);
            let sensors: Vec<_> = (0..2).rev().map(|p| model.sensor(p).clone()).collect();
            let obs: Vec<_> = (0..2).rev().map(|p| model.observation(p).clone()).collect();
            let swapped = HierModel::new(4, 2, model.basis().clone(), model.prior_mean().clone(), sensors, obs, model.hyper().clone()).unwrap();
            let nv: Vec<_> = st.noise_vars.iter().rev().cloned().collect();
            let a = log_likelihood(&model, &st.u, &st.noise_vars).unwrap();
            let b = log_likelihood(&swapped, &st.u, &nv).unwrap();
            prop_assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
        }
    }
}
