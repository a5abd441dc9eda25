//! Self-checks run by `bayesfuse validate`: each compares the implementation
//! against an independent oracle on small random instances.

use std::time::Instant;

use bayesfuse_core::forward::{Boundary, SensorModel, SpatialBlur, SpectralResponse};
use bayesfuse_core::model::{exact_conditional_gaussian, ConditionalTarget, CovarianceMode, HierModel, HyperParams, NoiseMode, DEFAULT_ORACLE_CAP};
use bayesfuse_core::sampler::{initial_state, leapfrog, run_gibbs, sample_inverse_gamma, sample_inverse_wishart, sample_std_gaussian_vec, PotentialTarget, SamplerConfig};
use bayesfuse_core::{BipVector, Result, SubspaceBasis};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// The measured quantity compared against `threshold`.
    pub metric: f64,
    pub threshold: f64,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub seed: u64,
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn failures(&self) -> Vec<String> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ValidateOptions {
    pub seed: u64,
    /// Corrupts the analytic gradient so the gradient check must fail.
    pub inject_gradient_fault: bool,
}

fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// A random `reduced x full` matrix with orthonormal rows.
pub fn random_orthonormal(reduced: usize, full: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let g = DMatrix::from_vec(full, reduced, sample_std_gaussian_vec(full * reduced, rng));
    g.qr().q().transpose()
}

pub fn random_spd(dim: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let a = DMatrix::from_vec(dim, dim, sample_std_gaussian_vec(dim * dim, rng));
    &a * a.transpose() / dim as f64 + DMatrix::identity(dim, dim) * 0.5
}

/// Random model on a `rows x cols x bands` scene with a `reduced`-dim
/// subspace. The first sensor decimates by 2 (or blurs periodically when the
/// grid is odd); the second blurs and applies a 2-band response.
pub fn random_instance(rng: &mut impl Rng, rows: usize, cols: usize, bands: usize, reduced: usize, n_sensors: usize) -> Result<HierModel> {
    let basis = SubspaceBasis::with_offset(random_orthonormal(reduced, bands, rng), DVector::from_vec(uniform(rng, bands, 0.0, 1.0)))?;
    let mut all = Vec::new();
    let hs = SensorModel::builder("hs", rows, cols, bands);
    let hs = if rows % 2 == 0 && cols % 2 == 0 { hs.decimation(2) } else { hs.blur(SpatialBlur::gaussian(3, 1.0, Boundary::Periodic)?) };
    all.push(hs.noise_variances(uniform(rng, bands, 0.1, 0.5)).build()?);
    let resp = SpectralResponse::normalized(DMatrix::from_vec(2, bands, uniform(rng, 2 * bands, 0.0, 1.0)))?;
    all.push(
        SensorModel::builder("ms", rows, cols, bands)
            .blur(SpatialBlur::gaussian(3, 0.7, Boundary::Symmetric)?)
            .spectral(resp)
            .noise_variances(uniform(rng, 2, 0.1, 0.5))
            .build()?,
    );
    let sensors: Vec<SensorModel> = match n_sensors {
        1 => vec![all.swap_remove(rng.random_range(0..2))],
        _ => all,
    };
    let observations = sensors
        .iter()
        .map(|s| BipVector::new(s.out_pixels(), s.out_bands(), uniform(rng, s.out_pixels() * s.out_bands(), -1.0, 2.0)))
        .collect::<Result<Vec<_>>>()?;
    let mu = BipVector::new(rows * cols, reduced, uniform(rng, rows * cols * reduced, -1.0, 1.0))?;
    HierModel::new(rows, cols, basis, mu, sensors, observations, HyperParams::non_informative(reduced))
}

struct Faulty<'a>(ConditionalTarget<'a>);

impl PotentialTarget for Faulty<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn potential(&self, u: &[f64]) -> f64 {
        self.0.potential(u)
    }
    fn gradient(&self, u: &[f64], grad: &mut [f64]) {
        self.0.gradient(u, grad);
        grad[0] += 1e-3 * (1.0 + grad[0].abs());
    }
}

/// Largest eigenvalue of the (constant) Hessian of a quadratic target.
fn max_curvature(target: &dyn PotentialTarget, rng: &mut impl Rng) -> f64 {
    let n = target.dim();
    let base = vec![0.0; n];
    let mut g0 = vec![0.0; n];
    target.gradient(&base, &mut g0);
    let mut v = sample_std_gaussian_vec(n, rng);
    let mut lambda = 0.0;
    let mut g = vec![0.0; n];
    for _ in 0..200 {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        target.gradient(&v, &mut g);
        let hv: Vec<f64> = g.iter().zip(&g0).map(|(a, b)| a - b).collect();
        lambda = hv.iter().zip(&v).map(|(a, b)| a * b).sum();
        v = hv;
    }
    lambda
}

/// Max over 20 random instances of the per-coordinate relative error between
/// the analytic gradient and central differences. Errors are scaled by
/// `max(|g_j|, 1e-3 * max_k |g_k|)` so near-zero coordinates don't dominate.
pub fn gradient_check(seed: u64, inject_fault: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let rows = rng.random_range(1..=4);
        let cols = rng.random_range(1..=4);
        let reduced = rng.random_range(1..=4);
        let bands = reduced + rng.random_range(0..=3);
        let n_sensors = rng.random_range(1..=2);
        let model = random_instance(&mut rng, rows, cols, bands, reduced, n_sensors)?;
        let sigma = random_spd(reduced, &mut rng);
        let target = ConditionalTarget::new(&model, &sigma, &model.nominal_noise_variances())?;
        let target: Box<dyn PotentialTarget> = if inject_fault { Box::new(Faulty(target)) } else { Box::new(target) };
        let u = uniform(&mut rng, model.dim(), -1.0, 1.0);
        let mut g = vec![0.0; u.len()];
        target.gradient(&u, &mut g);
        let scale = 1e-3 * g.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
        for j in 0..u.len() {
            let h = 1e-4 * u[j].abs().max(1.0);
            let (mut up, mut dn) = (u.clone(), u.clone());
            up[j] += h;
            dn[j] -= h;
            let fd = (target.potential(&up) - target.potential(&dn)) / (2.0 * h);
            worst = worst.max((fd - g[j]).abs() / g[j].abs().max(scale));
        }
    }
    Ok(worst)
}

/// Largest `|A x . y - x . A^T y|` relative to `|A x| |y|` over both sensors of
/// several random instances.
pub fn adjoint_check(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (rows, cols) in [(4, 4), (3, 5), (6, 2)] {
        let model = random_instance(&mut rng, rows, cols, 5, 3, 2)?;
        for p in 0..model.n_sensors() {
            let s = model.sensor(p);
            let x = BipVector::new(rows * cols, s.bands, sample_std_gaussian_vec(rows * cols * s.bands, &mut rng))?;
            let y = BipVector::new(s.out_pixels(), s.out_bands(), sample_std_gaussian_vec(s.out_pixels() * s.out_bands(), &mut rng))?;
            let ax = s.apply_forward(&x)?;
            let aty = s.apply_adjoint(&y)?;
            let lhs = ax.dot(&y);
            let rhs = x.dot(&aty);
            worst = worst.max((lhs - rhs).abs() / (ax.norm_squared().sqrt() * y.norm_squared().sqrt()));
        }
    }
    Ok(worst)
}

pub struct Moments {
    /// Largest `|sample mean - exact mean| / standard error` over all entries.
    pub max_z: f64,
}

/// Inverse-gamma mean against `b / (a - 1)`.
pub fn inverse_gamma_moments(seed: u64, draws: usize) -> Result<Moments> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = (5.0, 3.0);
    let xs = (0..draws).map(|_| sample_inverse_gamma(a, b, 0.0, &mut rng)).collect::<Result<Vec<_>>>()?;
    Ok(Moments { max_z: z_score(&xs, b / (a - 1.0)) })
}

/// Inverse-Wishart entrywise mean against `S / (k - dim - 1)`.
pub fn inverse_wishart_moments(seed: u64, draws: usize, dim: usize) -> Result<Moments> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = random_spd(dim, &mut rng);
    let dof = dim as f64 + 6.0;
    let mut entries = vec![Vec::with_capacity(draws); dim * dim];
    for _ in 0..draws {
        let w = sample_inverse_wishart(&scale, dof, &mut rng)?;
        for (k, e) in entries.iter_mut().enumerate() {
            e.push(w[(k / dim, k % dim)]);
        }
    }
    let expect = &scale / (dof - dim as f64 - 1.0);
    let max_z = entries.iter().enumerate().map(|(k, e)| z_score(e, expect[(k / dim, k % dim)])).fold(0.0, f64::max);
    Ok(Moments { max_z })
}

fn z_score(xs: &[f64], expect: f64) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean - expect).abs() / (var / n).sqrt()
}

pub struct HmcBattery {
    pub reversibility: f64,
    /// `sum |dH(eps)| / sum |dH(eps/2)|` at fixed trajectory length.
    pub halving_ratio: f64,
    /// `|mean exp(-dH) - 1|` in standard errors.
    pub exp_identity_z: f64,
}

pub fn hmc_battery(seed: u64, iterations: usize) -> Result<HmcBattery> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = random_instance(&mut rng, 2, 2, 4, 2, 2)?;
    let sigma = random_spd(2, &mut rng);
    let noise = model.nominal_noise_variances();
    let target = ConditionalTarget::new(&model, &sigma, &noise)?;
    let n = model.dim();
    let lambda = max_curvature(&target, &mut rng);
    let h = |u: &[f64], m: &[f64]| target.potential(u) + 0.5 * m.iter().map(|v| v * v).sum::<f64>();

    let mut reversibility = 0.0f64;
    for _ in 0..5 {
        let u = uniform(&mut rng, n, -1.0, 1.0);
        let m = sample_std_gaussian_vec(n, &mut rng);
        let fwd = leapfrog(&target, &u, &m, 0.3 / lambda.sqrt(), 25);
        let neg: Vec<f64> = fwd.momentum.iter().map(|v| -v).collect();
        let back = leapfrog(&target, &fwd.position, &neg, 0.3 / lambda.sqrt(), 25);
        let pos = back.position.iter().zip(&u).map(|(a, b)| (a - b).abs());
        let mom = back.momentum.iter().zip(&m).map(|(a, b)| (a + b).abs());
        reversibility = pos.chain(mom).fold(reversibility, f64::max);
    }

    let eps = 0.05 / lambda.sqrt();
    let (mut coarse, mut fine) = (0.0, 0.0);
    for _ in 0..10 {
        let u = uniform(&mut rng, n, -1.0, 1.0);
        let m = sample_std_gaussian_vec(n, &mut rng);
        let h0 = h(&u, &m);
        let a = leapfrog(&target, &u, &m, eps, 20);
        let b = leapfrog(&target, &u, &m, eps / 2.0, 40);
        coarse += (h(&a.position, &a.momentum) - h0).abs();
        fine += (h(&b.position, &b.momentum) - h0).abs();
    }

    // exact draws from the target via the dense oracle
    let (mean, cov) = exact_conditional_gaussian(&model, &sigma, &noise, DEFAULT_ORACLE_CAP)?;
    let chol = cov.cholesky().ok_or_else(|| bayesfuse_core::FusionError::Numerical("oracle covariance not SPD".into()))?;
    let l = chol.l();
    let eps = 0.5 / lambda.sqrt();
    let mut w = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let z = DVector::from_vec(sample_std_gaussian_vec(n, &mut rng));
        let u = &mean + &l * z;
        let m = sample_std_gaussian_vec(n, &mut rng);
        let t = leapfrog(&target, u.as_slice(), &m, eps, 10);
        w.push((-(h(&t.position, &t.momentum) - h(u.as_slice(), &m))).exp());
    }
    Ok(HmcBattery { reversibility, halving_ratio: coarse / fine, exp_identity_z: z_score(&w, 1.0) })
}

pub struct PosteriorOracle {
    pub dim: usize,
    /// Largest `|chain mean - oracle mean| / batch-means standard error`.
    pub max_mean_z: f64,
    /// Mean of the squared standardized errors; near 1 for a correct chain.
    pub mean_z2: f64,
    /// Largest `|chain var / oracle var - 1|`.
    pub max_var_rel: f64,
}

/// With `Sigma_u` and `s^2` fixed the `u`-chain must target the Gaussian given
/// by dense assembly.
pub fn posterior_oracle(seed: u64, kept: usize) -> Result<PosteriorOracle> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = random_instance(&mut rng, 4, 4, 4, 2, 2)?;
    model.noise_mode = NoiseMode::Fixed;
    model.covariance_mode = CovarianceMode::Fixed;
    let config = SamplerConfig { n_bi: 500, n_mc: kept, thin: 1, seed, ..Default::default() };
    let init = initial_state(&model, &config)?;
    let (mean, cov) = exact_conditional_gaussian(&model, &init.sigma_u, &init.noise_vars, DEFAULT_ORACLE_CAP)?;
    let out = run_gibbs(&model, &config)?;

    let n = model.dim();
    let batches = 50;
    let per = kept / batches;
    let mut max_mean_z = 0.0f64;
    let mut max_var_rel = 0.0f64;
    let mut z2 = 0.0;
    for j in 0..n {
        let xs: Vec<f64> = out.samples.iter().map(|s| s.as_slice()[j]).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let bm: Vec<f64> = xs.chunks_exact(per).map(|c| c.iter().sum::<f64>() / per as f64).collect();
        let bvar = bm.iter().map(|b| (b - m).powi(2)).sum::<f64>() / (bm.len() - 1) as f64;
        let se = (bvar / bm.len() as f64).sqrt();
        let z = (m - mean[j]) / se;
        z2 += z * z;
        max_mean_z = max_mean_z.max(z.abs());
        max_var_rel = max_var_rel.max((out.variance_u[j] / cov[(j, j)] - 1.0).abs());
    }
    Ok(PosteriorOracle { dim: n, max_mean_z, mean_z2: z2 / n as f64, max_var_rel })
}

fn timed(name: &str, threshold: f64, f: impl FnOnce() -> Result<(f64, String)>) -> CheckResult {
    let start = Instant::now();
    let (metric, detail) = match f() {
        Ok(v) => v,
        Err(e) => (f64::NAN, format!("error: {e}")),
    };
    CheckResult {
        name: name.into(),
        passed: metric <= threshold,
        metric,
        threshold,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn run_validation(opts: &ValidateOptions) -> ValidationReport {
    let s = opts.seed;
    let mut checks = vec![
        timed("adjoint", 1e-10, || Ok((adjoint_check(s)?, "max |<Ax,y> - <x,A'y>| / (|Ax||y|)".into()))),
        timed("gradient", 1e-6, || {
            Ok((gradient_check(s, opts.inject_gradient_fault)?, "max relative error vs central differences, 20 instances".into()))
        }),
        timed("inverse_gamma_mean", 3.0, || {
            Ok((inverse_gamma_moments(s, 100_000)?.max_z, "standard errors from b/(a-1), 1e5 draws".into()))
        }),
        timed("inverse_wishart_mean", 3.0, || {
            Ok((inverse_wishart_moments(s, 100_000, 3)?.max_z, "max entrywise standard errors from S/(k-d-1), 1e5 draws".into()))
        }),
    ];
    let start = Instant::now();
    match hmc_battery(s, 10_000) {
        Ok(b) => {
            let seconds = start.elapsed().as_secs_f64();
            checks.push(CheckResult {
                name: "leapfrog_reversibility".into(),
                passed: b.reversibility <= 1e-8,
                metric: b.reversibility,
                threshold: 1e-8,
                detail: "max abs deviation after forward and reversed trajectories".into(),
                seconds,
            });
            checks.push(CheckResult {
                name: "leapfrog_second_order".into(),
                passed: (3.5..=4.5).contains(&b.halving_ratio),
                metric: b.halving_ratio,
                threshold: 4.5,
                detail: "energy error ratio when halving the stepsize; must lie in [3.5, 4.5]".into(),
                seconds,
            });
            checks.push(CheckResult {
                name: "hmc_exp_identity".into(),
                passed: b.exp_identity_z <= 3.0,
                metric: b.exp_identity_z,
                threshold: 3.0,
                detail: "standard errors of mean exp(-dH) from 1, 1e4 trajectories".into(),
                seconds,
            });
        }
        Err(e) => checks.push(CheckResult {
            name: "hmc_battery".into(),
            passed: false,
            metric: f64::NAN,
            threshold: 0.0,
            detail: format!("error: {e}"),
            seconds: start.elapsed().as_secs_f64(),
        }),
    }
    let start = Instant::now();
    match posterior_oracle(s, 5000) {
        Ok(o) => {
            let seconds = start.elapsed().as_secs_f64();
            checks.push(CheckResult {
                name: "posterior_oracle_mean".into(),
                passed: o.max_mean_z <= 3.0,
                metric: o.max_mean_z,
                threshold: 3.0,
                detail: format!(
                    "max standard errors of chain mean from dense posterior mean, dim {}, mean squared {:.2}",
                    o.dim, o.mean_z2
                ),
                seconds,
            });
            checks.push(CheckResult {
                name: "posterior_oracle_variance".into(),
                passed: o.max_var_rel <= 0.2,
                metric: o.max_var_rel,
                threshold: 0.2,
                detail: format!("max relative error of chain variances, dim {}", o.dim),
                seconds,
            });
        }
        Err(e) => checks.push(CheckResult {
            name: "posterior_oracle".into(),
            passed: false,
            metric: f64::NAN,
            threshold: 0.0,
            detail: format!("error: {e}"),
            seconds: start.elapsed().as_secs_f64(),
        }),
    }
    ValidationReport { passed: checks.iter().all(|c| c.passed), seed: s, checks }
}
