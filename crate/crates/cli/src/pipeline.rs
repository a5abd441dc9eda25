//! Library-level fusion pipeline shared by the `fuse` command and the tests.

use bayesfuse_core::model::{HierModel, HyperParams, NoiseMode};
use bayesfuse_core::sampler::{Chain, ChainOutput, Checkpoint};
use bayesfuse_core::subspace::{interpolated_prior_mean, learn_pca, upsample, PcaResult};
use bayesfuse_core::{vectorize_bip, ImageCube, SubspaceBasis};
use bayesfuse_core::forward::SensorModel;
use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::FuseConfig;
use crate::error::{CliError, CliResult};

/// A fusion problem ready for sampling.
pub struct Prepared {
    pub model: HierModel,
    pub pca: PcaResult,
}

/// Summary of the learned subspace, written next to the fused cube.
#[derive(Debug, Clone, Serialize)]
pub struct SubspaceReport {
    pub reduced_dim: usize,
    pub energy_fraction: f64,
    pub eigenvalues: Vec<f64>,
    pub mean_spectrum: Vec<f64>,
    /// Row-major `reduced_dim x bands`.
    pub basis: Vec<Vec<f64>>,
}

impl SubspaceReport {
    pub fn new(pca: &PcaResult, basis: &SubspaceBasis) -> Self {
        let m = basis.matrix();
        Self {
            reduced_dim: basis.reduced_dim(),
            energy_fraction: pca.energy_fraction,
            eigenvalues: pca.eigenvalues.clone(),
            mean_spectrum: basis.offset().as_slice().to_vec(),
            basis: (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect(),
        }
    }
}

fn check_sensor(s: &SensorModel, obs: &ImageCube, rows: usize, cols: usize, bands: usize) -> CliResult<()> {
    if (s.rows, s.cols, s.bands) != (rows, cols, bands) {
        return Err(CliError::user(format!(
            "sensor {} expects a {}x{}x{} scene, inputs imply {rows}x{cols}x{bands}",
            s.name, s.rows, s.cols, s.bands
        )));
    }
    let want = (s.out_rows(), s.out_cols(), s.out_bands());
    let got = (obs.rows(), obs.cols(), obs.bands());
    if want != got {
        return Err(CliError::user(format!("sensor {} produces {want:?} but its observation is {got:?}", s.name)));
    }
    Ok(())
}

/// Learns the subspace from `hs`, builds the interpolated prior mean and the
/// hierarchical model over the sensors `[hs, ms]`.
pub fn prepare(hs: &ImageCube, ms: &ImageCube, sensors: &[SensorModel], cfg: &FuseConfig) -> CliResult<Prepared> {
    cfg.validate()?;
    if sensors.len() != 2 {
        return Err(CliError::user(format!("expected 2 sensors (hs, ms), got {}", sensors.len())));
    }
    let (rows, cols, bands) = (ms.rows(), ms.cols(), hs.bands());
    check_sensor(&sensors[0], hs, rows, cols, bands)?;
    check_sensor(&sensors[1], ms, rows, cols, bands)?;

    let hs_vec = vectorize_bip(hs);
    let sub = &cfg.subspace;
    let (pca, basis) = match sub.dim {
        None => {
            let pca = learn_pca(&hs_vec, sub.threshold, sub.centering)?;
            let basis = pca.basis.clone();
            (pca, basis)
        }
        Some(dim) => {
            if dim > bands {
                return Err(CliError::user(format!("subspace.dim {dim} exceeds {bands} bands")));
            }
            let pca = learn_pca(&hs_vec, 1.0, sub.centering)?;
            let full = pca.basis.matrix();
            let rows_kept = DMatrix::from_fn(dim, bands, |r, c| if r < full.nrows() { full[(r, c)] } else { f64::NAN });
            if rows_kept.iter().any(|v| v.is_nan()) {
                return Err(CliError::user(format!("HS data supports at most {} components", full.nrows())));
            }
            let basis = SubspaceBasis::with_offset(rows_kept, pca.basis.offset().clone())?;
            (pca, basis)
        }
    };
    if hs.rows() == 0 || rows % hs.rows() != 0 || cols % hs.cols() != 0 {
        return Err(CliError::user(format!(
            "MS grid {rows}x{cols} is not an integer multiple of HS grid {}x{}",
            hs.rows(),
            hs.cols()
        )));
    }
    let prior_mean = interpolated_prior_mean(hs, rows, cols, &basis, sub.interpolation)?;

    let mut sensors = sensors.to_vec();
    if cfg.model.noise_mode == NoiseMode::Sample {
        // start the noise variances from residuals rather than declared values
        for s in &mut sensors {
            s.noise_variances.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut hyper = HyperParams::non_informative(basis.reduced_dim());
    if let Some(eta) = cfg.model.eta {
        hyper.eta = eta;
    }
    if let Some(nu) = cfg.model.nu {
        hyper.nu = nu;
    }
    let observations = vec![hs_vec, vectorize_bip(ms)];
    let mut model = HierModel::new(rows, cols, basis, prior_mean, sensors, observations, hyper)?;
    model.noise_mode = cfg.model.noise_mode;
    model.covariance_mode = cfg.model.covariance_mode;
    model.noise_prior = cfg.model.noise_prior;
    Ok(Prepared { model, pca })
}

/// The interpolated HS cube at MS resolution; the no-fusion baseline.
pub fn baseline(hs: &ImageCube, rows: usize, cols: usize, cfg: &FuseConfig) -> CliResult<ImageCube> {
    if rows % hs.rows() != 0 || cols % hs.cols() != 0 {
        return Err(CliError::user("target grid is not an integer multiple of the HS grid"));
    }
    Ok(upsample(hs, rows / hs.rows(), cols / hs.cols(), cfg.subspace.interpolation)?)
}

/// How a sampling run should start and when it should pause.
#[derive(Default)]
pub struct RunControl {
    pub resume: Option<Checkpoint>,
    /// Iterations between checkpoint callbacks; 0 disables them.
    pub checkpoint_every: u64,
    /// Stop (after a final checkpoint) once this iteration count is reached.
    pub stop_after: Option<u64>,
}

pub enum RunOutcome {
    Finished(Box<ChainOutput>),
    Stopped(Box<Checkpoint>),
}

/// Runs the chain, calling `on_checkpoint` every `checkpoint_every`
/// iterations and once more if stopped early.
pub fn sample(
    model: &HierModel,
    cfg: &FuseConfig,
    control: RunControl,
    mut on_checkpoint: impl FnMut(&Checkpoint) -> CliResult<()>,
) -> CliResult<RunOutcome> {
    let mut chain = match control.resume {
        Some(ck) => {
            if ck.config != cfg.sampler {
                return Err(CliError::user("checkpoint was written with a different sampler configuration"));
            }
            Chain::from_checkpoint(model, ck)?
        }
        None => Chain::new(model, cfg.sampler.clone())?,
    };
    loop {
        let it = chain.state().iteration;
        if chain.is_finished() {
            break;
        }
        if control.stop_after.is_some_and(|s| it >= s) {
            let ck = chain.checkpoint();
            on_checkpoint(&ck)?;
            return Ok(RunOutcome::Stopped(Box::new(ck)));
        }
        let mut n = chain.config().total_iterations() - it;
        if control.checkpoint_every > 0 {
            n = n.min(control.checkpoint_every - it % control.checkpoint_every);
        }
        if let Some(s) = control.stop_after {
            n = n.min(s - it);
        }
        chain.run_for(n)?;
        let it = chain.state().iteration;
        if control.checkpoint_every > 0 && it % control.checkpoint_every == 0 && !chain.is_finished() {
            on_checkpoint(&chain.checkpoint())?;
        }
    }
    Ok(RunOutcome::Finished(Box::new(chain.finish()?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use bayesfuse_core::synth::{generate_observations, synthetic_reference_for, ExperimentSpec, HsSpec, MsSpec, ReferenceSpec, ResponseSpec, SnrSpec};

    fn small() -> (ImageCube, ImageCube, Vec<SensorModel>) {
        let spec = ExperimentSpec {
            seed: 3,
            reference: ReferenceSpec::Synthetic { rows: 8, cols: 8, bands: 6, rank: 2 },
            hs: HsSpec { decimation: 2, snr_db: Some(SnrSpec::Uniform(30.0)) },
            ms: MsSpec { response: ResponseSpec::Adjacent { bands: 3 }, snr_db: Some(SnrSpec::Uniform(30.0)) },
            fsnr_db: None,
            clip_negative_response: true,
        };
        let r = synthetic_reference_for(&spec).unwrap().unwrap();
        let obs = generate_observations(&spec, &r.cube, &r.wavelengths).unwrap();
        (obs.hs, obs.ms, obs.truth.assumed_sensors)
    }

    #[test]
    fn dim_override_truncates_basis() {
        let (hs, ms, sensors) = small();
        let mut cfg = FuseConfig::default();
        cfg.subspace.dim = Some(3);
        let p = prepare(&hs, &ms, &sensors, &cfg).unwrap();
        assert_eq!(p.model.reduced_dim(), 3);
        assert_eq!(p.model.basis().matrix().rows(0, 3), p.pca.basis.matrix().rows(0, 3));
    }

    #[test]
    fn sample_mode_forgets_declared_variances() {
        let (hs, ms, sensors) = small();
        let p = prepare(&hs, &ms, &sensors, &FuseConfig::default()).unwrap();
        assert!(p.model.nominal_noise_variances().iter().flatten().all(|v| *v == 0.0));
        let mut cfg = FuseConfig::default();
        cfg.model.noise_mode = NoiseMode::Fixed;
        let p = prepare(&hs, &ms, &sensors, &cfg).unwrap();
        assert!(p.model.nominal_noise_variances().iter().flatten().all(|v| *v > 0.0));
    }

    #[test]
    fn swapped_observations_are_rejected() {
        let (hs, ms, sensors) = small();
        assert!(matches!(prepare(&ms, &hs, &sensors, &FuseConfig::default()), Err(CliError::User(_))));
    }

    #[test]
    fn stop_and_resume_matches_straight_run() {
        let (hs, ms, sensors) = small();
        let mut cfg = FuseConfig::default();
        cfg.sampler.n_bi = 6;
        cfg.sampler.n_mc = 6;
        cfg.sampler.n_leap_min = 3;
        cfg.sampler.n_leap_max = 5;
        let p = prepare(&hs, &ms, &sensors, &cfg).unwrap();
        let straight = match sample(&p.model, &cfg, RunControl::default(), |_| Ok(())).unwrap() {
            RunOutcome::Finished(o) => o,
            RunOutcome::Stopped(_) => panic!("stopped"),
        };
        let mut seen = Vec::new();
        let control = RunControl { stop_after: Some(7), checkpoint_every: 4, ..Default::default() };
        let ck = match sample(&p.model, &cfg, control, |c| {
            seen.push(c.state.iteration);
            Ok(())
        })
        .unwrap()
        {
            RunOutcome::Stopped(c) => c,
            RunOutcome::Finished(_) => panic!("finished"),
        };
        assert_eq!(seen, vec![4, 7]);
        let resumed = match sample(&p.model, &cfg, RunControl { resume: Some(*ck), ..Default::default() }, |_| Ok(())).unwrap() {
            RunOutcome::Finished(o) => o,
            RunOutcome::Stopped(_) => panic!("stopped"),
        };
        assert_eq!(resumed.mmse_x, straight.mmse_x);
        assert_eq!(resumed.traces, straight.traces);
    }
}
