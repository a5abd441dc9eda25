//! The four subcommands, callable without going through argument parsing.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bayesfuse_core::forward::SensorModel;
use bayesfuse_core::metrics::QualityReport;
use bayesfuse_core::model::NoiseMode;
use bayesfuse_core::sampler::{ChainOutput, Checkpoint, CHECKPOINT_VERSION};
use bayesfuse_core::synth::{
    default_wavelengths, generate_observations, synthetic_reference_for, ExperimentSpec, HsSpec, MsSpec, ReferenceSpec,
    ResponseSpec, SnrSpec, TruthBundle,
};
use bayesfuse_core::devectorize_bip;
use log::info;
use serde::Serialize;

use crate::config::FuseConfig;
use crate::cubefile::{cube_paths, read_cube, write_cube};
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::pipeline::{prepare, sample, RunControl, RunOutcome, SubspaceReport};
use crate::preview::{default_rgb_bands, write_preview};
use crate::validate::{run_validation, ValidateOptions, ValidationReport};

pub const FUSED: &str = "fused";
pub const NOISE_CSV: &str = "noise_variances.csv";
pub const TRACES_CSV: &str = "traces.csv";
pub const PREVIEW_PNG: &str = "preview.png";
pub const SUBSPACE_JSON: &str = "subspace.json";
pub const TRUTH_JSON: &str = "truth.json";

/// The experiment `synth` runs without a config: a 32x32x16 rank-4 scene,
/// HS decimated by 4, a 4-band MS response, 30 dB noise on both.
pub fn default_experiment(seed: u64) -> ExperimentSpec {
    ExperimentSpec {
        seed,
        reference: ReferenceSpec::Synthetic { rows: 32, cols: 32, bands: 16, rank: 4 },
        hs: HsSpec { decimation: 4, snr_db: Some(SnrSpec::Uniform(30.0)) },
        ms: MsSpec { response: ResponseSpec::Adjacent { bands: 4 }, snr_db: Some(SnrSpec::Uniform(30.0)) },
        fsnr_db: None,
        clip_negative_response: true,
    }
}

pub fn load_experiment(path: &Path) -> CliResult<ExperimentSpec> {
    let text = fs::read_to_string(path).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
    let spec: ExperimentSpec = toml::from_str(&text).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
    spec.validate()?;
    Ok(spec)
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::user(format!("{}: {e}", dir.display())))
}

fn cube_names(stem: &str) -> [String; 2] {
    [format!("{stem}.json"), format!("{stem}.bin")]
}

/// Simulates the experiment into `out`: reference, hs and ms cubes, the truth
/// bundle and a manifest.
pub fn synth(spec: &ExperimentSpec, out: &Path) -> CliResult<RunManifest> {
    spec.validate()?;
    ensure_dir(out)?;
    let mut manifest = RunManifest::new("synth", spec)?;
    manifest.seeds.insert("seed".into(), spec.seed);

    let start = Instant::now();
    let (reference, wavelengths) = match &spec.reference {
        ReferenceSpec::Synthetic { .. } => {
            let r = synthetic_reference_for(spec)?.expect("synthetic reference");
            (r.cube, r.wavelengths)
        }
        ReferenceSpec::File { path } => {
            manifest.add_input("reference", &cube_paths(path).1)?;
            let (cube, wl) = read_cube(path)?;
            let wl = wl.unwrap_or_else(|| default_wavelengths(cube.bands()));
            (cube, wl)
        }
    };
    manifest.timings.insert("reference".into(), start.elapsed().as_secs_f64());

    let start = Instant::now();
    let obs = generate_observations(spec, &reference, &wavelengths)?;
    manifest.timings.insert("observations".into(), start.elapsed().as_secs_f64());
    manifest.seeds.insert("hs_noise".into(), obs.truth.hs_noise_seed);
    manifest.seeds.insert("ms_noise".into(), obs.truth.ms_noise_seed);
    if let Some(s) = obs.truth.response_seed {
        manifest.seeds.insert("response".into(), s);
    }

    write_cube(&out.join("reference"), &reference, Some(&wavelengths))?;
    write_cube(&out.join("hs"), &obs.hs, Some(&wavelengths))?;
    write_cube(&out.join("ms"), &obs.ms, None)?;
    fs::write(out.join(TRUTH_JSON), serde_json::to_string_pretty(&obs.truth)? + "\n")?;
    for stem in ["reference", "hs", "ms"] {
        for name in cube_names(stem) {
            manifest.add_output(out, &name)?;
        }
    }
    manifest.add_output(out, TRUTH_JSON)?;
    manifest.write(out)?;
    Ok(manifest)
}

/// Where `fuse` gets its inputs and how it checkpoints.
#[derive(Debug, Clone, Default)]
pub struct FuseRequest {
    pub hs: PathBuf,
    pub ms: PathBuf,
    /// Either a truth bundle (its assumed sensors are used) or a JSON list of
    /// sensor models `[hs, ms]`.
    pub sensors: PathBuf,
    pub out: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub checkpoint_every: u64,
    pub resume: Option<PathBuf>,
    pub stop_after: Option<u64>,
}

pub fn load_sensors(path: &Path) -> CliResult<(Vec<SensorModel>, Option<Vec<f64>>)> {
    let text = fs::read_to_string(path).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
    if value.is_array() {
        let sensors = serde_json::from_value(value).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
        Ok((sensors, None))
    } else {
        let truth: TruthBundle =
            serde_json::from_value(value).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
        Ok((truth.assumed_sensors, Some(truth.wavelengths)))
    }
}

pub enum FuseOutcome {
    Finished(RunManifest),
    /// Stopped early; the checkpoint holds the chain.
    Stopped { iteration: u64 },
}

pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| CliError::user(format!("{}: {e}", path.display())))?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(CliError::user(format!("checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})", ck.version)));
    }
    Ok(ck)
}

fn save_checkpoint(path: &Path, ck: &Checkpoint) -> CliResult<()> {
    // write then rename so an interrupted run never leaves a torn file
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_string(ck)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn fuse(req: &FuseRequest, cfg: &FuseConfig) -> CliResult<FuseOutcome> {
    cfg.validate()?;
    let mut manifest = RunManifest::new("fuse", cfg)?;
    manifest.seeds.insert("sampler".into(), cfg.sampler.seed);
    manifest.add_input("hs", &cube_paths(&req.hs).1)?;
    manifest.add_input("ms", &cube_paths(&req.ms).1)?;
    manifest.add_input("sensors", &req.sensors)?;
    let (hs, hs_wl) = read_cube(&req.hs)?;
    let (ms, _) = read_cube(&req.ms)?;
    let (sensors, truth_wl) = load_sensors(&req.sensors)?;
    let wavelengths = hs_wl.or(truth_wl);

    let start = Instant::now();
    let prepared = prepare(&hs, &ms, &sensors, cfg)?;
    manifest.timings.insert("prepare".into(), start.elapsed().as_secs_f64());
    info!(
        "subspace of {} components keeps {:.4} of the HS energy",
        prepared.model.reduced_dim(),
        prepared.pca.energy_fraction
    );

    let resume = req.resume.as_deref().map(load_checkpoint).transpose()?;
    if (req.checkpoint_every > 0 || req.stop_after.is_some()) && req.checkpoint.is_none() {
        return Err(CliError::user("--checkpoint-every and --stop-after need --checkpoint"));
    }
    let control = RunControl { resume, checkpoint_every: req.checkpoint_every, stop_after: req.stop_after };
    let start = Instant::now();
    let outcome = sample(&prepared.model, cfg, control, |ck| match &req.checkpoint {
        Some(p) => save_checkpoint(p, ck),
        None => Ok(()),
    })?;
    manifest.timings.insert("sample".into(), start.elapsed().as_secs_f64());
    let output = match outcome {
        RunOutcome::Finished(o) => o,
        RunOutcome::Stopped(ck) => return Ok(FuseOutcome::Stopped { iteration: ck.state.iteration }),
    };

    let start = Instant::now();
    ensure_dir(&req.out)?;
    let out = &req.out;
    let fused = devectorize_bip(&output.mmse_x, ms.rows(), ms.cols())?;
    write_cube(&out.join(FUSED), &fused, wavelengths.as_deref())?;
    write_noise_csv(&out.join(NOISE_CSV), &output, &sensors)?;
    write_traces_csv(&out.join(TRACES_CSV), &output)?;
    let bands = cfg.preview.bands.unwrap_or_else(|| default_rgb_bands(fused.bands(), wavelengths.as_deref()));
    write_preview(&out.join(PREVIEW_PNG), &fused, bands)?;
    let report = SubspaceReport::new(&prepared.pca, prepared.model.basis());
    fs::write(out.join(SUBSPACE_JSON), serde_json::to_string_pretty(&report)? + "\n")?;
    manifest.timings.insert("write".into(), start.elapsed().as_secs_f64());

    let mut names: Vec<String> = cube_names(FUSED).into();
    names.extend([NOISE_CSV, TRACES_CSV, PREVIEW_PNG, SUBSPACE_JSON].map(String::from));
    for name in &names {
        manifest.add_output(out, name)?;
    }
    manifest.write(out)?;
    Ok(FuseOutcome::Finished(manifest))
}

/// Re-runs a recorded `fuse` into `out` and checks every output digest.
pub fn replay(manifest_path: &Path, out: &Path) -> CliResult<RunManifest> {
    let recorded = RunManifest::load(manifest_path)?;
    if recorded.command != "fuse" {
        return Err(CliError::user(format!("cannot replay a '{}' manifest", recorded.command)));
    }
    let cfg: FuseConfig = serde_json::from_value(recorded.config.clone())?;
    let input = |role: &str| {
        recorded
            .inputs
            .get(role)
            .map(PathBuf::from)
            .ok_or_else(|| CliError::user(format!("manifest lacks the '{role}' input")))
    };
    let req = FuseRequest { hs: input("hs")?, ms: input("ms")?, sensors: input("sensors")?, out: out.to_path_buf(), ..Default::default() };
    let fresh = match fuse(&req, &cfg)? {
        FuseOutcome::Finished(m) => m,
        FuseOutcome::Stopped { .. } => unreachable!("replay never stops early"),
    };
    let changed: Vec<String> = recorded
        .input_digests
        .iter()
        .filter(|(k, v)| fresh.input_digests.get(*k) != Some(v))
        .map(|(k, _)| format!("input {k}"))
        .collect();
    if !changed.is_empty() {
        return Err(CliError::user(format!("inputs changed since the recorded run: {}", changed.join(", "))));
    }
    let bad = recorded.output_mismatches(&fresh);
    if !bad.is_empty() {
        return Err(CliError::Validation(bad.into_iter().map(|n| format!("digest of {n}")).collect()));
    }
    Ok(fresh)
}

#[derive(Serialize)]
struct NoiseRow<'a> {
    sensor: &'a str,
    band: usize,
    mean: f64,
    lower: f64,
    upper: f64,
}

fn write_noise_csv(path: &Path, output: &ChainOutput, sensors: &[SensorModel]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (s, bands) in sensors.iter().zip(&output.noise) {
        for (band, n) in bands.iter().enumerate() {
            w.serialize(NoiseRow { sensor: &s.name, band, mean: n.mean, lower: n.lower, upper: n.upper })?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TraceRow {
    iteration: usize,
    acceptance: f64,
    accept_prob: f64,
    accepted: bool,
    energy: f64,
    stepsize: f64,
}

fn write_traces_csv(path: &Path, output: &ChainOutput) -> CliResult<()> {
    let t = &output.traces;
    let mut w = csv::Writer::from_path(path)?;
    for i in 0..t.acceptance.len() {
        w.serialize(TraceRow {
            iteration: i + 1,
            acceptance: t.acceptance[i],
            accept_prob: t.accept_prob[i],
            accepted: t.accepted[i],
            energy: t.energy[i],
            stepsize: t.stepsize[i],
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Scores `estimate` against `reference`; `ratio` is the HS/MS resolution ratio.
pub fn metrics(reference: &Path, estimate: &Path, ratio: f64) -> CliResult<QualityReport> {
    let (r, _) = read_cube(reference)?;
    let (e, _) = read_cube(estimate)?;
    if (r.rows(), r.cols(), r.bands()) != (e.rows(), e.cols(), e.bands()) {
        return Err(CliError::user(format!(
            "reference is {}x{}x{}, estimate is {}x{}x{}",
            r.rows(),
            r.cols(),
            r.bands(),
            e.rows(),
            e.cols(),
            e.bands()
        )));
    }
    Ok(QualityReport::compute(&r, &e, ratio)?)
}

pub fn validate(opts: &ValidateOptions) -> ValidationReport {
    run_validation(opts)
}

/// Applies command-line overrides on top of a loaded configuration.
#[derive(Debug, Clone, Default)]
pub struct FuseOverrides {
    pub seed: Option<u64>,
    pub n_mc: Option<usize>,
    pub n_bi: Option<usize>,
    pub noise_fixed: bool,
    pub paper_literal_adapt: bool,
}

impl FuseOverrides {
    pub fn apply(&self, cfg: &mut FuseConfig) {
        if let Some(s) = self.seed {
            cfg.sampler.seed = s;
        }
        if let Some(n) = self.n_mc {
            cfg.sampler.n_mc = n;
        }
        if let Some(n) = self.n_bi {
            cfg.sampler.n_bi = n;
        }
        if self.noise_fixed {
            cfg.model.noise_mode = NoiseMode::Fixed;
        }
        if self.paper_literal_adapt {
            cfg.sampler.paper_literal_adapt = true;
        }
    }
}

/// Per-stage timings of a manifest, for logging.
pub fn timing_summary(m: &RunManifest) -> String {
    m.timings.iter().map(|(k, v)| format!("{k} {v:.2}s")).collect::<Vec<_>>().join(", ")
}
