use std::path::PathBuf;
use std::process::ExitCode;

use bayesfuse_cli::commands::{self, FuseOutcome, FuseOverrides, FuseRequest};
use bayesfuse_cli::config::FuseConfig;
use bayesfuse_cli::validate::ValidateOptions;
use bayesfuse_cli::{CliError, CliResult};
use bayesfuse_core::synth::ExperimentSpec;
use clap::{Args, Parser, Subcommand};
use log::info;

/// Bayesian fusion of hyperspectral and multispectral images.
#[derive(Parser)]
#[command(name = "bayesfuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a reference scene and its HS/MS observations.
    Synth(SynthArgs),
    /// Fuse an HS and an MS cube into a high-resolution hyperspectral cube.
    Fuse(FuseArgs),
    /// Score an estimate against a reference; prints one CSV row.
    Metrics(MetricsArgs),
    /// Run the built-in oracle checks; exits 1 if any fails.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Experiment description (TOML). Defaults to a 32x32x16 scene.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the larger 160-band, 7-band-MS, d=5 experiment instead.
    #[arg(long, conflicts_with = "config")]
    paper_analog: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long, required_unless_present = "replay")]
    hs: Option<PathBuf>,
    #[arg(long, required_unless_present = "replay")]
    ms: Option<PathBuf>,
    /// Truth bundle written by `synth`; its assumed sensors are used.
    #[arg(long, conflicts_with = "sensors")]
    truth: Option<PathBuf>,
    /// JSON list of the two sensor models, HS first.
    #[arg(long)]
    sensors: Option<PathBuf>,
    /// Fusion configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_mc: Option<usize>,
    #[arg(long)]
    n_bi: Option<usize>,
    /// Keep the declared noise variances instead of sampling them.
    #[arg(long)]
    noise_fixed: bool,
    /// Swap the stepsize growth and shrink pairing (high acceptance shrinks).
    #[arg(long)]
    paper_literal_adapt: bool,
    /// Checkpoint file, written every --checkpoint-every iterations.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    /// Continue a chain from a checkpoint file.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write a checkpoint and exit once this many iterations have run.
    #[arg(long)]
    stop_after: Option<u64>,
    /// Re-run the fuse recorded in a manifest and verify its output digests.
    #[arg(long, conflicts_with_all = ["hs", "ms", "truth", "sensors", "config", "resume", "stop_after"])]
    replay: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    estimate: PathBuf,
    /// Resolution ratio between the HS and MS grids (used by ERGAS).
    #[arg(long)]
    ratio: f64,
    /// Also write the CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, hide = true)]
    inject_gradient_fault: bool,
}

fn run_synth(a: SynthArgs) -> CliResult<()> {
    let mut spec = match (&a.config, a.paper_analog) {
        (Some(p), _) => commands::load_experiment(p)?,
        (None, true) => ExperimentSpec::paper_analog(0),
        (None, false) => commands::default_experiment(0),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let m = commands::synth(&spec, &a.out)?;
    info!("synth finished: {}", commands::timing_summary(&m));
    println!("{}", a.out.display());
    Ok(())
}

fn run_fuse(a: FuseArgs) -> CliResult<()> {
    if let Some(manifest) = &a.replay {
        let m = commands::replay(manifest, &a.out)?;
        info!("replay reproduced {} outputs", m.outputs.len());
        println!("{}", a.out.display());
        return Ok(());
    }
    let mut cfg = match &a.config {
        Some(p) => FuseConfig::load(p)?,
        None => FuseConfig::default(),
    };
    FuseOverrides {
        seed: a.seed,
        n_mc: a.n_mc,
        n_bi: a.n_bi,
        noise_fixed: a.noise_fixed,
        paper_literal_adapt: a.paper_literal_adapt,
    }
    .apply(&mut cfg);
    let sensors = a.truth.or(a.sensors).ok_or_else(|| CliError::user("one of --truth or --sensors is required"))?;
    let req = FuseRequest {
        hs: a.hs.expect("required by clap"),
        ms: a.ms.expect("required by clap"),
        sensors,
        out: a.out,
        checkpoint: a.checkpoint,
        checkpoint_every: a.checkpoint_every,
        resume: a.resume,
        stop_after: a.stop_after,
    };
    match commands::fuse(&req, &cfg)? {
        FuseOutcome::Finished(m) => {
            info!("fuse finished: {}", commands::timing_summary(&m));
            println!("{}", req.out.display());
        }
        FuseOutcome::Stopped { iteration } => {
            eprintln!("stopped after iteration {iteration}; resume with --resume");
        }
    }
    Ok(())
}

fn run_metrics(a: MetricsArgs) -> CliResult<()> {
    let report = commands::metrics(&a.reference, &a.estimate, a.ratio)?;
    let csv = report.to_csv()?;
    print!("{csv}");
    eprintln!("dd_x100 = {}", report.dd * 100.0);
    if let Some(p) = &a.out {
        std::fs::write(p, &csv)?;
    }
    Ok(())
}

fn run_validate(a: ValidateArgs) -> CliResult<()> {
    let report = commands::validate(&ValidateOptions { seed: a.seed, inject_gradient_fault: a.inject_gradient_fault });
    let json = serde_json::to_string_pretty(&report)? + "\n";
    print!("{json}");
    if let Some(p) = &a.report {
        std::fs::write(p, &json)?;
    }
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Validation(report.failures()))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Fuse(a) => run_fuse(a),
        Command::Metrics(a) => run_metrics(a),
        Command::Validate(a) => run_validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
