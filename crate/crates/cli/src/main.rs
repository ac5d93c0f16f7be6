use std::path::PathBuf;
use std::process::ExitCode;

use ahl_cli::config::{CapacitySpec, Command, RawConfig, Tolerances, OUTPUT_DIR_ENV};
use ahl_cli::progress::Progress;
use ahl_cli::run;
use clap::Parser;

/// Exit status for a run whose checks failed.
const EXIT_FAILED_CHECKS: u8 = 1;
/// Exit status for invalid configuration or runtime errors.
const EXIT_ERROR: u8 = 2;

/// Harmonic measure flow experiments for anisotropic Hastings-Levitov growth.
///
/// Settings come from `--config FILE` (TOML), overridden by flags. The
/// resolved configuration is written to `config.toml` in the output
/// directory, which defaults to $AHL_OUTPUT_DIR or `ahl-out`.
#[derive(Debug, Parser)]
#[command(name = "ahl", version)]
struct Cli {
    /// Experiment to run.
    command: Command,
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Attachment measure: uniform, cosine:A, fourier:K:A:B[,...], arc:LO:HI:S, optionally @SHIFT.
    #[arg(long)]
    measure: Option<String>,
    /// Single capacity.
    #[arg(long, conflicts_with = "capacities")]
    capacity: Option<f64>,
    /// Capacity list or sweep, e.g. 1e-3,1e-4 or 1e-3:1e-6:decades.
    #[arg(long)]
    capacities: Option<String>,
    /// Start points (repeat or comma-separate).
    #[arg(long, value_delimiter = ',')]
    start: Option<Vec<f64>>,
    /// Runs per start point.
    #[arg(long)]
    runs: Option<usize>,
    /// Tracking horizon in t-units.
    #[arg(long)]
    horizon: Option<f64>,
    /// Snapshot spacing in t-units.
    #[arg(long)]
    snapshot_dt: Option<f64>,
    /// Allow a tracking horizon past the logarithmic bound.
    #[arg(long)]
    allow_beyond_bound: bool,
    /// Exceedance threshold of the tracking error.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Main observation time (fluctuations, trajectory).
    #[arg(long)]
    t0: Option<f64>,
    /// Earlier time of the covariance check.
    #[arg(long)]
    t1: Option<f64>,
    /// Half width of the departure interval around the unstable point.
    #[arg(long)]
    departure_half_width: Option<f64>,
    /// Time simulated past the departure horizon.
    #[arg(long)]
    beyond: Option<f64>,
    /// Bootstrap resamples.
    #[arg(long)]
    bootstrap_reps: Option<usize>,
    /// Cluster size.
    #[arg(long)]
    particles: Option<usize>,
    /// Boundary trace resolution.
    #[arg(long)]
    resolution: Option<usize>,
    /// Boundary trace offset.
    #[arg(long)]
    offset: Option<f64>,
    /// Calibration sweep for rho0.
    #[arg(long)]
    rho0_sweep: Option<String>,
    /// Calibration cache file.
    #[arg(long)]
    rho0_cache: Option<PathBuf>,
    /// Base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip snapshot CSVs.
    #[arg(long)]
    no_snapshots: bool,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// No progress output.
    #[arg(long, short)]
    quiet: bool,
}

impl Cli {
    fn overrides(&self) -> RawConfig {
        RawConfig {
            command: Some(self.command),
            measure: self.measure.clone(),
            capacities: self
                .capacity
                .map(CapacitySpec::One)
                .or_else(|| self.capacities.clone().map(CapacitySpec::Text)),
            starts: self.start.clone(),
            runs: self.runs,
            horizon: self.horizon,
            snapshot_dt: self.snapshot_dt,
            allow_beyond_bound: self.allow_beyond_bound.then_some(true),
            epsilon: self.epsilon,
            t0: self.t0,
            t1: self.t1,
            departure_half_width: self.departure_half_width,
            beyond: self.beyond,
            bootstrap_reps: self.bootstrap_reps,
            particles: self.particles,
            resolution: self.resolution,
            offset: self.offset,
            rho0_sweep: self.rho0_sweep.clone().map(CapacitySpec::Text),
            rho0_cache: self.rho0_cache.clone(),
            seed: self.seed,
            output_dir: self.out.clone(),
            write_snapshots: self.no_snapshots.then_some(false),
            tolerances: None::<Tolerances>,
        }
    }
}

fn fail(kind: &str, message: String) -> ExitCode {
    let json = serde_json::json!({ "passed": false, "error": { "kind": kind, "message": message } });
    eprintln!("{json}");
    ExitCode::from(EXIT_ERROR)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut raw = match &cli.config {
        Some(path) => match RawConfig::load(path) {
            Ok(r) => r,
            Err(e) => return fail("config", e.to_string()),
        },
        None => RawConfig::default(),
    };
    raw.overlay(&cli.overrides());
    let env_dir = std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from);
    let cfg = match raw.resolve(env_dir) {
        Ok(c) => c,
        Err(e) => return fail("config", e.to_string()),
    };
    if cli.workers == Some(0) {
        return fail("config", "workers: must be at least 1".into());
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.workers.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => return fail("runtime", e.to_string()),
    };
    let progress = Progress::new(cli.quiet);
    match pool.install(|| run::execute(&cfg, &progress)) {
        Ok(report) => {
            if !cli.quiet {
                print!("{}", report.to_text());
            }
            if report.passed {
                ExitCode::SUCCESS
            } else {
                let json = serde_json::json!({ "passed": false, "failures": report.failures });
                eprintln!("{json}");
                ExitCode::from(EXIT_FAILED_CHECKS)
            }
        }
        Err(e) => fail("runtime", e.to_string()),
    }
}
