//! Subcommand dispatch and artifact output.

use std::path::{Path, PathBuf};

use ahl::analysis::ExperimentReport;
use ahl::experiment::{self, ClusterParams, EnvelopeParams, FluctuationParams, TrackingParams, WindowParams};
use ahl::field::{DriftField, Rho0, Rho0Cache};
use ahl::flow::FlowEnsemble;

use crate::config::{Command, ExperimentConfig};
use crate::progress::Progress;
use crate::report::{emit_report, RunReport};
use crate::selftest;

pub const CONFIG_ECHO: &str = "config.toml";
pub const DEPARTURES_CSV: &str = "departures.csv";
/// Particle family key of the calibration cache.
pub const SLIT_FAMILY: &str = "slit";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Compute(#[from] ahl::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.to_path_buf(), source }
}

/// File name of the snapshot table at capacity `c`.
pub fn snapshot_file(c: f64) -> String {
    format!("snapshots_c{c:e}.csv")
}

/// Loads `ρ₀` from the sidecar cache, calibrating and storing on a miss.
pub fn cached_rho0(cfg: &ExperimentConfig) -> Result<Rho0, RunError> {
    let path = &cfg.rho0_cache;
    let mut cache = Rho0Cache::load(path)?;
    let hit = cache.entries.contains_key(&Rho0Cache::key(SLIT_FAMILY, &cfg.rho0_sweep));
    let rho = cache.get_or_calibrate(SLIT_FAMILY, &cfg.rho0_sweep)?;
    if !hit {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io(dir))?;
        }
        cache.store(path)?;
    }
    Ok(rho)
}

fn save_ensembles(cfg: &ExperimentConfig, ensembles: &[FlowEnsemble]) -> Result<(), RunError> {
    if cfg.write_snapshots {
        for e in ensembles {
            e.save_csv(&cfg.output_dir.join(snapshot_file(e.config.capacity)))?;
        }
    }
    Ok(())
}

/// Runs the configured experiment, writing CSV artifacts into the output
/// directory, and returns its reports.
pub fn run_experiment(cfg: &ExperimentConfig, progress: &Progress) -> Result<Vec<ExperimentReport>, RunError> {
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(io(out))?;
    let t = &cfg.tolerances;
    let measure = cfg.measure();
    let flow = || experiment::deterministic_flow(DriftField::new(measure.clone()));
    let reports = match cfg.command {
        Command::Selftest => selftest::run(cfg.seed, progress)?,
        Command::Flow => {
            let fl = flow();
            let params: Vec<TrackingParams> = cfg
                .capacities
                .iter()
                .enumerate()
                .map(|(k, &c)| TrackingParams {
                    capacity: c,
                    starts: cfg.starts.clone(),
                    runs: cfg.runs,
                    horizon: cfg.horizon.unwrap_or_else(|| fl.tracking_horizon(c)),
                    snapshot_dt: cfg.snapshot_dt,
                    epsilon: cfg.epsilon,
                    allow_beyond_bound: cfg.allow_beyond_bound,
                    seed: experiment::derive_seed(cfg.seed, k as u64),
                })
                .collect();
            let (report, ensembles) = experiment::tracking_sweep(&fl, &params, progress)?;
            save_ensembles(cfg, &ensembles)?;
            vec![report]
        }
        Command::Fluctuations => {
            let mut fl = flow();
            fl.field_mut().set_rho0(cached_rho0(cfg)?);
            let fp = FluctuationParams {
                capacity: cfg.capacities[0],
                start: cfg.starts.first().copied(),
                runs: cfg.runs,
                t0: cfg.t0,
                t1: cfg.t1,
                bootstrap_reps: cfg.bootstrap_reps,
                variance_k_se: t.variance_k_se,
                covariance_k_se: t.covariance_k_se,
                seed: cfg.seed,
            };
            let (report, ensemble) = experiment::fluctuations(&fl, &fp, progress)?;
            save_ensembles(cfg, std::slice::from_ref(&ensemble))?;
            vec![report]
        }
        Command::Window => {
            let fl = flow();
            let wp = WindowParams {
                capacities: cfg.capacities.clone(),
                runs: cfg.runs,
                half_width: cfg.departure_half_width,
                bootstrap_reps: cfg.bootstrap_reps,
                slope_tolerance: t.slope_relative,
                symmetry_k_se: t.symmetry_k_se,
                seed: cfg.seed,
            };
            let (report, records) = experiment::window(&fl, &wp, progress)?;
            let path = out.join(DEPARTURES_CSV);
            let mut csv = String::from("capacity,run_id,t,direction\n");
            for r in &records {
                let t = r.t.map(|t| t.to_string()).unwrap_or_default();
                let d = match r.upward {
                    Some(true) => "up",
                    Some(false) => "down",
                    None => "none",
                };
                csv.push_str(&format!("{:e},{},{t},{d}\n", r.capacity, r.run_id));
            }
            std::fs::write(&path, csv).map_err(io(&path))?;
            vec![report]
        }
        Command::Trajectory => {
            let fl = flow();
            let ep = EnvelopeParams {
                capacities: cfg.capacities.clone(),
                runs: cfg.runs,
                t0: cfg.t0,
                snapshot_dt: cfg.snapshot_dt,
                beyond: cfg.beyond,
                half_width: cfg.departure_half_width,
                terminal_radius: t.terminal_radius,
                min_fraction: t.terminal_fraction,
                seed: cfg.seed,
            };
            let (report, ensembles) = experiment::envelope(&fl, &ep, progress)?;
            save_ensembles(cfg, &ensembles)?;
            vec![report]
        }
        Command::Cluster => {
            let cp = ClusterParams {
                capacity: cfg.capacities[0],
                particles: cfg.particles,
                resolution: cfg.resolution,
                offset: cfg.offset,
                seed: cfg.seed,
            };
            progress.message(&format!("cluster: {} particles", cp.particles));
            let (report, state, trace) = experiment::cluster_geometry(&measure, &cp)?;
            ahl::cluster::export_geometry(&trace, &out.join("cluster.csv"), Some(&out.join("cluster.svg")))?;
            let path = out.join("cluster.json");
            let json = serde_json::to_string_pretty(&state).expect("cluster state serialises");
            std::fs::write(&path, json).map_err(io(&path))?;
            vec![report]
        }
        Command::Calibrate => {
            progress.message("calibrating rho0");
            vec![experiment::calibration_report(&cached_rho0(cfg)?)]
        }
    };
    Ok(reports)
}

/// Echoes the config, runs the experiment and writes both reports.
pub fn execute(cfg: &ExperimentConfig, progress: &Progress) -> Result<RunReport, RunError> {
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(io(out))?;
    let echo = out.join(CONFIG_ECHO);
    std::fs::write(&echo, cfg.to_toml()).map_err(io(&echo))?;
    let reports = run_experiment(cfg, progress)?;
    let report = RunReport::new(cfg.clone(), reports);
    emit_report(&report, out).map_err(io(out))?;
    Ok(report)
}
