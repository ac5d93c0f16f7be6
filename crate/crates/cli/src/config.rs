//! Experiment configuration: a TOML file, flag overrides, defaults per
//! subcommand, and validation with field-level messages.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ahl::measure::{AttachmentMeasure, FourierMode};
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "AHL_OUTPUT_DIR";
/// Output directory when neither flag, file nor environment sets one.
pub const DEFAULT_OUTPUT_DIR: &str = "ahl-out";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{field}: {message}")]
    Field { field: String, message: String },
    #[error("cannot read config {path}: {message}")]
    Read { path: String, message: String },
    #[error("config {path}: {message}")]
    Parse { path: String, message: String },
}

fn field_err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field { field: field.to_string(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Selftest,
    Flow,
    Fluctuations,
    Window,
    Trajectory,
    Cluster,
    Calibrate,
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Command::Selftest => "selftest",
            Command::Flow => "flow",
            Command::Fluctuations => "fluctuations",
            Command::Window => "window",
            Command::Trajectory => "trajectory",
            Command::Cluster => "cluster",
            Command::Calibrate => "calibrate",
        };
        f.write_str(s)
    }
}

/// Capacities: a list, or a string sweep such as `"1e-3:1e-6:decades"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CapacitySpec {
    List(Vec<f64>),
    One(f64),
    Text(String),
}

impl CapacitySpec {
    pub fn resolve(&self) -> Result<Vec<f64>, ConfigError> {
        match self {
            CapacitySpec::List(v) => Ok(v.clone()),
            CapacitySpec::One(c) => Ok(vec![*c]),
            CapacitySpec::Text(s) => parse_sweep(s),
        }
    }
}

/// Parses `"a"`, `"a,b,…"`, `"a:b:decades"` (one value per decade from `a`
/// to `b` inclusive) or `"a:b:N"` (N log-spaced values).
pub fn parse_sweep(s: &str) -> Result<Vec<f64>, ConfigError> {
    let num = |t: &str| {
        t.trim()
            .parse::<f64>()
            .map_err(|_| field_err("capacities", format!("'{t}' is not a number")))
    };
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [list] => list.split(',').map(num).collect(),
        [a, b, how] => {
            let (a, b) = (num(a)?, num(b)?);
            if !(a > 0.0 && b > 0.0) {
                return Err(field_err("capacities", format!("sweep ends must be positive in '{s}'")));
            }
            let n = if how.trim() == "decades" {
                let d = (a / b).log10().abs();
                if (d - d.round()).abs() > 1e-9 {
                    return Err(field_err("capacities", format!("'{s}' does not span a whole number of decades")));
                }
                d.round() as usize + 1
            } else {
                how.trim()
                    .parse::<usize>()
                    .map_err(|_| field_err("capacities", format!("sweep step '{how}' must be 'decades' or a count")))?
            };
            if n < 2 {
                return Err(field_err("capacities", format!("sweep '{s}' has fewer than two points")));
            }
            let (la, lb) = (a.log10(), b.log10());
            Ok((0..n)
                .map(|i| {
                    let e = la + (lb - la) * i as f64 / (n - 1) as f64;
                    // Snap to the exact decimal for whole exponents.
                    if (e - e.round()).abs() < 1e-12 {
                        format!("1e{}", e.round()).parse().unwrap()
                    } else {
                        10f64.powf(e)
                    }
                })
                .collect())
        }
        _ => Err(field_err("capacities", format!("cannot parse sweep '{s}'"))),
    }
}

/// Parses a measure spec: `uniform`, `cosine:A`, `fourier:K:A:B[,K:A:B…]`,
/// `arc:LO:HI:SMOOTHING`, each optionally followed by `@SHIFT`.
pub fn parse_measure(spec: &str) -> Result<AttachmentMeasure, ConfigError> {
    let bad = |m: String| field_err("measure", m);
    let (body, shift) = match spec.split_once('@') {
        Some((b, s)) => (b, Some(s.trim().parse::<f64>().map_err(|_| bad(format!("bad shift in '{spec}'")))?)),
        None => (spec, None),
    };
    let (kind, rest) = body.split_once(':').unwrap_or((body, ""));
    let nums = |t: &str| -> Result<Vec<f64>, ConfigError> {
        t.split(':')
            .filter(|x| !x.is_empty())
            .map(|x| x.trim().parse::<f64>().map_err(|_| bad(format!("'{x}' is not a number in '{spec}'"))))
            .collect()
    };
    let m = match kind.trim() {
        "uniform" => AttachmentMeasure::uniform(),
        "cosine" => match nums(rest)?.as_slice() {
            [a] => AttachmentMeasure::cosine(*a),
            _ => return Err(bad(format!("cosine takes one amplitude, got '{spec}'"))),
        }
        .map_err(|e| bad(e.to_string()))?,
        "fourier" => {
            let modes = rest
                .split(',')
                .map(|term| match nums(term)?.as_slice() {
                    [k, a, b] if *k >= 1.0 && k.fract() == 0.0 => Ok(FourierMode::new(*k as u32, *a, *b)),
                    _ => Err(bad(format!("fourier mode '{term}' must be K:A:B with integer K >= 1"))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            AttachmentMeasure::fourier(modes).map_err(|e| bad(e.to_string()))?
        }
        "arc" => match nums(rest)?.as_slice() {
            [lo, hi, w] => AttachmentMeasure::arc(*lo, *hi, *w).map_err(|e| bad(e.to_string()))?,
            _ => return Err(bad(format!("arc takes LO:HI:SMOOTHING, got '{spec}'"))),
        },
        other => return Err(bad(format!("unknown measure family '{other}'"))),
    };
    Ok(match shift {
        Some(s) => m.shifted(s),
        None => m,
    })
}

/// Tolerances of the declared checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub variance_k_se: f64,
    pub covariance_k_se: f64,
    pub slope_relative: f64,
    pub symmetry_k_se: f64,
    pub terminal_radius: f64,
    pub terminal_fraction: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            variance_k_se: 3.0,
            covariance_k_se: 4.0,
            slope_relative: 0.15,
            symmetry_k_se: 4.0,
            terminal_radius: 0.05,
            terminal_fraction: 0.95,
        }
    }
}

/// Every key of the config file. All optional: unset keys take the
/// subcommand default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub command: Option<Command>,
    pub measure: Option<String>,
    pub capacities: Option<CapacitySpec>,
    pub starts: Option<Vec<f64>>,
    pub runs: Option<usize>,
    pub horizon: Option<f64>,
    pub snapshot_dt: Option<f64>,
    pub allow_beyond_bound: Option<bool>,
    pub epsilon: Option<f64>,
    pub t0: Option<f64>,
    pub t1: Option<f64>,
    pub departure_half_width: Option<f64>,
    pub beyond: Option<f64>,
    pub bootstrap_reps: Option<usize>,
    pub particles: Option<usize>,
    pub resolution: Option<usize>,
    pub offset: Option<f64>,
    pub rho0_sweep: Option<CapacitySpec>,
    pub rho0_cache: Option<PathBuf>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub write_snapshots: Option<bool>,
    pub tolerances: Option<Tolerances>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident, $($f:ident),*) => { $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )* };
}

impl RawConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse { path: origin.to_string(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    /// Values set in `other` replace those in `self`.
    pub fn overlay(&mut self, other: &RawConfig) {
        overlay!(
            self, other, command, measure, capacities, starts, runs, horizon, snapshot_dt, allow_beyond_bound,
            epsilon, t0, t1, departure_half_width, beyond, bootstrap_reps, particles, resolution, offset,
            rho0_sweep, rho0_cache, seed, output_dir, write_snapshots, tolerances
        );
    }

    /// Fills defaults for the subcommand and validates every field.
    pub fn resolve(&self, env_output_dir: Option<PathBuf>) -> Result<ExperimentConfig, ConfigError> {
        let command = self.command.ok_or_else(|| field_err("command", "no subcommand given"))?;
        let d = Defaults::for_command(command);
        let output_dir = self
            .output_dir
            .clone()
            .or(env_output_dir)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR));
        let capacities = match &self.capacities {
            Some(c) => c.resolve()?,
            None => parse_sweep(d.capacities)?,
        };
        let rho0_sweep = match &self.rho0_sweep {
            Some(c) => c.resolve()?,
            None => ahl::experiment::DEFAULT_RHO0_SWEEP.to_vec(),
        };
        let cfg = ExperimentConfig {
            command,
            measure: self.measure.clone().unwrap_or_else(|| d.measure.to_string()),
            capacities,
            starts: self.starts.clone().unwrap_or_else(|| d.starts.to_vec()),
            runs: self.runs.unwrap_or(d.runs),
            horizon: self.horizon,
            snapshot_dt: self.snapshot_dt.unwrap_or(d.snapshot_dt),
            allow_beyond_bound: self.allow_beyond_bound.unwrap_or(false),
            epsilon: self.epsilon.unwrap_or(0.05),
            t0: self.t0.unwrap_or(d.t0),
            t1: self.t1.or(d.t1),
            departure_half_width: self.departure_half_width,
            beyond: self.beyond.unwrap_or(10.0),
            bootstrap_reps: self.bootstrap_reps.unwrap_or(500),
            particles: self.particles.unwrap_or(800),
            resolution: self.resolution.unwrap_or(4096),
            offset: self.offset.unwrap_or(ahl::cluster::DEFAULT_TRACE_OFFSET),
            rho0_sweep,
            rho0_cache: self.rho0_cache.clone().unwrap_or_else(|| output_dir.join("rho0_cache.json")),
            seed: self.seed.unwrap_or(20240601),
            output_dir,
            write_snapshots: self.write_snapshots.unwrap_or(d.write_snapshots),
            tolerances: self.tolerances.clone().unwrap_or_default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

struct Defaults {
    measure: &'static str,
    capacities: &'static str,
    starts: &'static [f64],
    runs: usize,
    snapshot_dt: f64,
    t0: f64,
    t1: Option<f64>,
    write_snapshots: bool,
}

impl Defaults {
    fn for_command(c: Command) -> Self {
        let base = Defaults {
            measure: "cosine:0.5",
            capacities: "1e-4",
            starts: &[0.3],
            runs: 500,
            snapshot_dt: 0.01,
            t0: 3.0,
            t1: Some(1.0),
            write_snapshots: true,
        };
        match c {
            Command::Flow => Defaults { capacities: "1e-3:1e-5:decades", ..base },
            Command::Fluctuations => Defaults { runs: 4000, starts: &[], ..base },
            Command::Window => Defaults { capacities: "1e-3:1e-6:decades", ..base },
            Command::Trajectory => Defaults { capacities: "1e-4:1e-5:decades", t0: 4.0, write_snapshots: false, ..base },
            Command::Cluster => Defaults { measure: "arc:0:0.5:0.05", capacities: "1e-3", ..base },
            Command::Calibrate => Defaults { capacities: "1e-3:1e-6:decades", ..base },
            Command::Selftest => base,
        }
    }
}

/// A fully resolved configuration. Written to `config.toml` in the output
/// directory; loading that file reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Command,
    pub measure: String,
    pub capacities: Vec<f64>,
    /// Start points. Empty for `fluctuations` means the unstable point.
    pub starts: Vec<f64>,
    pub runs: usize,
    /// Tracking horizon of `flow`; unset means the logarithmic bound.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    pub snapshot_dt: f64,
    pub allow_beyond_bound: bool,
    pub epsilon: f64,
    pub t0: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t1: Option<f64>,
    /// Half width of the departure interval; unset means `min(0.1, λ/(8‖b″‖∞))`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub departure_half_width: Option<f64>,
    pub beyond: f64,
    pub bootstrap_reps: usize,
    pub particles: usize,
    pub resolution: usize,
    pub offset: f64,
    pub rho0_sweep: Vec<f64>,
    pub rho0_cache: PathBuf,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub write_snapshots: bool,
    pub tolerances: Tolerances,
}

fn check(ok: bool, field: &str, message: impl FnOnce() -> String) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(field_err(field, message()))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        parse_measure(&self.measure)?;
        check(!self.capacities.is_empty(), "capacities", || "at least one capacity is required".into())?;
        for &c in &self.capacities {
            check(c > 0.0 && c < 1.0, "capacities", || format!("capacity must lie in (0, 1), got {c}"))?;
        }
        for &c in &self.rho0_sweep {
            check(c > 0.0 && c < 1.0, "rho0_sweep", || format!("capacity must lie in (0, 1), got {c}"))?;
        }
        check(self.rho0_sweep.len() >= 2, "rho0_sweep", || "needs at least two capacities".into())?;
        check(self.starts.iter().all(|x| x.is_finite()), "starts", || "start points must be finite".into())?;
        let min_starts = usize::from(self.command != Command::Fluctuations);
        check(self.starts.len() >= min_starts, "starts", || "at least one start point is required".into())?;
        check(self.runs >= 1, "runs", || "must be at least 1".into())?;
        if let Some(h) = self.horizon {
            check(h > 0.0 && h.is_finite(), "horizon", || format!("must be positive, got {h}"))?;
        }
        check(self.snapshot_dt > 0.0, "snapshot_dt", || format!("must be positive, got {}", self.snapshot_dt))?;
        check(self.epsilon > 0.0, "epsilon", || format!("must be positive, got {}", self.epsilon))?;
        check(self.t0 > 0.0, "t0", || format!("must be positive, got {}", self.t0))?;
        if let Some(t1) = self.t1 {
            check(t1 > 0.0 && t1 < self.t0, "t1", || format!("must lie in (0, t0 = {}), got {t1}", self.t0))?;
        }
        if let Some(w) = self.departure_half_width {
            check(w > 0.0 && w < 0.5, "departure_half_width", || format!("must lie in (0, 0.5), got {w}"))?;
        }
        check(self.beyond >= 0.0, "beyond", || format!("must be >= 0, got {}", self.beyond))?;
        check(self.bootstrap_reps >= 2, "bootstrap_reps", || "must be at least 2".into())?;
        check(self.offset > 0.0, "offset", || format!("must be positive, got {}", self.offset))?;
        check(self.resolution >= ahl::cluster::MIN_TRACE_RESOLUTION, "resolution", || {
            format!("must be at least {}, got {}", ahl::cluster::MIN_TRACE_RESOLUTION, self.resolution)
        })?;
        let t = &self.tolerances;
        for (name, v) in [
            ("tolerances.variance_k_se", t.variance_k_se),
            ("tolerances.covariance_k_se", t.covariance_k_se),
            ("tolerances.slope_relative", t.slope_relative),
            ("tolerances.symmetry_k_se", t.symmetry_k_se),
            ("tolerances.terminal_radius", t.terminal_radius),
        ] {
            check(v > 0.0, name, || format!("must be positive, got {v}"))?;
        }
        check(t.terminal_fraction > 0.0 && t.terminal_fraction <= 1.0, "tolerances.terminal_fraction", || {
            format!("must lie in (0, 1], got {}", t.terminal_fraction)
        })?;
        match self.command {
            Command::Window => {
                use ahl::analysis::{MIN_SWEEP_CAPACITIES, MIN_SWEEP_DECADES, MIN_SWEEP_RUNS};
                let n = self.capacities.len();
                check(n >= MIN_SWEEP_CAPACITIES, "capacities", || {
                    format!("window needs a capacity sweep of at least {MIN_SWEEP_CAPACITIES} values, got {n}")
                })?;
                let (lo, hi) = self.capacities.iter().fold((1.0f64, 0.0f64), |(a, b), &c| (a.min(c), b.max(c)));
                check((hi / lo).log10() >= MIN_SWEEP_DECADES - 1e-9, "capacities", || {
                    format!("window sweep must span at least {MIN_SWEEP_DECADES} decades, spans {:.2}", (hi / lo).log10())
                })?;
                check(self.runs >= MIN_SWEEP_RUNS, "runs", || {
                    format!("window needs at least {MIN_SWEEP_RUNS} runs per capacity, got {}", self.runs)
                })?;
            }
            Command::Cluster => {
                check(self.capacities.len() == 1, "capacities", || "cluster takes exactly one capacity".into())?;
                check(self.particles >= 1, "particles", || "must be at least 1".into())?;
            }
            Command::Fluctuations => {
                check(self.capacities.len() == 1, "capacities", || "fluctuations takes exactly one capacity".into())?;
                check(self.starts.len() <= 1, "starts", || "fluctuations takes at most one start point".into())?;
                let min = ahl::analysis::MIN_NORMALITY_SAMPLES;
                check(self.runs >= min, "runs", || format!("fluctuations needs at least {min} runs, got {}", self.runs))?;
            }
            _ => {}
        }
        Ok(())
    }

    pub fn measure(&self) -> AttachmentMeasure {
        parse_measure(&self.measure).expect("validated")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

impl FromStr for ExperimentConfig {
    type Err = ConfigError;

    /// Parses an echoed `config.toml`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let cfg: ExperimentConfig =
            toml::from_str(s).map_err(|e| ConfigError::Parse { path: "config.toml".into(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }
}
