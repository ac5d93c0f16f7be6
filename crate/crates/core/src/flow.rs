//! The stochastic harmonic measure flow `X_n(x) = γ_n(X_{n−1}(x))`, its
//! martingale decomposition, and seeded ensembles of trajectories.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::BetaTable;
use crate::measure::AttachmentMeasure;
use crate::particle::{BoundaryAngle, SlitParticle};

/// SplitMix64 finaliser.
#[inline]
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of trajectory `index`: `base ⊕ splitmix64(index)`. Each seed keys
/// an independent ChaCha8 stream.
#[inline]
pub fn trajectory_seed(base: u64, index: u64) -> u64 {
    base ^ splitmix64(index)
}

/// `n(t) = ⌊t/c⌋`, with a relative guard so that e.g. `3 / 1e-4` maps to
/// 30000 and not 29999.
#[inline]
pub fn steps_for_time(t: f64, capacity: f64) -> u64 {
    let r = t / capacity;
    (r + 1e-9 * r.max(1.0)).floor().max(0.0) as u64
}

/// One step of the flow: `γ(x − θ) + θ = x + γ̃(x − θ)`.
#[inline]
pub fn flow_step(p: &SlitParticle, x_prev: f64, theta: BoundaryAngle) -> f64 {
    x_prev + p.gamma_tilde(x_prev - theta.0)
}

/// The first step at which a trajectory left an interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exit {
    pub n: u64,
    pub value: f64,
}

/// Recorded martingale state at a snapshot: `(n, S_n, Σ β_ν(X_{i−1}))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MartingalePoint {
    pub n: u64,
    pub s: f64,
    pub drift_sum: f64,
}

/// One trajectory of the flow from `start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTrajectory {
    pub start: f64,
    pub capacity: f64,
    pub seed: u64,
    /// `(n, X_n)`, strictly increasing in `n`; always ends with the last step.
    pub snapshots: Vec<(u64, f64)>,
    pub final_n: u64,
    pub martingale: Option<Vec<MartingalePoint>>,
    pub exit: Option<Exit>,
}

impl FlowTrajectory {
    /// A trajectory from given values, e.g. a deterministic surrogate.
    pub fn from_snapshots(start: f64, capacity: f64, snapshots: Vec<(u64, f64)>) -> Self {
        let final_n = snapshots.last().map(|s| s.0).unwrap_or(0);
        Self { start, capacity, seed: 0, snapshots, final_n, martingale: None, exit: None }
    }

    /// `X_n` at step `n`, if recorded.
    pub fn value_at(&self, n: u64) -> Option<f64> {
        self.snapshots.binary_search_by_key(&n, |s| s.0).ok().map(|i| self.snapshots[i].1)
    }

    /// `X_{n(t)}`, if recorded.
    pub fn value_at_time(&self, t: f64) -> Option<f64> {
        self.value_at(steps_for_time(t, self.capacity))
    }

    pub fn final_value(&self) -> f64 {
        self.snapshots.last().map(|s| s.1).unwrap_or(self.start)
    }
}

/// Per-run options for [`run_flow`].
#[derive(Debug, Clone, Copy, Default)]
pub struct FlowOptions<'a> {
    /// Sorted step indices to record.
    pub schedule: &'a [u64],
    /// When set, `S_n` and `Σβ_ν` are accumulated using this table.
    pub martingale: Option<&'a BetaTable>,
    /// Stop at the first step outside `[lo, hi]`.
    pub stop_outside: Option<(f64, f64)>,
}

/// Runs `n_steps` of the flow from `x0` with attachment angles drawn from
/// `m` using the ChaCha8 stream keyed by `seed`.
pub fn run_flow(
    p: &SlitParticle,
    m: &AttachmentMeasure,
    x0: f64,
    n_steps: u64,
    seed: u64,
    opts: FlowOptions<'_>,
) -> FlowTrajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schedule = opts.schedule;
    let mut snapshots = Vec::with_capacity(schedule.len() + 1);
    let mut mart = opts.martingale.map(|_| Vec::with_capacity(schedule.len() + 1));
    let mut next = 0usize;
    while next < schedule.len() && schedule[next] == 0 {
        snapshots.push((0, x0));
        if let Some(ms) = mart.as_mut() {
            ms.push(MartingalePoint { n: 0, s: 0.0, drift_sum: 0.0 });
        }
        next += 1;
    }
    let (lo, hi) = opts.stop_outside.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
    let mut x = x0;
    let mut s = 0.0;
    let mut drift = 0.0;
    let mut exit = None;
    let mut n = 0u64;
    while n < n_steps {
        n += 1;
        let theta = m.quantile(rng.random::<f64>());
        let d = p.gamma_tilde(x - theta);
        if let Some(table) = opts.martingale {
            let beta = table.eval(x);
            s += d - beta;
            drift += beta;
        }
        x += d;
        while next < schedule.len() && schedule[next] <= n {
            if schedule[next] == n {
                snapshots.push((n, x));
                if let Some(ms) = mart.as_mut() {
                    ms.push(MartingalePoint { n, s, drift_sum: drift });
                }
            }
            next += 1;
        }
        if !(x >= lo && x <= hi) {
            exit = Some(Exit { n, value: x });
            break;
        }
    }
    if snapshots.last().map(|l| l.0) != Some(n) {
        snapshots.push((n, x));
        if let Some(ms) = mart.as_mut() {
            ms.push(MartingalePoint { n, s, drift_sum: drift });
        }
    }
    FlowTrajectory { start: x0, capacity: p.capacity(), seed, snapshots, final_n: n, martingale: mart, exit }
}

/// `(n, S_n, Σβ_ν)` aligned with the snapshots.
pub fn decompose_martingale(traj: &FlowTrajectory) -> Result<&[MartingalePoint]> {
    traj.martingale
        .as_deref()
        .ok_or_else(|| Error::MissingData("trajectory was run without martingale tracking".into()))
}

/// Parameters of an ensemble. Times are in `t`-units and converted with
/// [`steps_for_time`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub capacity: f64,
    pub starts: Vec<f64>,
    pub runs_per_start: usize,
    pub horizon: f64,
    pub snapshot_times: Vec<f64>,
    pub base_seed: u64,
    pub track_martingale: bool,
    pub stop_outside: Option<(f64, f64)>,
}

impl EnsembleConfig {
    pub fn new(capacity: f64, starts: Vec<f64>, runs_per_start: usize, horizon: f64, base_seed: u64) -> Self {
        Self {
            capacity,
            starts,
            runs_per_start,
            horizon,
            snapshot_times: Vec::new(),
            base_seed,
            track_martingale: false,
            stop_outside: None,
        }
    }

    /// Sorted, deduplicated step indices of the snapshot times.
    pub fn schedule(&self) -> Vec<u64> {
        let n_max = steps_for_time(self.horizon, self.capacity);
        let mut s: Vec<u64> = self
            .snapshot_times
            .iter()
            .map(|&t| steps_for_time(t, self.capacity))
            .filter(|&n| n <= n_max)
            .collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.capacity > 0.0 && self.capacity < 1.0) {
            return Err(Error::Domain(format!("capacity must lie in (0, 1), got {}", self.capacity)));
        }
        if self.starts.is_empty() || self.starts.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain("ensemble needs finite start points".into()));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::Domain(format!("horizon must be finite and >= 0, got {}", self.horizon)));
        }
        if self.snapshot_times.iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::Domain("snapshot times must be >= 0".into()));
        }
        Ok(())
    }
}

/// A batch of independent trajectories, in index order
/// (`index = start_index · runs_per_start + run`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowEnsemble {
    pub config: EnsembleConfig,
    pub trajectories: Vec<FlowTrajectory>,
}

impl FlowEnsemble {
    /// Trajectories started from `starts[i]`.
    pub fn from_start(&self, i: usize) -> &[FlowTrajectory] {
        let m = self.config.runs_per_start;
        &self.trajectories[i * m..(i + 1) * m]
    }

    /// Snapshot table as CSV: `run_id,n,t,X[,S]`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let with_s = self.config.track_martingale;
        writeln!(w, "{}", if with_s { "run_id,n,t,X,S" } else { "run_id,n,t,X" })?;
        for (id, traj) in self.trajectories.iter().enumerate() {
            for (k, &(n, x)) in traj.snapshots.iter().enumerate() {
                let t = n as f64 * traj.capacity;
                match (&traj.martingale, with_s) {
                    (Some(ms), true) => writeln!(w, "{id},{n},{t},{x},{}", ms[k].s)?,
                    _ => writeln!(w, "{id},{n},{t},{x}")?,
                }
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut buf = std::io::BufWriter::new(file);
        self.write_csv(&mut buf)?;
        buf.flush()?;
        Ok(())
    }
}

/// Runs every trajectory of the ensemble. Results do not depend on the
/// number of worker threads.
pub fn run_ensemble(
    p: &SlitParticle,
    m: &AttachmentMeasure,
    cfg: &EnsembleConfig,
    beta: Option<&BetaTable>,
) -> Result<FlowEnsemble> {
    run_ensemble_observed(p, m, cfg, beta, &|| {})
}

/// As [`run_ensemble`], calling `on_done` after each finished trajectory.
pub fn run_ensemble_observed(
    p: &SlitParticle,
    m: &AttachmentMeasure,
    cfg: &EnsembleConfig,
    beta: Option<&BetaTable>,
    on_done: &(dyn Fn() + Sync),
) -> Result<FlowEnsemble> {
    cfg.validate()?;
    if (p.capacity() - cfg.capacity).abs() > 1e-15 * cfg.capacity {
        return Err(Error::Domain(format!(
            "particle capacity {} does not match ensemble capacity {}",
            p.capacity(),
            cfg.capacity
        )));
    }
    if cfg.track_martingale && beta.is_none() {
        return Err(Error::MissingData("martingale tracking needs a beta table".into()));
    }
    let schedule = cfg.schedule();
    let n_steps = steps_for_time(cfg.horizon, cfg.capacity);
    let total = cfg.starts.len() * cfg.runs_per_start;
    let opts = FlowOptions {
        schedule: &schedule,
        martingale: if cfg.track_martingale { beta } else { None },
        stop_outside: cfg.stop_outside,
    };
    let trajectories: Vec<FlowTrajectory> = (0..total)
        .into_par_iter()
        .map(|i| {
            let x0 = cfg.starts[i / cfg.runs_per_start.max(1)];
            let traj = run_flow(p, m, x0, n_steps, trajectory_seed(cfg.base_seed, i as u64), opts);
            on_done();
            traj
        })
        .collect();
    for (i, t) in trajectories.iter().enumerate() {
        if t.snapshots.iter().any(|s| !s.1.is_finite()) {
            return Err(Error::Trajectory { index: i, source: Box::new(Error::Domain("non-finite value".into())) });
        }
    }
    Ok(FlowEnsemble { config: cfg.clone(), trajectories })
}
