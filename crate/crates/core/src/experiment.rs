//! End-to-end experiments: build the ensembles an analysis needs, run
//! them, and assemble the report. Used by the command-line driver.

use serde::{Deserialize, Serialize};

use crate::analysis::{self, ExperimentReport, TrackingOptions, WindowSample};
use crate::cluster::{self, ClusterState};
use crate::error::{Error, Result};
use crate::field::{DriftField, Rho0};
use crate::flow::{run_ensemble_observed, splitmix64, EnsembleConfig, FlowEnsemble};
use crate::measure::AttachmentMeasure;
use crate::ode::{DeterministicFlow, FixedPoint, FixedPointKind};
use crate::particle::SlitParticle;
use num_complex::Complex64;

/// Default capacity sweep for calibrating `ρ₀`.
pub const DEFAULT_RHO0_SWEEP: [f64; 4] = [1e-3, 1e-4, 1e-5, 1e-6];

/// Receives progress events while ensembles run.
pub trait Observer: Sync {
    fn ensemble_started(&self, _label: &str, _runs: usize) {}
    fn run_finished(&self) {}
    fn ensemble_finished(&self, _label: &str) {}
}

/// An observer that ignores everything.
pub struct Silent;
impl Observer for Silent {}

/// Seed of the `k`-th sub-ensemble of an experiment.
pub fn derive_seed(base: u64, k: u64) -> u64 {
    if k == 0 {
        base
    } else {
        splitmix64(base ^ splitmix64(k.wrapping_mul(0x5851_f42d_4c95_7f2d)))
    }
}

/// `0, dt, 2dt, …` up to and including `horizon`.
pub fn uniform_times(dt: f64, horizon: f64) -> Vec<f64> {
    let k = (horizon / dt + 1e-9).floor() as usize;
    (0..=k).map(|i| i as f64 * dt).collect()
}

/// The deterministic flow of a field: closed form for single cosine
/// modes, adaptive Runge–Kutta otherwise.
pub fn deterministic_flow(field: DriftField) -> DeterministicFlow {
    match DeterministicFlow::closed_form(field.clone()) {
        Ok(f) => f,
        Err(_) => DeterministicFlow::new(field),
    }
}

/// The unstable fixed point with the largest `λ`.
pub fn unstable_point(fl: &DeterministicFlow) -> Result<FixedPoint> {
    fl.fixed_points()?
        .into_iter()
        .filter(|f| f.kind == FixedPointKind::Unstable)
        .max_by(|a, b| a.lambda.total_cmp(&b.lambda))
        .ok_or_else(|| Error::Domain("the drift has no unstable fixed point".into()))
}

fn run(
    p: &SlitParticle,
    m: &AttachmentMeasure,
    cfg: &EnsembleConfig,
    label: &str,
    obs: &dyn Observer,
) -> Result<FlowEnsemble> {
    obs.ensemble_started(label, cfg.starts.len() * cfg.runs_per_start);
    let done = || obs.run_finished();
    let e = run_ensemble_observed(p, m, cfg, None, &done)?;
    obs.ensemble_finished(label);
    Ok(e)
}

/// Parameters of the ODE tracking experiment for one capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingParams {
    pub capacity: f64,
    pub starts: Vec<f64>,
    pub runs: usize,
    pub horizon: f64,
    pub snapshot_dt: f64,
    pub epsilon: f64,
    pub allow_beyond_bound: bool,
    pub seed: u64,
}

/// Tracking of `ψ_t` by the flow over a set of capacities; checks that the
/// median sup error decreases strictly with `c`.
pub fn tracking_sweep(
    fl: &DeterministicFlow,
    params: &[TrackingParams],
    obs: &dyn Observer,
) -> Result<(ExperimentReport, Vec<FlowEnsemble>)> {
    let m = fl.field().measure();
    let mut report = ExperimentReport::new("flow");
    report.param("measure", m.name());
    let mut ensembles = Vec::new();
    let mut medians: Vec<(f64, Vec<f64>)> = Vec::new();
    for tp in params {
        let p = SlitParticle::from_capacity(tp.capacity)?;
        let mut cfg = EnsembleConfig::new(tp.capacity, tp.starts.clone(), tp.runs, tp.horizon, tp.seed);
        cfg.snapshot_times = uniform_times(tp.snapshot_dt, tp.horizon);
        let ens = run(&p, m, &cfg, &format!("flow c={:e}", tp.capacity), obs)?;
        let opts = TrackingOptions {
            horizon: tp.horizon,
            epsilon: tp.epsilon,
            allow_beyond_bound: tp.allow_beyond_bound,
        };
        let r = analysis::ode_tracking_error(&ens, fl, opts)?;
        let meds: Vec<f64> = r
            .statistics
            .iter()
            .filter(|s| s.name.starts_with("median_sup_error") && !s.name.contains("within"))
            .map(|s| s.value)
            .collect();
        medians.push((tp.capacity, meds));
        report.absorb(&format!("c={:e}/", tp.capacity), r);
        ensembles.push(ens);
    }
    if medians.len() > 1 {
        let mut sorted = medians.clone();
        sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
        let n_starts = sorted[0].1.len();
        for s in 0..n_starts {
            let seq: Vec<f64> = sorted.iter().map(|m| m.1[s]).collect();
            let tag = if n_starts == 1 { String::new() } else { format!("[start {s}]") };
            report.check(
                format!("median_sup_error_decreasing{tag}"),
                seq[seq.len() - 1] / seq[0],
                "strictly decreasing in c",
                analysis::strictly_decreasing(&seq),
            );
        }
    }
    Ok((report, ensembles))
}

/// Parameters of the fluctuation experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationParams {
    pub capacity: f64,
    /// Start point; `None` uses the unstable fixed point.
    pub start: Option<f64>,
    pub runs: usize,
    /// Time of the variance and normality checks.
    pub t0: f64,
    /// Earlier time for the increment covariance check.
    pub t1: Option<f64>,
    pub bootstrap_reps: usize,
    pub variance_k_se: f64,
    pub covariance_k_se: f64,
    pub seed: u64,
}

/// Variance and normality of `Z̃_{t₀}`, and the increment covariance
/// between `t₁` and `t₀`.
pub fn fluctuations(
    fl: &DeterministicFlow,
    fp: &FluctuationParams,
    obs: &dyn Observer,
) -> Result<(ExperimentReport, FlowEnsemble)> {
    let m = fl.field().measure();
    let x = match fp.start {
        Some(x) => x,
        None => unstable_point(fl)?.location,
    };
    let p = SlitParticle::from_capacity(fp.capacity)?;
    let mut cfg = EnsembleConfig::new(fp.capacity, vec![x], fp.runs, fp.t0, fp.seed);
    cfg.snapshot_times = std::iter::once(fp.t0).chain(fp.t1).collect();
    let ens = run(&p, m, &cfg, &format!("fluctuations c={:e}", fp.capacity), obs)?;
    let tv = analysis::theoretical_variance(fl, x, fp.t0)?;
    let late = analysis::fluctuation_samples(&ens, fl, fp.t0)?;
    let mut report = ExperimentReport::new("fluctuations");
    report.param("capacity", fp.capacity);
    report.param("start", x);
    report.param("measure", m.name());
    report.param("rho0", tv.rho0);
    report.stat("theory_variance_integral", tv.value, fp.runs, fp.seed);
    if let Some(closed) = tv.closed_form {
        report.stat("theory_variance_closed_form", closed, fp.runs, fp.seed);
        let gap = (closed - tv.value).abs();
        report.check("variance_integral_vs_closed_form", gap, "< 1e-8", gap < 1e-8);
    }
    let theory = tv.closed_form.unwrap_or(tv.value);
    report.absorb("", analysis::variance_check(&late, theory, fp.variance_k_se, fp.bootstrap_reps, fp.seed)?);
    report.absorb("", analysis::test_normality(&late, theory)?);
    if let Some(t1) = fp.t1 {
        let early = analysis::fluctuation_samples(&ens, fl, t1)?;
        report.absorb("", analysis::covariance_check(&early, &late, fp.covariance_k_se)?);
    }
    Ok((report, ens))
}

/// Parameters of the critical-window experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowParams {
    pub capacities: Vec<f64>,
    pub runs: usize,
    /// Half width of `[x₋, x₊]`; `None` uses `min(0.1, λ/(8‖b″‖∞))`.
    pub half_width: Option<f64>,
    pub bootstrap_reps: usize,
    pub slope_tolerance: f64,
    pub symmetry_k_se: f64,
    pub seed: u64,
}

/// Departure of one run in the window experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepartureRecord {
    pub capacity: f64,
    pub run_id: usize,
    pub t: Option<f64>,
    pub upward: Option<bool>,
}

/// `[x₋, x₊]` for the experiment.
pub fn departure_interval(fl: &DeterministicFlow, fp: &FixedPoint, half_width: Option<f64>) -> (f64, f64) {
    match half_width {
        Some(h) => (fp.location - h, fp.location + h),
        None => fl.departure_interval(fp),
    }
}

/// Horizon long enough that almost every run departs:
/// `2·log(c⁻¹)/(4λ)` plus `10/λ`.
pub fn departure_horizon(capacity: f64, lambda: f64) -> f64 {
    2.0 * (1.0 / capacity).ln() / (4.0 * lambda) + 10.0 / lambda
}

/// Runs from the unstable point until departure at every capacity, fits
/// the departure scaling and checks the up/down split.
pub fn window(
    fl: &DeterministicFlow,
    wp: &WindowParams,
    obs: &dyn Observer,
) -> Result<(ExperimentReport, Vec<DepartureRecord>)> {
    if wp.capacities.len() < 2 {
        return Err(Error::Insufficient("window needs a capacity sweep".into()));
    }
    let m = fl.field().measure();
    let fp = unstable_point(fl)?;
    let (lo, hi) = departure_interval(fl, &fp, wp.half_width);
    let mut sweep = Vec::new();
    let mut records = Vec::new();
    let mut departures = Vec::new();
    for (k, &c) in wp.capacities.iter().enumerate() {
        let p = SlitParticle::from_capacity(c)?;
        let mut cfg =
            EnsembleConfig::new(c, vec![fp.location], wp.runs, departure_horizon(c, fp.lambda), derive_seed(wp.seed, k as u64));
        cfg.stop_outside = Some((lo, hi));
        let ens = run(&p, m, &cfg, &format!("window c={c:e}"), obs)?;
        let mut times = Vec::with_capacity(wp.runs);
        for (i, t) in ens.trajectories.iter().enumerate() {
            let d = t.exit.map(|e| analysis::Departure { n: e.n, t: e.n as f64 * c, upward: e.value > hi });
            times.push(d.map(|d| d.t));
            records.push(DepartureRecord { capacity: c, run_id: i, t: d.map(|d| d.t), upward: d.map(|d| d.upward) });
            departures.extend(d);
        }
        sweep.push(WindowSample { capacity: c, times });
    }
    let mut report = ExperimentReport::new("window");
    report.param("measure", m.name());
    report.param("unstable_point", fp.location);
    report.param("interval", [lo, hi]);
    report.param("runs", wp.runs);
    report.param("seed", wp.seed);
    report.absorb("", analysis::window_slope_fit(&sweep, fp.lambda, wp.slope_tolerance, wp.bootstrap_reps, wp.seed)?);
    report.absorb("", analysis::symmetry_split(&departures, wp.symmetry_k_se)?);
    Ok((report, records))
}

/// Parameters of the whole-trajectory envelope experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeParams {
    pub capacities: Vec<f64>,
    pub runs: usize,
    pub t0: f64,
    pub snapshot_dt: f64,
    /// Time simulated past the departure horizon.
    pub beyond: f64,
    pub half_width: Option<f64>,
    pub terminal_radius: f64,
    pub min_fraction: f64,
    pub seed: u64,
}

/// Runs from the unstable point through the critical window and beyond,
/// comparing each run with its deterministic predictor.
pub fn envelope(
    fl: &DeterministicFlow,
    ep: &EnvelopeParams,
    obs: &dyn Observer,
) -> Result<(ExperimentReport, Vec<FlowEnsemble>)> {
    let m = fl.field().measure();
    let fp = unstable_point(fl)?;
    let interval = departure_interval(fl, &fp, ep.half_width);
    let fixed = fl.fixed_points()?;
    let mut per_c = Vec::new();
    let mut ensembles = Vec::new();
    for (k, &c) in ep.capacities.iter().enumerate() {
        let p = SlitParticle::from_capacity(c)?;
        let horizon = 2.0 * (1.0 / c).ln() / (4.0 * fp.lambda) + ep.beyond;
        let mut cfg = EnsembleConfig::new(c, vec![fp.location], ep.runs, horizon, derive_seed(ep.seed, k as u64));
        cfg.snapshot_times = uniform_times(ep.snapshot_dt, horizon);
        cfg.snapshot_times.push(ep.t0);
        let ens = run(&p, m, &cfg, &format!("trajectory c={c:e}"), obs)?;
        per_c.push((c, analysis::envelope_samples(&ens, fl, &fp, ep.t0, interval)?));
        ensembles.push(ens);
    }
    let mut report = analysis::envelope_report(&per_c, &fixed, ep.terminal_radius, ep.min_fraction, ep.seed)?;
    report.name = "trajectory".into();
    report.param("t0", ep.t0);
    report.param("interval", [interval.0, interval.1]);
    report.param("measure", m.name());
    for (c, samples) in &per_c {
        let z: Vec<f64> = samples.iter().map(|s| s.z_hat).collect();
        report.stat(format!("z_hat_variance[c={c:e}]"), crate::stats::variance(&z), z.len(), ep.seed);
    }
    Ok((report, ensembles))
}

/// Parameters of the cluster geometry experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub capacity: f64,
    pub particles: usize,
    pub resolution: usize,
    pub offset: f64,
    pub seed: u64,
}

/// Grows a cluster, traces its boundary and checks capacity additivity.
pub fn cluster_geometry(
    m: &AttachmentMeasure,
    cp: &ClusterParams,
) -> Result<(ExperimentReport, ClusterState, Vec<Complex64>)> {
    let state = ClusterState::grow(cp.capacity, m, cp.particles, cp.seed)?;
    let trace = cluster::boundary_trace(&state, cp.resolution, cp.offset)?;
    let r = 1e6;
    let far = cluster::compose_cluster(&state, Complex64::new(r, 0.0))?;
    let slope = (far.norm() / r).ln();
    let mut report = ExperimentReport::new("cluster");
    report.param("measure", m.name());
    report.param("capacity", cp.capacity);
    report.param("particles", cp.particles);
    report.param("resolution", cp.resolution);
    report.param("offset", cp.offset);
    report.stat("total_capacity", state.total_capacity(), cp.particles, cp.seed);
    report.stat("log_far_field_slope", slope, cp.particles, cp.seed);
    let max_r = trace.iter().map(|z| z.norm()).fold(0.0, f64::max);
    report.stat("max_radius", max_r, cp.particles, cp.seed);
    let gap = (slope - state.total_capacity()).abs();
    report.check("capacity_additivity", gap, "< 1e-4", gap < 1e-4);
    Ok((report, state, trace))
}

/// `ρ₀` for slits from a capacity sweep.
pub fn calibration_report(rho: &Rho0) -> ExperimentReport {
    let mut r = ExperimentReport::new("calibrate");
    r.param("capacities", &rho.capacities);
    for (c, q) in rho.capacities.iter().zip(&rho.raw) {
        r.stat(format!("raw[c={c:e}]"), *q, 1, 0);
    }
    r.stat("rho0", rho.value, rho.capacities.len(), 0).std_error = Some(rho.uncertainty);
    let rel = rho.uncertainty / rho.value;
    r.check("relative_uncertainty", rel, "< 0.02", !rho.coarse);
    r
}
