//! Statistical experiments on flow ensembles: tracking of the deterministic
//! flow, pulled-back fluctuations and their Gaussian limit, departure from
//! an unstable point, and whole-trajectory envelopes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{steps_for_time, FlowEnsemble, FlowTrajectory};
use crate::ode::{DeterministicFlow, FixedPoint, FixedPointKind};
use crate::stats;

/// Significance level of the normality gate.
pub const KS_ALPHA: f64 = 0.01;
/// Minimum sample size for [`test_normality`].
pub const MIN_NORMALITY_SAMPLES: usize = 500;
/// Minimum number of snapshots inside `[T̂₁ − 2, T̂₁ + 2]`.
pub const MIN_WINDOW_SNAPSHOTS: usize = 100;
/// Smallest capacity sweep accepted by the window slope fit.
pub const MIN_SWEEP_CAPACITIES: usize = 4;
/// Smallest span of that sweep, in decades.
pub const MIN_SWEEP_DECADES: f64 = 3.0;
/// Runs needed per capacity of the sweep.
pub const MIN_SWEEP_RUNS: usize = 500;

/// A named statistic together with the ensemble it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Statistic {
    pub name: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interval: Option<[f64; 2]>,
    pub ensemble_size: usize,
    pub seed: u64,
}

/// A pass/fail comparison against a declared tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub observed: f64,
    pub tolerance: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub parameters: BTreeMap<String, serde_json::Value>,
    pub statistics: Vec<Statistic>,
    pub checks: Vec<Check>,
}

impl ExperimentReport {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), ..Default::default() }
    }

    pub fn param(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
        self.parameters.insert(key.to_string(), v);
    }

    pub fn stat(&mut self, name: impl Into<String>, value: f64, ensemble_size: usize, seed: u64) -> &mut Statistic {
        self.statistics.push(Statistic {
            name: name.into(),
            value,
            std_error: None,
            interval: None,
            ensemble_size,
            seed,
        });
        self.statistics.last_mut().unwrap()
    }

    pub fn check(&mut self, name: impl Into<String>, observed: f64, tolerance: impl Into<String>, passed: bool) {
        self.checks.push(Check { name: name.into(), observed, tolerance: tolerance.into(), passed });
    }

    /// The first statistic called `name`.
    pub fn value(&self, name: &str) -> Option<f64> {
        self.statistics.iter().find(|s| s.name == name).map(|s| s.value)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// Appends the statistics and checks of `other`, prefixing their names.
    pub fn absorb(&mut self, prefix: &str, other: ExperimentReport) {
        for mut s in other.statistics {
            s.name = format!("{prefix}{}", s.name);
            self.statistics.push(s);
        }
        for mut c in other.checks {
            c.name = format!("{prefix}{}", c.name);
            self.checks.push(c);
        }
        for (k, v) in other.parameters {
            self.parameters.entry(format!("{prefix}{k}")).or_insert(v);
        }
    }

    /// Aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "== {} ==", self.name);
        for (k, v) in &self.parameters {
            let _ = writeln!(out, "  {k} = {v}");
        }
        let w = self
            .statistics
            .iter()
            .map(|s| s.name.len())
            .chain(self.checks.iter().map(|c| c.name.len()))
            .max()
            .unwrap_or(4)
            .max(4);
        if !self.statistics.is_empty() {
            let _ = writeln!(out, "  {:<w$}  {:>14}  {:>12}  {:>27}  {:>7}  {:>20}", "stat", "value", "std_err", "interval", "M", "seed");
            for s in &self.statistics {
                let se = s.std_error.map(|e| format!("{e:.4e}")).unwrap_or_else(|| "-".into());
                let ci = s.interval.map(|[a, b]| format!("[{a:.5e}, {b:.5e}]")).unwrap_or_else(|| "-".into());
                let _ = writeln!(
                    out,
                    "  {:<w$}  {:>14.6e}  {:>12}  {:>27}  {:>7}  {:>20}",
                    s.name, s.value, se, ci, s.ensemble_size, s.seed
                );
            }
        }
        if !self.checks.is_empty() {
            let _ = writeln!(out, "  {:<w$}  {:>14}  {:<28}  result", "check", "observed", "tolerance");
            for c in &self.checks {
                let _ = writeln!(
                    out,
                    "  {:<w$}  {:>14.6e}  {:<28}  {}",
                    c.name,
                    c.observed,
                    c.tolerance,
                    if c.passed { "PASS" } else { "FAIL" }
                );
            }
        }
        out
    }
}

/// Whether each value is strictly below its predecessor.
pub fn strictly_decreasing(values: &[f64]) -> bool {
    values.windows(2).all(|w| w[1] < w[0])
}

fn snapshot_time(traj: &FlowTrajectory, n: u64) -> f64 {
    n as f64 * traj.capacity
}

// `ψ_t(x)` at sorted times of either sign, integrating away from 0.
fn predictor_path(fl: &DeterministicFlow, x: f64, times: &[f64]) -> Result<Vec<f64>> {
    let split = times.partition_point(|&t| t < 0.0);
    let back: Vec<f64> = times[..split].iter().rev().copied().collect();
    let mut out: Vec<f64> = fl.psi_path(x, &back)?.into_iter().rev().collect();
    out.extend(fl.psi_path(x, &times[split..])?);
    Ok(out)
}

/// `sup_{t ≤ T} |X_{n(t)}(x) − ψ_t(x)|` over the recorded snapshots of one run.
pub fn tracking_sup_error(traj: &FlowTrajectory, fl: &DeterministicFlow, horizon: f64) -> Result<f64> {
    let n_max = steps_for_time(horizon, traj.capacity);
    let snaps: Vec<(u64, f64)> = traj.snapshots.iter().copied().filter(|s| s.0 <= n_max).collect();
    if snaps.is_empty() {
        return Err(Error::MissingData(format!("no snapshots within horizon {horizon}")));
    }
    let times: Vec<f64> = snaps.iter().map(|s| snapshot_time(traj, s.0)).collect();
    let psi = fl.psi_path(traj.start, &times)?;
    Ok(snaps.iter().zip(&psi).fold(0.0f64, |m, (s, p)| m.max((s.1 - p).abs())))
}

/// Options of [`ode_tracking_error`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingOptions {
    pub horizon: f64,
    /// Threshold for the exceedance probability `P(sup > ε)`.
    pub epsilon: f64,
    /// Permit horizons beyond the logarithmic tracking bound.
    pub allow_beyond_bound: bool,
}

/// Distribution of the sup tracking error per start point of an ensemble.
pub fn ode_tracking_error(ens: &FlowEnsemble, fl: &DeterministicFlow, opts: TrackingOptions) -> Result<ExperimentReport> {
    let c = ens.config.capacity;
    let bound = fl.tracking_horizon(c);
    if opts.horizon > bound && !opts.allow_beyond_bound {
        return Err(Error::Horizon { horizon: opts.horizon, bound });
    }
    let errors: Vec<f64> = ens
        .trajectories
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            tracking_sup_error(t, fl, opts.horizon).map_err(|e| Error::Trajectory { index: i, source: Box::new(e) })
        })
        .collect::<Result<_>>()?;
    let within: Vec<f64> = if bound > 0.0 && bound < opts.horizon {
        ens.trajectories
            .par_iter()
            .map(|t| tracking_sup_error(t, fl, bound).unwrap_or(f64::NAN))
            .collect()
    } else {
        Vec::new()
    };
    let seed = ens.config.base_seed;
    let m = ens.config.runs_per_start;
    let mut r = ExperimentReport::new("ode_tracking_error");
    r.param("capacity", c);
    r.param("horizon", opts.horizon);
    r.param("tracking_bound", bound);
    r.param("epsilon", opts.epsilon);
    r.param("measure", fl.field().measure().name());
    for (k, &x) in ens.config.starts.iter().enumerate() {
        let e = &errors[k * m..(k + 1) * m];
        let tag = if ens.config.starts.len() == 1 { String::new() } else { format!("[x={x}]") };
        let med = stats::median(e);
        let boot = stats::bootstrap_se(e, 200, seed ^ k as u64, stats::median);
        r.stat(format!("median_sup_error{tag}"), med, m, seed).std_error = Some(boot);
        r.stat(format!("q90_sup_error{tag}"), stats::quantile_sorted(&sorted(e), 0.9), m, seed);
        let exceed = e.iter().filter(|&&v| v > opts.epsilon).count() as f64 / m as f64;
        r.stat(format!("exceedance{tag}"), exceed, m, seed).std_error =
            Some((exceed * (1.0 - exceed) / m as f64).sqrt());
        if !within.is_empty() {
            let w: Vec<f64> = within[k * m..(k + 1) * m].to_vec();
            r.stat(format!("median_sup_error_within_bound{tag}"), stats::median(&w), m, seed);
        }
    }
    Ok(r)
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// `Z̃ = c^{−1/4}(Φ_{nc}(X_n) − x)` at one time of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluctuationSample {
    pub z_tilde: f64,
    pub t: f64,
    pub run_id: usize,
}

/// The pulled-back fluctuation of `traj` at time `t`.
pub fn pulled_back_fluctuation(
    traj: &FlowTrajectory,
    fl: &DeterministicFlow,
    t: f64,
    run_id: usize,
) -> Result<FluctuationSample> {
    let n = steps_for_time(t, traj.capacity);
    let x_n = traj
        .value_at(n)
        .ok_or_else(|| Error::MissingData(format!("run {run_id} has no snapshot at n = {n} (t = {t})")))?;
    if n == 0 {
        return Ok(FluctuationSample { z_tilde: 0.0, t, run_id });
    }
    let pulled = fl.inverse(x_n, n as f64 * traj.capacity)?;
    Ok(FluctuationSample { z_tilde: (pulled - traj.start) * traj.capacity.powf(-0.25), t, run_id })
}

/// Fluctuations of every run of an ensemble at time `t`.
pub fn fluctuation_samples(ens: &FlowEnsemble, fl: &DeterministicFlow, t: f64) -> Result<Vec<FluctuationSample>> {
    ens.trajectories
        .par_iter()
        .enumerate()
        .map(|(i, traj)| pulled_back_fluctuation(traj, fl, t, i))
        .collect()
}

/// `λ` and `h(a)` at a fixed point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointComponents {
    pub lambda: f64,
    pub density: f64,
}

/// Variance of the limiting fluctuation `Z_t(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoreticalVariance {
    pub t: f64,
    pub value: f64,
    pub at_fixed_point: bool,
    pub rho0: f64,
    pub components: Option<FixedPointComponents>,
    /// `ρ₀h(a)(1 − e^{−2λt})/(2λ)` when `x` is a fixed point.
    pub closed_form: Option<f64>,
}

/// `ρ₀ ∫₀ᵗ ψ′_s(x)^{−2} h(ψ_s(x)) ds`, plus the closed form at fixed points.
pub fn theoretical_variance(fl: &DeterministicFlow, x: f64, t: f64) -> Result<TheoreticalVariance> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::Domain(format!("variance time must be finite and >= 0, got {t}")));
    }
    let field = fl.field();
    let rho0 = field.rho0()?.value;
    let measure = field.measure();
    let integral = if t == 0.0 {
        0.0
    } else {
        fl.integrate_along(x, t, |psi, d| measure.density(psi) / (d * d))?.2
    };
    let at_fixed_point = field.b(x).abs() < 1e-12;
    let (components, closed_form) = if at_fixed_point {
        let lambda = field.b_derivative(x, 1);
        let density = measure.density(x);
        let closed = if lambda.abs() < 1e-14 {
            rho0 * density * t
        } else {
            rho0 * density * (-(-2.0 * lambda * t).exp_m1()) / (2.0 * lambda)
        };
        (Some(FixedPointComponents { lambda, density }), Some(closed))
    } else {
        (None, None)
    };
    Ok(TheoreticalVariance { t, value: rho0 * integral, at_fixed_point, rho0, components, closed_form })
}

fn common_time(samples: &[FluctuationSample]) -> Result<f64> {
    let t = samples.first().map(|s| s.t).ok_or_else(|| Error::Insufficient("no samples".into()))?;
    if samples.iter().any(|s| (s.t - t).abs() > 1e-12 * (1.0 + t)) {
        return Err(Error::Domain("samples must share a common time".into()));
    }
    Ok(t)
}

/// KS test of the samples standardised by the limiting variance.
pub fn test_normality(samples: &[FluctuationSample], variance: f64) -> Result<ExperimentReport> {
    if samples.len() < MIN_NORMALITY_SAMPLES {
        return Err(Error::Insufficient(format!(
            "normality test needs at least {MIN_NORMALITY_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    if !(variance > 0.0) {
        return Err(Error::Domain(format!("variance must be positive, got {variance}")));
    }
    let t = common_time(samples)?;
    let sd = variance.sqrt();
    let z: Vec<f64> = samples.iter().map(|s| s.z_tilde / sd).collect();
    let (d, p) = stats::ks_test(&z, stats::normal_cdf);
    let mut r = ExperimentReport::new("normality");
    r.param("t", t);
    r.param("variance", variance);
    r.stat("ks_statistic", d, samples.len(), 0);
    r.stat("ks_p_value", p, samples.len(), 0);
    r.check("ks_p_value", p, format!("> {KS_ALPHA}"), p > KS_ALPHA);
    Ok(r)
}

/// Empirical variance of the fluctuations against the limit, within
/// `k_se` bootstrap standard errors.
pub fn variance_check(
    samples: &[FluctuationSample],
    theory: f64,
    k_se: f64,
    reps: usize,
    seed: u64,
) -> Result<ExperimentReport> {
    if samples.len() < 2 {
        return Err(Error::Insufficient("variance check needs at least two samples".into()));
    }
    let t = common_time(samples)?;
    let z: Vec<f64> = samples.iter().map(|s| s.z_tilde).collect();
    let var = stats::variance(&z);
    let se = stats::bootstrap_se(&z, reps, seed, stats::variance);
    let mut r = ExperimentReport::new("fluctuation_variance");
    r.param("t", t);
    r.param("bootstrap_reps", reps);
    r.stat("mean", stats::mean(&z), z.len(), seed).std_error = Some(stats::std_error(&z));
    r.stat("variance", var, z.len(), seed).std_error = Some(se);
    r.stat("theory_variance", theory, z.len(), seed);
    let dev = (var - theory).abs() / se;
    r.stat("deviation_in_se", dev, z.len(), seed);
    r.check("variance_vs_theory", dev, format!("< {k_se} bootstrap SE"), dev < k_se);
    Ok(r)
}

/// `Ĉov(Z̃_{t₂} − Z̃_{t₁}, Z̃_{t₁})` with its standard error.
pub fn increment_covariance(early: &[FluctuationSample], late: &[FluctuationSample]) -> Result<(f64, f64)> {
    if early.len() != late.len() || early.len() < 2 {
        return Err(Error::Insufficient("covariance needs two aligned samples of size >= 2".into()));
    }
    if early.iter().zip(late).any(|(a, b)| a.run_id != b.run_id) {
        return Err(Error::Domain("samples must be aligned by run".into()));
    }
    let z1: Vec<f64> = early.iter().map(|s| s.z_tilde).collect();
    let dz: Vec<f64> = late.iter().zip(early).map(|(b, a)| b.z_tilde - a.z_tilde).collect();
    let (m1, md) = (stats::mean(&z1), stats::mean(&dz));
    let prod: Vec<f64> = z1.iter().zip(&dz).map(|(a, d)| (a - m1) * (d - md)).collect();
    let n = prod.len() as f64;
    Ok((stats::mean(&prod) * n / (n - 1.0), stats::std_error(&prod)))
}

/// Increment covariance within `k_se` standard errors of 0.
pub fn covariance_check(early: &[FluctuationSample], late: &[FluctuationSample], k_se: f64) -> Result<ExperimentReport> {
    let (cov, se) = increment_covariance(early, late)?;
    let mut r = ExperimentReport::new("increment_covariance");
    r.param("t1", common_time(early)?);
    r.param("t2", common_time(late)?);
    r.stat("covariance", cov, early.len(), 0).std_error = Some(se);
    r.check("increment_covariance", cov.abs() / se, format!("< {k_se} SE"), cov.abs() < k_se * se);
    Ok(r)
}

/// The first exit of a run from `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Departure {
    pub n: u64,
    pub t: f64,
    /// Left through `hi`.
    pub upward: bool,
}

/// First recorded step outside `[lo, hi]`.
pub fn departure(traj: &FlowTrajectory, lo: f64, hi: f64) -> Option<Departure> {
    traj.snapshots.iter().find(|s| s.1 < lo || s.1 > hi).map(|&(n, x)| Departure {
        n,
        t: n as f64 * traj.capacity,
        upward: x > hi,
    })
}

/// Departure time `n·c` from `[x₋, x₊]` around an unstable point. Runs
/// that have not left by the end of the horizon give `None`.
pub fn departure_time(traj: &FlowTrajectory, fp: &FixedPoint, x_minus: f64, x_plus: f64) -> Option<f64> {
    debug_assert!(x_minus < fp.location && fp.location < x_plus);
    departure(traj, x_minus, x_plus).map(|d| d.t)
}

/// Departure times of one capacity in a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSample {
    pub capacity: f64,
    pub times: Vec<Option<f64>>,
}

impl WindowSample {
    // Median with censored runs (None) counted as +∞.
    fn median(times: &[Option<f64>]) -> Option<f64> {
        let mut v: Vec<f64> = times.iter().map(|t| t.unwrap_or(f64::INFINITY)).collect();
        v.sort_by(f64::total_cmp);
        let m = stats::quantile_sorted(&v, 0.5);
        m.is_finite().then_some(m)
    }
}

/// Regression of the median departure time on `log c⁻¹` across a sweep,
/// against the theory slope `1/(4λ)`.
pub fn window_slope_fit(
    sweep: &[WindowSample],
    lambda: f64,
    rel_tolerance: f64,
    reps: usize,
    seed: u64,
) -> Result<ExperimentReport> {
    if sweep.len() < MIN_SWEEP_CAPACITIES {
        return Err(Error::Insufficient(format!(
            "slope fit needs at least {MIN_SWEEP_CAPACITIES} capacities, got {}",
            sweep.len()
        )));
    }
    let (cmin, cmax) = sweep
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(a, b), s| (a.min(s.capacity), b.max(s.capacity)));
    if (cmax / cmin).log10() < MIN_SWEEP_DECADES - 1e-9 {
        return Err(Error::Insufficient(format!(
            "slope fit needs capacities spanning at least {MIN_SWEEP_DECADES} decades"
        )));
    }
    if let Some(s) = sweep.iter().find(|s| s.times.len() < MIN_SWEEP_RUNS) {
        return Err(Error::Insufficient(format!(
            "capacity {} has {} runs, need {MIN_SWEEP_RUNS}",
            s.capacity,
            s.times.len()
        )));
    }
    let mut sweep = sweep.to_vec();
    sweep.sort_by(|a, b| b.capacity.total_cmp(&a.capacity));
    let logs: Vec<f64> = sweep.iter().map(|s| (1.0 / s.capacity).ln()).collect();
    let medians: Vec<f64> = sweep
        .iter()
        .map(|s| {
            WindowSample::median(&s.times)
                .ok_or_else(|| Error::Insufficient(format!("fewer than half the runs departed at c = {}", s.capacity)))
        })
        .collect::<Result<_>>()?;
    let (slope, intercept) = stats::linear_fit(&logs, &medians)?;

    // Bootstrap: resample the runs of every capacity independently.
    let mut rng_seed = seed;
    let mut boot = Vec::with_capacity(reps);
    let resampled: Vec<Vec<Vec<f64>>> = sweep
        .iter()
        .map(|s| {
            let idx: Vec<f64> = (0..s.times.len()).map(|i| i as f64).collect();
            rng_seed = rng_seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
            let meds = stats::bootstrap(&idx, reps, rng_seed, |sample| {
                let ts: Vec<Option<f64>> = sample.iter().map(|&i| s.times[i as usize]).collect();
                WindowSample::median(&ts).unwrap_or(f64::INFINITY)
            });
            vec![meds]
        })
        .collect();
    for b in 0..reps {
        let y: Vec<f64> = resampled.iter().map(|m| m[0][b]).collect();
        if y.iter().all(|v| v.is_finite()) {
            boot.push(stats::linear_fit(&logs, &y)?.0);
        }
    }
    boot.sort_by(f64::total_cmp);
    let ci = if boot.is_empty() {
        [f64::NAN, f64::NAN]
    } else {
        [stats::quantile_sorted(&boot, 0.025), stats::quantile_sorted(&boot, 0.975)]
    };
    let theory = 1.0 / (4.0 * lambda);
    let m = sweep.iter().map(|s| s.times.len()).min().unwrap_or(0);
    let mut r = ExperimentReport::new("window_slope_fit");
    r.param("capacities", sweep.iter().map(|s| s.capacity).collect::<Vec<_>>());
    r.param("lambda", lambda);
    r.param("bootstrap_reps", reps);
    {
        let st = r.stat("slope", slope, m, seed);
        st.interval = Some(ci);
        st.std_error = (boot.len() > 1).then(|| stats::variance(&boot).sqrt());
    }
    r.stat("intercept", intercept, m, seed);
    r.stat("theory_slope", theory, m, seed);
    let mut iqrs = Vec::with_capacity(sweep.len());
    for (s, (&med, &l)) in sweep.iter().zip(medians.iter().zip(&logs)) {
        let departed: Vec<f64> = s.times.iter().flatten().map(|t| t - slope * l).collect();
        let iqr = stats::iqr(&departed);
        iqrs.push(iqr);
        r.stat(format!("median_departure[c={:e}]", s.capacity), med, s.times.len(), seed);
        r.stat(format!("centered_iqr[c={:e}]", s.capacity), iqr, departed.len(), seed);
        let censored = s.times.iter().filter(|t| t.is_none()).count();
        r.stat(format!("censored[c={:e}]", s.capacity), censored as f64, s.times.len(), seed);
    }
    let (lo, hi) = (theory * (1.0 - rel_tolerance), theory * (1.0 + rel_tolerance));
    r.check("slope", slope, format!("in [{lo:.4}, {hi:.4}]"), slope >= lo && slope <= hi);
    let k = iqrs.len();
    let ratio = iqrs[k - 1] / iqrs[k - 2];
    r.check("iqr_ratio_smallest_c", ratio, "< 1.5 (non-expanding)", ratio < 1.5);
    Ok(r)
}

/// Fraction of departures through the upper end, against 1/2 ± `k_se`·SE.
pub fn symmetry_split(departures: &[Departure], k_se: f64) -> Result<ExperimentReport> {
    if departures.is_empty() {
        return Err(Error::Insufficient("no departures".into()));
    }
    let n = departures.len() as f64;
    let up = departures.iter().filter(|d| d.upward).count() as f64 / n;
    let se = 0.5 / n.sqrt();
    let mut r = ExperimentReport::new("departure_symmetry");
    r.stat("upward_fraction", up, departures.len(), 0).std_error = Some(se);
    r.check("upward_fraction", (up - 0.5).abs() / se, format!("|f - 1/2| < {k_se} SE"), (up - 0.5).abs() < k_se * se);
    Ok(r)
}

/// Envelope statistics of a single run started at an unstable point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeSample {
    /// `sup_t |X_{n(t)} − ψ_{t−t₀}(X_{n(t₀)})|` over every snapshot.
    pub sup_error: f64,
    /// `Ẑ = c^{−1/4}(Φ_{t₀}(X_{n(t₀)}) − a)`.
    pub z_hat: f64,
    pub departure: Option<f64>,
    pub window_snapshots: usize,
    pub terminal: f64,
}

/// Compares a run from the unstable point `fp` with the deterministic
/// predictor started from its state at `t0`.
pub fn trajectory_envelope_error(
    traj: &FlowTrajectory,
    fl: &DeterministicFlow,
    fp: &FixedPoint,
    t0: f64,
    interval: (f64, f64),
) -> Result<EnvelopeSample> {
    let c = traj.capacity;
    let n0 = steps_for_time(t0, c);
    let x0 = traj
        .value_at(n0)
        .ok_or_else(|| Error::MissingData(format!("no snapshot at t0 = {t0} (n = {n0})")))?;
    let t0 = n0 as f64 * c;
    let dep = departure(traj, interval.0, interval.1).map(|d| d.t);
    let window_snapshots = match dep {
        Some(t1) => {
            let k = traj
                .snapshots
                .iter()
                .filter(|s| (snapshot_time(traj, s.0) - t1).abs() <= 2.0)
                .count();
            if k < MIN_WINDOW_SNAPSHOTS {
                return Err(Error::Insufficient(format!(
                    "window undersampled: {k} snapshots in [T1 - 2, T1 + 2], need {MIN_WINDOW_SNAPSHOTS}"
                )));
            }
            k
        }
        None => 0,
    };
    let rel: Vec<f64> = traj.snapshots.iter().map(|s| snapshot_time(traj, s.0) - t0).collect();
    let pred = predictor_path(fl, x0, &rel)?;
    let sup_error = traj.snapshots.iter().zip(&pred).fold(0.0f64, |m, (s, p)| m.max((s.1 - p).abs()));
    let z_hat = (fl.inverse(x0, t0)? - fp.location) * c.powf(-0.25);
    Ok(EnvelopeSample { sup_error, z_hat, departure: dep, window_snapshots, terminal: traj.final_value() })
}

/// Circular distance from `x` to the nearest stable fixed point.
pub fn distance_to_stable(x: f64, fixed_points: &[FixedPoint]) -> f64 {
    fixed_points
        .iter()
        .filter(|f| f.kind == FixedPointKind::Stable)
        .map(|f| {
            let d = (x - f.location).rem_euclid(1.0);
            d.min(1.0 - d)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Envelope samples of every run of an ensemble.
pub fn envelope_samples(
    ens: &FlowEnsemble,
    fl: &DeterministicFlow,
    fp: &FixedPoint,
    t0: f64,
    interval: (f64, f64),
) -> Result<Vec<EnvelopeSample>> {
    ens.trajectories
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            trajectory_envelope_error(t, fl, fp, t0, interval)
                .map_err(|e| Error::Trajectory { index: i, source: Box::new(e) })
        })
        .collect()
}

/// Median envelope error per capacity (must decrease as `c` decreases)
/// and the fraction of runs ending near a stable point.
pub fn envelope_report(
    per_capacity: &[(f64, Vec<EnvelopeSample>)],
    fixed_points: &[FixedPoint],
    radius: f64,
    min_fraction: f64,
    seed: u64,
) -> Result<ExperimentReport> {
    if per_capacity.is_empty() {
        return Err(Error::Insufficient("no ensembles".into()));
    }
    let mut sorted_caps = per_capacity.to_vec();
    sorted_caps.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut r = ExperimentReport::new("trajectory_envelope");
    r.param("terminal_radius", radius);
    let mut medians = Vec::new();
    for (c, samples) in &sorted_caps {
        let errs: Vec<f64> = samples.iter().map(|s| s.sup_error).collect();
        let med = stats::median(&errs);
        medians.push(med);
        r.stat(format!("median_sup_error[c={c:e}]"), med, samples.len(), seed).std_error =
            Some(stats::bootstrap_se(&errs, 200, seed, stats::median));
        let near = samples
            .iter()
            .filter(|s| distance_to_stable(s.terminal, fixed_points) < radius)
            .count() as f64
            / samples.len() as f64;
        r.stat(format!("terminal_near_stable[c={c:e}]"), near, samples.len(), seed);
        r.check(format!("terminal_near_stable[c={c:e}]"), near, format!(">= {min_fraction}"), near >= min_fraction);
        let departed = samples.iter().filter(|s| s.departure.is_some()).count();
        r.stat(format!("departed[c={c:e}]"), departed as f64, samples.len(), seed);
    }
    if medians.len() > 1 {
        let last = medians[medians.len() - 1] / medians[0];
        r.check("median_sup_error_decreasing", last, "strictly decreasing in c", strictly_decreasing(&medians));
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{DriftField, Rho0};
    use crate::measure::AttachmentMeasure;

    fn cosine_flow(a: f64) -> DeterministicFlow {
        let mut f = DriftField::new(AttachmentMeasure::cosine(a).unwrap());
        f.set_rho0(Rho0 {
            value: 4.0 / (3.0 * std::f64::consts::PI.powi(3)),
            uncertainty: 0.0,
            capacities: vec![],
            raw: vec![],
            coarse: false,
        });
        DeterministicFlow::closed_form(f).unwrap()
    }

    fn surrogate(fl: &DeterministicFlow, x: f64, c: f64, dt: f64, horizon: f64) -> FlowTrajectory {
        let n_max = steps_for_time(horizon, c);
        let stride = steps_for_time(dt, c).max(1);
        let ns: Vec<u64> = (0..=n_max / stride).map(|k| k * stride).collect();
        let times: Vec<f64> = ns.iter().map(|&n| n as f64 * c).collect();
        let vals = fl.psi_path(x, &times).unwrap();
        FlowTrajectory::from_snapshots(x, c, ns.into_iter().zip(vals).collect())
    }

    #[test]
    fn variance_integral_matches_closed_form() {
        let fl = cosine_flow(0.5);
        let rho = 4.0 / (3.0 * std::f64::consts::PI.powi(3));
        for t in [0.5, 2.0, 8.0] {
            let v = theoretical_variance(&fl, 0.0, t).unwrap();
            assert!(v.at_fixed_point);
            let closed = v.closed_form.unwrap();
            assert!((v.value - closed).abs() < 1e-8, "t={t}: {} vs {closed}", v.value);
            assert!((closed - rho * 1.5 * (1.0 - (-t).exp())).abs() < 1e-15);
        }
        assert_eq!(theoretical_variance(&fl, 0.3, 0.0).unwrap().value, 0.0);
        let c = v_at(&fl, 0.3);
        assert!(c > 0.0);
    }

    fn v_at(fl: &DeterministicFlow, x: f64) -> f64 {
        theoretical_variance(fl, x, 2.0).unwrap().value
    }

    #[test]
    fn variance_needs_rho0() {
        let fl = DeterministicFlow::new(DriftField::new(AttachmentMeasure::cosine(0.5).unwrap()));
        assert!(matches!(theoretical_variance(&fl, 0.0, 1.0), Err(Error::Uncalibrated)));
    }

    #[test]
    fn fluctuation_of_deterministic_path_is_zero() {
        let fl = cosine_flow(0.5);
        let traj = surrogate(&fl, 0.3, 1e-3, 0.1, 3.0);
        let z0 = pulled_back_fluctuation(&traj, &fl, 0.0, 0).unwrap();
        assert_eq!(z0.z_tilde, 0.0);
        let z = pulled_back_fluctuation(&traj, &fl, 2.0, 0).unwrap();
        assert!(z.z_tilde.abs() < 1e-10);
        assert!(pulled_back_fluctuation(&traj, &fl, 2.05, 0).is_err());
    }

    #[test]
    fn uniform_fluctuation_is_scaled_displacement() {
        let u = DriftField::new(AttachmentMeasure::uniform());
        let fl = DeterministicFlow::new(u);
        let traj = FlowTrajectory::from_snapshots(0.2, 1e-4, vec![(0, 0.2), (10_000, 0.25)]);
        let z = pulled_back_fluctuation(&traj, &fl, 1.0, 0).unwrap();
        assert!((z.z_tilde - 0.05 * 10.0).abs() < 1e-12);
    }

    #[test]
    fn tracking_error_zero_for_surrogate() {
        let fl = cosine_flow(0.5);
        let traj = surrogate(&fl, 0.3, 1e-3, 0.01, 3.0);
        assert!(tracking_sup_error(&traj, &fl, 3.0).unwrap() < 1e-12);
    }

    #[test]
    fn departure_of_pinned_and_surrogate_runs() {
        let fl = cosine_flow(0.5);
        let fp = FixedPoint { location: 0.0, lambda: 0.5, kind: FixedPointKind::Unstable };
        let pinned = FlowTrajectory::from_snapshots(0.0, 1e-4, (0..100).map(|n| (n * 100, 0.0)).collect());
        assert_eq!(departure_time(&pinned, &fp, -0.1, 0.1), None);
        // ψ_t(c^{1/4}z) leaves at (1/λ)log(x₊/(c^{1/4}z)) + O(1).
        for c in [1e-4f64, 1e-6] {
            let x = c.powf(0.25) * 0.3;
            let traj = surrogate(&fl, x, c, 1e-3, 30.0);
            let t = departure_time(&traj, &fp, -0.1, 0.1).unwrap();
            let predicted = 2.0 * (0.1 / x).ln();
            assert!((t - predicted).abs() < 1.0, "c={c}: {t} vs {predicted}");
        }
    }

    #[test]
    fn envelope_of_surrogate_is_exact() {
        let fl = cosine_flow(0.5);
        let fp = FixedPoint { location: 0.0, lambda: 0.5, kind: FixedPointKind::Unstable };
        let c = 1e-4f64;
        let x = c.powf(0.25) * 0.4;
        let traj = surrogate(&fl, x, c, 0.01, 25.0);
        let s = trajectory_envelope_error(&traj, &fl, &fp, 4.0, (-0.1, 0.1)).unwrap();
        assert!(s.sup_error < 1e-6);
        assert!((s.z_hat - 0.4).abs() < 1e-9);
        assert!(distance_to_stable(s.terminal, &fl.fixed_points().unwrap()) < 1e-3);
        let sparse = surrogate(&fl, x, c, 0.1, 25.0);
        assert!(matches!(
            trajectory_envelope_error(&sparse, &fl, &fp, 4.0, (-0.1, 0.1)),
            Err(Error::Insufficient(_))
        ));
    }

    #[test]
    fn predictor_semigroup() {
        let fl = cosine_flow(0.5);
        let (x, t0) = (0.013, 4.0);
        for t in [0.5, 4.0, 9.0, 20.0] {
            let a = fl.psi(x, t - t0).unwrap();
            let b = fl.psi(fl.inverse(x, t0).unwrap(), t).unwrap();
            assert!((a - b).abs() < 1e-8);
        }
        let rk = DeterministicFlow::new(fl.field().clone());
        let times = [-3.0, -1.0, 0.0, 2.0];
        let p = predictor_path(&rk, x, &times).unwrap();
        for (t, v) in times.iter().zip(p) {
            assert!((v - fl.psi(x, *t).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn normality_gates() {
        let samples: Vec<FluctuationSample> =
            (0..100).map(|i| FluctuationSample { z_tilde: i as f64, t: 1.0, run_id: i }).collect();
        assert!(matches!(test_normality(&samples, 1.0), Err(Error::Insufficient(_))));
    }

    #[test]
    fn report_text_and_json() {
        let mut r = ExperimentReport::new("demo");
        r.param("capacity", 1e-3);
        r.stat("median", 0.01, 500, 7).std_error = Some(0.001);
        r.check("median", 0.01, "< 0.05", true);
        assert!(r.passed());
        let txt = r.to_text();
        assert!(txt.contains("PASS") && txt.contains("demo"));
        let back: ExperimentReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.value("median"), Some(0.01));
    }

    #[test]
    fn slope_fit_on_synthetic_sweep() {
        // Departure times 0.5·log c⁻¹ + noise of fixed spread.
        let sweep: Vec<WindowSample> = [1e-3, 1e-4, 1e-5, 1e-6]
            .iter()
            .map(|&c: &f64| WindowSample {
                capacity: c,
                times: (0..600).map(|i| Some(0.5 * (1.0 / c).ln() + (i as f64 / 600.0 - 0.5))).collect(),
            })
            .collect();
        let r = window_slope_fit(&sweep, 0.5, 0.15, 200, 1).unwrap();
        assert!((r.value("slope").unwrap() - 0.5).abs() < 1e-9);
        assert!(r.passed());
        assert!(window_slope_fit(&sweep[..3], 0.5, 0.15, 200, 1).is_err());
    }

    #[test]
    fn symmetry_of_balanced_departures() {
        let d: Vec<Departure> = (0..400).map(|i| Departure { n: 1, t: 1.0, upward: i % 2 == 0 }).collect();
        assert!(symmetry_split(&d, 4.0).unwrap().passed());
        let skew: Vec<Departure> = (0..400).map(|i| Departure { n: 1, t: 1.0, upward: i % 4 != 0 }).collect();
        assert!(!symmetry_split(&skew, 4.0).unwrap().passed());
    }

    #[test]
    fn decreasing_helper() {
        assert!(strictly_decreasing(&[3.0, 2.0, 1.0]));
        assert!(!strictly_decreasing(&[3.0, 3.0]));
    }
}
