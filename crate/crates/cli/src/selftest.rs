//! The invariant suite run by `ahl selftest`. Sized to finish in well under
//! five minutes on one core.

use ahl::analysis::ExperimentReport;
use ahl::experiment::{self, FluctuationParams, Observer};
use ahl::field::{self, DriftField, DriftMode};
use ahl::flow::{run_ensemble, EnsembleConfig};
use ahl::measure::{AttachmentMeasure, FourierMode};
use ahl::ode::DeterministicFlow;
use ahl::particle::{BoundaryImage, SlitParticle};
use ahl::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_of(it: impl IntoIterator<Item = f64>) -> f64 {
    it.into_iter().fold(0.0, f64::max)
}

fn particle_suite(seed: u64) -> Result<ExperimentReport> {
    let mut r = ExperimentReport::new("particle");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in [1e-1, 1e-3, 1e-5] {
        let p = SlitParticle::from_capacity(c)?;
        let err = max_of((0..1000).map(|_| {
            let x = 0.5 - 0.5 * rng.random::<f64>();
            match p.slit_map_boundary(p.gamma(x)) {
                BoundaryImage::Circle(y) => (y - x).abs(),
                BoundaryImage::Slit(_) => f64::INFINITY,
            }
        }));
        r.check(format!("boundary_consistency[c={c:e}]"), err, "< 1e-10", err < 1e-10);
    }
    let caps = [1e-3, 1e-4, 1e-5];
    let mut scaled = Vec::new();
    for c in caps {
        let p = SlitParticle::from_capacity(c)?;
        let mean = p.mean_displacement().abs();
        r.check(format!("mean_displacement[c={c:e}]"), mean, "< 1e-9", mean < 1e-9);
        let sup = p.sup_gamma_tilde() / c.sqrt();
        r.check(format!("sup_over_sqrt_c[c={c:e}]"), sup, "<= 0.7", sup <= 0.7);
        scaled.push(p.scaled_second_moment());
    }
    let spread = scaled.windows(2).map(|w| ((w[1] - w[0]) / w[1]).abs()).fold(0.0, f64::max);
    r.check("scaled_second_moment_cauchy", spread, "< 0.05", spread < 0.05);
    Ok(r)
}

fn drift_suite() -> Result<ExperimentReport> {
    let mut r = ExperimentReport::new("drift");
    let m = AttachmentMeasure::fourier(vec![
        FourierMode::new(1, 0.3, 0.1),
        FourierMode::new(2, -0.15, 0.05),
        FourierMode::new(3, 0.05, -0.1),
    ])?;
    let f = DriftField::new(m);
    let grid = 4096;
    let err = max_of((0..grid).map(|i| {
        let x = i as f64 / grid as f64;
        (f.b_with(DriftMode::Quadrature, x, 0) - f.b_with(DriftMode::FourierExact, x, 0)).abs()
    }));
    r.check("quadrature_vs_fourier", err, "< 1e-8", err < 1e-8);
    let mean = field::mean_of_b(&f, 256).abs();
    r.check("mean_of_b", mean, "< 1e-12", mean < 1e-12);

    let cos = DriftField::new(AttachmentMeasure::cosine(0.5)?);
    let points = [0.05, 0.15, 0.3, 0.6, 0.85];
    let mut worst = Vec::new();
    for c in [1e-3, 1e-4, 1e-5, 1e-6] {
        let p = SlitParticle::from_capacity(c)?;
        let scale = c.powf(1.5) * (1.0 / c).ln();
        worst.push(max_of(points.iter().map(|&x| (cos.beta_nu(&p, x) - c * cos.b(x)).abs() / scale)));
    }
    let growth = worst[worst.len() - 1] / worst[0];
    r.check("beta_nu_remainder_growth", growth, "< 2", growth < 2.0);
    Ok(r)
}

fn ode_suite(seed: u64) -> Result<ExperimentReport> {
    let mut r = ExperimentReport::new("ode");
    let field = DriftField::new(AttachmentMeasure::cosine(0.5)?);
    let rk = DeterministicFlow::new(field.clone());
    let exact = DeterministicFlow::closed_form(field)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut err, mut derr) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let x: f64 = rng.random();
        let t = 10.0 * rng.random::<f64>();
        let gap = rk.psi(x, t)? - exact.psi(x, t)?;
        err = err.max((gap - gap.round()).abs());
        let h = 1e-5;
        let fd = (exact.psi(x + h, t)? - exact.psi(x - h, t)?) / (2.0 * h);
        let d = exact.psi_derivative(x, t)?;
        derr = derr.max((d - fd).abs() / d.abs().max(1.0));
    }
    r.check("rk_vs_closed_form", err, "< 1e-9", err < 1e-9);
    r.check("derivative_vs_central_difference", derr, "< 1e-6", derr < 1e-6);
    Ok(r)
}

fn measure_suite(seed: u64) -> Result<ExperimentReport> {
    let mut r = ExperimentReport::new("measure");
    let measures = [
        AttachmentMeasure::cosine(0.5)?,
        AttachmentMeasure::fourier(vec![FourierMode::new(1, 0.2, 0.1), FourierMode::new(3, 0.1, 0.0)])?,
        AttachmentMeasure::arc(0.0, 0.5, 0.05)?,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for m in &measures {
        let err = max_of((0..10_000).map(|_| {
            let u: f64 = rng.random();
            (m.cdf(m.quantile(u)) - u).abs()
        }));
        r.check(format!("cdf_inversion[{}]", m.name()), err, "< 1e-12", err < 1e-12);
    }
    Ok(r)
}

/// Ensemble CSVs computed on one worker and on four must match byte for byte.
fn determinism_suite(seed: u64) -> Result<ExperimentReport> {
    let mut r = ExperimentReport::new("determinism");
    let m = AttachmentMeasure::cosine(0.5)?;
    let c = 1e-3;
    let p = SlitParticle::from_capacity(c)?;
    let mut cfg = EnsembleConfig::new(c, vec![0.1, 0.3], 40, 2.0, seed);
    cfg.snapshot_times = experiment::uniform_times(0.1, 2.0);
    let csv = |threads: usize| -> Result<Vec<u8>> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool");
        let e = pool.install(|| run_ensemble(&p, &m, &cfg, None))?;
        let mut out = Vec::new();
        e.write_csv(&mut out)?;
        Ok(out)
    };
    let a = csv(1)?;
    let b = csv(4)?;
    let same = a == b;
    r.check("csv_identical_1_vs_4_workers", if same { 0.0 } else { 1.0 }, "byte-identical", same);
    Ok(r)
}

/// Runs the full suite.
pub fn run(seed: u64, obs: &dyn Observer) -> Result<Vec<ExperimentReport>> {
    let mut out = vec![
        particle_suite(seed)?,
        drift_suite()?,
        ode_suite(seed)?,
        measure_suite(seed)?,
        determinism_suite(seed)?,
    ];

    let rho = field::calibrate_rho0(&experiment::DEFAULT_RHO0_SWEEP)?;
    out.push(experiment::calibration_report(&rho));

    let mut fl = experiment::deterministic_flow(DriftField::new(AttachmentMeasure::cosine(0.5)?));
    let tp = |c: f64, k: u64| experiment::TrackingParams {
        capacity: c,
        starts: vec![0.3],
        runs: 100,
        horizon: 2.0,
        snapshot_dt: 0.01,
        epsilon: 0.05,
        allow_beyond_bound: true,
        seed: experiment::derive_seed(seed, k),
    };
    let (mut tracking, _) = experiment::tracking_sweep(&fl, &[tp(1e-2, 0), tp(1e-3, 1)], obs)?;
    tracking.name = "tracking".into();
    out.push(tracking);

    fl.field_mut().set_rho0(rho);
    let fp = FluctuationParams {
        capacity: 1e-3,
        start: None,
        runs: 2000,
        t0: 3.0,
        t1: Some(1.0),
        bootstrap_reps: 200,
        variance_k_se: 3.0,
        covariance_k_se: 4.0,
        seed,
    };
    out.push(experiment::fluctuations(&fl, &fp, obs)?.0);

    let cp = experiment::ClusterParams { capacity: 0.01, particles: 50, resolution: 1024, offset: 1e-4, seed };
    out.push(experiment::cluster_geometry(&AttachmentMeasure::arc(0.0, 0.5, 0.05)?, &cp)?.0);
    Ok(out)
}
