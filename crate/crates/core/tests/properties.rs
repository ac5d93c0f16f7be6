//! Randomised invariants of the particle, flow, field and ODE layers.

use ahl::field::{BetaTable, DriftField, DriftMode};
use ahl::flow::{flow_step, run_flow, steps_for_time, FlowOptions};
use ahl::measure::{AttachmentMeasure, FourierMode};
use ahl::ode::{DeterministicFlow, FixedPointKind};
use ahl::particle::{capacity_from_length, length_from_capacity, BoundaryAngle, BoundaryImage, SlitParticle};
use proptest::prelude::*;

fn capacity() -> impl Strategy<Value = f64> {
    (-6.0f64..-0.5).prop_map(|e| 10f64.powf(e))
}

fn cosine_flow(a: f64) -> DeterministicFlow {
    DeterministicFlow::new(DriftField::new(AttachmentMeasure::cosine(a).unwrap()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn gamma_tilde_is_odd(c in capacity(), x in 1e-9f64..0.5) {
        let p = SlitParticle::from_capacity(c).unwrap();
        prop_assert_eq!(p.gamma_tilde(-x), -p.gamma_tilde(x));
    }

    #[test]
    fn gamma_is_increasing(c in capacity(), x in 1e-9f64..0.4999, dx in 1e-6f64..1e-3) {
        let p = SlitParticle::from_capacity(c).unwrap();
        let y = (x + dx).min(0.5);
        prop_assert!(p.gamma(y) > p.gamma(x));
        prop_assert!(p.gamma(y + 3.0) > p.gamma(x + 3.0));
    }

    #[test]
    fn boundary_consistency(c in capacity(), x in 1e-9f64..=0.5) {
        let p = SlitParticle::from_capacity(c).unwrap();
        match p.slit_map_boundary(p.gamma(x)) {
            BoundaryImage::Circle(y) => prop_assert!((y - x).abs() < 1e-12, "{} vs {}", y, x),
            BoundaryImage::Slit(r) => prop_assert!(false, "landed on the slit at radius {}", r),
        }
    }

    #[test]
    fn two_gamma_routes_agree(c in capacity(), x in -0.5f64..0.5) {
        let p = SlitParticle::from_capacity(c).unwrap();
        prop_assume!(x != 0.0);
        let direct = p.gamma(x) - x;
        let stable = p.gamma_tilde(x);
        prop_assert!((direct - stable).abs() < 1e-15 + 1e-9 * stable.abs());
    }

    #[test]
    fn capacity_length_round_trip(c in capacity()) {
        let d = length_from_capacity(c).unwrap();
        let back = capacity_from_length(d).unwrap();
        prop_assert!((back - c).abs() < 1e-12 * c);
    }

    #[test]
    fn step_bounded_by_sup(c in capacity(), x in -2.0f64..2.0, theta in 0.0f64..1.0) {
        let p = SlitParticle::from_capacity(c).unwrap();
        let step = flow_step(&p, x, BoundaryAngle(theta)) - x;
        prop_assert!(step.abs() <= p.sup_gamma_tilde());
    }

    #[test]
    fn step_is_rotation_equivariant(c in capacity(), x in 0.0f64..1.0, theta in 0.0f64..1.0, s in -0.5f64..0.5) {
        let p = SlitParticle::from_capacity(c).unwrap();
        let a = flow_step(&p, x, BoundaryAngle(theta)) + s;
        let b = flow_step(&p, x + s, BoundaryAngle(theta + s));
        prop_assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn schedule_never_overshoots(t in 0.0f64..50.0, c in capacity()) {
        let n = steps_for_time(t, c);
        prop_assert!((n as f64) * c <= t * (1.0 + 1e-8));
        prop_assert!(((n + 1) as f64) * c > t);
    }

    #[test]
    fn cdf_inversion(a in -0.95f64..0.95, u in 0.0f64..1.0) {
        let m = AttachmentMeasure::cosine(a).unwrap();
        prop_assert!((m.cdf(m.quantile(u)) - u).abs() < 1e-12);
    }

    #[test]
    fn drift_is_odd_for_cosine(a in -0.95f64..0.95, x in 0.0f64..0.5) {
        let f = DriftField::new(AttachmentMeasure::cosine(a).unwrap());
        prop_assert!((f.b(-x) + f.b(x)).abs() < 1e-10);
    }

    #[test]
    fn psi_semigroup_and_monotone(a in 0.1f64..0.9, x in 0.01f64..0.49, s in 0.0f64..3.0, t in 0.0f64..3.0) {
        let fl = cosine_flow(a);
        let direct = fl.psi(x, s + t).unwrap();
        let composed = fl.psi(fl.psi(x, s).unwrap(), t).unwrap();
        prop_assert!((direct - composed).abs() < 1e-9);
        prop_assert!(fl.psi(x + 1e-3, t).unwrap() > fl.psi(x, t).unwrap());
        prop_assert!((fl.inverse(fl.psi(x, t).unwrap(), t).unwrap() - x).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn martingale_identity(seed in any::<u64>(), x0 in 0.0f64..1.0, e in -4.0f64..-2.0) {
        let c = 10f64.powf(e);
        let p = SlitParticle::from_capacity(c).unwrap();
        let m = AttachmentMeasure::cosine(0.5).unwrap();
        let table = BetaTable::new(&DriftField::new(m.clone()), &p);
        let n = steps_for_time(1.0, c);
        let schedule: Vec<u64> = (0..=n).step_by(97).collect();
        let traj = run_flow(&p, &m, x0, n, seed, FlowOptions { schedule: &schedule, martingale: Some(&table), ..Default::default() });
        for (&(k, x), mp) in traj.snapshots.iter().zip(traj.martingale.as_ref().unwrap()) {
            prop_assert_eq!(k, mp.n);
            prop_assert!((x - x0 - mp.s - mp.drift_sum).abs() < 1e-9);
        }
    }

    #[test]
    fn shifted_run_is_shifted(seed in any::<u64>(), x0 in 0.0f64..1.0, s in -0.5f64..0.5) {
        let c = 1e-3;
        let p = SlitParticle::from_capacity(c).unwrap();
        let m = AttachmentMeasure::cosine(0.5).unwrap();
        let schedule: Vec<u64> = (0..=500).step_by(50).collect();
        let opts = FlowOptions { schedule: &schedule, ..Default::default() };
        let a = run_flow(&p, &m, x0, 500, seed, opts);
        let b = run_flow(&p, &m.shifted(s), x0 + s, 500, seed, opts);
        for (u, v) in a.snapshots.iter().zip(&b.snapshots) {
            prop_assert!((u.1 + s - v.1).abs() < 1e-12);
        }
    }

    #[test]
    fn modes_agree_on_random_fourier(a1 in -0.3f64..0.3, b2 in -0.2f64..0.2, a3 in -0.1f64..0.1, x in 0.0f64..1.0) {
        let m = AttachmentMeasure::fourier(vec![
            FourierMode::new(1, a1, 0.0),
            FourierMode::new(2, 0.0, b2),
            FourierMode::new(3, a3, 0.0),
        ]).unwrap();
        let f = DriftField::new(m);
        let q = f.b_with(DriftMode::Quadrature, x, 0);
        let e = f.b_with(DriftMode::FourierExact, x, 0);
        prop_assert!((q - e).abs() < 1e-8);
    }

    #[test]
    fn fixed_points_alternate(k in 1u32..4, a in 0.1f64..0.6, phase in -0.2f64..0.2) {
        let m = AttachmentMeasure::fourier(vec![FourierMode::new(k, a, phase)]).unwrap();
        let fps = DeterministicFlow::new(DriftField::new(m)).fixed_points().unwrap();
        prop_assert_eq!(fps.len(), 2 * k as usize);
        for w in fps.windows(2) {
            prop_assert_ne!(w[0].kind, w[1].kind);
            prop_assert_ne!(w[0].kind, FixedPointKind::Degenerate);
        }
    }
}
