//! The deterministic limit flow `ψ_t` of `ẋ = b(x)`, its spatial
//! derivative, the inverse flow `Φ_t = ψ_t⁻¹`, and fixed points of `b`.

use std::f64::consts::{FRAC_1_PI, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DriftField;

/// Integration method for [`DeterministicFlow`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    /// Dormand–Prince 5(4) with step-size control.
    RkAdaptive,
    /// `tan(π(ψ_t − φ)) = e^{At} tan(π(x − φ))` for `h = 1 + A cos 2π(x − φ)`.
    ClosedFormCosine,
}

/// Tolerances for the adaptive integrator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    pub abs_tol: f64,
    pub max_step: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { abs_tol: 1e-12, max_step: 0.25 }
    }
}

/// Dormand–Prince 5(4) for small fixed-size systems. Integrates from `t0`
/// to `t1` (either direction).
pub fn dopri5<const N: usize, F>(f: F, t0: f64, y0: [f64; N], t1: f64, tol: Tolerance) -> Result<[f64; N]>
where
    F: Fn(f64, &[f64; N]) -> [f64; N],
{
    const C2: f64 = 1.0 / 5.0;
    const C3: f64 = 3.0 / 10.0;
    const C4: f64 = 4.0 / 5.0;
    const C5: f64 = 8.0 / 9.0;
    const A21: f64 = 1.0 / 5.0;
    const A31: f64 = 3.0 / 40.0;
    const A32: f64 = 9.0 / 40.0;
    const A41: f64 = 44.0 / 45.0;
    const A42: f64 = -56.0 / 15.0;
    const A43: f64 = 32.0 / 9.0;
    const A51: f64 = 19372.0 / 6561.0;
    const A52: f64 = -25360.0 / 2187.0;
    const A53: f64 = 64448.0 / 6561.0;
    const A54: f64 = -212.0 / 729.0;
    const A61: f64 = 9017.0 / 3168.0;
    const A62: f64 = -355.0 / 33.0;
    const A63: f64 = 46732.0 / 5247.0;
    const A64: f64 = 49.0 / 176.0;
    const A65: f64 = -5103.0 / 18656.0;
    const B1: f64 = 35.0 / 384.0;
    const B3: f64 = 500.0 / 1113.0;
    const B4: f64 = 125.0 / 192.0;
    const B5: f64 = -2187.0 / 6784.0;
    const B6: f64 = 11.0 / 84.0;
    // b − b̂ (embedded 4th-order weights).
    const E1: f64 = 71.0 / 57600.0;
    const E3: f64 = -71.0 / 16695.0;
    const E4: f64 = 71.0 / 1920.0;
    const E5: f64 = -17253.0 / 339200.0;
    const E6: f64 = 22.0 / 525.0;
    const E7: f64 = -1.0 / 40.0;

    let span = t1 - t0;
    if span == 0.0 {
        return Ok(y0);
    }
    let dir = span.signum();
    let mut t = t0;
    let mut y = y0;
    let mut h = dir * tol.max_step.min(span.abs()).min(0.01);
    let combine = |y: &[f64; N], h: f64, terms: &[(f64, &[f64; N])]| {
        let mut out = *y;
        for (i, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for (w, k) in terms {
                s += w * k[i];
            }
            *o += h * s;
        }
        out
    };
    let mut k1 = f(t, &y);
    loop {
        let remaining = t1 - t;
        if remaining * dir <= 0.0 {
            return Ok(y);
        }
        if h.abs() > remaining.abs() {
            h = remaining;
        }
        let k2 = f(t + C2 * h, &combine(&y, h, &[(A21, &k1)]));
        let k3 = f(t + C3 * h, &combine(&y, h, &[(A31, &k1), (A32, &k2)]));
        let k4 = f(t + C4 * h, &combine(&y, h, &[(A41, &k1), (A42, &k2), (A43, &k3)]));
        let k5 = f(t + C5 * h, &combine(&y, h, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]));
        let k6 = f(t + h, &combine(&y, h, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]));
        let y_new = combine(&y, h, &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)]);
        let k7 = f(t + h, &y_new);
        let mut err: f64 = 0.0;
        for i in 0..N {
            let e = h * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let scale = tol.abs_tol * (1.0 + y[i].abs().max(y_new[i].abs()));
            err = err.max((e / scale).abs());
        }
        if err <= 1.0 {
            t += h;
            y = y_new;
            k1 = k7;
            if (t1 - t) * dir <= 0.0 {
                return Ok(y);
            }
        }
        let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
        h = dir * (h.abs() * factor).min(tol.max_step);
        if h.abs() < 1e-14 * (1.0 + t.abs()) {
            return Err(Error::StepUnderflow { t, step: h.abs() });
        }
    }
}

/// Stationary point of `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedPointKind {
    Stable,
    Unstable,
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub location: f64,
    /// `b′` at the point.
    pub lambda: f64,
    pub kind: FixedPointKind,
}

impl FixedPoint {
    fn classify(location: f64, lambda: f64) -> Self {
        let kind = if lambda.abs() < 1e-8 {
            FixedPointKind::Degenerate
        } else if lambda > 0.0 {
            FixedPointKind::Unstable
        } else {
            FixedPointKind::Stable
        };
        Self { location, lambda, kind }
    }
}

/// Grid used when scanning for zeros of `b`.
pub const FIXED_POINT_GRID: usize = 4096;

/// The flow `ψ_t` of `ẋ = b(x)`.
#[derive(Debug, Clone)]
pub struct DeterministicFlow {
    field: DriftField,
    integrator: Integrator,
    tol: Tolerance,
    cosine: Option<(f64, f64)>,
}

impl DeterministicFlow {
    /// Adaptive Runge–Kutta flow.
    pub fn new(field: DriftField) -> Self {
        let cosine = cosine_parameters(&field);
        Self { field, integrator: Integrator::RkAdaptive, tol: Tolerance::default(), cosine }
    }

    /// Closed-form flow; only for single-mode `k = 1` densities.
    pub fn closed_form(field: DriftField) -> Result<Self> {
        let mut fl = Self::new(field);
        if fl.cosine.is_none() {
            return Err(Error::Measure(format!(
                "closed-form flow needs a density 1 + A cos 2π(x − φ), got {}",
                fl.field.measure().name()
            )));
        }
        fl.integrator = Integrator::ClosedFormCosine;
        Ok(fl)
    }

    pub fn with_tolerance(mut self, tol: Tolerance) -> Self {
        self.tol = tol;
        self
    }

    pub fn field(&self) -> &DriftField {
        &self.field
    }

    pub fn field_mut(&mut self) -> &mut DriftField {
        &mut self.field
    }

    pub fn integrator(&self) -> Integrator {
        self.integrator
    }

    /// `ψ_t(x)`. Negative `t` runs the flow backwards.
    pub fn psi(&self, x: f64, t: f64) -> Result<f64> {
        if !(x.is_finite() && t.is_finite()) {
            return Err(Error::Domain(format!("flow needs finite x and t, got x = {x}, t = {t}")));
        }
        match self.integrator {
            Integrator::ClosedFormCosine => Ok(self.closed_psi(x, t).0),
            Integrator::RkAdaptive => {
                let y = dopri5(|_, y: &[f64; 1]| [self.field.b(y[0])], 0.0, [x], t, self.tol)?;
                Ok(y[0])
            }
        }
    }

    /// `ψ_t(x)` at each of the sorted `times` (all of one sign), reusing the
    /// integration between consecutive times.
    pub fn psi_path(&self, x: f64, times: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(times.len());
        let (mut t_prev, mut y) = (0.0, x);
        for &t in times {
            y = match self.integrator {
                Integrator::ClosedFormCosine => self.closed_psi(x, t).0,
                Integrator::RkAdaptive => {
                    dopri5(|_, v: &[f64; 1]| [self.field.b(v[0])], t_prev, [y], t, self.tol)?[0]
                }
            };
            t_prev = t;
            out.push(y);
        }
        Ok(out)
    }

    /// `ψ′_t(x) = exp ∫₀ᵗ b′(ψ_s(x)) ds`.
    pub fn psi_derivative(&self, x: f64, t: f64) -> Result<f64> {
        Ok(self.psi_with_derivative(x, t)?.1)
    }

    /// `(ψ_t(x), ψ′_t(x))`.
    pub fn psi_with_derivative(&self, x: f64, t: f64) -> Result<(f64, f64)> {
        match self.integrator {
            Integrator::ClosedFormCosine => Ok(self.closed_psi(x, t)),
            Integrator::RkAdaptive => {
                let y = dopri5(
                    |_, y: &[f64; 2]| [self.field.b(y[0]), self.field.b_derivative(y[0], 1)],
                    0.0,
                    [x, 0.0],
                    t,
                    self.tol,
                )?;
                Ok((y[0], y[1].exp()))
            }
        }
    }

    /// `Φ_t(y) = ψ_t⁻¹(y)`, the time-`t` flow of `−b`.
    pub fn inverse(&self, y: f64, t: f64) -> Result<f64> {
        self.psi(y, -t)
    }

    /// `Φ′_t(y)`.
    pub fn inverse_derivative(&self, y: f64, t: f64) -> Result<f64> {
        self.psi_derivative(y, -t)
    }

    /// Integrates `(ψ_s, log ψ′_s, ∫₀ˢ g(ψ_r, ψ′_r) dr)` from 0 to `t`.
    pub fn integrate_along<G>(&self, x: f64, t: f64, g: G) -> Result<(f64, f64, f64)>
    where
        G: Fn(f64, f64) -> f64,
    {
        let y = dopri5(
            |_, y: &[f64; 3]| {
                let d = y[1].exp();
                [self.field.b(y[0]), self.field.b_derivative(y[0], 1), g(y[0], d)]
            },
            0.0,
            [x, 0.0, 0.0],
            t,
            self.tol,
        )?;
        Ok((y[0], y[1].exp(), y[2]))
    }

    fn closed_psi(&self, x: f64, t: f64) -> (f64, f64) {
        let (amp, phase) = self.cosine.expect("closed form checked at construction");
        let (k, a) = crate::particle::reduce_half_open(x - phase);
        if a == 0.5 {
            let d = (-amp * t).exp();
            return (x, d);
        }
        let g = (amp * t).exp();
        let (s, c) = (PI * a).sin_cos();
        let psi = phase + k + FRAC_1_PI * (g * s).atan2(c);
        let deriv = g / (c * c + g * g * s * s);
        (psi, deriv)
    }

    /// All zeros of `b` in `[0, 1)`, sorted, classified by `b′`.
    pub fn fixed_points(&self) -> Result<Vec<FixedPoint>> {
        let n = FIXED_POINT_GRID;
        let b = |x: f64| self.field.b(x);
        let values: Vec<f64> = (0..=n).map(|i| b(i as f64 / n as f64)).collect();
        let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale < 1e-14 {
            return Err(Error::DegenerateField);
        }
        let mut out = Vec::new();
        for i in 0..n {
            let (x0, x1) = (i as f64 / n as f64, (i + 1) as f64 / n as f64);
            let (b0, b1) = (values[i], values[i + 1]);
            let root = if b0 == 0.0 {
                Some(x0)
            } else if b0 * b1 < 0.0 {
                let (mut lo, mut hi, mut blo) = (x0, x1, b0);
                while hi - lo > 1e-13 {
                    let mid = 0.5 * (lo + hi);
                    let bm = b(mid);
                    if bm == 0.0 {
                        lo = mid;
                        hi = mid;
                        break;
                    }
                    if (bm < 0.0) == (blo < 0.0) {
                        lo = mid;
                        blo = bm;
                    } else {
                        hi = mid;
                    }
                }
                Some(0.5 * (lo + hi))
            } else {
                None
            };
            if let Some(r) = root {
                let r = if r >= 1.0 { r - 1.0 } else { r };
                out.push(FixedPoint::classify(r, self.field.b_derivative(r, 1)));
            }
        }
        out.sort_by(|a, b| a.location.partial_cmp(&b.location).unwrap());
        Ok(out)
    }

    /// `[x₋, x₊] = a ± min(0.1, λ/(8‖b″‖∞))` around an unstable point.
    pub fn departure_interval(&self, fp: &FixedPoint) -> (f64, f64) {
        let (_, d2) = self.field.derivative_sup(FIXED_POINT_GRID);
        let half = if d2 > 0.0 { (fp.lambda.abs() / (8.0 * d2)).min(0.1) } else { 0.1 };
        (fp.location - half, fp.location + half)
    }

    /// The logarithmic tracking horizon `(log c⁻¹ − 3 log log c⁻¹)/(4‖b′‖∞)`.
    pub fn tracking_horizon(&self, capacity: f64) -> f64 {
        let (d1, _) = self.field.derivative_sup(FIXED_POINT_GRID);
        let l = (1.0 / capacity).ln();
        (l - 3.0 * l.ln()) / (4.0 * d1)
    }
}

fn cosine_parameters(field: &DriftField) -> Option<(f64, f64)> {
    let modes = field.measure().fourier_modes()?;
    let active: Vec<_> = modes.iter().filter(|m| m.a != 0.0 || m.b != 0.0).collect();
    match active.as_slice() {
        [m] if m.k == 1 => {
            let amp = m.a.hypot(m.b);
            let phase = m.b.atan2(m.a) / (2.0 * PI);
            Some((amp, phase))
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{AttachmentMeasure, FourierMode};

    fn cosine_flow(a: f64) -> DeterministicFlow {
        DeterministicFlow::new(DriftField::new(AttachmentMeasure::cosine(a).unwrap()))
    }

    #[test]
    fn dopri_exponential() {
        let y = dopri5(|_, y: &[f64; 1]| [y[0]], 0.0, [1.0], 3.0, Tolerance::default()).unwrap();
        assert!((y[0] - 3f64.exp()).abs() < 1e-10);
        let back = dopri5(|_, y: &[f64; 1]| [y[0]], 3.0, y, 0.0, Tolerance::default()).unwrap();
        assert!((back[0] - 1.0).abs() < 1e-11);
    }

    #[test]
    fn fixed_point_is_stationary() {
        let fl = cosine_flow(0.5);
        for t in [0.5, 3.0, 10.0] {
            assert_eq!(fl.psi(0.0, t).unwrap(), 0.0);
        }
    }

    #[test]
    fn closed_form_value() {
        let fl = cosine_flow(0.5);
        let expect = 1f64.exp().atan() / PI;
        assert!((fl.psi(0.25, 2.0).unwrap() - expect).abs() < 1e-9);
        let cf = DeterministicFlow::closed_form(fl.field().clone()).unwrap();
        assert!((cf.psi(0.25, 2.0).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 0.38779).abs() < 1e-5);
    }

    #[test]
    fn closed_form_rejects_other_densities() {
        let m = AttachmentMeasure::fourier(vec![FourierMode::new(2, 0.3, 0.0)]).unwrap();
        assert!(DeterministicFlow::closed_form(DriftField::new(m)).is_err());
    }

    #[test]
    fn stable_attraction() {
        let fl = DeterministicFlow::closed_form(cosine_flow(0.5).field().clone()).unwrap();
        let mut prev = 0.3;
        for i in 1..=40 {
            let v = fl.psi(0.3, i as f64 * 0.5).unwrap();
            assert!(v > prev && v < 0.5);
            prev = v;
        }
        let gap = 0.5 - fl.psi(0.3, 20.0).unwrap();
        // Linearisation at the stable point: gap ≈ C e^{-t/2}, C = tan-ratio.
        let c = (PI * 0.2).tan() / PI;
        assert!(gap < (-0.5f64 * 20.0).exp() * c * 1.01);
        assert!(gap > (-0.5f64 * 20.0).exp() * c * 0.99);
    }

    #[test]
    fn derivative_at_unstable_point() {
        let fl = cosine_flow(0.5);
        assert!((fl.psi_derivative(0.0, 3.0).unwrap() - 1.5f64.exp()).abs() < 1e-9);
        assert_eq!(fl.psi_derivative(0.3, 0.0).unwrap(), 1.0);
    }

    #[test]
    fn derivative_bounds() {
        let fl = cosine_flow(0.5);
        let t = 4.0;
        for i in 0..50 {
            let x = i as f64 / 50.0;
            let d = fl.psi_derivative(x, t).unwrap();
            assert!(d >= (-0.5 * t).exp() * (1.0 - 1e-9) && d <= (0.5 * t).exp() * (1.0 + 1e-9));
        }
    }

    #[test]
    fn inverse_flow() {
        let fl = cosine_flow(0.5);
        for (x, t) in [(0.1, 1.0), (0.37, 4.0), (0.8, 7.5)] {
            let y = fl.psi(x, t).unwrap();
            assert!((fl.inverse(y, t).unwrap() - x).abs() < 1e-9);
            let chain = fl.inverse_derivative(y, t).unwrap() * fl.psi_derivative(x, t).unwrap();
            assert!((chain - 1.0).abs() < 1e-8);
        }
        assert_eq!(fl.inverse(0.0, 5.0).unwrap(), 0.0);
    }

    #[test]
    fn semigroup_and_monotone() {
        let fl = cosine_flow(0.5);
        for x in [0.05, 0.3, 0.61] {
            let direct = fl.psi(x, 7.0).unwrap();
            let split = fl.psi(fl.psi(x, 3.0).unwrap(), 4.0).unwrap();
            assert!((direct - split).abs() < 1e-9);
        }
        let ys: Vec<f64> = (0..100).map(|i| fl.psi(i as f64 / 100.0, 5.0).unwrap()).collect();
        assert!(ys.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn derivative_vs_finite_difference() {
        let fl = cosine_flow(0.5);
        let h = 1e-6;
        for x in [0.1, 0.24, 0.7] {
            let fd = (fl.psi(x + h, 3.0).unwrap() - fl.psi(x - h, 3.0).unwrap()) / (2.0 * h);
            assert!((fd - fl.psi_derivative(x, 3.0).unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn path_matches_pointwise() {
        let fl = cosine_flow(0.5);
        let times = [0.5, 1.0, 2.5, 6.0];
        let path = fl.psi_path(0.2, &times).unwrap();
        for (t, v) in times.iter().zip(path) {
            assert!((fl.psi(0.2, *t).unwrap() - v).abs() < 1e-10);
        }
        let back = fl.psi_path(0.2, &[-1.0, -3.0]).unwrap();
        assert!((back[1] - fl.inverse(0.2, 3.0).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn cosine_fixed_points() {
        let fps = cosine_flow(0.5).fixed_points().unwrap();
        assert_eq!(fps.len(), 2);
        assert!(fps[0].location.abs() < 1e-12 && fps[0].kind == FixedPointKind::Unstable);
        assert!((fps[0].lambda - 0.5).abs() < 1e-12);
        assert!((fps[1].location - 0.5).abs() < 1e-12 && fps[1].kind == FixedPointKind::Stable);
        assert!((fps[1].lambda + 0.5).abs() < 1e-12);
    }

    #[test]
    fn mode_two_fixed_points_alternate() {
        let m = AttachmentMeasure::fourier(vec![FourierMode::new(2, 0.4, 0.0)]).unwrap();
        let fps = DeterministicFlow::new(DriftField::new(m)).fixed_points().unwrap();
        let locs: Vec<f64> = fps.iter().map(|f| f.location).collect();
        assert_eq!(fps.len(), 4, "{locs:?}");
        for (fp, want) in fps.iter().zip([0.0, 0.25, 0.5, 0.75]) {
            assert!((fp.location - want).abs() < 1e-12);
        }
        assert!(fps.windows(2).all(|w| w[0].kind != w[1].kind));
    }

    #[test]
    fn uniform_has_no_fixed_points() {
        let fl = DeterministicFlow::new(DriftField::new(AttachmentMeasure::uniform()));
        assert!(matches!(fl.fixed_points(), Err(Error::DegenerateField)));
    }

    #[test]
    fn interval_and_horizon() {
        let fl = cosine_flow(0.5);
        let fp = fl.fixed_points().unwrap()[0];
        let (lo, hi) = fl.departure_interval(&fp);
        let half = 0.5 / (8.0 * PI);
        assert!((hi - half).abs() < 1e-9 && (lo + half).abs() < 1e-9);
        let t0 = fl.tracking_horizon(1e-5);
        let l = 1e5f64.ln();
        assert!((t0 - (l - 3.0 * l.ln()) / 2.0).abs() < 1e-9);
    }
}
