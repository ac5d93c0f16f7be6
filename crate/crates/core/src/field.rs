//! Deterministic fields built from the attachment measure and the particle:
//! the Hilbert-transform drift `b`, the exact one-step drift `β_ν`, the
//! conditional second moment of `γ̃`, and the calibrated constant `ρ₀`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::AttachmentMeasure;
use crate::particle::{SlitParticle, GRADED_ORDER};
use crate::quadrature::{GaussLegendre, NeumaierSum};

/// How the Hilbert transform `b` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftMode {
    /// Term-wise transform of a trigonometric density.
    FourierExact,
    /// Symmetric principal-value quadrature.
    Quadrature,
}

/// Default number of panels for the principal-value quadrature.
pub const DEFAULT_PANELS: usize = 2048;

/// A calibrated value of `ρ₀` with its extrapolation uncertainty.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Rho0 {
    pub value: f64,
    pub uncertainty: f64,
    /// Capacities used, largest first.
    pub capacities: Vec<f64>,
    /// Raw `c^{-3/2}∫γ̃²` per capacity.
    pub raw: Vec<f64>,
    /// Set when the uncertainty exceeds 2% of the value.
    pub coarse: bool,
}

/// The drift `b` of the limiting flow and related fields of one measure.
#[derive(Debug, Clone)]
pub struct DriftField {
    measure: AttachmentMeasure,
    mode: DriftMode,
    panels: usize,
    rule: GaussLegendre,
    rho0: Option<Rho0>,
}

impl DriftField {
    /// Uses the exact Fourier transform when the measure has one.
    pub fn new(measure: AttachmentMeasure) -> Self {
        let mode = if measure.fourier_modes().is_some() { DriftMode::FourierExact } else { DriftMode::Quadrature };
        Self { measure, mode, panels: DEFAULT_PANELS, rule: GaussLegendre::new(4), rho0: None }
    }

    pub fn with_mode(measure: AttachmentMeasure, mode: DriftMode) -> Result<Self> {
        if mode == DriftMode::FourierExact && measure.fourier_modes().is_none() {
            return Err(Error::Measure(format!("{} has no Fourier representation", measure.name())));
        }
        let mut f = Self::new(measure);
        f.mode = mode;
        Ok(f)
    }

    pub fn with_panels(mut self, panels: usize) -> Self {
        self.panels = panels.max(1);
        self
    }

    pub fn measure(&self) -> &AttachmentMeasure {
        &self.measure
    }

    pub fn mode(&self) -> DriftMode {
        self.mode
    }

    /// `b(x)`.
    pub fn b(&self, x: f64) -> f64 {
        self.b_with(self.mode, x, 0)
    }

    /// `b′(x)` or `b″(x)`.
    pub fn b_derivative(&self, x: f64, order: u8) -> f64 {
        assert!(order == 1 || order == 2, "derivative order must be 1 or 2");
        self.b_with(self.mode, x, order)
    }

    /// Evaluates `b` (or a derivative) in an explicit mode.
    pub fn b_with(&self, mode: DriftMode, x: f64, order: u8) -> f64 {
        match mode {
            DriftMode::FourierExact => {
                let modes = self.measure.fourier_modes().expect("fourier mode checked at construction");
                let mut acc = 0.0;
                for m in modes {
                    let k = m.k as f64;
                    let (s, c) = (2.0 * PI * k * x).sin_cos();
                    acc += match order {
                        0 => (m.a * s - m.b * c) / (2.0 * PI),
                        1 => k * (m.a * c + m.b * s),
                        _ => 2.0 * PI * k * k * (m.b * c - m.a * s),
                    };
                }
                acc
            }
            DriftMode::Quadrature => {
                let h = |y: f64| match order {
                    0 => self.measure.density(y),
                    o => self.measure.density_derivative(y, o),
                };
                // (1/2π) ∫₀^{1/2} cot(πz)(h(x−z) − h(x+z)) dz
                let v = self
                    .rule
                    .composite(0.0, 0.5, self.panels, |z| (h(x - z) - h(x + z)) / (PI * z).tan());
                v / (2.0 * PI)
            }
        }
    }

    /// `β_ν(x) = ∫₀¹ γ̃(x − z) h_ν(z) dz`, the exact expected one-step
    /// displacement. Uses the oddness of `γ̃` to fold onto `(0, 1/2]`.
    pub fn beta_nu(&self, p: &SlitParticle, x: f64) -> f64 {
        let gl = GaussLegendre::new(GRADED_ORDER);
        let breaks = p.graded_mesh(self.coarse_cell());
        gl.over_cells(&breaks, |u| p.gamma_tilde(u) * (self.measure.density(x - u) - self.measure.density(x + u)))
    }

    /// `∫₀¹ γ̃(x − θ)² h_ν(θ) dθ`.
    pub fn gamma_second_moment(&self, p: &SlitParticle, x: f64) -> f64 {
        let gl = GaussLegendre::new(GRADED_ORDER);
        let breaks = p.graded_mesh(self.coarse_cell());
        gl.over_cells(&breaks, |u| p.gamma_tilde(u).powi(2) * (self.measure.density(x - u) + self.measure.density(x + u)))
    }

    fn coarse_cell(&self) -> f64 {
        match self.measure.fourier_modes() {
            Some(modes) => {
                let kmax = modes.iter().map(|m| m.k).max().unwrap_or(1).max(1);
                (1.0 / (64.0 * kmax as f64)).max(1.0 / 4096.0)
            }
            None => 1.0 / 256.0,
        }
    }

    /// Estimates `ρ₀ = lim c^{-3/2}∫γ̃²` from a capacity sweep by polynomial
    /// extrapolation in `√c` to zero, and stores it in the field.
    pub fn calibrate_rho0(&mut self, capacities: &[f64]) -> Result<&Rho0> {
        let rho = calibrate_rho0(capacities)?;
        self.rho0 = Some(rho);
        Ok(self.rho0.as_ref().unwrap())
    }

    pub fn set_rho0(&mut self, rho: Rho0) {
        self.rho0 = Some(rho);
    }

    pub fn rho0(&self) -> Result<&Rho0> {
        self.rho0.as_ref().ok_or(Error::Uncalibrated)
    }

    /// Zeros of `b` on `[0, 1)` with exact discrete-drift comparisons in
    /// mind: `‖b′‖∞` and `‖b″‖∞` on a uniform grid.
    pub fn derivative_sup(&self, grid: usize) -> (f64, f64) {
        let mut d1: f64 = 0.0;
        let mut d2: f64 = 0.0;
        for i in 0..grid {
            let x = i as f64 / grid as f64;
            d1 = d1.max(self.b_derivative(x, 1).abs());
            d2 = d2.max(self.b_derivative(x, 2).abs());
        }
        (d1, d2)
    }
}

/// Precomputed `β_ν` on a uniform periodic grid with cubic interpolation,
/// for use inside trajectory loops.
#[derive(Debug, Clone)]
pub struct BetaTable {
    values: Vec<f64>,
}

/// Grid size of [`BetaTable`].
pub const BETA_TABLE_SIZE: usize = 4096;

impl BetaTable {
    pub fn new(field: &DriftField, p: &SlitParticle) -> Self {
        let n = BETA_TABLE_SIZE;
        let values = (0..n).map(|i| field.beta_nu(p, i as f64 / n as f64)).collect();
        Self { values }
    }

    /// Four-point Lagrange interpolation on the periodic grid.
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.values.len();
        let pos = (x - x.floor()) * n as f64;
        let i = pos.floor() as isize;
        let t = pos - i as f64;
        let at = |k: isize| self.values[(i + k).rem_euclid(n as isize) as usize];
        let (y0, y1, y2, y3) = (at(-1), at(0), at(1), at(2));
        let c0 = -t * (t - 1.0) * (t - 2.0) / 6.0;
        let c1 = (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0;
        let c2 = -(t + 1.0) * t * (t - 2.0) / 2.0;
        let c3 = (t + 1.0) * t * (t - 1.0) / 6.0;
        c0 * y0 + c1 * y1 + c2 * y2 + c3 * y3
    }
}

/// Extrapolates `c^{-3/2}∫γ̃²` over a capacity sweep to `c → 0`.
///
/// The raw values behave like `ρ₀ + A√c + O(c)`, so a Neville tableau in
/// `s = √c` is used; the uncertainty is the last increment of the tableau.
pub fn calibrate_rho0(capacities: &[f64]) -> Result<Rho0> {
    let mut caps: Vec<f64> = capacities.to_vec();
    caps.sort_by(|a, b| b.partial_cmp(a).unwrap());
    caps.dedup();
    if caps.len() < 2 {
        return Err(Error::Calibration("need at least two capacities".into()));
    }
    for &c in &caps {
        if !(c > 0.0 && c < 1.0) {
            return Err(Error::Calibration(format!("capacity {c} outside (0, 1)")));
        }
    }
    let raw: Vec<f64> = caps
        .iter()
        .map(|&c| SlitParticle::from_capacity(c).map(|p| p.scaled_second_moment()))
        .collect::<Result<_>>()?;
    let s: Vec<f64> = caps.iter().map(|c| c.sqrt()).collect();
    let n = raw.len();
    // Neville: p[i] holds the extrapolant through points i..=i+level.
    let mut p = raw.clone();
    let mut last = p[n - 1];
    let mut prev = p[n - 1];
    for level in 1..n {
        for i in 0..n - level {
            let j = i + level;
            p[i] = (s[i] * p[i + 1] - s[j] * p[i]) / (s[i] - s[j]);
        }
        prev = last;
        last = p[0];
    }
    let value = last;
    let uncertainty = (last - prev).abs();
    if !(value > 0.0) {
        return Err(Error::Calibration(format!("extrapolated value {value} is not positive")));
    }
    if uncertainty > 0.10 * value {
        return Err(Error::Calibration(format!(
            "successive extrapolants {prev} and {last} differ by {:.1}% (> 10%)",
            100.0 * uncertainty / value
        )));
    }
    Ok(Rho0 { value, uncertainty, capacities: caps, raw, coarse: uncertainty > 0.02 * value })
}

/// A JSON sidecar caching calibrated `ρ₀` values by particle family.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct Rho0Cache {
    pub entries: BTreeMap<String, Rho0>,
}

impl Rho0Cache {
    pub fn key(family: &str, capacities: &[f64]) -> String {
        let caps: Vec<String> = capacities.iter().map(|c| format!("{c:e}")).collect();
        format!("{family}:{}", caps.join(","))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }

    pub fn store(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Returns the cached entry or calibrates and inserts it.
    pub fn get_or_calibrate(&mut self, family: &str, capacities: &[f64]) -> Result<Rho0> {
        let key = Self::key(family, capacities);
        if let Some(r) = self.entries.get(&key) {
            return Ok(r.clone());
        }
        let r = calibrate_rho0(capacities)?;
        self.entries.insert(key, r.clone());
        Ok(r)
    }
}

/// `∫₀¹ b(x) dx` by the midpoint rule on `grid` points, which is exact for
/// trigonometric polynomials of degree below `grid`.
pub fn mean_of_b(field: &DriftField, grid: usize) -> f64 {
    let mut s = NeumaierSum::default();
    for i in 0..grid {
        s.add(field.b((i as f64 + 0.5) / grid as f64));
    }
    s.total() / grid as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::FourierMode;

    /// Closed form of `ρ₀` for slits, derived from the inner scaling
    /// `γ̃(√c s) ≈ √c(√(π²s²+1) − πs)/π`.
    const RHO0_SLIT: f64 = 4.0 / (3.0 * PI * PI * PI);

    #[test]
    fn uniform_has_zero_drift() {
        let f = DriftField::new(AttachmentMeasure::uniform());
        let q = DriftField::with_mode(AttachmentMeasure::uniform(), DriftMode::Quadrature).unwrap();
        for x in [0.0, 0.2, 0.7] {
            assert_eq!(f.b(x), 0.0);
            assert!(q.b(x).abs() < 1e-15);
            assert_eq!(f.b_derivative(x, 1), 0.0);
        }
    }

    #[test]
    fn cosine_drift_value() {
        let m = AttachmentMeasure::cosine(0.5).unwrap();
        let f = DriftField::new(m.clone());
        let q = DriftField::with_mode(m, DriftMode::Quadrature).unwrap();
        let expect = 0.5 / (2.0 * PI);
        assert!((q.b(0.25) - expect).abs() < 1e-12);
        assert!((f.b(0.25) - expect).abs() < 1e-15);
        assert!((f.b_derivative(0.0, 1) - 0.5).abs() < 1e-15);
        assert!((f.b_derivative(0.5, 1) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn shifted_mode_three() {
        let (k, a, phi) = (3u32, 0.4, 0.2);
        let m = AttachmentMeasure::fourier(vec![FourierMode::new(k, a, 0.0)]).unwrap().shifted(phi);
        let q = DriftField::with_mode(m, DriftMode::Quadrature).unwrap();
        for i in 0..512 {
            let x = i as f64 / 512.0;
            let expect = a / (2.0 * PI) * (2.0 * PI * k as f64 * (x - phi)).sin();
            assert!((q.b(x) - expect).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn drift_derivatives_agree_across_modes() {
        let m = AttachmentMeasure::fourier(vec![FourierMode::new(1, 0.3, 0.1), FourierMode::new(2, -0.1, 0.2)]).unwrap();
        let f = DriftField::new(m);
        for x in [0.0, 0.11, 0.5, 0.83] {
            for order in [0u8, 1, 2] {
                let e = f.b_with(DriftMode::FourierExact, x, order);
                let q = f.b_with(DriftMode::Quadrature, x, order);
                assert!((e - q).abs() < 1e-8 * (1.0 + e.abs()), "order {order} x={x}: {e} vs {q}");
            }
        }
    }

    #[test]
    fn arc_drift_is_mean_zero_and_odd() {
        let f = DriftField::new(AttachmentMeasure::arc(0.0, 0.5, 0.05).unwrap());
        assert_eq!(f.mode(), DriftMode::Quadrature);
        assert!(mean_of_b(&f, 1024).abs() < 1e-9);
        // Symmetric about x = 1/4.
        for d in [0.05, 0.13, 0.31] {
            assert!((f.b(0.25 + d) + f.b(0.25 - d)).abs() < 1e-10);
        }
    }

    #[test]
    fn uniform_beta_vanishes() {
        let p = SlitParticle::from_capacity(1e-3).unwrap();
        let f = DriftField::new(AttachmentMeasure::uniform());
        for x in [0.0, 0.3, 0.77] {
            assert!(f.beta_nu(&p, x).abs() < 1e-9);
        }
        let m0 = f.gamma_second_moment(&p, 0.1);
        for x in [0.0, 0.3, 0.5, 0.77] {
            assert!(((f.gamma_second_moment(&p, x) - m0) / m0).abs() < 1e-8);
        }
        assert!((m0 - p.second_moment()).abs() < 1e-12 * m0.max(1e-300) + 1e-18);
    }

    #[test]
    fn beta_table_interpolates() {
        let p = SlitParticle::from_capacity(1e-3).unwrap();
        let f = DriftField::new(AttachmentMeasure::cosine(0.5).unwrap());
        let t = BetaTable::new(&f, &p);
        for i in 0..64 {
            let x = (i as f64 * 0.618_033_988_7).fract();
            assert!((t.eval(x) - f.beta_nu(&p, x)).abs() < 1e-9);
        }
    }

    #[test]
    fn calibration_matches_closed_form() {
        let r = calibrate_rho0(&[1e-3, 1e-4, 1e-5, 1e-6]).unwrap();
        assert!(r.uncertainty < 0.02 * r.value);
        assert!((r.value - RHO0_SLIT).abs() < 3.0 * r.uncertainty.max(1e-9), "{r:?}");
        let more = calibrate_rho0(&[1e-3, 1e-4, 1e-5, 1e-6, 1e-7]).unwrap();
        assert!(more.uncertainty < r.uncertainty);
        let coarse = calibrate_rho0(&[1e-1, 1e-2]).unwrap();
        assert!(coarse.uncertainty > r.uncertainty);
        assert!(coarse.coarse && !r.coarse);
    }

    #[test]
    fn calibration_rejects_thin_sweeps() {
        assert!(calibrate_rho0(&[1e-3]).is_err());
        assert!(calibrate_rho0(&[0.0, 1e-3]).is_err());
        let r = calibrate_rho0(&[0.9, 0.5]);
        assert!(matches!(r, Err(Error::Calibration(_))), "{r:?}");
    }

    #[test]
    fn uncalibrated_field_refuses() {
        let mut f = DriftField::new(AttachmentMeasure::cosine(0.5).unwrap());
        assert!(matches!(f.rho0(), Err(Error::Uncalibrated)));
        f.calibrate_rho0(&[1e-3, 1e-4, 1e-5]).unwrap();
        assert!(f.rho0().is_ok());
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rho0.json");
        let mut cache = Rho0Cache::load(&path).unwrap();
        let r = cache.get_or_calibrate("slit", &[1e-3, 1e-4, 1e-5]).unwrap();
        cache.store(&path).unwrap();
        let back = Rho0Cache::load(&path).unwrap();
        assert_eq!(back.entries[&Rho0Cache::key("slit", &[1e-3, 1e-4, 1e-5])], r);
    }
}
