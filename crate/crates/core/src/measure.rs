//! Attachment measures `ν` on the circle: densities, exact CDFs and an
//! inverse-CDF sampler.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::particle::BoundaryAngle;
use crate::quadrature::GaussLegendre;

/// Number of cells in the quantile lookup table.
// Below this density the sampler falls back to a Newton step.
const HERMITE_MIN_DENSITY: f64 = 1e-2;
const HERMITE_TOLERANCE: f64 = 1e-14;

pub const CDF_TABLE_SIZE: usize = 1 << 16;

/// Grid used for positivity and smoothness validation.
const VALIDATION_GRID: usize = 1 << 16;

/// One Fourier mode `a cos(2πkx) + b sin(2πkx)` of a density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FourierMode {
    pub k: u32,
    pub a: f64,
    pub b: f64,
}

impl FourierMode {
    pub fn new(k: u32, a: f64, b: f64) -> Self {
        Self { k, a, b }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Shape {
    /// `1 + Σ a_k cos 2πkx + b_k sin 2πkx`.
    Fourier(Vec<FourierMode>),
    /// Smoothed indicator of `[lo, hi]` with quintic ramps of width `w`
    /// centred on the endpoints, divided by `hi − lo`.
    Arc { lo: f64, hi: f64, w: f64 },
}

/// A probability measure on the circle with a `C²` density.
#[derive(Debug, Clone)]
pub struct AttachmentMeasure {
    name: String,
    shape: Shape,
    offset: f64,
    table: Arc<[QuantileNode]>,
}

// Quantile node `Q(j/N)` of the unshifted measure, with `Q′(j/N)/N`, and
// whether cubic Hermite interpolation is accurate on cell `j`.
#[derive(Debug, Clone, Copy)]
struct QuantileNode {
    x: f64,
    slope: f64,
    hermite: bool,
}

#[inline]
fn hermite(t: f64, x0: f64, m0: f64, x1: f64, m1: f64) -> f64 {
    let t2 = t * t;
    let t3 = t2 * t;
    (2.0 * t3 - 3.0 * t2 + 1.0) * x0 + (t3 - 2.0 * t2 + t) * m0 + (3.0 * t2 - 2.0 * t3) * x1 + (t3 - t2) * m1
}

// Quintic smoothstep and its antiderivative / derivatives on [0, 1].
#[inline]
fn smoothstep(s: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else if s >= 1.0 {
        1.0
    } else {
        s * s * s * (10.0 + s * (-15.0 + 6.0 * s))
    }
}

#[inline]
fn smoothstep_integral(s: f64) -> f64 {
    if s <= 0.0 {
        0.0
    } else if s >= 1.0 {
        s - 0.5
    } else {
        s * s * s * s * (2.5 + s * (-3.0 + s))
    }
}

#[inline]
fn smoothstep_d1(s: f64) -> f64 {
    if s <= 0.0 || s >= 1.0 {
        0.0
    } else {
        30.0 * s * s * (1.0 - s) * (1.0 - s)
    }
}

#[inline]
fn smoothstep_d2(s: f64) -> f64 {
    if s <= 0.0 || s >= 1.0 {
        0.0
    } else {
        60.0 * s * (1.0 - s) * (1.0 - 2.0 * s)
    }
}

#[inline]
fn wrap(x: f64) -> f64 {
    x - x.floor()
}

impl AttachmentMeasure {
    /// The uniform measure (plain Hastings–Levitov attachment).
    pub fn uniform() -> Self {
        Self::fourier(Vec::new()).expect("uniform density is valid")
    }

    /// Density `1 + Σ(a_k cos 2πkx + b_k sin 2πkx)`.
    pub fn fourier(modes: Vec<FourierMode>) -> Result<Self> {
        for m in &modes {
            if m.k == 0 {
                return Err(Error::Measure("Fourier mode k must be >= 1".into()));
            }
            if !(m.a.is_finite() && m.b.is_finite()) {
                return Err(Error::Measure(format!("non-finite coefficient in mode {}", m.k)));
            }
        }
        let name = if modes.is_empty() {
            "uniform".to_string()
        } else {
            let terms: Vec<String> = modes.iter().map(|m| format!("{}:{}:{}", m.k, m.a, m.b)).collect();
            format!("fourier[{}]", terms.join(","))
        };
        let mut m = Self {
            name,
            shape: Shape::Fourier(modes),
            offset: 0.0,
            table: Arc::from(Vec::new()),
        };
        let (mut worst, mut at) = (f64::INFINITY, 0.0);
        for i in 0..VALIDATION_GRID {
            let x = i as f64 / VALIDATION_GRID as f64;
            let h = m.density(x);
            if h < worst {
                worst = h;
                at = x;
            }
        }
        if worst < 0.0 {
            return Err(Error::Measure(format!("density is negative ({worst}) at grid point x = {at}")));
        }
        m.build_quantiles();
        Ok(m)
    }

    /// `1 + a cos(2πx)`.
    pub fn cosine(a: f64) -> Result<Self> {
        Self::fourier(vec![FourierMode::new(1, a, 0.0)])
    }

    /// A `C²` smoothing of the normalised indicator of the arc `[lo, hi]`.
    pub fn arc(lo: f64, hi: f64, smoothing: f64) -> Result<Self> {
        if !(0.0 <= lo && lo < hi && hi <= 1.0) {
            return Err(Error::Measure(format!("arc needs 0 <= lo < hi <= 1, got [{lo}, {hi}]")));
        }
        if !(smoothing > 0.0 && smoothing < (hi - lo) / 4.0) {
            return Err(Error::Measure(format!(
                "arc smoothing must lie in (0, {}), got {smoothing}",
                (hi - lo) / 4.0
            )));
        }
        let mut m = Self {
            name: format!("arc[{lo},{hi},{smoothing}]"),
            shape: Shape::Arc { lo, hi, w: smoothing },
            offset: 0.0,
            table: Arc::from(Vec::new()),
        };
        m.build_quantiles();
        Ok(m)
    }

    /// The same measure rotated by `s`: density `h(x − s)`.
    pub fn shifted(&self, s: f64) -> Self {
        let mut m = self.clone();
        m.offset += s;
        m.name = format!("{}+{}", self.name, m.offset);
        m
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Declared Fourier modes (after applying any shift), if the density is a
    /// trigonometric polynomial.
    pub fn fourier_modes(&self) -> Option<Vec<FourierMode>> {
        match &self.shape {
            Shape::Fourier(modes) => Some(
                modes
                    .iter()
                    .map(|m| {
                        let (s, c) = (2.0 * PI * m.k as f64 * self.offset).sin_cos();
                        FourierMode::new(m.k, m.a * c - m.b * s, m.a * s + m.b * c)
                    })
                    .collect(),
            ),
            Shape::Arc { .. } => None,
        }
    }

    pub fn is_uniform(&self) -> bool {
        matches!(&self.shape, Shape::Fourier(m) if m.iter().all(|m| m.a == 0.0 && m.b == 0.0))
    }

    /// `h_ν(x)`, periodic.
    #[inline]
    pub fn density(&self, x: f64) -> f64 {
        let x = x - self.offset;
        match &self.shape {
            Shape::Fourier(modes) => {
                let mut h = 1.0;
                for m in modes {
                    let (s, c) = (2.0 * PI * m.k as f64 * x).sin_cos();
                    h += m.a * c + m.b * s;
                }
                h
            }
            &Shape::Arc { lo, hi, w } => {
                let x = wrap(x);
                let mut g = 0.0;
                for k in [-1.0, 0.0, 1.0] {
                    let y = x + k;
                    g += smoothstep((y - lo) / w + 0.5) - smoothstep((y - hi) / w + 0.5);
                }
                g / (hi - lo)
            }
        }
    }

    /// First or second derivative of the density (`order` 1 or 2).
    pub fn density_derivative(&self, x: f64, order: u8) -> f64 {
        let x = x - self.offset;
        match &self.shape {
            Shape::Fourier(modes) => {
                let mut d = 0.0;
                for m in modes {
                    let omega = 2.0 * PI * m.k as f64;
                    let (s, c) = (omega * x).sin_cos();
                    d += match order {
                        1 => omega * (-m.a * s + m.b * c),
                        2 => -omega * omega * (m.a * c + m.b * s),
                        _ => panic!("derivative order must be 1 or 2"),
                    };
                }
                d
            }
            &Shape::Arc { lo, hi, w } => {
                let x = wrap(x);
                let (f, scale): (fn(f64) -> f64, f64) = match order {
                    1 => (smoothstep_d1, 1.0 / w),
                    2 => (smoothstep_d2, 1.0 / (w * w)),
                    _ => panic!("derivative order must be 1 or 2"),
                };
                let mut g = 0.0;
                for k in [-1.0, 0.0, 1.0] {
                    let y = x + k;
                    g += f((y - lo) / w + 0.5) - f((y - hi) / w + 0.5);
                }
                g * scale / (hi - lo)
            }
        }
    }

    /// Cumulative distribution on `[0, 1)`: `F(x) = ν([0, x])`, extended so
    /// that `F(x + 1) = F(x) + 1`.
    #[inline]
    pub fn cdf(&self, x: f64) -> f64 {
        let shifted = x - self.offset;
        self.cdf_unshifted(shifted) - self.cdf_unshifted(-self.offset)
    }

    #[inline]
    fn cdf_unshifted(&self, x: f64) -> f64 {
        match &self.shape {
            Shape::Fourier(modes) => {
                let mut f = x;
                for m in modes {
                    let omega = 2.0 * PI * m.k as f64;
                    let (s, c) = (omega * x).sin_cos();
                    f += (m.a * s + m.b * (1.0 - c)) / omega;
                }
                f
            }
            &Shape::Arc { lo, hi, w } => {
                let n = x.floor();
                let y = x - n;
                // Mass of the periodised bump on [0, y].
                let bump = |t: f64| w * (smoothstep_integral((t - lo) / w + 0.5) - smoothstep_integral((t - hi) / w + 0.5));
                let mut f = 0.0;
                for k in [-1.0, 0.0, 1.0] {
                    f += bump(y + k) - bump(k);
                }
                n + f / (hi - lo)
            }
        }
    }

    fn build_quantiles(&mut self) {
        let n = CDF_TABLE_SIZE;
        let mut q = Vec::with_capacity(n + 1);
        let mut lo = 0.0;
        for j in 0..=n {
            let u = j as f64 / n as f64;
            let x = if j == 0 {
                0.0
            } else if j == n {
                1.0
            } else {
                self.invert_cdf(u, lo)
            };
            let h = self.cdf_and_density_unshifted(x).1;
            let slope = if h >= HERMITE_MIN_DENSITY { 1.0 / (h * n as f64) } else { f64::NAN };
            q.push(QuantileNode { x, slope, hermite: false });
            lo = x;
        }
        // Accept Hermite on a cell when it inverts the CDF at two interior points.
        for j in 0..n {
            let (a, b) = (q[j], q[j + 1]);
            if !(a.slope.is_finite() && b.slope.is_finite()) {
                continue;
            }
            q[j].hermite = [0.3, 0.7].iter().all(|&t| {
                let x = hermite(t, a.x, a.slope, b.x, b.slope);
                (self.cdf_unshifted(x) - (j as f64 + t) / n as f64).abs() < HERMITE_TOLERANCE
            });
        }
        self.table = Arc::from(q);
    }

    // Unshifted-frame quantile at or above `lo`, starting from a Newton
    // step off the previous node.
    fn invert_cdf(&self, u: f64, lo: f64) -> f64 {
        let (f, h) = self.cdf_and_density_unshifted(lo);
        let guess = if h > 1e-12 { lo + (u - f) / h } else { f64::NAN };
        let x = if guess > lo && guess < 1.0 { guess } else { 0.5 * (lo + 1.0) };
        self.newton_bracketed(u, lo, 1.0, x)
    }

    // Newton on `F(x) = u`, falling back to bisection whenever the step
    // leaves the bracket `[a, b]`.
    #[inline]
    fn newton_bracketed(&self, u: f64, mut a: f64, mut b: f64, mut x: f64) -> f64 {
        for _ in 0..200 {
            let (f, h) = self.cdf_and_density_unshifted(x);
            let r = f - u;
            if r < 0.0 {
                a = x;
            } else {
                b = x;
            }
            let newton = if h > 1e-12 { x - r / h } else { f64::NAN };
            // A converged Newton step sits on the bracket end just moved to `x`.
            if (newton - x).abs() <= 4e-16 * (1.0 + x.abs()) {
                return newton.clamp(a, b);
            }
            if b - a <= 1e-15 {
                return 0.5 * (a + b);
            }
            x = if newton > a && newton < b { newton } else { 0.5 * (a + b) };
        }
        x
    }

    /// The `u`-quantile of the unshifted measure, plus the shift: cubic
    /// Hermite interpolation in the lookup table on validated cells,
    /// bracketed Newton inside the cell elsewhere.
    #[inline]
    pub fn quantile(&self, u: f64) -> f64 {
        let pos = u * CDF_TABLE_SIZE as f64;
        let j = (pos as usize).min(CDF_TABLE_SIZE - 1);
        let t = pos - j as f64;
        let (n0, n1) = (self.table[j], self.table[j + 1]);
        let (x0, x1) = (n0.x, n1.x);
        if n0.hermite {
            return hermite(t, x0, n0.slope, x1, n1.slope).clamp(x0, x1) + self.offset;
        }
        self.newton_bracketed(u, x0, x1, x0 + (x1 - x0) * t) + self.offset
    }

    #[inline]
    fn cdf_and_density_unshifted(&self, x: f64) -> (f64, f64) {
        match &self.shape {
            Shape::Fourier(modes) => {
                let (mut f, mut h) = (x, 1.0);
                for m in modes {
                    let omega = 2.0 * PI * m.k as f64;
                    let (s, c) = (omega * x).sin_cos();
                    f += (m.a * s + m.b * (1.0 - c)) / omega;
                    h += m.a * c + m.b * s;
                }
                (f, h)
            }
            Shape::Arc { .. } => (self.cdf_unshifted(x), self.density(x + self.offset)),
        }
    }

    /// Draws an attachment angle.
    #[inline]
    pub fn sample_angle<R: Rng + ?Sized>(&self, rng: &mut R) -> BoundaryAngle {
        BoundaryAngle(self.quantile(rng.random::<f64>()))
    }

    /// The ordered quantile table `F⁻¹(j / N)`, `j = 0..=N` (unshifted frame).
    pub fn quantile_table(&self) -> Vec<f64> {
        self.table.iter().map(|e| e.x).collect()
    }

    /// `‖h′‖∞` and `‖h″‖∞` estimated on the validation grid.
    pub fn derivative_sup(&self) -> (f64, f64) {
        let mut d1: f64 = 0.0;
        let mut d2: f64 = 0.0;
        for i in 0..VALIDATION_GRID {
            let x = i as f64 / VALIDATION_GRID as f64;
            d1 = d1.max(self.density_derivative(x, 1).abs());
            d2 = d2.max(self.density_derivative(x, 2).abs());
        }
        (d1, d2)
    }

    /// Checks the measure assumptions numerically.
    pub fn validate(&self) -> Result<MeasureDiagnostics> {
        let n = VALIDATION_GRID;
        let dx = 1.0 / n as f64;
        let mut min_density = f64::INFINITY;
        let mut max_second_difference: f64 = 0.0;
        for i in 0..n {
            let x = i as f64 * dx;
            let h = self.density(x);
            min_density = min_density.min(h);
            let sd = (self.density(x + dx) - 2.0 * h + self.density(x - dx)) / (dx * dx);
            max_second_difference = max_second_difference.max(sd.abs());
        }
        let gl = GaussLegendre::new(16);
        let mass = gl.composite(0.0, 1.0, 1024, |x| self.density(x));
        let (_, d2) = self.derivative_sup();
        let monotone = self.table.windows(2).all(|w| w[1].x > w[0].x);
        let diag = MeasureDiagnostics { min_density, mass, max_second_difference, sup_second_derivative: d2, quantiles_increasing: monotone };
        if min_density < 0.0 {
            return Err(Error::Measure(format!("density is negative: min {min_density}")));
        }
        if (mass - 1.0).abs() > 1e-10 {
            return Err(Error::Measure(format!("density integrates to {mass}")));
        }
        if !(max_second_difference <= 1.01 * d2 + 1e-6) {
            return Err(Error::Measure(format!(
                "second differences {max_second_difference} exceed the second-derivative bound {d2}"
            )));
        }
        if !monotone {
            return Err(Error::Measure("quantile table is not strictly increasing".into()));
        }
        Ok(diag)
    }
}

/// Numerical evidence for the measure assumptions.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MeasureDiagnostics {
    pub min_density: f64,
    pub mass: f64,
    pub max_second_difference: f64,
    pub sup_second_derivative: f64,
    pub quantiles_increasing: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_density() {
        let m = AttachmentMeasure::uniform();
        for x in [0.0, 0.3, 0.99, -2.5] {
            assert_eq!(m.density(x), 1.0);
        }
        assert!(m.is_uniform());
        assert!((m.quantile(0.37) - 0.37).abs() < 1e-15);
    }

    #[test]
    fn cosine_density() {
        let m = AttachmentMeasure::cosine(0.5).unwrap();
        assert!((m.density(0.0) - 1.5).abs() < 1e-15);
        assert!((m.density(0.5) - 0.5).abs() < 1e-15);
        for x in [0.1, 0.77] {
            assert!((m.density(x + 1.0) - m.density(x)).abs() < 1e-14);
        }
        m.validate().unwrap();
    }

    #[test]
    fn negative_density_is_rejected() {
        let err = AttachmentMeasure::cosine(1.2).unwrap_err();
        match err {
            Error::Measure(msg) => assert!(msg.contains("x = 0.5"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn arc_spanning_circle_is_uniform() {
        let m = AttachmentMeasure::arc(0.0, 1.0, 0.1).unwrap();
        for i in 0..100 {
            let x = i as f64 / 100.0;
            assert!((m.density(x) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn half_arc_plateau_and_support() {
        let m = AttachmentMeasure::arc(0.0, 0.5, 0.05).unwrap();
        let diag = m.validate().unwrap();
        assert!((diag.mass - 1.0).abs() < 1e-12);
        // Each ramp is symmetric about its endpoint, so no mass is lost.
        let gl = GaussLegendre::new(16);
        let unnormalised = gl.composite(0.0, 1.0, 1024, |x| m.density(x) * 0.5);
        assert!((m.density(0.25) - 1.0 / unnormalised * 1.0).abs() < 1e-12);
        assert!((m.density(0.25) - 2.0).abs() < 1e-12);
        assert_eq!(m.density(0.75), 0.0);
    }

    #[test]
    fn arc_rejects_bad_parameters() {
        assert!(AttachmentMeasure::arc(0.5, 0.2, 0.01).is_err());
        assert!(AttachmentMeasure::arc(0.0, 0.5, 0.2).is_err());
        assert!(AttachmentMeasure::arc(0.0, 0.5, 0.0).is_err());
    }

    #[test]
    fn quantile_inverts_cdf() {
        for m in [
            AttachmentMeasure::cosine(0.5).unwrap(),
            AttachmentMeasure::fourier(vec![FourierMode::new(1, 0.3, 0.2), FourierMode::new(3, 0.1, -0.2)]).unwrap(),
            AttachmentMeasure::arc(0.1, 0.6, 0.05).unwrap(),
        ] {
            let mut worst: f64 = 0.0;
            for i in 0..100_000 {
                let u = (i as f64 + 0.5) / 100_000.0;
                let x = m.quantile(u);
                worst = worst.max((m.cdf(x) - u).abs());
            }
            assert!(worst < 1e-12, "{} worst={worst:e}", m.name());
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-5;
        for m in [AttachmentMeasure::cosine(0.4).unwrap(), AttachmentMeasure::arc(0.2, 0.7, 0.1).unwrap()] {
            for x in [0.13, 0.18, 0.23, 0.66] {
                let fd1 = (m.density(x + h) - m.density(x - h)) / (2.0 * h);
                let fd2 = (m.density_derivative(x + h, 1) - m.density_derivative(x - h, 1)) / (2.0 * h);
                assert!((fd1 - m.density_derivative(x, 1)).abs() < 1e-5 * (1.0 + fd1.abs()));
                let d2 = m.density_derivative(x, 2);
                assert!((fd2 - d2).abs() < 1e-4 * (1.0 + fd2.abs()), "{} x={x} fd={fd2} exact={d2}", m.name());
            }
        }
    }

    #[test]
    fn shifted_measure() {
        let m = AttachmentMeasure::cosine(0.5).unwrap();
        let s = m.shifted(0.37);
        assert!((s.density(0.37) - 1.5).abs() < 1e-14);
        assert!((s.quantile(0.2) - m.quantile(0.2) - 0.37).abs() < 1e-12);
        let modes = s.fourier_modes().unwrap();
        let direct = 1.0 + modes[0].a * (2.0 * PI * 0.1).cos() + modes[0].b * (2.0 * PI * 0.1).sin();
        assert!((direct - s.density(0.1)).abs() < 1e-14);
    }

    #[test]
    fn sampler_is_deterministic() {
        let m = AttachmentMeasure::cosine(0.5).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..8).map(|_| m.sample_angle(&mut rng).0).collect::<Vec<_>>()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
    }
}
