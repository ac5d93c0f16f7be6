//! The slit particle: capacity and length, the exterior slit map and the
//! boundary angle function `γ` that drives the harmonic measure flow.
//!
//! Angles are measured in turns: the unit circle is identified with `[0, 1)`
//! and `x` stands for the point `e^{2πix}`.

use std::f64::consts::{FRAC_1_PI, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{graded_breaks, GaussLegendre};

/// Geometric refinement levels below `√c` in the graded mesh.
pub const GRADED_LEVELS: u32 = 20;
/// Gauss–Legendre order used on each graded cell.
pub const GRADED_ORDER: usize = 16;

/// A point of the unit circle, measured in turns.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct BoundaryAngle(pub f64);

impl BoundaryAngle {
    pub fn value(self) -> f64 {
        self.0
    }

    /// `e^{2πiθ}`.
    pub fn to_unit(self) -> Complex64 {
        Complex64::from_polar(1.0, 2.0 * PI * self.0)
    }
}

impl From<f64> for BoundaryAngle {
    fn from(x: f64) -> Self {
        BoundaryAngle(x)
    }
}

/// Splits `x = k + a` with `k` an integer and `a ∈ (-1/2, 1/2]`.
#[inline]
pub fn reduce_half_open(x: f64) -> (f64, f64) {
    let k = (x - 0.5).ceil();
    (k, x - k)
}

/// Capacity of a radial slit of length `d` attached to the unit disk.
pub fn capacity_from_length(d: f64) -> Result<f64> {
    if !(d.is_finite() && d > 0.0) {
        return Err(Error::Domain(format!("slit length must be positive and finite, got {d}")));
    }
    Ok((d * d / (4.0 * (1.0 + d))).ln_1p())
}

/// Inverse of [`capacity_from_length`]: the positive root of `d² = 4(1+d)(e^c − 1)`.
pub fn length_from_capacity(c: f64) -> Result<f64> {
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::Domain(format!("capacity must be positive and finite, got {c}")));
    }
    let beta = c.exp_m1();
    Ok(2.0 * beta + 2.0 * (beta * c.exp()).sqrt())
}

/// A single slit particle of logarithmic capacity `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlitParticle {
    capacity: f64,
    length: f64,
    beta: f64,
    #[serde(skip)]
    exp_c: f64,
    #[serde(skip)]
    jump: f64,
}

impl SlitParticle {
    pub fn from_capacity(c: f64) -> Result<Self> {
        let length = length_from_capacity(c)?;
        Ok(Self::build(c, length))
    }

    pub fn from_length(d: f64) -> Result<Self> {
        let c = capacity_from_length(d)?;
        Ok(Self::build(c, d))
    }

    fn build(capacity: f64, length: f64) -> Self {
        let beta = capacity.exp_m1();
        Self {
            capacity,
            length,
            beta,
            exp_c: capacity.exp(),
            jump: FRAC_1_PI * beta.sqrt().atan(),
        }
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// `β = e^c − 1`.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `γ̃(0⁺) = sup |γ̃|`.
    pub fn sup_gamma_tilde(&self) -> f64 {
        self.jump
    }

    /// The slit map `f(z) = J⁻¹((1+β)J(z) + β)` on `|z| > 1`, with
    /// `J(z) = (z + 1/z)/2`.
    pub fn slit_map(&self, z: Complex64) -> Result<Complex64> {
        let r = z.norm();
        if !(r > 1.0) {
            return Err(Error::Domain(format!("slit map needs |z| > 1, got |z| = {r}")));
        }
        let j = 0.5 * (z + z.inv());
        let w = j * self.exp_c + self.beta;
        let image = w + (w - 1.0).sqrt() * (w + 1.0).sqrt();
        let modulus = image.norm();
        if !(modulus > 1.0) {
            return Err(Error::Branch { re: image.re, im: image.im, modulus });
        }
        Ok(image)
    }

    /// `e^{2πiθ} f(z e^{−2πiθ})`: the particle attached at angle `θ`.
    pub fn rotated_map(&self, theta: BoundaryAngle, z: Complex64) -> Result<Complex64> {
        let rot = theta.to_unit();
        Ok(rot * self.slit_map(z * rot.conj())?)
    }

    /// The boundary value of the slit map at `e^{2πiy}`, evaluated
    /// algebraically. Points whose image lies on the slit are reported by
    /// their radius.
    pub fn slit_map_boundary(&self, y: f64) -> BoundaryImage {
        let (k, a) = reduce_half_open(y);
        let t = (PI * a).tan();
        let t2 = t * t;
        if t2 >= self.beta {
            // tan²(πx) = e^{−c}(tan²(πy) − β)
            let x = FRAC_1_PI * ((t2 - self.beta) / self.exp_c).sqrt().atan();
            BoundaryImage::Circle(k + a.signum() * x)
        } else {
            let cos2 = (2.0 * PI * a).cos();
            let w = self.exp_c * cos2 + self.beta;
            BoundaryImage::Slit(w + ((w - 1.0).max(0.0) * (w + 1.0)).sqrt())
        }
    }

    /// `γ(x)`: the boundary angle whose image under the slit map is `e^{2πix}`.
    /// At the slit base the right limit is returned.
    pub fn gamma(&self, x: f64) -> f64 {
        let (k, a) = reduce_half_open(x);
        if a == 0.5 {
            return k + 0.5;
        }
        if a == 0.0 {
            return k + self.jump;
        }
        let t = (PI * a.abs()).tan();
        let q = (self.exp_c * t * t + self.beta).sqrt();
        let angle = if 0.5 - a.abs() < 1e-8 {
            0.5 * PI - q.recip().atan()
        } else {
            q.atan()
        };
        k + a.signum() * FRAC_1_PI * angle
    }

    /// `γ̃(x) = γ(x) − x`, evaluated without the cancellation in the
    /// difference: `arctan q − arctan t = arctan((q − t)/(1 + qt))` and
    /// `q − t = β(1 + t²)/(q + t)`.
    #[inline]
    pub fn gamma_tilde(&self, x: f64) -> f64 {
        let (_, a) = reduce_half_open(x);
        if a == 0.5 {
            return 0.0;
        }
        if a == 0.0 {
            return self.jump;
        }
        let t = (PI * a.abs()).tan();
        let q = (self.exp_c * t * t + self.beta).sqrt();
        let ratio = self.beta * (1.0 + t * t) / ((q + t) * (1.0 + t * q));
        a.signum() * FRAC_1_PI * atan_small(ratio)
    }
}

// `atan` with a truncated Taylor series below 0.02 (relative error < 1e-20).
#[inline]
fn atan_small(r: f64) -> f64 {
    if r.abs() >= 0.02 {
        return r.atan();
    }
    let r2 = r * r;
    r * (1.0 - r2 * (1.0 / 3.0 - r2 * (1.0 / 5.0 - r2 * (1.0 / 7.0 - r2 * (1.0 / 9.0 - r2 / 11.0)))))
}

impl SlitParticle {
    /// Cell boundaries on `(0, 1/2]`, refined geometrically toward the jump
    /// of `γ̃` at 0 (nodes `√c·2^k` down to `√c·2^{-20}`).
    pub fn graded_mesh(&self, coarse_cell: f64) -> Vec<f64> {
        graded_breaks(self.capacity.sqrt(), GRADED_LEVELS, coarse_cell, 0.5)
    }

    /// `∫₀¹ γ̃(z) dz`, computed separately on `(0, 1/2]` and `(1/2, 1)`
    /// with meshes graded toward 0 and 1.
    pub fn mean_displacement(&self) -> f64 {
        let gl = GaussLegendre::new(GRADED_ORDER);
        let breaks = self.graded_mesh(1.0 / 64.0);
        let right = gl.over_cells(&breaks, |z| self.gamma_tilde(z));
        let left = gl.over_cells(&breaks, |z| self.gamma_tilde(1.0 - z));
        right + left
    }

    /// `∫₀¹ γ̃(z)² dz`.
    pub fn second_moment(&self) -> f64 {
        let gl = GaussLegendre::new(GRADED_ORDER);
        let breaks = self.graded_mesh(1.0 / 64.0);
        let right = gl.over_cells(&breaks, |z| self.gamma_tilde(z).powi(2));
        let left = gl.over_cells(&breaks, |z| self.gamma_tilde(1.0 - z).powi(2));
        right + left
    }

    /// `c^{-3/2} ∫₀¹ γ̃²`, which converges to the shape constant `ρ₀`.
    pub fn scaled_second_moment(&self) -> f64 {
        self.second_moment() / self.capacity.powf(1.5)
    }
}

/// Boundary value of the slit map: a point of the circle (in turns) or a
/// point on the slit (its radius).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundaryImage {
    Circle(f64),
    Slit(f64),
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn capacity_of_length_two() {
        let c = capacity_from_length(2.0).unwrap();
        assert_relative_eq!(c, (4.0f64 / 3.0).ln(), max_relative = 1e-14);
        assert_relative_eq!(length_from_capacity(c).unwrap(), 2.0, max_relative = 1e-12);
    }

    #[test]
    fn small_slit_scaling() {
        let d = 1e-6;
        let c = capacity_from_length(d).unwrap();
        assert_relative_eq!(c / (d * d), 0.25, max_relative = 1e-5);
        let r = length_from_capacity(1e-6).unwrap() / 1e-3;
        assert!((1.99..=2.01).contains(&r));
    }

    #[test]
    fn length_at_log_two() {
        let p = SlitParticle::from_capacity(2f64.ln()).unwrap();
        assert_relative_eq!(p.beta(), 1.0, max_relative = 1e-14);
        assert_relative_eq!(p.length(), 2.0 + 2.0 * 2f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn round_trips() {
        for d in [0.01, 0.5, 2.0, 10.0] {
            let back = length_from_capacity(capacity_from_length(d).unwrap()).unwrap();
            assert_relative_eq!(back, d, max_relative = 1e-12);
            let p = SlitParticle::from_length(d).unwrap();
            let expect = (1.0 + d * d / (4.0 * (1.0 + d))).ln();
            assert_relative_eq!(p.capacity(), expect, max_relative = 1e-12);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        for d in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(capacity_from_length(d), Err(Error::Domain(_))));
            assert!(matches!(length_from_capacity(d), Err(Error::Domain(_))));
        }
        let p = SlitParticle::from_capacity(0.1).unwrap();
        assert!(p.slit_map(Complex64::new(0.5, 0.0)).is_err());
        assert!(p.slit_map(Complex64::new(1.0, 0.0)).is_err());
    }

    #[test]
    fn slit_map_fixes_antipode() {
        let p = SlitParticle::from_capacity(0.1).unwrap();
        let w = p.slit_map(Complex64::new(-1.000001, 0.0)).unwrap();
        assert!((w + 1.0).norm() < 1e-5);
    }

    #[test]
    fn slit_map_normalisation_at_infinity() {
        let p = SlitParticle::from_capacity(0.1).unwrap();
        let z = Complex64::new(1e6, 0.0);
        let ratio = p.slit_map(z).unwrap() / z;
        assert!((ratio - 0.1f64.exp()).norm() < 1e-5);
    }

    #[test]
    fn slit_tip() {
        let p = SlitParticle::from_length(2.0).unwrap();
        let w = p.slit_map(Complex64::new(1.0 + 1e-8, 0.0)).unwrap();
        assert!((w - 3.0).norm() < 1e-3);
    }

    #[test]
    fn rotation() {
        let p = SlitParticle::from_capacity(0.3).unwrap();
        let z = Complex64::new(1.7, -0.4);
        assert_eq!(p.rotated_map(0.0.into(), z).unwrap(), p.slit_map(z).unwrap());
        let w = p.rotated_map(0.5.into(), Complex64::new(1.000001, 0.0)).unwrap();
        assert!((w - 1.0).norm() < 1e-5);
        for theta in [0.1, 0.37, 0.9] {
            let r = 1.3;
            let z = BoundaryAngle(theta).to_unit() * r;
            let a = p.rotated_map(theta.into(), z).unwrap().norm();
            let b = p.slit_map(Complex64::new(r, 0.0)).unwrap().norm();
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn gamma_values() {
        let p = SlitParticle::from_capacity(2f64.ln()).unwrap();
        assert_eq!(p.gamma(0.5), 0.5);
        assert_relative_eq!(p.gamma(0.25), 1.0 / 3.0, max_relative = 1e-14);
        let q = SlitParticle::from_capacity(0.05).unwrap();
        assert!((q.gamma(1.3) - q.gamma(0.3) - 1.0).abs() < 1e-14);
        assert!((q.gamma_tilde(1.3) - q.gamma_tilde(0.3)).abs() < 1e-14);
    }

    #[test]
    fn gamma_tilde_jump_at_zero() {
        let p = SlitParticle::from_capacity(0.01).unwrap();
        let up = p.gamma_tilde(1e-300);
        let down = p.gamma_tilde(-1e-300);
        let expect = FRAC_1_PI * 0.01f64.exp_m1().sqrt().atan();
        assert_relative_eq!(up, expect, max_relative = 1e-12);
        assert_relative_eq!(down, -expect, max_relative = 1e-12);
        assert_eq!(p.gamma_tilde(0.0), expect);
        assert_eq!(p.gamma_tilde(0.5), 0.0);
    }

    #[test]
    fn both_gamma_forms_agree() {
        for &c in &[1e-1, 1e-3, 1e-6] {
            let p = SlitParticle::from_capacity(c).unwrap();
            for i in 1..2000 {
                let x = -0.5 + i as f64 / 2000.0;
                assert!((p.gamma(x) - x - p.gamma_tilde(x)).abs() < 2e-15, "c={c} x={x}");
            }
            let x = 0.5 - 1e-10;
            assert!((p.gamma(x) - x - p.gamma_tilde(x)).abs() < 1e-15);
        }
    }

    #[test]
    fn sup_bound_on_grid() {
        for &c in &[1e-2, 1e-4, 1e-6] {
            let p = SlitParticle::from_capacity(c).unwrap();
            let n = 1_000_000;
            let sup = (0..n)
                .map(|i| p.gamma_tilde(i as f64 / n as f64).abs())
                .fold(0.0, f64::max);
            assert!(sup <= 0.7 * c.sqrt(), "c={c} sup={sup}");
            assert_eq!(sup, p.sup_gamma_tilde());
        }
    }

    #[test]
    fn odd_and_increasing() {
        let p = SlitParticle::from_capacity(1e-3).unwrap();
        let mut prev = p.gamma(1e-9);
        for i in 1..=5000 {
            let x = i as f64 / 10000.0;
            assert!((p.gamma_tilde(-x) + p.gamma_tilde(x)).abs() < 1e-16);
            let g = p.gamma(x);
            assert!(g > prev, "not increasing at {x}");
            prev = g;
        }
    }

    #[test]
    fn boundary_evaluator_inverts_gamma() {
        for &c in &[1e-1, 1e-3, 1e-5] {
            let p = SlitParticle::from_capacity(c).unwrap();
            for i in 1..=1000 {
                let x = i as f64 / 2000.0;
                match p.slit_map_boundary(p.gamma(x)) {
                    BoundaryImage::Circle(y) => assert!((y - x).abs() < 1e-12, "c={c} x={x} y={y}"),
                    BoundaryImage::Slit(r) => panic!("x={x} landed on the slit at {r}"),
                }
            }
            match p.slit_map_boundary(0.0) {
                BoundaryImage::Slit(r) => assert_relative_eq!(r, 1.0 + p.length(), max_relative = 1e-12),
                other => panic!("{other:?}"),
            }
        }
    }
}
