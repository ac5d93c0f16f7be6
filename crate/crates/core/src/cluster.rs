//! Clusters as compositions of rotated slit maps, `φₙ = f₁ ∘ ⋯ ∘ fₙ`, with
//! boundary tracing and geometry export.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::measure::AttachmentMeasure;
use crate::particle::{BoundaryAngle, BoundaryImage, SlitParticle};

/// Default radial offset of the traced curve.
pub const DEFAULT_TRACE_OFFSET: f64 = 1e-4;
/// Smallest accepted trace resolution.
pub const MIN_TRACE_RESOLUTION: usize = 256;

/// The attachment angles and capacities of a cluster, in attachment order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    particles: Vec<(BoundaryAngle, f64)>,
    total_capacity: f64,
    #[serde(skip)]
    cache: Vec<SlitParticle>,
}

impl ClusterState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Attaches a particle of capacity `c` at angle `theta`.
    pub fn push(&mut self, theta: BoundaryAngle, c: f64) -> Result<()> {
        let p = SlitParticle::from_capacity(c)?;
        self.particles.push((theta, c));
        self.total_capacity = self.particles.iter().map(|p| p.1).sum();
        self.cache.push(p);
        Ok(())
    }

    /// `n` particles of capacity `c` at angles drawn from `m` with the same
    /// stream as [`crate::flow::run_flow`] for this `seed`.
    pub fn grow(c: f64, m: &AttachmentMeasure, n: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = Self::new();
        for _ in 0..n {
            s.push(BoundaryAngle(m.quantile(rng.random::<f64>())), c)?;
        }
        Ok(s)
    }

    /// The cluster of the first `k` particles.
    pub fn prefix(&self, k: usize) -> Self {
        let particles = self.particles[..k].to_vec();
        let total_capacity = particles.iter().map(|p| p.1).sum();
        let cache = self.cache.iter().take(k).cloned().collect();
        Self { particles, total_capacity, cache }
    }

    pub fn particles(&self) -> &[(BoundaryAngle, f64)] {
        &self.particles
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn total_capacity(&self) -> f64 {
        self.total_capacity
    }

    fn particle(&self, i: usize) -> Result<SlitParticle> {
        match self.cache.get(i) {
            Some(p) => Ok(*p),
            None => SlitParticle::from_capacity(self.particles[i].1),
        }
    }

    // Restores the particle cache after deserialisation.
    fn ensure_cache(&mut self) -> Result<()> {
        if self.cache.len() != self.particles.len() {
            self.cache = self.particles.iter().map(|p| SlitParticle::from_capacity(p.1)).collect::<Result<_>>()?;
        }
        Ok(())
    }

    /// Parses a cluster saved with serde and rebuilds its maps.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut s: Self = serde_json::from_str(text).map_err(|e| Error::Io(e.to_string()))?;
        s.total_capacity = s.particles.iter().map(|p| p.1).sum();
        s.ensure_cache()?;
        Ok(s)
    }
}

/// `φₙ(z)`, applying particle `n` first. Branch failures report the
/// 1-based particle index.
pub fn compose_cluster(state: &ClusterState, z: Complex64) -> Result<Complex64> {
    let mut w = z;
    for i in (0..state.len()).rev() {
        let p = state.particle(i)?;
        w = p
            .rotated_map(state.particles[i].0, w)
            .map_err(|e| Error::ClusterBranch { index: i + 1, source: Box::new(e) })?;
    }
    Ok(w)
}

/// `Γₙ(x) = γₙ ∘ ⋯ ∘ γ₁(x)` in turns: the boundary angle whose image under
/// `φₙ` is `e^{2πix}`, composed from the boundary inverses of the particles.
pub fn boundary_preimage(state: &ClusterState, x: f64) -> Result<f64> {
    let mut a = x;
    for i in 0..state.len() {
        let p = state.particle(i)?;
        a += p.gamma_tilde(a - state.particles[i].0 .0);
    }
    Ok(a)
}

/// Image of a boundary point under the composed maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ComposedImage {
    /// A point of the unit circle, in turns.
    Circle(f64),
    /// A point off the circle (on a slit or beyond).
    Exterior(Complex64),
}

/// `φₙ(e^{2πiy})` evaluated exactly on the boundary: each map acts by its
/// algebraic boundary formula while the point stays on the circle.
pub fn compose_boundary(state: &ClusterState, y: f64) -> Result<ComposedImage> {
    let mut cur = ComposedImage::Circle(y);
    for i in (0..state.len()).rev() {
        let p = state.particle(i)?;
        let theta = state.particles[i].0;
        cur = match cur {
            ComposedImage::Circle(a) => match p.slit_map_boundary(a - theta.0) {
                BoundaryImage::Circle(t) => ComposedImage::Circle(theta.0 + t),
                BoundaryImage::Slit(r) => ComposedImage::Exterior(theta.to_unit() * r),
            },
            ComposedImage::Exterior(z) => ComposedImage::Exterior(
                p.rotated_map(theta, z)
                    .map_err(|e| Error::ClusterBranch { index: i + 1, source: Box::new(e) })?,
            ),
        };
    }
    Ok(cur)
}

/// Image of the circle `|z| = 1 + ε` at `resolution` equally spaced angles.
pub fn boundary_trace(state: &ClusterState, resolution: usize, offset: f64) -> Result<Vec<Complex64>> {
    if resolution < MIN_TRACE_RESOLUTION {
        return Err(Error::Domain(format!("trace resolution must be at least {MIN_TRACE_RESOLUTION}, got {resolution}")));
    }
    if !(offset > 0.0) {
        return Err(Error::Domain(format!("trace offset must be positive, got {offset}")));
    }
    let r = 1.0 + offset;
    (0..resolution)
        .into_par_iter()
        .map(|k| compose_cluster(state, Complex64::from_polar(r, 2.0 * std::f64::consts::PI * k as f64 / resolution as f64)))
        .collect()
}

/// Writes `re,im` rows.
pub fn write_csv<W: Write>(points: &[Complex64], mut w: W) -> Result<()> {
    writeln!(w, "re,im")?;
    for z in points {
        writeln!(w, "{},{}", z.re, z.im)?;
    }
    Ok(())
}

/// Reads a file written by [`write_csv`].
pub fn read_csv<R: BufRead>(r: R) -> Result<Vec<Complex64>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != "re,im" {
                return Err(Error::Io(format!("expected header 're,im', got '{line}'")));
            }
            continue;
        }
        let (a, b) = line
            .split_once(',')
            .ok_or_else(|| Error::Io(format!("line {}: expected two columns", i + 1)))?;
        let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Io(format!("line {}: {e}", i + 1)));
        out.push(Complex64::new(parse(a)?, parse(b)?));
    }
    Ok(out)
}

/// An SVG document drawing the closed polyline, `y` pointing up.
pub fn to_svg(points: &[Complex64]) -> String {
    let (mut x0, mut x1, mut y0, mut y1) = (-1.0f64, 1.0f64, -1.0f64, 1.0f64);
    for z in points {
        x0 = x0.min(z.re);
        x1 = x1.max(z.re);
        y0 = y0.min(-z.im);
        y1 = y1.max(-z.im);
    }
    let pad = 0.02 * (x1 - x0).max(y1 - y0);
    let (vx, vy, vw, vh) = (x0 - pad, y0 - pad, x1 - x0 + 2.0 * pad, y1 - y0 + 2.0 * pad);
    let mut d = String::new();
    for (i, z) in points.iter().enumerate() {
        let _ = write!(d, "{}{:.6} {:.6} ", if i == 0 { "M" } else { "L" }, z.re, -z.im);
    }
    if !points.is_empty() {
        d.push('Z');
    }
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"{vx:.6} {vy:.6} {vw:.6} {vh:.6}\">\n\
         <path d=\"{}\" fill=\"none\" stroke=\"black\" stroke-width=\"{:.6}\"/>\n</svg>\n",
        d.trim_end(),
        vw / 800.0
    )
}

/// Writes `<stem>.csv` and, when asked, `<stem>.svg`.
pub fn export_geometry(points: &[Complex64], csv_path: &Path, svg_path: Option<&Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(csv_path)?);
    write_csv(points, &mut f)?;
    f.flush()?;
    if let Some(svg) = svg_path {
        std::fs::write(svg, to_svg(points))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{run_flow, FlowOptions};

    #[test]
    fn empty_cluster_is_identity() {
        let s = ClusterState::new();
        let z = Complex64::new(1.3, -0.4);
        assert_eq!(compose_cluster(&s, z).unwrap(), z);
        let trace = boundary_trace(&s, 256, 1e-4).unwrap();
        assert!(trace.iter().all(|w| (w.norm() - (1.0 + 1e-4)).abs() < 1e-14));
    }

    #[test]
    fn one_particle_matches_slit_map() {
        let mut s = ClusterState::new();
        s.push(BoundaryAngle(0.0), 0.01).unwrap();
        let p = SlitParticle::from_capacity(0.01).unwrap();
        let z = Complex64::new(0.2, 1.5);
        assert!((compose_cluster(&s, z).unwrap() - p.slit_map(z).unwrap()).norm() < 1e-15);
    }

    #[test]
    fn capacities_add() {
        let m = AttachmentMeasure::cosine(0.5).unwrap();
        let s = ClusterState::grow(0.01, &m, 50, 3).unwrap();
        assert!((s.total_capacity() - 0.5).abs() < 1e-12);
        let r = 1e6;
        let w = compose_cluster(&s, Complex64::new(r, 0.0)).unwrap();
        assert!((w.norm() / r - 0.5f64.exp()).abs() < 1e-4);
    }

    #[test]
    fn branch_error_carries_index() {
        let mut s = ClusterState::new();
        s.push(BoundaryAngle(0.1), 0.01).unwrap();
        match compose_cluster(&s, Complex64::new(0.5, 0.0)) {
            Err(Error::ClusterBranch { index: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn boundary_preimage_is_flow() {
        let c = 1e-3;
        let m = AttachmentMeasure::cosine(0.5).unwrap();
        let p = SlitParticle::from_capacity(c).unwrap();
        let n = 400;
        let s = ClusterState::grow(c, &m, n, 42).unwrap();
        for x in [0.05, 0.3, 0.61, 0.9] {
            let traj = run_flow(&p, &m, x, n as u64, 42, FlowOptions::default());
            assert!((boundary_preimage(&s, x).unwrap() - traj.final_value()).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_boundary_map_undoes_each_step() {
        let c = 1e-3;
        let m = AttachmentMeasure::cosine(0.5).unwrap();
        let s = ClusterState::grow(c, &m, 200, 8).unwrap();
        let x = 0.3;
        let mut prev = x;
        for k in 1..=s.len() {
            let next = boundary_preimage(&s.prefix(k), x).unwrap();
            // Only the newest particle: map e^{2πi·next} back through f_k.
            let mut last = ClusterState::new();
            last.push(s.particles()[k - 1].0, c).unwrap();
            match compose_boundary(&last, next).unwrap() {
                ComposedImage::Circle(a) => assert!((a - prev).abs() < 1e-12, "step {k}"),
                other => panic!("left the circle: {other:?}"),
            }
            prev = next;
        }
        // With few particles the full forward composition is well conditioned.
        let short = s.prefix(10);
        match compose_boundary(&short, boundary_preimage(&short, x).unwrap()).unwrap() {
            ComposedImage::Circle(a) => assert!((a - x).abs() < 1e-9),
            other => panic!("left the circle: {other:?}"),
        }
    }

    #[test]
    fn trace_resolution_guard() {
        assert!(boundary_trace(&ClusterState::new(), 255, 1e-4).is_err());
    }

    #[test]
    fn csv_round_trip_and_svg_bounds() {
        let pts = vec![Complex64::new(1.5, -0.25), Complex64::new(-0.125, 2.0)];
        let mut buf = Vec::new();
        write_csv(&pts, &mut buf).unwrap();
        assert_eq!(read_csv(&buf[..]).unwrap(), pts);
        let mut empty = Vec::new();
        write_csv(&[], &mut empty).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap(), "re,im\n");
        let svg = to_svg(&pts);
        let vb: Vec<f64> = svg
            .split("viewBox=\"")
            .nth(1)
            .unwrap()
            .split('"')
            .next()
            .unwrap()
            .split(' ')
            .map(|v| v.parse().unwrap())
            .collect();
        for z in &pts {
            assert!(z.re >= vb[0] && z.re <= vb[0] + vb[2]);
            assert!(-z.im >= vb[1] && -z.im <= vb[1] + vb[3]);
        }
    }

    #[test]
    fn json_round_trip_restores_maps() {
        let m = AttachmentMeasure::uniform();
        let s = ClusterState::grow(0.02, &m, 5, 1).unwrap();
        let back = ClusterState::from_json(&serde_json::to_string(&s).unwrap()).unwrap();
        let z = Complex64::new(0.0, 2.0);
        assert_eq!(compose_cluster(&back, z).unwrap(), compose_cluster(&s, z).unwrap());
    }
}
