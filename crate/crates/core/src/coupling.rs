//! Curve-to-Gaussian coupling.
//!
//! Each curve deterministically emits `N` rod-shaped Gaussians at the
//! midpoint parameters `t_i = (i + 0.5) / N`. Position, orientation and the
//! principal scale come from the curve geometry, the cross-section scales
//! from the curve thickness, opacity from the curve opacity and the mask from
//! the per-sample logit. [`backprop_coupling`] is the adjoint of [`couple`].

use std::io::Write;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curve::{sigmoid, CurveError, CurveId, ParametricCurve, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CouplingError {
    #[error("curve {id} is degenerate: {source}")]
    DegenerateCurve {
        id: CurveId,
        #[source]
        source: CurveError,
    },
    #[error("expected {expected} gradients, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CouplingConfig {
    /// Gaussians per curve.
    pub samples: usize,
    /// Multiplier on the principal scale; 1.0 uses the sample spacing as-is.
    pub overlap: f64,
    /// Tangent norms below this are treated as degenerate.
    pub tangent_epsilon: f64,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        Self {
            samples: 12,
            overlap: 1.0,
            tangent_epsilon: 1e-9,
        }
    }
}

impl CouplingConfig {
    pub fn parameters(&self) -> Vec<f64> {
        sample_parameters(self.samples)
    }
}

/// Midpoint sample parameters `(i + 0.5) / n`.
pub fn sample_parameters(n: usize) -> Vec<f64> {
    (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect()
}

const FALLBACK_DOT: f64 = 0.999;

/// Reference direction projected against the tangent to get the second axis.
#[inline]
pub fn frame_reference(v0: &Vec3) -> Vec3 {
    if v0.z.abs() > FALLBACK_DOT {
        Vec3::y()
    } else {
        Vec3::z()
    }
}

/// Orthonormal frame with columns `(v0, v1, v2)`, `v0` the given unit
/// tangent, `v1` the reference direction made perpendicular to it and
/// `v2 = v0 x v1`.
pub fn build_frame(tangent: &Vec3) -> Matrix3<f64> {
    let v0 = *tangent;
    let r = frame_reference(&v0);
    let u = r - v0 * r.dot(&v0);
    let v1 = u / u.norm();
    let v2 = v0.cross(&v1);
    Matrix3::from_columns(&[v0, v1, v2])
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: Vec3,
    /// Columns are the principal (tangent) axis and the two cross axes.
    pub frame: Matrix3<f64>,
    /// Standard deviations along the frame columns.
    pub scales: Vec3,
    pub opacity: f64,
    pub mask: f64,
    pub parent: CurveId,
    pub sample_index: usize,
}

impl GaussianPrimitive {
    pub fn principal_axis(&self) -> Vec3 {
        self.frame.column(0).into_owned()
    }

    /// Opacity after mask gating.
    pub fn effective_opacity(&self) -> f64 {
        self.opacity * self.mask
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        let s2 = Matrix3::from_diagonal(&self.scales.component_mul(&self.scales));
        self.frame * s2 * self.frame.transpose()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().all(|v| v.is_finite())
            && self.frame.iter().all(|v| v.is_finite())
            && self.scales.iter().all(|v| v.is_finite())
            && self.opacity.is_finite()
            && self.mask.is_finite()
    }
}

/// Gradient of a scalar objective with respect to one Gaussian's attributes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianGrad {
    pub mean: Vec3,
    pub frame: Matrix3<f64>,
    pub scales: Vec3,
    pub opacity: f64,
    pub mask: f64,
}

impl GaussianGrad {
    pub fn add_assign(&mut self, other: &GaussianGrad) {
        self.mean += other.mean;
        self.frame += other.frame;
        self.scales += other.scales;
        self.opacity += other.opacity;
        self.mask += other.mask;
    }
}

/// Gradient with respect to a curve's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveGrad {
    pub control_points: Vec<Vec3>,
    pub thickness: f64,
    pub opacity: f64,
    pub mask_logits: Vec<f64>,
}

impl CurveGrad {
    pub fn zeros_like(curve: &ParametricCurve) -> Self {
        Self {
            control_points: vec![Vec3::zeros(); curve.geometry.control_points().len()],
            thickness: 0.0,
            opacity: 0.0,
            mask_logits: vec![0.0; curve.mask_logits.len()],
        }
    }

    pub fn add_assign(&mut self, other: &CurveGrad) {
        for (a, b) in self.control_points.iter_mut().zip(&other.control_points) {
            *a += b;
        }
        self.thickness += other.thickness;
        self.opacity += other.opacity;
        for (a, b) in self.mask_logits.iter_mut().zip(&other.mask_logits) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.control_points.iter().all(|p| p.iter().all(|v| v.is_finite()))
            && self.thickness.is_finite()
            && self.opacity.is_finite()
            && self.mask_logits.iter().all(|v| v.is_finite())
    }
}

/// Index of the segment whose length sets the principal scale of sample `i`.
#[inline]
fn spacing_segment(i: usize, n: usize) -> usize {
    if i + 1 < n {
        i
    } else {
        n.saturating_sub(2)
    }
}

/// Emit the `N` Gaussians of one curve.
pub fn couple(
    curve: &ParametricCurve,
    config: &CouplingConfig,
) -> Result<Vec<GaussianPrimitive>, CouplingError> {
    let n = config.samples;
    let ts = sample_parameters(n);
    let geometry = &curve.geometry;
    let means: Vec<Vec3> = ts.iter().map(|&t| geometry.evaluate(t)).collect();
    let mut out = Vec::with_capacity(n);
    for (i, &t) in ts.iter().enumerate() {
        let tangent = geometry
            .tangent(t, config.tangent_epsilon)
            .map_err(|source| CouplingError::DegenerateCurve {
                id: curve.id,
                source,
            })?;
        let principal = if n >= 2 {
            let j = spacing_segment(i, n);
            (means[j + 1] - means[j]).norm()
        } else {
            geometry.arclength(16)
        };
        out.push(GaussianPrimitive {
            mean: means[i],
            frame: build_frame(&tangent),
            scales: Vec3::new(config.overlap * principal, curve.thickness, curve.thickness),
            opacity: curve.opacity,
            mask: sigmoid(curve.mask_logits.get(i).copied().unwrap_or(0.0)),
            parent: curve.id,
            sample_index: i,
        });
    }
    Ok(out)
}

/// Chain rule from per-Gaussian attribute gradients to curve parameters.
///
/// The Gram-Schmidt reference direction is held constant (no gradient through
/// the fallback branch selection).
pub fn backprop_coupling(
    grads: &[GaussianGrad],
    curve: &ParametricCurve,
    config: &CouplingConfig,
) -> Result<CurveGrad, CouplingError> {
    let n = config.samples;
    if grads.len() != n {
        return Err(CouplingError::ShapeMismatch {
            expected: n,
            got: grads.len(),
        });
    }
    let geometry = &curve.geometry;
    let ts = sample_parameters(n);
    let means: Vec<Vec3> = ts.iter().map(|&t| geometry.evaluate(t)).collect();
    let mut grad_mean: Vec<Vec3> = grads.iter().map(|g| g.mean).collect();
    let mut out = CurveGrad::zeros_like(curve);

    for (i, g) in grads.iter().enumerate() {
        out.thickness += g.scales[1] + g.scales[2];
        out.opacity += g.opacity;
        if let Some(logit) = curve.mask_logits.get(i) {
            let m = sigmoid(*logit);
            out.mask_logits[i] = g.mask * m * (1.0 - m);
        }

        if n >= 2 && g.scales[0] != 0.0 {
            let j = spacing_segment(i, n);
            let dp = means[j + 1] - means[j];
            let len = dp.norm();
            if len > 0.0 {
                let gdp = dp * (config.overlap * g.scales[0] / len);
                grad_mean[j + 1] += gdp;
                grad_mean[j] -= gdp;
            }
        }

        let frame_grad = &g.frame;
        if frame_grad.iter().any(|v| *v != 0.0) {
            let t = ts[i];
            let d = geometry.derivative(t);
            let dnorm = d.norm();
            if !(dnorm >= config.tangent_epsilon) || dnorm == 0.0 {
                return Err(CouplingError::DegenerateCurve {
                    id: curve.id,
                    source: CurveError::DegenerateTangent { t, norm: dnorm },
                });
            }
            let v0 = d / dnorm;
            let r = frame_reference(&v0);
            let u = r - v0 * r.dot(&v0);
            let unorm = u.norm();
            let v1 = u / unorm;
            let g0: Vec3 = frame_grad.column(0).into_owned();
            let g1: Vec3 = frame_grad.column(1).into_owned();
            let g2: Vec3 = frame_grad.column(2).into_owned();
            // v2 = v0 x v1
            let mut gv0 = g0 + v1.cross(&g2);
            let gv1 = g1 + g2.cross(&v0);
            // v1 = u / |u|,  u = r - (r.v0) v0
            let gu = (gv1 - v1 * v1.dot(&gv1)) / unorm;
            gv0 -= r * gu.dot(&v0) + gu * r.dot(&v0);
            // v0 = d / |d|
            let gd = (gv0 - v0 * v0.dot(&gv0)) / dnorm;
            for (cp, w) in out
                .control_points
                .iter_mut()
                .zip(geometry.derivative_jacobian(t))
            {
                *cp += gd * w;
            }
        }
    }

    for (gm, &t) in grad_mean.iter().zip(&ts) {
        if *gm == Vec3::zeros() {
            continue;
        }
        for (cp, w) in out
            .control_points
            .iter_mut()
            .zip(geometry.evaluate_jacobian(t))
        {
            *cp += gm * w;
        }
    }
    Ok(out)
}

/// All Gaussians of a curve set in one flat list, with the index range of
/// each curve. Degenerate curves emit nothing and are listed separately so
/// the topology controller can drop them.
#[derive(Debug, Clone, Default)]
pub struct CoupledScene {
    pub gaussians: Vec<GaussianPrimitive>,
    pub ranges: Vec<std::ops::Range<usize>>,
    pub degenerate: Vec<CurveId>,
}

impl CoupledScene {
    pub fn build(curves: &[ParametricCurve], config: &CouplingConfig) -> Self {
        use rayon::prelude::*;
        let per_curve: Vec<Result<Vec<GaussianPrimitive>, CouplingError>> =
            curves.par_iter().map(|c| couple(c, config)).collect();
        let mut scene = CoupledScene::default();
        for (curve, result) in curves.iter().zip(per_curve) {
            let start = scene.gaussians.len();
            match result {
                Ok(gs) => scene.gaussians.extend(gs),
                Err(_) => scene.degenerate.push(curve.id),
            }
            scene.ranges.push(start..scene.gaussians.len());
        }
        scene
    }

    pub fn of_curve(&self, k: usize) -> &[GaussianPrimitive] {
        &self.gaussians[self.ranges[k].clone()]
    }

    /// Back-propagate flat per-Gaussian gradients to every curve.
    pub fn backprop(
        &self,
        grads: &[GaussianGrad],
        curves: &[ParametricCurve],
        config: &CouplingConfig,
    ) -> Result<Vec<CurveGrad>, CouplingError> {
        use rayon::prelude::*;
        if grads.len() != self.gaussians.len() {
            return Err(CouplingError::ShapeMismatch {
                expected: self.gaussians.len(),
                got: grads.len(),
            });
        }
        curves
            .par_iter()
            .zip(&self.ranges)
            .map(|(curve, range)| {
                if range.is_empty() {
                    Ok(CurveGrad::zeros_like(curve))
                } else {
                    backprop_coupling(&grads[range.clone()], curve, config)
                }
            })
            .collect()
    }
}

/// Debug dump: one line per Gaussian with mean, principal axis, scales and
/// gated opacity, whitespace separated.
pub fn write_gaussian_dump<W: Write>(
    gaussians: &[GaussianPrimitive],
    mut out: W,
) -> std::io::Result<()> {
    for g in gaussians {
        let v0 = g.principal_axis();
        writeln!(
            out,
            "{} {} {} {} {} {} {} {} {} {}",
            g.mean.x,
            g.mean.y,
            g.mean.z,
            v0.x,
            v0.y,
            v0.z,
            g.scales.x,
            g.scales.y,
            g.scales.z,
            g.effective_opacity()
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curve::{CubicBezier, Geometry, LineSegment};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arch_curve() -> ParametricCurve {
        ParametricCurve::new(
            CurveId(1),
            Geometry::Cubic(CubicBezier::new(
                Vec3::zeros(),
                Vec3::y(),
                Vec3::new(1.0, 1.0, 0.0),
                Vec3::x(),
            )),
            0.7,
            0.05,
            12,
        )
    }

    fn assert_valid_frame(f: &Matrix3<f64>, tol: f64) {
        assert!((f.transpose() * f - Matrix3::identity()).abs().max() < tol);
        assert!((f.determinant() - 1.0).abs() < tol);
    }

    #[test]
    fn sample_parameter_examples() {
        let t = sample_parameters(12);
        assert_eq!(t.len(), 12);
        assert_relative_eq!(t[0], 0.5 / 12.0);
        assert_relative_eq!(t[11], 11.5 / 12.0);
        assert!(t.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_parameters(2), vec![0.25, 0.75]);
        assert_eq!(sample_parameters(1), vec![0.5]);
    }

    #[test]
    fn frame_along_x() {
        let f = build_frame(&Vec3::x());
        // v1 = z - (z.x) x = z; v2 = x cross z = -y.
        assert_eq!(f.column(1).into_owned(), Vec3::z());
        assert_eq!(f.column(2).into_owned(), -Vec3::y());
        assert_valid_frame(&f, 1e-15);
    }

    #[test]
    fn frame_fallback_along_z() {
        let f = build_frame(&Vec3::z());
        assert_eq!(f.column(1).into_owned(), Vec3::y());
        assert_valid_frame(&f, 1e-15);
        let f = build_frame(&-Vec3::z());
        assert_valid_frame(&f, 1e-15);
    }

    #[test]
    fn frames_of_random_tangents_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let v = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if v.norm() < 1e-3 {
                continue;
            }
            assert_valid_frame(&build_frame(&v.normalize()), 1e-10);
        }
    }

    #[test]
    fn line_coupling_is_uniform() {
        let curve = ParametricCurve::new(
            CurveId(0),
            Geometry::Line(LineSegment::new(Vec3::zeros(), Vec3::new(12.0, 0.0, 0.0))),
            0.4,
            0.1,
            12,
        );
        let gs = couple(&curve, &CouplingConfig::default()).unwrap();
        assert_eq!(gs.len(), 12);
        for (i, g) in gs.iter().enumerate() {
            assert_relative_eq!(g.scales, Vec3::new(1.0, 0.1, 0.1), epsilon = 1e-12);
            assert_relative_eq!(g.mean.x, i as f64 + 0.5, epsilon = 1e-12);
            assert_eq!(g.opacity, 0.4);
            assert_eq!(g.mask, 0.5);
            assert_eq!(g.sample_index, i);
        }
    }

    #[test]
    fn zero_opacity_is_inherited() {
        let mut c = arch_curve();
        c.opacity = 0.0;
        assert!(couple(&c, &CouplingConfig::default())
            .unwrap()
            .iter()
            .all(|g| g.opacity == 0.0));
    }

    #[test]
    fn arch_frames_rotate_smoothly() {
        let gs = couple(&arch_curve(), &CouplingConfig::default()).unwrap();
        for w in gs.windows(2) {
            let c = w[0].principal_axis().dot(&w[1].principal_axis());
            assert!(c.clamp(-1.0, 1.0).acos() < 20f64.to_radians());
        }
        for g in &gs {
            assert_valid_frame(&g.frame, 1e-6);
            assert!(g.scales[0] >= g.scales[1]);
        }
    }

    #[test]
    fn degenerate_curve_is_an_error() {
        let p = Vec3::new(0.3, 0.3, 0.3);
        let c = ParametricCurve::new(CurveId(9), Geometry::Line(LineSegment::new(p, p)), 1.0, 0.1, 12);
        assert!(matches!(
            couple(&c, &CouplingConfig::default()),
            Err(CouplingError::DegenerateCurve { id: CurveId(9), .. })
        ));
    }

    #[test]
    fn coupling_is_deterministic() {
        let a = couple(&arch_curve(), &CouplingConfig::default()).unwrap();
        let b = couple(&arch_curve(), &CouplingConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let c = arch_curve();
        let grads = vec![GaussianGrad::default(); 12];
        let g = backprop_coupling(&grads, &c, &CouplingConfig::default()).unwrap();
        assert!(g.control_points.iter().all(|p| *p == Vec3::zeros()));
        assert_eq!(g.thickness, 0.0);
        assert_eq!(g.opacity, 0.0);
    }

    #[test]
    fn mean_gradient_on_a_line_is_linear() {
        let c = ParametricCurve::new(
            CurveId(0),
            Geometry::Line(LineSegment::new(Vec3::zeros(), Vec3::new(3.0, 1.0, 0.0))),
            0.4,
            0.1,
            12,
        );
        let mut grads = vec![GaussianGrad::default(); 12];
        let up = Vec3::new(0.2, -1.0, 0.5);
        grads[0].mean = up;
        let g = backprop_coupling(&grads, &c, &CouplingConfig::default()).unwrap();
        let t0 = 0.5 / 12.0;
        assert_relative_eq!(g.control_points[0], up * (1.0 - t0), epsilon = 1e-15);
        assert_relative_eq!(g.control_points[1], up * t0, epsilon = 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let grads = vec![GaussianGrad::default(); 5];
        assert_eq!(
            backprop_coupling(&grads, &arch_curve(), &CouplingConfig::default()),
            Err(CouplingError::ShapeMismatch {
                expected: 12,
                got: 5
            })
        );
    }

    fn random_vec(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
        Vec3::new(
            rng.random_range(-s..s),
            rng.random_range(-s..s),
            rng.random_range(-s..s),
        )
    }

    /// Linear functional of all coupled attributes.
    fn probe(gs: &[GaussianPrimitive], up: &[GaussianGrad]) -> f64 {
        gs.iter()
            .zip(up)
            .map(|(g, u)| {
                g.mean.dot(&u.mean)
                    + g.frame.component_mul(&u.frame).sum()
                    + g.scales.dot(&u.scales)
                    + g.opacity * u.opacity
                    + g.mask * u.mask
            })
            .sum()
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = CouplingConfig::default();
        for trial in 0..25 {
            let geometry = if trial % 4 == 3 {
                Geometry::Line(LineSegment::new(random_vec(&mut rng, 1.0), random_vec(&mut rng, 1.0)))
            } else {
                Geometry::Cubic(CubicBezier::new(
                    random_vec(&mut rng, 1.0),
                    random_vec(&mut rng, 1.0),
                    random_vec(&mut rng, 1.0),
                    random_vec(&mut rng, 1.0),
                ))
            };
            let mut curve = ParametricCurve::new(CurveId(trial), geometry, 0.6, 0.03, 12);
            for l in curve.mask_logits.iter_mut() {
                *l = rng.random_range(-3.0..3.0);
            }
            let up: Vec<GaussianGrad> = (0..12)
                .map(|_| GaussianGrad {
                    mean: random_vec(&mut rng, 1.0),
                    frame: Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0)),
                    scales: random_vec(&mut rng, 1.0),
                    opacity: rng.random_range(-1.0..1.0),
                    mask: rng.random_range(-1.0..1.0),
                })
                .collect();
            let analytic = backprop_coupling(&up, &curve, &cfg).unwrap();
            let f = |c: &ParametricCurve| probe(&couple(c, &cfg).unwrap(), &up);
            let h = 1e-6;
            let check = |a: f64, n: f64| {
                if a.abs().max(n.abs()) > 1e-8 {
                    let rel = (a - n).abs() / a.abs().max(n.abs());
                    assert!(rel < 1e-4, "trial {trial}: analytic {a} numeric {n}");
                }
            };
            for k in 0..curve.geometry.control_points().len() {
                for a in 0..3 {
                    let mut p = curve.clone();
                    p.geometry.control_points_mut()[k][a] += h;
                    let mut m = curve.clone();
                    m.geometry.control_points_mut()[k][a] -= h;
                    check(analytic.control_points[k][a], (f(&p) - f(&m)) / (2.0 * h));
                }
            }
            let mut p = curve.clone();
            p.thickness += h;
            let mut m = curve.clone();
            m.thickness -= h;
            check(analytic.thickness, (f(&p) - f(&m)) / (2.0 * h));
            let mut p = curve.clone();
            p.opacity += h;
            let mut m = curve.clone();
            m.opacity -= h;
            check(analytic.opacity, (f(&p) - f(&m)) / (2.0 * h));
            for i in 0..12 {
                let mut p = curve.clone();
                p.mask_logits[i] += h;
                let mut m = curve.clone();
                m.mask_logits[i] -= h;
                check(analytic.mask_logits[i], (f(&p) - f(&m)) / (2.0 * h));
            }
        }
    }

    #[test]
    fn gaussian_dump_has_one_line_per_gaussian() {
        let gs = couple(&arch_curve(), &CouplingConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_gaussian_dump(&gs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 12);
        assert!(text.lines().all(|l| l.split_whitespace().count() == 10));
    }
}
