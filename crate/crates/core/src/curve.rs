//! Cubic and linear Bézier curves: evaluation, derivatives, subdivision and
//! least-squares refitting.
//!
//! Every curve in the system is one of two shapes. A [`CubicBezier`] has four
//! control points and is evaluated with the cubic Bernstein basis, a
//! [`LineSegment`] has two and is evaluated by linear interpolation. Both are
//! wrapped in [`Geometry`] so downstream code (coupling, the adaptive passes)
//! can stay agnostic of the degree.

use arrayvec::ArrayVec;
use nalgebra::{DMatrix, DVector, Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Per-control-point weights; four entries for a cubic, two for a line.
pub type Weights = ArrayVec<f64, 4>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CurveError {
    #[error("tangent is degenerate at t = {t} (|c'(t)| = {norm:e})")]
    DegenerateTangent { t: f64, norm: f64 },
    #[error("split parameter {0} is outside the open interval (0, 1)")]
    InvalidSplitParameter(f64),
    #[error("need at least {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("least-squares normal equations are singular")]
    SingularSystem,
    #[error("curve {id}: {reason}")]
    Invalid { id: u64, reason: String },
}

/// Stable curve identifier. Ids are handed out monotonically by the curve set
/// and never reused within a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CurveId(pub u64);

impl std::fmt::Display for CurveId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[inline]
fn lerp(a: &Vec3, b: &Vec3, s: f64) -> Vec3 {
    a * (1.0 - s) + b * s
}

/// Cubic Bernstein basis `B_k^3(t)`.
#[inline]
pub fn cubic_basis(t: f64) -> [f64; 4] {
    let u = 1.0 - t;
    [u * u * u, 3.0 * t * u * u, 3.0 * t * t * u, t * t * t]
}

/// Weights of `dc/dt` with respect to each cubic control point.
#[inline]
pub fn cubic_derivative_basis(t: f64) -> [f64; 4] {
    let u = 1.0 - t;
    [
        -3.0 * u * u,
        3.0 * u * u - 6.0 * t * u,
        6.0 * t * u - 3.0 * t * t,
        3.0 * t * t,
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubicBezier {
    pub points: [Vec3; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineSegment {
    pub points: [Vec3; 2],
}

impl CubicBezier {
    pub fn new(p0: Vec3, p1: Vec3, p2: Vec3, p3: Vec3) -> Self {
        Self {
            points: [p0, p1, p2, p3],
        }
    }

    /// Cubic whose inner controls sit at the chord thirds, i.e. a straight
    /// cubic with uniform speed.
    pub fn straight(a: Vec3, b: Vec3) -> Self {
        Self::new(a, lerp(&a, &b, 1.0 / 3.0), lerp(&a, &b, 2.0 / 3.0), b)
    }

    pub fn evaluate(&self, t: f64) -> Vec3 {
        let t = t.clamp(0.0, 1.0);
        let w = cubic_basis(t);
        let p = &self.points;
        p[0] * w[0] + p[1] * w[1] + p[2] * w[2] + p[3] * w[3]
    }

    pub fn derivative(&self, t: f64) -> Vec3 {
        let w = cubic_derivative_basis(t.clamp(0.0, 1.0));
        let p = &self.points;
        p[0] * w[0] + p[1] * w[1] + p[2] * w[2] + p[3] * w[3]
    }

    /// Subdivide at `s` with de Casteljau's construction.
    ///
    /// The first piece reproduces `c(s u)` and the second `c(s + u (1 - s))`
    /// for `u` in `[0, 1]`.
    pub fn split(&self, s: f64) -> Result<(CubicBezier, CubicBezier), CurveError> {
        if !(s > 0.0 && s < 1.0) {
            return Err(CurveError::InvalidSplitParameter(s));
        }
        Ok(self.split_unchecked(s))
    }

    fn split_unchecked(&self, s: f64) -> (CubicBezier, CubicBezier) {
        let [p0, p1, p2, p3] = &self.points;
        let q0 = lerp(p0, p1, s);
        let q1 = lerp(p1, p2, s);
        let q2 = lerp(p2, p3, s);
        let r0 = lerp(&q0, &q1, s);
        let r1 = lerp(&q1, &q2, s);
        let m = lerp(&r0, &r1, s);
        (
            CubicBezier::new(*p0, q0, r0, m),
            CubicBezier::new(m, r1, q2, *p3),
        )
    }

    /// Restriction of the curve to the parameter interval `[a, b]`.
    pub fn restrict(&self, a: f64, b: f64) -> CubicBezier {
        let a = a.clamp(0.0, 1.0);
        let b = b.clamp(a, 1.0);
        let head = if b < 1.0 {
            self.split_unchecked(b).0
        } else {
            self.clone()
        };
        if a <= 0.0 || b <= 0.0 {
            return head;
        }
        head.split_unchecked(a / b).1
    }
}

impl LineSegment {
    pub fn new(p0: Vec3, p1: Vec3) -> Self {
        Self { points: [p0, p1] }
    }

    pub fn evaluate(&self, t: f64) -> Vec3 {
        lerp(&self.points[0], &self.points[1], t.clamp(0.0, 1.0))
    }

    pub fn direction(&self) -> Vec3 {
        self.points[1] - self.points[0]
    }

    pub fn length(&self) -> f64 {
        self.direction().norm()
    }

    pub fn restrict(&self, a: f64, b: f64) -> LineSegment {
        LineSegment::new(self.evaluate(a), self.evaluate(b))
    }
}

/// The geometric part of a curve, either degree.
#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    Cubic(CubicBezier),
    Line(LineSegment),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurveKind {
    Cubic,
    Line,
}

impl Geometry {
    pub fn kind(&self) -> CurveKind {
        match self {
            Geometry::Cubic(_) => CurveKind::Cubic,
            Geometry::Line(_) => CurveKind::Line,
        }
    }

    pub fn control_points(&self) -> &[Vec3] {
        match self {
            Geometry::Cubic(c) => &c.points,
            Geometry::Line(l) => &l.points,
        }
    }

    pub fn control_points_mut(&mut self) -> &mut [Vec3] {
        match self {
            Geometry::Cubic(c) => &mut c.points,
            Geometry::Line(l) => &mut l.points,
        }
    }

    pub fn start(&self) -> Vec3 {
        self.control_points()[0]
    }

    pub fn end(&self) -> Vec3 {
        *self.control_points().last().expect("curves have control points")
    }

    /// Point on the curve; `t` is clamped into `[0, 1]`.
    pub fn evaluate(&self, t: f64) -> Vec3 {
        match self {
            Geometry::Cubic(c) => c.evaluate(t),
            Geometry::Line(l) => l.evaluate(t),
        }
    }

    pub fn derivative(&self, t: f64) -> Vec3 {
        match self {
            Geometry::Cubic(c) => c.derivative(t),
            Geometry::Line(l) => l.direction(),
        }
    }

    /// Unit tangent at `t`, or `DegenerateTangent` if `|c'(t)| < eps`.
    pub fn tangent(&self, t: f64, eps: f64) -> Result<Vec3, CurveError> {
        let d = self.derivative(t);
        let norm = d.norm();
        if !(norm >= eps) || norm == 0.0 {
            return Err(CurveError::DegenerateTangent { t, norm });
        }
        Ok(d / norm)
    }

    /// `dc(t)/dP_k` as a scalar per control point (the full Jacobian is the
    /// weight times the 3x3 identity). The weights sum to one.
    pub fn evaluate_jacobian(&self, t: f64) -> Weights {
        let t = t.clamp(0.0, 1.0);
        match self {
            Geometry::Cubic(_) => cubic_basis(t).into_iter().collect(),
            Geometry::Line(_) => [1.0 - t, t].into_iter().collect(),
        }
    }

    /// `dc'(t)/dP_k` per control point.
    pub fn derivative_jacobian(&self, t: f64) -> Weights {
        match self {
            Geometry::Cubic(_) => cubic_derivative_basis(t.clamp(0.0, 1.0)).into_iter().collect(),
            Geometry::Line(_) => [-1.0, 1.0].into_iter().collect(),
        }
    }

    /// Sub-curve over `[a, b]` with the same degree.
    pub fn restrict(&self, a: f64, b: f64) -> Geometry {
        match self {
            Geometry::Cubic(c) => Geometry::Cubic(c.restrict(a, b)),
            Geometry::Line(l) => Geometry::Line(l.restrict(a, b)),
        }
    }

    /// Polyline length with `segments` uniform parameter steps.
    pub fn arclength(&self, segments: usize) -> f64 {
        match self {
            Geometry::Line(l) => l.length(),
            Geometry::Cubic(c) => {
                let segments = segments.max(1);
                let mut prev = c.evaluate(0.0);
                let mut total = 0.0;
                for k in 1..=segments {
                    let p = c.evaluate(k as f64 / segments as f64);
                    total += (p - prev).norm();
                    prev = p;
                }
                total
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.control_points()
            .iter()
            .all(|p| p.iter().all(|v| v.is_finite()))
    }
}

/// Split a cubic at `s` (free-function form of [`CubicBezier::split`]).
pub fn de_casteljau_split(
    curve: &CubicBezier,
    s: f64,
) -> Result<(CubicBezier, CubicBezier), CurveError> {
    curve.split(s)
}

/// A curve being optimized: geometry plus visibility, width and the
/// per-sample importance mask logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ParametricCurve {
    pub id: CurveId,
    pub geometry: Geometry,
    pub opacity: f64,
    pub thickness: f64,
    pub mask_logits: Vec<f64>,
}

impl ParametricCurve {
    pub fn new(id: CurveId, geometry: Geometry, opacity: f64, thickness: f64, samples: usize) -> Self {
        Self {
            id,
            geometry,
            opacity,
            thickness,
            mask_logits: vec![0.0; samples],
        }
    }

    pub fn with_mask_logits(mut self, logit: f64) -> Self {
        self.mask_logits.iter_mut().for_each(|m| *m = logit);
        self
    }

    pub fn masks(&self) -> impl Iterator<Item = f64> + '_ {
        self.mask_logits.iter().map(|&l| sigmoid(l))
    }

    /// Checks the curve invariants for a coupling with `samples` Gaussians.
    pub fn validate(&self, samples: usize) -> Result<(), CurveError> {
        let invalid = |reason: String| CurveError::Invalid {
            id: self.id.0,
            reason,
        };
        if !self.geometry.is_finite() {
            return Err(invalid("non-finite control point".into()));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(invalid(format!("opacity {} outside [0, 1]", self.opacity)));
        }
        if !(self.thickness > 0.0) || !self.thickness.is_finite() {
            return Err(invalid(format!("thickness {} is not positive", self.thickness)));
        }
        if self.mask_logits.len() != samples {
            return Err(invalid(format!(
                "{} mask logits, expected {samples}",
                self.mask_logits.len()
            )));
        }
        if self.mask_logits.iter().any(|l| l.is_nan()) {
            return Err(invalid("NaN mask logit".into()));
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Normalized cumulative chord length of an ordered point list. Returns
/// `None` when the points do not move.
pub fn chord_length_parameters(points: &[Vec3]) -> Option<Vec<f64>> {
    let mut params = Vec::with_capacity(points.len());
    let mut acc = 0.0;
    params.push(0.0);
    for w in points.windows(2) {
        acc += (w[1] - w[0]).norm();
        params.push(acc);
    }
    if !(acc > 0.0) {
        return None;
    }
    params.iter_mut().for_each(|u| *u /= acc);
    if let Some(last) = params.last_mut() {
        *last = 1.0;
    }
    Some(params)
}

/// Mean distance between each sample and the straight chord from the
/// curve's own endpoints, evaluated at the samples' curve parameters:
/// `(1/N) sum |(1 - t_i) P_start + t_i P_end - c(t_i)|`.
pub fn chord_deviation(geometry: &Geometry, params: &[f64]) -> f64 {
    if params.is_empty() {
        return 0.0;
    }
    let chord = LineSegment::new(geometry.start(), geometry.end());
    params
        .iter()
        .map(|&t| (chord.evaluate(t) - geometry.evaluate(t)).norm())
        .sum::<f64>()
        / params.len() as f64
}

/// Segment from the first to the last point with chord-length parameters;
/// returns the segment and the mean point-to-parameter distance.
pub fn fit_line(points: &[Vec3]) -> Result<(LineSegment, f64), CurveError> {
    if points.len() < 2 {
        return Err(CurveError::InsufficientPoints {
            needed: 2,
            got: points.len(),
        });
    }
    let seg = LineSegment::new(points[0], points[points.len() - 1]);
    let params = match chord_length_parameters(points) {
        Some(p) => p,
        None => return Ok((seg, 0.0)),
    };
    let err = points
        .iter()
        .zip(&params)
        .map(|(p, &u)| (seg.evaluate(u) - p).norm())
        .sum::<f64>()
        / points.len() as f64;
    Ok((seg, err))
}

const FIT_MAX_ITERS: usize = 200;

/// Least-squares cubic through ordered samples with both endpoints clamped to
/// the first and last sample.
///
/// Parameters start from chord length (and, failing an exact fit, from
/// uniform spacing); the inner controls and the interior parameters are then
/// refined jointly with Levenberg-Marquardt so samples of an exact cubic are
/// recovered exactly. Returns the cubic and the mean
/// distance `(1/N) sum |c(u_i) - p_i|` at the final parameters.
pub fn fit_cubic(points: &[Vec3]) -> Result<(CubicBezier, f64), CurveError> {
    let n = points.len();
    if n < 4 {
        return Err(CurveError::InsufficientPoints { needed: 4, got: n });
    }
    let chord = chord_length_parameters(points).ok_or(CurveError::SingularSystem)?;
    let uniform: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let mut best = refine_cubic(points, chord)?;
    // A second start escapes local minima on unevenly parameterized input.
    if best.2 > 0.0 {
        if let Ok(alt) = refine_cubic(points, uniform) {
            if alt.2 < best.2 {
                best = alt;
            }
        }
    }
    let (cubic, params, _) = best;
    let err = points
        .iter()
        .zip(&params)
        .map(|(p, &u)| (cubic.evaluate(u) - p).norm())
        .sum::<f64>()
        / n as f64;
    Ok((cubic, err))
}

/// Levenberg-Marquardt over the inner controls and interior parameters from
/// the given start; returns the cubic, parameters and squared-error cost.
fn refine_cubic(points: &[Vec3], mut params: Vec<f64>) -> Result<(CubicBezier, Vec<f64>, f64), CurveError> {
    let n = points.len();
    let (mut p1, mut p2) = solve_inner_controls(points, &params)?;
    let p0 = points[0];
    let p3 = points[n - 1];

    let scale = points
        .iter()
        .map(|p| (p - p0).norm())
        .fold(0.0_f64, f64::max)
        .max(f64::MIN_POSITIVE);

    let cost_of = |p1: &Vec3, p2: &Vec3, params: &[f64]| -> f64 {
        let c = CubicBezier::new(p0, *p1, *p2, p3);
        points
            .iter()
            .zip(params)
            .map(|(p, &u)| (c.evaluate(u) - p).norm_squared())
            .sum()
    };

    let interior = n - 2;
    let dim = 6 + interior;
    let mut cost = cost_of(&p1, &p2, &params);
    let mut lambda = 1e-3;
    let tiny = 1e-30 * scale * scale * n as f64;
    for _ in 0..FIT_MAX_ITERS {
        if cost <= tiny {
            break;
        }
        let curve = CubicBezier::new(p0, p1, p2, p3);
        let mut jac = DMatrix::<f64>::zeros(3 * n, dim);
        let mut res = DVector::<f64>::zeros(3 * n);
        for (i, (p, &u)) in points.iter().zip(&params).enumerate() {
            let r = curve.evaluate(u) - p;
            let w = cubic_basis(u);
            let d = curve.derivative(u);
            for a in 0..3 {
                let row = 3 * i + a;
                res[row] = r[a];
                jac[(row, a)] = w[1];
                jac[(row, 3 + a)] = w[2];
                if i > 0 && i + 1 < n {
                    jac[(row, 6 + i - 1)] = d[a];
                }
            }
        }
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &res;

        let mut improved = false;
        for _ in 0..12 {
            let mut a = jtj.clone();
            for k in 0..dim {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12 * scale * scale);
            }
            let Some(chol) = a.cholesky() else {
                lambda *= 10.0;
                continue;
            };
            let step = chol.solve(&(-&jtr));
            let np1 = p1 + Vec3::new(step[0], step[1], step[2]);
            let np2 = p2 + Vec3::new(step[3], step[4], step[5]);
            let mut nparams = params.clone();
            for k in 0..interior {
                nparams[k + 1] = (nparams[k + 1] + step[6 + k]).clamp(0.0, 1.0);
            }
            let ncost = cost_of(&np1, &np2, &nparams);
            if ncost < cost {
                let rel = (cost - ncost) / cost.max(f64::MIN_POSITIVE);
                p1 = np1;
                p2 = np2;
                params = nparams;
                cost = ncost;
                lambda = (lambda / 3.0).max(1e-12);
                improved = rel > 1e-15;
                break;
            }
            lambda *= 4.0;
        }
        if !improved {
            break;
        }
    }

    Ok((CubicBezier::new(p0, p1, p2, p3), params, cost))
}

/// Linear least squares for the two inner controls at fixed parameters.
fn solve_inner_controls(points: &[Vec3], params: &[f64]) -> Result<(Vec3, Vec3), CurveError> {
    let p0 = points[0];
    let p3 = points[points.len() - 1];
    let mut a = Matrix2::<f64>::zeros();
    let mut rhs1 = Vec3::zeros();
    let mut rhs2 = Vec3::zeros();
    for (p, &u) in points.iter().zip(params) {
        let w = cubic_basis(u);
        a[(0, 0)] += w[1] * w[1];
        a[(0, 1)] += w[1] * w[2];
        a[(1, 1)] += w[2] * w[2];
        let target = p - p0 * w[0] - p3 * w[3];
        rhs1 += target * w[1];
        rhs2 += target * w[2];
    }
    a[(1, 0)] = a[(0, 1)];
    let det = a.determinant();
    let norm = a[(0, 0)] * a[(1, 1)];
    if !(det.abs() > 1e-12 * norm) || norm == 0.0 {
        return Err(CurveError::SingularSystem);
    }
    let inv = a.try_inverse().ok_or(CurveError::SingularSystem)?;
    let mut p1 = Vec3::zeros();
    let mut p2 = Vec3::zeros();
    for k in 0..3 {
        let sol = inv * Vector2::new(rhs1[k], rhs2[k]);
        p1[k] = sol[0];
        p2[k] = sol[1];
    }
    Ok((p1, p2))
}
