//! Shared fixtures for the integration suites: random desk-scale scenes and a
//! central-difference gradient checker that is independent of the analytic
//! backward passes.

#![allow(dead_code)]

use curvesplat_core::coupling::{CoupledScene, CouplingConfig, CurveGrad};
use curvesplat_core::losses::{total_loss, LossInputs, LossWeights};
use curvesplat_core::render::render;
use curvesplat_core::{Camera, CubicBezier, CurveId, EdgeMap, Geometry, LineSegment, ParametricCurve, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct GradScene {
    pub curves: Vec<ParametricCurve>,
    pub camera: Camera,
    pub truth: EdgeMap,
    pub weights: LossWeights,
    pub coupling: CouplingConfig,
    pub scale: f64,
}

fn random_point(rng: &mut ChaCha8Rng, half: f64) -> Vec3 {
    Vec3::new(
        rng.random_range(-half..half),
        rng.random_range(-half..half),
        rng.random_range(-half..half),
    )
}

pub fn random_curve(rng: &mut ChaCha8Rng, id: u64, samples: usize) -> ParametricCurve {
    let geometry = if rng.random_bool(0.25) {
        Geometry::Line(LineSegment::new(random_point(rng, 0.6), random_point(rng, 0.6)))
    } else {
        Geometry::Cubic(CubicBezier::new(
            random_point(rng, 0.6),
            random_point(rng, 0.6),
            random_point(rng, 0.6),
            random_point(rng, 0.6),
        ))
    };
    let mut c = ParametricCurve::new(
        CurveId(id),
        geometry,
        rng.random_range(0.2..0.8),
        rng.random_range(0.03..0.08),
        samples,
    );
    for l in c.mask_logits.iter_mut() {
        *l = rng.random_range(-2.0..3.0);
    }
    c
}

/// Up to `max_curves` random curves seen by one 32x32 camera, with a binary
/// target made by thresholding a render of a different random curve set.
pub fn random_grad_scene(seed: u64, max_curves: usize) -> GradScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coupling = CouplingConfig::default();
    let eye = random_point(&mut rng, 1.0).normalize() * 3.0;
    let camera = Camera::look_at(0, eye, Vec3::zeros(), Vec3::z(), 32, 32, 30.0);
    let n = rng.random_range(1..=max_curves);
    let curves: Vec<ParametricCurve> = (0..n).map(|k| random_curve(&mut rng, k as u64, 12)).collect();
    let targets: Vec<ParametricCurve> = (0..4).map(|k| random_curve(&mut rng, 100 + k, 12)).collect();
    let target_scene = CoupledScene::build(&targets, &coupling);
    let rendered = render(&target_scene.gaussians, &camera).unwrap().image;
    let truth = EdgeMap::from_values(
        32,
        32,
        rendered.values.iter().map(|&v| if v > 0.3 { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();
    let weights = LossWeights {
        connection: 1.0,
        smoothness: 1.0,
        opacity_reg: 1.0,
        mask: 1.0,
        connection_radius: 0.3,
        ..LossWeights::default()
    };
    GradScene {
        curves,
        camera,
        truth,
        weights,
        coupling,
        scale: 1.0,
    }
}

impl GradScene {
    pub fn loss(&self, curves: &[ParametricCurve]) -> f64 {
        self.loss_and_grad(curves).0
    }

    pub fn loss_and_grad(&self, curves: &[ParametricCurve]) -> (f64, Vec<CurveGrad>) {
        let scene = CoupledScene::build(curves, &self.coupling);
        let out = render(&scene.gaussians, &self.camera).unwrap();
        let (report, grads) = total_loss(
            &LossInputs {
                render: &out,
                truth: &self.truth,
                curves,
                scene: &scene,
                coupling: &self.coupling,
                scene_scale: self.scale,
            },
            &self.weights,
        )
        .unwrap();
        (report.total, grads)
    }

    /// True when no endpoint pair sits within 1e-3 radius of the connection
    /// threshold, where the indicator is discontinuous.
    pub fn connection_is_smooth(&self) -> bool {
        let tau = self.weights.connection_radius * self.scale;
        let ends: Vec<(usize, Vec3)> = self
            .curves
            .iter()
            .enumerate()
            .flat_map(|(k, c)| [(k, c.geometry.start()), (k, c.geometry.end())])
            .collect();
        for i in 0..ends.len() {
            for j in i + 1..ends.len() {
                if ends[i].0 != ends[j].0 && ((ends[i].1 - ends[j].1).norm() - tau).abs() < 1e-3 * tau {
                    return false;
                }
            }
        }
        true
    }
}

/// Reads or writes every optimizable scalar of a curve set by flat index.
pub fn parameter_count(curves: &[ParametricCurve]) -> usize {
    curves
        .iter()
        .map(|c| 3 * c.geometry.control_points().len() + 2 + c.mask_logits.len())
        .sum()
}

pub fn parameter_mut(curves: &mut [ParametricCurve], mut index: usize) -> &mut f64 {
    for c in curves.iter_mut() {
        let ncp = 3 * c.geometry.control_points().len();
        let n = ncp + 2 + c.mask_logits.len();
        if index < n {
            return if index < ncp {
                &mut c.geometry.control_points_mut()[index / 3][index % 3]
            } else if index == ncp {
                &mut c.thickness
            } else if index == ncp + 1 {
                &mut c.opacity
            } else {
                &mut c.mask_logits[index - ncp - 2]
            };
        }
        index -= n;
    }
    panic!("parameter index out of range")
}

pub fn flat_gradient(grads: &[CurveGrad]) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads {
        for p in &g.control_points {
            out.extend(p.iter());
        }
        out.push(g.thickness);
        out.push(g.opacity);
        out.extend(&g.mask_logits);
    }
    out
}

#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel: f64,
    pub failures: Vec<(usize, f64, f64)>,
}

/// Central differences `(f(x + h) - f(x - h)) / 2h` on every parameter, compared
/// elementwise to `analytic` where either magnitude exceeds `floor`. An element
/// that misses `tol` at `h` is retried at `10h` and `h/10`: a step that straddles
/// a cutoff edge, or a difference lost to rounding of a large loss, is an
/// artifact of that step, while a wrong gradient misses at every step.
pub fn central_difference_check<F>(
    curves: &[ParametricCurve],
    analytic: &[f64],
    h: f64,
    floor: f64,
    tol: f64,
    f: F,
) -> GradCheck
where
    F: Fn(&[ParametricCurve]) -> f64,
{
    let numeric = |idx: usize, h: f64| {
        let mut plus = curves.to_vec();
        *parameter_mut(&mut plus, idx) += h;
        let mut minus = curves.to_vec();
        *parameter_mut(&mut minus, idx) -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    };
    let mut report = GradCheck::default();
    for idx in 0..parameter_count(curves) {
        let a = analytic[idx];
        let rel = |n: f64| (a - n).abs() / a.abs().max(n.abs());
        let first = numeric(idx, h);
        if a.abs().max(first.abs()) <= floor {
            continue;
        }
        report.checked += 1;
        let (mut best, mut best_numeric) = (rel(first), first);
        for step in [10.0 * h, 0.1 * h] {
            if best <= tol {
                break;
            }
            let n = numeric(idx, step);
            if rel(n) < best {
                (best, best_numeric) = (rel(n), n);
            }
        }
        report.max_rel = report.max_rel.max(best);
        if best > tol {
            report.failures.push((idx, a, best_numeric));
        }
    }
    report
}

pub fn random_cubic(rng: &mut ChaCha8Rng, half: f64) -> CubicBezier {
    CubicBezier::new(
        random_point(rng, half),
        random_point(rng, half),
        random_point(rng, half),
        random_point(rng, half),
    )
}

/// Camera on a sphere of radius 3 looking at the origin.
pub fn random_camera(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Camera {
    let eye = random_point(rng, 1.0).normalize() * 3.0;
    Camera::look_at(0, eye, Vec3::zeros(), Vec3::z(), width, height, 0.9 * width as f64)
}

/// Coupled Gaussians of a few random curves, some of them partly or fully
/// outside the view.
pub fn random_gaussians(rng: &mut ChaCha8Rng, max_curves: usize) -> Vec<curvesplat_core::GaussianPrimitive> {
    let n = rng.random_range(1..=max_curves);
    let mut curves: Vec<ParametricCurve> = (0..n).map(|k| random_curve(rng, k as u64, 12)).collect();
    for c in curves.iter_mut() {
        if rng.random_bool(0.2) {
            let shift = random_point(rng, 1.0).normalize() * 2.5;
            for p in c.geometry.control_points_mut() {
                *p += shift;
            }
        }
    }
    CoupledScene::build(&curves, &CouplingConfig::default()).gaussians
}

/// Random cloud with clustered and scattered points so that some nearest
/// distances fall on either side of typical thresholds.
pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
    let centre = random_point(rng, 0.5);
    (0..n)
        .map(|_| {
            if rng.random_bool(0.5) {
                centre + random_point(rng, 0.05)
            } else {
                random_point(rng, 1.0)
            }
        })
        .collect()
}

/// O(n^2) nearest distance, independent of any spatial index.
pub fn brute_nearest(q: &Vec3, targets: &[Vec3]) -> f64 {
    let mut best = f64::INFINITY;
    for p in targets {
        let (dx, dy, dz) = (q.x - p.x, q.y - p.y, q.z - p.z);
        let d = dx * dx + dy * dy + dz * dz;
        if d < best {
            best = d;
        }
    }
    best.sqrt()
}

/// Brute-force chamfer report: (accuracy, completeness, precision, recall, fscore).
pub fn brute_metrics(pred: &[Vec3], truth: &[Vec3], tau: f64) -> [f64; 5] {
    let p2t: Vec<f64> = pred.iter().map(|q| brute_nearest(q, truth)).collect();
    let t2p: Vec<f64> = truth.iter().map(|q| brute_nearest(q, pred)).collect();
    let mut acc = 0.0;
    for d in &p2t {
        acc += d;
    }
    let mut comp = 0.0;
    for d in &t2p {
        comp += d;
    }
    let precision = 100.0 * p2t.iter().filter(|&&d| d <= tau).count() as f64 / p2t.len() as f64;
    let recall = 100.0 * t2p.iter().filter(|&&d| d <= tau).count() as f64 / t2p.len() as f64;
    let f = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    [acc / p2t.len() as f64, comp / t2p.len() as f64, precision, recall, f]
}

/// Drops every Gaussian whose conservative 3-sigma box, taken from the
/// projected covariance diagonal, misses all pixel centres.
pub fn off_image_removed(gaussians: &[curvesplat_core::GaussianPrimitive], cam: &Camera) -> Vec<curvesplat_core::GaussianPrimitive> {
    gaussians
        .iter()
        .filter(|g| match curvesplat_core::render::project_gaussian(g, cam) {
            None => false,
            Some(fp) => {
                let rx = 3.0 * fp.cov2d[(0, 0)].sqrt();
                let ry = 3.0 * fp.cov2d[(1, 1)].sqrt();
                fp.mean2d.x + rx >= 0.5
                    && fp.mean2d.x - rx <= cam.width as f64 - 0.5
                    && fp.mean2d.y + ry >= 0.5
                    && fp.mean2d.y - ry <= cam.height as f64 - 0.5
            }
        })
        .cloned()
        .collect()
}
