//! Training objectives and their gradients.
//!
//! The total objective is
//! `edge + w_conn * conn + w_smooth * smooth + w_reg * reg + w_mask * mask`,
//! optionally plus a D-SSIM term. Image terms reach the curves through
//! [`render_backward`] and [`CoupledScene::backprop`]; the regularizers act on
//! curve parameters or coupled principal axes directly.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coupling::{CoupledScene, CouplingConfig, CouplingError, CurveGrad, GaussianGrad};
use crate::curve::{sigmoid, ParametricCurve, Vec3};
use crate::edge_map::EdgeMap;
use crate::render::{render_backward, RenderError, RenderOutput};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("image sizes differ: rendered {rendered:?}, truth {truth:?}")]
    DimensionMismatch {
        rendered: (usize, usize),
        truth: (usize, usize),
    },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Coupling(#[from] CouplingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub connection: f64,
    pub smoothness: f64,
    pub opacity_reg: f64,
    pub mask: f64,
    /// Edge-pixel threshold on the ground-truth map.
    pub edge_threshold: f64,
    /// Endpoint proximity radius as a fraction of the scene bbox diagonal.
    pub connection_radius: f64,
    /// Weight of the optional D-SSIM term; zero disables it.
    pub dssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            connection: 0.1,
            smoothness: 0.01,
            opacity_reg: 0.01,
            mask: 10.0,
            edge_threshold: 0.1,
            connection_radius: 0.02,
            dssim: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("connection", self.connection),
            ("smoothness", self.smoothness),
            ("opacity_reg", self.opacity_reg),
            ("mask", self.mask),
            ("dssim", self.dssim),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(format!("loss weight `{name}` must be a finite nonnegative number"));
            }
        }
        if !(self.edge_threshold > 0.0 && self.edge_threshold < 1.0) {
            return Err("`edge_threshold` must lie in (0, 1)".into());
        }
        if !(self.connection_radius > 0.0) {
            return Err("`connection_radius` must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub edge: f64,
    pub conn: f64,
    pub smo: f64,
    pub reg: f64,
    pub mask: f64,
    pub dssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeLoss {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Truth had no edge or no background pixels; plain MSE was used.
    pub degenerate: bool,
}

/// Class-balanced squared error between a rendered map and the truth.
///
/// Pixels of `truth` above `threshold` form the edge class; each class sum is
/// weighted by the other class's share of the image.
pub fn edge_loss(rendered: &EdgeMap, truth: &EdgeMap, threshold: f64) -> Result<EdgeLoss, LossError> {
    if (rendered.width, rendered.height) != (truth.width, truth.height) {
        return Err(LossError::DimensionMismatch {
            rendered: (rendered.width, rendered.height),
            truth: (truth.width, truth.height),
        });
    }
    let total = truth.len();
    let edges = truth.values.iter().filter(|&&v| v > threshold).count();
    let background = total - edges;
    let degenerate = edges == 0 || background == 0;
    let (w_edge, w_background) = if degenerate {
        log::debug!("edge map has a single pixel class; falling back to mean squared error");
        (1.0 / total as f64, 1.0 / total as f64)
    } else {
        (
            background as f64 / total as f64,
            edges as f64 / total as f64,
        )
    };
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(total);
    for (&r, &t) in rendered.values.iter().zip(&truth.values) {
        let w = if t > threshold { w_edge } else { w_background };
        let diff = r - t;
        value += w * diff * diff;
        grad.push(2.0 * w * diff);
    }
    Ok(EdgeLoss {
        value,
        grad,
        degenerate,
    })
}

/// Endpoint gradients of one curve: start point and end point.
pub type EndpointGrad = [Vec3; 2];

/// Squared distance between endpoints of distinct curves that lie within
/// `radius` of each other, summed over unordered endpoint pairs. The
/// indicator is treated as constant when differentiating.
pub fn connection_loss(curves: &[ParametricCurve], radius: f64) -> (f64, Vec<EndpointGrad>) {
    let mut grads = vec![[Vec3::zeros(); 2]; curves.len()];
    if curves.len() < 2 || !(radius > 0.0) {
        return (0.0, grads);
    }
    let endpoints: Vec<(usize, usize, Vec3)> = curves
        .iter()
        .enumerate()
        .flat_map(|(k, c)| [(k, 0, c.geometry.start()), (k, 1, c.geometry.end())])
        .collect();
    let cell_of = |p: &Vec3| -> [i64; 3] {
        [
            (p.x / radius).floor() as i64,
            (p.y / radius).floor() as i64,
            (p.z / radius).floor() as i64,
        ]
    };
    let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (idx, (_, _, p)) in endpoints.iter().enumerate() {
        cells.entry(cell_of(p)).or_default().push(idx);
    }
    let r2 = radius * radius;
    let mut value = 0.0;
    for (a, (ka, ea, pa)) in endpoints.iter().enumerate() {
        let c = cell_of(pa);
        let mut neighbors: Vec<usize> = Vec::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(list) = cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        neighbors.extend(list.iter().copied().filter(|&b| b > a));
                    }
                }
            }
        }
        neighbors.sort_unstable();
        for b in neighbors {
            let (kb, eb, pb) = &endpoints[b];
            if kb == ka {
                continue;
            }
            let d = pa - pb;
            let d2 = d.norm_squared();
            if d2 < r2 {
                value += d2;
                grads[*ka][*ea] += d * 2.0;
                grads[*kb][*eb] -= d * 2.0;
            }
        }
    }
    (value, grads)
}

/// Squared differences of adjacent principal axes along every curve, with
/// the second axis of each pair sign-aligned to the first. Returns the value
/// and a gradient per Gaussian principal axis (flat, matching the scene).
pub fn smoothness_loss(scene: &CoupledScene) -> (f64, Vec<Vec3>) {
    let mut grads = vec![Vec3::zeros(); scene.gaussians.len()];
    let mut value = 0.0;
    for range in &scene.ranges {
        for i in range.start..range.end.saturating_sub(1) {
            let a = scene.gaussians[i].principal_axis();
            let b = scene.gaussians[i + 1].principal_axis();
            let sign = if a.dot(&b) < 0.0 { -1.0 } else { 1.0 };
            let d = a - b * sign;
            value += d.norm_squared();
            grads[i] += d * 2.0;
            grads[i + 1] -= d * (2.0 * sign);
        }
    }
    (value, grads)
}

/// `sum_j log(1 + o_j^2 / 0.5)` and its derivative per curve.
pub fn opacity_regularizer(curves: &[ParametricCurve]) -> (f64, Vec<f64>) {
    let value = curves
        .iter()
        .map(|c| (1.0 + c.opacity * c.opacity / 0.5).ln())
        .sum();
    let grads = curves
        .iter()
        .map(|c| 2.0 * c.opacity / (0.5 + c.opacity * c.opacity))
        .collect();
    (value, grads)
}

/// Mean mask value over all Gaussians, with per-logit gradients.
pub fn mask_loss(curves: &[ParametricCurve]) -> (f64, Vec<Vec<f64>>) {
    let count: usize = curves.iter().map(|c| c.mask_logits.len()).sum();
    if count == 0 {
        return (0.0, curves.iter().map(|_| Vec::new()).collect());
    }
    let n = count as f64;
    let mut value = 0.0;
    let grads = curves
        .iter()
        .map(|c| {
            c.mask_logits
                .iter()
                .map(|&l| {
                    let m = sigmoid(l);
                    value += m;
                    m * (1.0 - m) / n
                })
                .collect()
        })
        .collect();
    (value / n, grads)
}

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;

fn ssim_kernel() -> Vec<f64> {
    let k: Vec<f64> = (0..=2 * SSIM_RADIUS)
        .map(|i| {
            let x = i as f64 - SSIM_RADIUS as f64;
            (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable zero-padded Gaussian filter. Self-adjoint because the kernel is
/// symmetric.
fn blur(values: &[f64], width: usize, height: usize, kernel: &[f64]) -> Vec<f64> {
    let r = SSIM_RADIUS as isize;
    let mut tmp = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if xx >= 0 && (xx as usize) < width {
                    acc += w * values[y * width + xx as usize];
                }
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; values.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let yy = y as isize + k as isize - r;
                if yy >= 0 && (yy as usize) < height {
                    acc += w * tmp[yy as usize * width + x];
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// `(1 - SSIM) / 2` with an 11-tap Gaussian window, and its gradient with
/// respect to the rendered image.
pub fn dssim_loss(rendered: &EdgeMap, truth: &EdgeMap) -> Result<(f64, Vec<f64>), LossError> {
    if (rendered.width, rendered.height) != (truth.width, truth.height) {
        return Err(LossError::DimensionMismatch {
            rendered: (rendered.width, rendered.height),
            truth: (truth.width, truth.height),
        });
    }
    let (w, h) = (rendered.width, rendered.height);
    let kernel = ssim_kernel();
    let x = &rendered.values;
    let y = &truth.values;
    let mu_x = blur(x, w, h, &kernel);
    let mu_y = blur(y, w, h, &kernel);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let e_xx = blur(&xx, w, h, &kernel);
    let e_yy = blur(&yy, w, h, &kernel);
    let e_xy = blur(&xy, w, h, &kernel);
    let n = x.len() as f64;
    let mut ssim_sum = 0.0;
    let mut da = vec![0.0; x.len()];
    let mut db = vec![0.0; x.len()];
    let mut dc = vec![0.0; x.len()];
    for p in 0..x.len() {
        let (mx, my) = (mu_x[p], mu_y[p]);
        let vx = e_xx[p] - mx * mx;
        let vy = e_yy[p] - my * my;
        let cxy = e_xy[p] - mx * my;
        let num1 = 2.0 * mx * my + SSIM_C1;
        let num2 = 2.0 * cxy + SSIM_C2;
        let den1 = mx * mx + my * my + SSIM_C1;
        let den2 = vx + vy + SSIM_C2;
        let s = num1 * num2 / (den1 * den2);
        ssim_sum += s;
        let ds_dmx = 2.0 * my * num2 / (den1 * den2) - s * 2.0 * mx / den1;
        let ds_dvx = -s / den2;
        let ds_dcxy = 2.0 * num1 / (den1 * den2);
        // d(loss)/d(SSIM_p) = -1 / (2n)
        let scale = -0.5 / n;
        db[p] = scale * ds_dvx;
        dc[p] = scale * ds_dcxy;
        da[p] = scale * ds_dmx - 2.0 * mx * db[p] - my * dc[p];
    }
    let ga = blur(&da, w, h, &kernel);
    let gb = blur(&db, w, h, &kernel);
    let gc = blur(&dc, w, h, &kernel);
    let grad = (0..x.len())
        .map(|q| ga[q] + 2.0 * x[q] * gb[q] + y[q] * gc[q])
        .collect();
    Ok(((1.0 - ssim_sum / n) / 2.0, grad))
}

/// Everything one view's objective needs.
pub struct LossInputs<'a> {
    pub render: &'a RenderOutput,
    pub truth: &'a EdgeMap,
    pub curves: &'a [ParametricCurve],
    pub scene: &'a CoupledScene,
    pub coupling: &'a CouplingConfig,
    /// Scene bbox diagonal; scales the connection radius.
    pub scene_scale: f64,
}

/// Weighted objective for one view and its gradient for every curve.
pub fn total_loss(
    inputs: &LossInputs<'_>,
    weights: &LossWeights,
) -> Result<(LossReport, Vec<CurveGrad>), LossError> {
    let LossInputs {
        render,
        truth,
        curves,
        scene,
        coupling,
        scene_scale,
    } = *inputs;

    let edge = edge_loss(&render.image, truth, weights.edge_threshold)?;
    let mut pixel_grad = edge.grad;
    let mut report = LossReport {
        edge: edge.value,
        ..LossReport::default()
    };
    if weights.dssim > 0.0 {
        let (value, grad) = dssim_loss(&render.image, truth)?;
        report.dssim = value;
        for (g, d) in pixel_grad.iter_mut().zip(grad) {
            *g += weights.dssim * d;
        }
    }

    let mut gaussian_grads: Vec<GaussianGrad> = render_backward(render, &scene.gaussians, &pixel_grad)?;

    let (smo, axis_grads) = smoothness_loss(scene);
    report.smo = smo;
    if weights.smoothness > 0.0 {
        for (g, a) in gaussian_grads.iter_mut().zip(&axis_grads) {
            for k in 0..3 {
                g.frame[(k, 0)] += weights.smoothness * a[k];
            }
        }
    }

    let mut grads = scene.backprop(&gaussian_grads, curves, coupling)?;

    let (conn, endpoint_grads) = connection_loss(curves, weights.connection_radius * scene_scale);
    report.conn = conn;
    let (reg, opacity_grads) = opacity_regularizer(curves);
    report.reg = reg;
    let (mask, mask_grads) = mask_loss(curves);
    report.mask = mask;

    for (k, g) in grads.iter_mut().enumerate() {
        if weights.connection > 0.0 {
            let last = g.control_points.len() - 1;
            g.control_points[0] += endpoint_grads[k][0] * weights.connection;
            g.control_points[last] += endpoint_grads[k][1] * weights.connection;
        }
        g.opacity += weights.opacity_reg * opacity_grads[k];
        if weights.mask > 0.0 {
            for (a, b) in g.mask_logits.iter_mut().zip(&mask_grads[k]) {
                *a += weights.mask * b;
            }
        }
    }

    report.total = report.edge
        + weights.connection * report.conn
        + weights.smoothness * report.smo
        + weights.opacity_reg * report.reg
        + weights.mask * report.mask
        + weights.dssim * report.dssim;
    Ok((report, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::CouplingConfig;
    use crate::curve::{CubicBezier, CurveId, Geometry, LineSegment};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(id: u64, a: Vec3, b: Vec3) -> ParametricCurve {
        ParametricCurve::new(CurveId(id), Geometry::Line(LineSegment::new(a, b)), 0.5, 0.01, 12)
    }

    #[test]
    fn edge_loss_examples() {
        let truth = EdgeMap::from_values(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let same = edge_loss(&truth, &truth, 0.1).unwrap();
        assert_eq!(same.value, 0.0);
        let zero = EdgeMap::zeros(2, 2);
        let l = edge_loss(&zero, &truth, 0.1).unwrap();
        assert_relative_eq!(l.value, 0.75);
        assert!(!l.degenerate);
        assert_relative_eq!(l.grad[0], 2.0 * 0.75 * -1.0);

        let blank = EdgeMap::zeros(2, 2);
        let rendered = EdgeMap::from_values(2, 2, vec![0.5, 0.0, 0.0, 0.0]).unwrap();
        let l = edge_loss(&rendered, &blank, 0.1).unwrap();
        assert!(l.degenerate);
        assert_relative_eq!(l.value, 0.25 / 4.0);

        assert!(matches!(
            edge_loss(&EdgeMap::zeros(3, 2), &blank, 0.1),
            Err(LossError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn edge_loss_balances_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth: Vec<f64> = (0..100).map(|_| if rng.random_bool(0.2) { 1.0 } else { 0.0 }).collect();
        let m = truth.iter().filter(|&&v| v > 0.1).count() as f64;
        let nn = 100.0 - m;
        let e = 0.09;
        let rendered: Vec<f64> = truth.iter().map(|&t| if t > 0.5 { 0.7 } else { 0.3 }).collect();
        let l = edge_loss(
            &EdgeMap::from_values(10, 10, rendered).unwrap(),
            &EdgeMap::from_values(10, 10, truth).unwrap(),
            0.1,
        )
        .unwrap();
        // Each class contributes (|N| |M| / |E|) e.
        assert_relative_eq!(l.value, 2.0 * nn * m / 100.0 * e, epsilon = 1e-12);
    }

    #[test]
    fn connection_loss_examples() {
        let tau = 0.2;
        let a = line(0, Vec3::zeros(), Vec3::x());
        let b = line(1, Vec3::x(), Vec3::new(1.0, 1.0, 0.0));
        let (v, g) = connection_loss(&[a.clone(), b], tau);
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|e| e[0] == Vec3::zeros() && e[1] == Vec3::zeros()));

        let c = line(2, Vec3::new(1.0 + tau / 2.0, 0.0, 0.0), Vec3::new(3.0, 0.0, 0.0));
        let (v, g) = connection_loss(&[a.clone(), c], tau);
        assert_relative_eq!(v, tau * tau / 4.0, epsilon = 1e-15);
        assert_relative_eq!(g[0][1], Vec3::new(-tau, 0.0, 0.0), epsilon = 1e-15);
        assert_relative_eq!(g[1][0], Vec3::new(tau, 0.0, 0.0), epsilon = 1e-15);

        let far = line(3, Vec3::new(1.0 + 2.0 * tau, 0.0, 0.0), Vec3::new(3.0, 0.0, 0.0));
        let (v, g) = connection_loss(&[a, far], tau);
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|e| e[0] == Vec3::zeros() && e[1] == Vec3::zeros()));
    }

    #[test]
    fn connection_loss_ignores_own_endpoints() {
        let short = line(0, Vec3::zeros(), Vec3::new(0.01, 0.0, 0.0));
        assert_eq!(connection_loss(&[short], 1.0).0, 0.0);
    }

    #[test]
    fn connection_grid_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let curves: Vec<ParametricCurve> = (0..60)
            .map(|k| {
                let mut p = || Vec3::new(rng.random(), rng.random(), rng.random());
                line(k, p(), p())
            })
            .collect();
        let tau = 0.15;
        let (v, _) = connection_loss(&curves, tau);
        let mut brute = 0.0;
        let ends: Vec<(usize, Vec3)> = curves
            .iter()
            .enumerate()
            .flat_map(|(k, c)| [(k, c.geometry.start()), (k, c.geometry.end())])
            .collect();
        for i in 0..ends.len() {
            for j in i + 1..ends.len() {
                if ends[i].0 != ends[j].0 {
                    let d = (ends[i].1 - ends[j].1).norm();
                    if d < tau {
                        brute += d * d;
                    }
                }
            }
        }
        assert_relative_eq!(v, brute, epsilon = 1e-12);
    }

    #[test]
    fn smoothness_examples() {
        let cfg = CouplingConfig::default();
        let straight = vec![line(0, Vec3::zeros(), Vec3::new(1.0, 2.0, 0.5))];
        let scene = CoupledScene::build(&straight, &cfg);
        assert!(smoothness_loss(&scene).0 < 1e-28);

        // Two Gaussians whose axes differ by theta.
        let theta: f64 = 0.4;
        let mut scene = CoupledScene::build(&straight, &CouplingConfig { samples: 2, ..cfg });
        scene.gaussians[0].frame = crate::coupling::build_frame(&Vec3::x());
        scene.gaussians[1].frame =
            crate::coupling::build_frame(&Vec3::new(theta.cos(), theta.sin(), 0.0));
        assert_relative_eq!(smoothness_loss(&scene).0, 2.0 * (1.0 - theta.cos()), epsilon = 1e-14);

        // Sign flip of a stored axis leaves the value unchanged.
        let before = smoothness_loss(&scene).0;
        scene.gaussians[1].frame = -scene.gaussians[1].frame;
        assert_relative_eq!(smoothness_loss(&scene).0, before, epsilon = 1e-14);
    }

    #[test]
    fn smoothness_drops_when_arch_is_split() {
        let cfg = CouplingConfig::default();
        let arch = CubicBezier::new(Vec3::zeros(), Vec3::y(), Vec3::new(1.0, 1.0, 0.0), Vec3::x());
        let whole = vec![ParametricCurve::new(CurveId(0), Geometry::Cubic(arch.clone()), 0.5, 0.01, 12)];
        let (a, b) = arch.split(0.5).unwrap();
        let halves = vec![
            ParametricCurve::new(CurveId(1), Geometry::Cubic(a), 0.5, 0.01, 12),
            ParametricCurve::new(CurveId(2), Geometry::Cubic(b), 0.5, 0.01, 12),
        ];
        let before = smoothness_loss(&CoupledScene::build(&whole, &cfg)).0;
        let after = smoothness_loss(&CoupledScene::build(&halves, &cfg)).0;
        assert!(before > 0.0);
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn opacity_regularizer_examples() {
        let mut c = line(0, Vec3::zeros(), Vec3::x());
        c.opacity = 0.0;
        assert_eq!(opacity_regularizer(&[c.clone()]).0, 0.0);
        c.opacity = 1.0;
        assert_relative_eq!(opacity_regularizer(&[c.clone()]).0, 3f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(opacity_regularizer(&[c.clone()]).1[0], 2.0 / 1.5, epsilon = 1e-15);
        c.opacity = 0.5;
        let three = vec![c.clone(), c.clone(), c];
        assert_relative_eq!(opacity_regularizer(&three).0, 3.0 * 1.5f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn mask_loss_examples() {
        let c = line(0, Vec3::zeros(), Vec3::x());
        assert_relative_eq!(mask_loss(&[c.clone()]).0, 0.5);
        let low = c.clone().with_mask_logits(-800.0);
        assert!(mask_loss(&[low]).0 < 1e-300);
        let mut mixed = ParametricCurve::new(CurveId(1), c.geometry.clone(), 0.5, 0.01, 3);
        mixed.mask_logits = vec![-2.0, 0.0, 2.0];
        assert_relative_eq!(mask_loss(&[mixed]).0, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn dssim_is_zero_on_identical_maps_and_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let truth = EdgeMap::from_values(12, 10, (0..120).map(|_| rng.random()).collect()).unwrap();
        let (v, _) = dssim_loss(&truth, &truth).unwrap();
        assert!(v.abs() < 1e-12);
        let rendered = EdgeMap::from_values(12, 10, (0..120).map(|_| rng.random()).collect()).unwrap();
        let (_, grad) = dssim_loss(&rendered, &truth).unwrap();
        let h = 1e-6;
        for q in [0, 7, 33, 64, 119] {
            let mut p = rendered.clone();
            p.values[q] += h;
            let mut m = rendered.clone();
            m.values[q] -= h;
            let num = (dssim_loss(&p, &truth).unwrap().0 - dssim_loss(&m, &truth).unwrap().0) / (2.0 * h);
            assert_relative_eq!(grad[q], num, max_relative = 1e-5, epsilon = 1e-10);
        }
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            smoothness: -1.0,
            ..LossWeights::default()
        };
        assert!(bad.validate().unwrap_err().contains("smoothness"));
    }
}
