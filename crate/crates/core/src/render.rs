//! Colorless Gaussian splatting: projection, tile binning, compositing and
//! the adjoint pass.
//!
//! With a constant unit "color" the composited value of a pixel is
//! `1 - prod_i (1 - alpha_i)`, independent of depth order, so the default
//! forward pass uses that closed form. Front-to-back accumulation is kept as a
//! selectable mode and agrees with it to rounding.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2};
use rayon::prelude::*;
use thiserror::Error;

use crate::camera::Camera;
use crate::coupling::{GaussianGrad, GaussianPrimitive};
use crate::curve::Vec3;
use crate::edge_map::EdgeMap;

pub const TILE_SIZE: usize = 16;
pub const ALPHA_MAX: f64 = 0.99;
pub const Z_NEAR: f64 = 1e-3;
/// Screen-space low-pass added to the covariance diagonal, in px^2.
pub const LOW_PASS: f64 = 0.3;
pub const DET_FLOOR: f64 = 1e-12;
/// Footprint cutoff in standard deviations.
pub const SIGMA_CUTOFF: f64 = 3.0;
const CUTOFF_SQ: f64 = SIGMA_CUTOFF * SIGMA_CUTOFF;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("gaussian {0} has non-finite attributes")]
    NonFiniteInput(usize),
    #[error("backward called with {got} gaussians but the forward pass saw {expected}")]
    StaleState { expected: usize, got: usize },
    #[error("gradient image has {got} pixels, expected {expected}")]
    GradientSize { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Compositing {
    #[default]
    ClosedForm,
    FrontToBack,
}

/// Screen-space footprint of one projected Gaussian, plus the intermediates
/// the adjoint needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Footprint {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub conic: Matrix2<f64>,
    pub depth: f64,
    /// Inclusive-exclusive pixel bounds `[x0, x1) x [y0, y1)` of the cutoff box.
    pub bounds: [usize; 4],
    mean_cam: Vec3,
    jacobian: Matrix2x3<f64>,
    cov_cam: Matrix3<f64>,
}

/// Project one Gaussian; `None` when culled (behind the near plane,
/// degenerate footprint, or footprint entirely off-image).
pub fn project_gaussian(g: &GaussianPrimitive, cam: &Camera) -> Option<Footprint> {
    let w = cam.rotation();
    let mc = w * g.mean + cam.translation();
    let z = mc.z;
    if z <= Z_NEAR {
        return None;
    }
    let (fx, fy) = (cam.fx, cam.fy);
    let mean2d = Vector2::new(fx * mc.x / z + cam.cx, fy * mc.y / z + cam.cy);
    let jacobian = Matrix2x3::new(
        fx / z,
        0.0,
        -fx * mc.x / (z * z),
        0.0,
        fy / z,
        -fy * mc.y / (z * z),
    );
    let cov_cam = w * g.covariance() * w.transpose();
    let cov2d = jacobian * cov_cam * jacobian.transpose() + Matrix2::identity() * LOW_PASS;
    let det = cov2d.determinant();
    if !(det > DET_FLOOR) {
        return None;
    }
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;

    // Exact bounding box of the cutoff ellipse; pixel centers sit at +0.5.
    let rx = SIGMA_CUTOFF * cov2d[(0, 0)].sqrt();
    let ry = SIGMA_CUTOFF * cov2d[(1, 1)].sqrt();
    let lo_x = (mean2d.x - rx - 0.5).ceil().max(0.0);
    let hi_x = (mean2d.x + rx - 0.5).floor() + 1.0;
    let lo_y = (mean2d.y - ry - 0.5).ceil().max(0.0);
    let hi_y = (mean2d.y + ry - 0.5).floor() + 1.0;
    let hi_x = hi_x.min(cam.width as f64);
    let hi_y = hi_y.min(cam.height as f64);
    if !(lo_x < hi_x && lo_y < hi_y) {
        return None;
    }
    Some(Footprint {
        mean2d,
        cov2d,
        conic,
        depth: z,
        bounds: [lo_x as usize, hi_x as usize, lo_y as usize, hi_y as usize],
        mean_cam: mc,
        jacobian,
        cov_cam,
    })
}

struct TileGrid {
    tiles_x: usize,
    lists: Vec<Vec<u32>>,
}

impl TileGrid {
    fn build(footprints: &[Option<Footprint>], width: usize, height: usize, order: Compositing) -> Self {
        let tiles_x = width.div_ceil(TILE_SIZE);
        let tiles_y = height.div_ceil(TILE_SIZE);
        let mut lists = vec![Vec::new(); tiles_x * tiles_y];
        for (i, fp) in footprints.iter().enumerate() {
            let Some(fp) = fp else { continue };
            let [x0, x1, y0, y1] = fp.bounds;
            for ty in y0 / TILE_SIZE..=(y1 - 1) / TILE_SIZE {
                for tx in x0 / TILE_SIZE..=(x1 - 1) / TILE_SIZE {
                    lists[ty * tiles_x + tx].push(i as u32);
                }
            }
        }
        if order == Compositing::FrontToBack {
            for list in lists.iter_mut() {
                list.sort_by(|&a, &b| {
                    let da = footprints[a as usize].as_ref().map_or(0.0, |f| f.depth);
                    let db = footprints[b as usize].as_ref().map_or(0.0, |f| f.depth);
                    da.total_cmp(&db).then(a.cmp(&b))
                });
            }
        }
        Self { tiles_x, lists }
    }

    fn tile_rect(&self, tile: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        (x0, (x0 + TILE_SIZE).min(width), y0, (y0 + TILE_SIZE).min(height))
    }
}

pub struct RenderOutput {
    pub image: EdgeMap,
    pub footprints: Vec<Option<Footprint>>,
    opacities: Vec<f64>,
    masks: Vec<f64>,
    frames: Vec<Matrix3<f64>>,
    scales: Vec<Vec3>,
    camera: Camera,
    grid: TileGrid,
}

impl RenderOutput {
    pub fn camera(&self) -> &Camera {
        &self.camera
    }

    pub fn gaussian_count(&self) -> usize {
        self.footprints.len()
    }

    pub fn visible_count(&self) -> usize {
        self.footprints.iter().filter(|f| f.is_some()).count()
    }
}

/// Unclamped alpha and squared Mahalanobis distance at pixel center `p`, or
/// `None` outside the cutoff.
#[inline]
fn footprint_alpha(fp: &Footprint, weight: f64, p: &Vector2<f64>) -> Option<(f64, f64, Vector2<f64>)> {
    let d = p - fp.mean2d;
    let q = d.x * d.x * fp.conic[(0, 0)] + 2.0 * d.x * d.y * fp.conic[(0, 1)] + d.y * d.y * fp.conic[(1, 1)];
    if q > CUTOFF_SQ {
        return None;
    }
    Some((weight * (-0.5 * q).exp(), q, d))
}

pub fn render(gaussians: &[GaussianPrimitive], cam: &Camera) -> Result<RenderOutput, RenderError> {
    render_with(gaussians, cam, Compositing::ClosedForm)
}

pub fn render_with(
    gaussians: &[GaussianPrimitive],
    cam: &Camera,
    mode: Compositing,
) -> Result<RenderOutput, RenderError> {
    if let Some(i) = gaussians.iter().position(|g| !g.is_finite()) {
        return Err(RenderError::NonFiniteInput(i));
    }
    let footprints: Vec<Option<Footprint>> = gaussians
        .par_iter()
        .map(|g| project_gaussian(g, cam))
        .collect();
    let weights: Vec<f64> = gaussians.iter().map(|g| g.effective_opacity()).collect();
    let (width, height) = (cam.width, cam.height);
    let grid = TileGrid::build(&footprints, width, height, mode);

    let tile_values: Vec<Vec<f64>> = (0..grid.lists.len())
        .into_par_iter()
        .map(|tile| {
            let (x0, x1, y0, y1) = grid.tile_rect(tile, width, height);
            let list = &grid.lists[tile];
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                    let value = match mode {
                        Compositing::ClosedForm => {
                            let mut transmittance = 1.0;
                            for &i in list {
                                let fp = footprints[i as usize].as_ref().expect("binned");
                                if let Some((a, _, _)) = footprint_alpha(fp, weights[i as usize], &p) {
                                    transmittance *= 1.0 - a.min(ALPHA_MAX);
                                }
                            }
                            1.0 - transmittance
                        }
                        Compositing::FrontToBack => {
                            let mut transmittance = 1.0;
                            let mut acc = 0.0;
                            for &i in list {
                                let fp = footprints[i as usize].as_ref().expect("binned");
                                if let Some((a, _, _)) = footprint_alpha(fp, weights[i as usize], &p) {
                                    let a = a.min(ALPHA_MAX);
                                    acc += a * transmittance;
                                    transmittance *= 1.0 - a;
                                }
                            }
                            acc
                        }
                    };
                    out.push(value.clamp(0.0, 1.0));
                }
            }
            out
        })
        .collect();

    let mut image = EdgeMap::zeros(width, height);
    for (tile, values) in tile_values.iter().enumerate() {
        let (x0, x1, y0, y1) = grid.tile_rect(tile, width, height);
        let mut k = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                image.values[y * width + x] = values[k];
                k += 1;
            }
        }
    }

    Ok(RenderOutput {
        image,
        footprints,
        opacities: gaussians.iter().map(|g| g.opacity).collect(),
        masks: gaussians.iter().map(|g| g.mask).collect(),
        frames: gaussians.iter().map(|g| g.frame).collect(),
        scales: gaussians.iter().map(|g| g.scales).collect(),
        camera: cam.clone(),
        grid,
    })
}

/// Screen-space gradient of one Gaussian accumulated over a tile.
#[derive(Debug, Clone, Copy, Default)]
struct ScreenGrad {
    weight: f64,
    mean2d: Vector2<f64>,
    /// dL/d(conic), symmetric.
    conic: Matrix2<f64>,
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        self.weight += o.weight;
        self.mean2d += o.mean2d;
        self.conic += o.conic;
    }
}

/// Adjoint of [`render`]: per-Gaussian gradients of `sum_p grad_image[p] *
/// image[p]`.
pub fn render_backward(
    output: &RenderOutput,
    gaussians: &[GaussianPrimitive],
    grad_image: &[f64],
) -> Result<Vec<GaussianGrad>, RenderError> {
    let n = output.footprints.len();
    if gaussians.len() != n {
        return Err(RenderError::StaleState {
            expected: n,
            got: gaussians.len(),
        });
    }
    let (width, height) = (output.camera.width, output.camera.height);
    if grad_image.len() != width * height {
        return Err(RenderError::GradientSize {
            expected: width * height,
            got: grad_image.len(),
        });
    }
    let weights: Vec<f64> = output
        .opacities
        .iter()
        .zip(&output.masks)
        .map(|(o, m)| o * m)
        .collect();
    let footprints = &output.footprints;
    let grid = &output.grid;

    let tile_grads: Vec<Vec<ScreenGrad>> = (0..grid.lists.len())
        .into_par_iter()
        .map(|tile| {
            let (x0, x1, y0, y1) = grid.tile_rect(tile, width, height);
            let list = &grid.lists[tile];
            let mut acc = vec![ScreenGrad::default(); list.len()];
            if list.is_empty() {
                return acc;
            }
            let mut scratch: Vec<Option<(f64, Vector2<f64>)>> = vec![None; list.len()];
            for y in y0..y1 {
                for x in x0..x1 {
                    let g = grad_image[y * width + x];
                    if g == 0.0 {
                        continue;
                    }
                    let p = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
                    let mut transmittance = 1.0;
                    for (slot, &i) in scratch.iter_mut().zip(list) {
                        let fp = footprints[i as usize].as_ref().expect("binned");
                        *slot = footprint_alpha(fp, weights[i as usize], &p).map(|(a, _, d)| {
                            transmittance *= 1.0 - a.min(ALPHA_MAX);
                            (a, d)
                        });
                    }
                    for (k, slot) in scratch.iter().enumerate() {
                        let Some((a, d)) = *slot else { continue };
                        if a >= ALPHA_MAX {
                            continue;
                        }
                        // d value / d alpha_k = prod_{j != k} (1 - alpha_j)
                        let g_alpha = g * transmittance / (1.0 - a);
                        let i = list[k] as usize;
                        let fp = footprints[i].as_ref().expect("binned");
                        let w = weights[i];
                        let gaussian = if w > 0.0 { a / w } else { 0.0 };
                        let entry = &mut acc[k];
                        entry.weight += g_alpha * gaussian;
                        // alpha = w exp(-q/2), q = d^T Q d, d = p - mean2d
                        entry.mean2d += fp.conic * d * (g_alpha * a);
                        entry.conic += d * d.transpose() * (-0.5 * g_alpha * a);
                    }
                }
            }
            acc
        })
        .collect();

    let mut screen = vec![ScreenGrad::default(); n];
    for (tile, grads) in tile_grads.iter().enumerate() {
        for (k, &i) in grid.lists[tile].iter().enumerate() {
            screen[i as usize].add(&grads[k]);
        }
    }

    let cam = &output.camera;
    let w = cam.rotation();
    let grads = screen
        .par_iter()
        .enumerate()
        .map(|(i, sg)| {
            let Some(fp) = footprints[i].as_ref() else {
                return GaussianGrad::default();
            };
            let mut out = GaussianGrad {
                opacity: sg.weight * output.masks[i],
                mask: sg.weight * output.opacities[i],
                ..GaussianGrad::default()
            };
            // conic = cov2d^-1
            let g_cov = -(fp.conic * sg.conic * fp.conic);
            let j = &fp.jacobian;
            let g_cov_cam = j.transpose() * g_cov * j;
            let g_jac = (g_cov + g_cov.transpose()) * j * fp.cov_cam;

            let mc = fp.mean_cam;
            let (fx, fy) = (cam.fx, cam.fy);
            let z = mc.z;
            let z2 = z * z;
            let z3 = z2 * z;
            let gm = sg.mean2d;
            let mut g_mc = Vec3::new(
                gm.x * fx / z,
                gm.y * fy / z,
                -gm.x * fx * mc.x / z2 - gm.y * fy * mc.y / z2,
            );
            g_mc.x += g_jac[(0, 2)] * (-fx / z2);
            g_mc.y += g_jac[(1, 2)] * (-fy / z2);
            g_mc.z += g_jac[(0, 0)] * (-fx / z2)
                + g_jac[(0, 2)] * (2.0 * fx * mc.x / z3)
                + g_jac[(1, 1)] * (-fy / z2)
                + g_jac[(1, 2)] * (2.0 * fy * mc.y / z3);
            out.mean = w.transpose() * g_mc;

            // cov_cam = W Sigma W^T, Sigma = R diag(s^2) R^T
            let g_sigma = w.transpose() * g_cov_cam * w;
            let r = &output.frames[i];
            let s = &output.scales[i];
            let s2 = Matrix3::from_diagonal(&s.component_mul(s));
            out.frame = (g_sigma + g_sigma.transpose()) * r * s2;
            let inner = r.transpose() * g_sigma * r;
            out.scales = Vec3::new(
                2.0 * s.x * inner[(0, 0)],
                2.0 * s.y * inner[(1, 1)],
                2.0 * s.z * inner[(2, 2)],
            );
            out
        })
        .collect();
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::build_frame;
    use crate::curve::CurveId;
    use approx::assert_relative_eq;
    use nalgebra::Matrix4;

    fn identity_camera(size: usize, focal: f64) -> Camera {
        Camera {
            id: 0,
            width: size,
            height: size,
            fx: focal,
            fy: focal,
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
            world_to_camera: Matrix4::identity(),
        }
    }

    fn gaussian(mean: Vec3, axis: Vec3, scales: Vec3, opacity: f64, mask: f64) -> GaussianPrimitive {
        GaussianPrimitive {
            mean,
            frame: build_frame(&axis.normalize()),
            scales,
            opacity,
            mask,
            parent: CurveId(0),
            sample_index: 0,
        }
    }

    #[test]
    fn axis_gaussian_projects_to_principal_point() {
        let cam = identity_camera(32, 20.0);
        let g = gaussian(Vec3::new(0.0, 0.0, 2.0), Vec3::x(), Vec3::repeat(0.1), 1.0, 1.0);
        let fp = project_gaussian(&g, &cam).unwrap();
        assert_relative_eq!(fp.mean2d, Vector2::new(16.0, 16.0));
        assert_eq!(fp.depth, 2.0);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = identity_camera(32, 20.0);
        let g = gaussian(Vec3::new(0.0, 0.0, -1.0), Vec3::x(), Vec3::repeat(0.1), 1.0, 1.0);
        assert!(project_gaussian(&g, &cam).is_none());
        let g = gaussian(Vec3::new(0.0, 0.0, 5e-4), Vec3::x(), Vec3::repeat(0.1), 1.0, 1.0);
        assert!(project_gaussian(&g, &cam).is_none());
    }

    #[test]
    fn rod_along_x_elongates_along_image_x() {
        // Camera at +z looking down -z; the world x axis maps to image x.
        let cam = Camera::look_at(0, Vec3::new(0.0, 0.0, 4.0), Vec3::zeros(), Vec3::y(), 64, 64, 100.0);
        let (s0, s1) = (0.2, 0.02);
        let g = gaussian(Vec3::zeros(), Vec3::x(), Vec3::new(s0, s1, s1), 1.0, 1.0);
        let fp = project_gaussian(&g, &cam).unwrap();
        let eig = fp.cov2d.symmetric_eigen();
        let (mut hi, mut lo) = (eig.eigenvalues[0], eig.eigenvalues[1]);
        if hi < lo {
            std::mem::swap(&mut hi, &mut lo);
        }
        // Closed form at the optical axis: variances (f s / z)^2 plus low-pass.
        let k = 100.0 / 4.0;
        assert_relative_eq!(hi, (k * s0).powi(2) + LOW_PASS, epsilon = 1e-9);
        assert_relative_eq!(lo, (k * s1).powi(2) + LOW_PASS, epsilon = 1e-9);
        assert!(fp.cov2d[(0, 0)] > fp.cov2d[(1, 1)]);
        let ratio = (hi - LOW_PASS) / (lo - LOW_PASS);
        assert_relative_eq!(ratio, (s0 / s1).powi(2), epsilon = 1e-6);
    }

    #[test]
    fn empty_scene_renders_black() {
        let cam = identity_camera(20, 10.0);
        let out = render(&[], &cam).unwrap();
        assert!(out.image.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_gaussian_center_is_clamped() {
        // Pixel center lands exactly on the mean: mean2d = (cx, cy) = (16.5, 16.5).
        let mut cam = identity_camera(32, 20.0);
        cam.cx = 16.5;
        cam.cy = 16.5;
        let g = gaussian(Vec3::new(0.0, 0.0, 2.0), Vec3::x(), Vec3::repeat(0.1), 1.0, 1.0);
        let out = render(&[g], &cam).unwrap();
        assert_relative_eq!(out.image.get(16, 16), ALPHA_MAX, epsilon = 1e-15);
    }

    #[test]
    fn two_half_alphas_give_three_quarters() {
        let mut cam = identity_camera(32, 20.0);
        cam.cx = 16.5;
        cam.cy = 16.5;
        let g = gaussian(Vec3::new(0.0, 0.0, 2.0), Vec3::x(), Vec3::repeat(0.1), 0.5, 1.0);
        let out = render(&[g.clone(), g], &cam).unwrap();
        assert_relative_eq!(out.image.get(16, 16), 0.75, epsilon = 1e-15);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let cam = identity_camera(8, 10.0);
        let mut g = gaussian(Vec3::new(0.0, 0.0, 2.0), Vec3::x(), Vec3::repeat(0.1), 0.5, 1.0);
        g.mean.x = f64::NAN;
        assert!(matches!(render(&[g], &cam), Err(RenderError::NonFiniteInput(0))));
    }

    #[test]
    fn backward_zero_gradient_and_opacity_derivative() {
        let mut cam = identity_camera(32, 20.0);
        cam.cx = 16.5;
        cam.cy = 16.5;
        let g = gaussian(Vec3::new(0.0, 0.0, 2.0), Vec3::x(), Vec3::repeat(0.1), 0.5, 0.8);
        let gs = vec![g];
        let out = render(&gs, &cam).unwrap();
        let zero = vec![0.0; 32 * 32];
        let grads = render_backward(&out, &gs, &zero).unwrap();
        assert_eq!(grads[0], GaussianGrad::default());

        let mut unit = vec![0.0; 32 * 32];
        unit[16 * 32 + 16] = 1.0;
        let grads = render_backward(&out, &gs, &unit).unwrap();
        // value = o m exp(0) at the center, so d/do = m.
        assert_relative_eq!(grads[0].opacity, 0.8, epsilon = 1e-15);
        assert_relative_eq!(grads[0].mask, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn backward_detects_stale_state() {
        let cam = identity_camera(8, 10.0);
        let g = gaussian(Vec3::new(0.0, 0.0, 2.0), Vec3::x(), Vec3::repeat(0.1), 0.5, 1.0);
        let out = render(&[g.clone()], &cam).unwrap();
        assert!(matches!(
            render_backward(&out, &[g.clone(), g], &[0.0; 64]),
            Err(RenderError::StaleState { expected: 1, got: 2 })
        ));
    }
}
