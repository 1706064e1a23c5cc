//! Synthetic wireframe scenes and a reference line rasterizer.
//!
//! The rasterizer draws projected polylines with a fixed pixel width and 2x2
//! supersampling. It is deliberately independent of the splatting renderer
//! and only shares the `Camera` type with it.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use nalgebra::{Quaternion, UnitQuaternion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::curve::{CubicBezier, CurveId, Geometry, LineSegment, ParametricCurve, Vec3};
use crate::curve_set::Aabb;
use crate::edge_map::EdgeMap;

pub const DEFAULT_LINE_WIDTH: f64 = 2.0;
/// Camera distance from the scene centroid.
pub const CAMERA_DISTANCE: f64 = 3.0;
/// Focal length as a multiple of the image size.
pub const FOCAL_FACTOR: f64 = 1.1;

const NEAR: f64 = 1e-3;
const GT_OPACITY: f64 = 1.0;
const GT_THICKNESS: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    Cube,
    Circle,
    Helix,
    Mixed,
}

impl SceneKind {
    pub const ALL: [SceneKind; 4] = [
        SceneKind::Cube,
        SceneKind::Circle,
        SceneKind::Helix,
        SceneKind::Mixed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SceneKind::Cube => "cube",
            SceneKind::Circle => "circle",
            SceneKind::Helix => "helix",
            SceneKind::Mixed => "mixed",
        }
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SceneKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SceneKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown scene kind '{s}' (expected cube, circle, helix or mixed)"))
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub name: String,
    pub gt_curves: Vec<ParametricCurve>,
    pub cameras: Vec<Camera>,
    pub edge_maps: Vec<EdgeMap>,
}

impl SyntheticScene {
    pub fn views(&self) -> Vec<(Camera, EdgeMap)> {
        self.cameras
            .iter()
            .cloned()
            .zip(self.edge_maps.iter().cloned())
            .collect()
    }

    pub fn gt_bbox(&self) -> Aabb {
        curves_bbox(&self.gt_curves).expect("scenes have curves")
    }
}

/// Bounding box of all control points.
pub fn curves_bbox(curves: &[ParametricCurve]) -> Option<Aabb> {
    Aabb::from_points(curves.iter().flat_map(|c| c.geometry.control_points()))
}

fn line(a: Vec3, b: Vec3) -> Geometry {
    Geometry::Line(LineSegment::new(a, b))
}

/// Axis-aligned cube edges.
pub fn cube_edges(center: Vec3, half: f64) -> Vec<Geometry> {
    let corner = |i: usize| {
        center
            + Vec3::new(
                if i & 1 == 0 { -half } else { half },
                if i & 2 == 0 { -half } else { half },
                if i & 4 == 0 { -half } else { half },
            )
    };
    let mut out = Vec::with_capacity(12);
    for i in 0..8 {
        for bit in [1, 2, 4] {
            if i & bit == 0 {
                out.push(line(corner(i), corner(i | bit)));
            }
        }
    }
    out
}

/// Handle length of a cubic arc spanning `angle` on a unit circle.
pub fn arc_handle(angle: f64) -> f64 {
    4.0 / 3.0 * (angle / 4.0).tan()
}

/// Circle in the plane z = center.z, as four quarter-arc cubics.
pub fn circle_cubics(center: Vec3, radius: f64) -> Vec<Geometry> {
    let k = arc_handle(FRAC_PI_2) * radius;
    (0..4)
        .map(|q| {
            let a0 = q as f64 * FRAC_PI_2;
            let a1 = a0 + FRAC_PI_2;
            let p = |a: f64| center + Vec3::new(a.cos(), a.sin(), 0.0) * radius;
            let d = |a: f64| Vec3::new(-a.sin(), a.cos(), 0.0);
            Geometry::Cubic(CubicBezier::new(p(a0), p(a0) + d(a0) * k, p(a1) - d(a1) * k, p(a1)))
        })
        .collect()
}

/// Helix around the z axis, `pieces` quarter turns each fitted by a cubic
/// Hermite arc.
pub fn helix_cubics(center: Vec3, radius: f64, height: f64, pieces: usize) -> Vec<Geometry> {
    let theta = FRAC_PI_2;
    let rise = height / (pieces as f64 * theta);
    let p = |a: f64| {
        center + Vec3::new(radius * a.cos(), radius * a.sin(), rise * a - height / 2.0)
    };
    let d = |a: f64| Vec3::new(-radius * a.sin(), radius * a.cos(), rise);
    let scale = arc_handle(theta);
    (0..pieces)
        .map(|i| {
            let a0 = i as f64 * theta;
            let a1 = a0 + theta;
            Geometry::Cubic(CubicBezier::new(p(a0), p(a0) + d(a0) * scale, p(a1) - d(a1) * scale, p(a1)))
        })
        .collect()
}

fn scene_geometry(kind: SceneKind) -> Vec<Geometry> {
    match kind {
        SceneKind::Cube => cube_edges(Vec3::zeros(), 0.5),
        SceneKind::Circle => circle_cubics(Vec3::zeros(), 0.5),
        SceneKind::Helix => helix_cubics(Vec3::zeros(), 0.4, 1.0, 6),
        SceneKind::Mixed => {
            let mut g = cube_edges(Vec3::zeros(), 0.5);
            g.extend(circle_cubics(Vec3::new(0.0, 0.0, 0.75), 0.35));
            g.extend(helix_cubics(Vec3::zeros(), 0.2, 0.8, 6));
            g
        }
    }
}

/// `n` unit directions on a Fibonacci lattice, rotated by `rotation`.
pub fn fibonacci_sphere(n: usize, rotation: &UnitQuaternion<f64>) -> Vec<Vec3> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            rotation * Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    let mut q = [0.0; 4];
    for v in &mut q {
        *v = StandardNormal.sample(rng);
    }
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
}

/// Cameras on a seeded, randomly rotated Fibonacci sphere around `target`.
pub fn sphere_cameras(n_views: usize, size: usize, target: Vec3, seed: u64) -> Vec<Camera> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot = random_rotation(&mut rng);
    fibonacci_sphere(n_views, &rot)
        .into_iter()
        .enumerate()
        .map(|(id, dir)| {
            Camera::look_at(
                id,
                target + dir * CAMERA_DISTANCE,
                target,
                Vec3::z(),
                size,
                size,
                FOCAL_FACTOR * size as f64,
            )
        })
        .collect()
}

pub fn make_scene(kind: SceneKind, n_views: usize, size: usize, seed: u64) -> SyntheticScene {
    let gt_curves: Vec<ParametricCurve> = scene_geometry(kind)
        .into_iter()
        .enumerate()
        .map(|(i, g)| ParametricCurve::new(CurveId(i as u64), g, GT_OPACITY, GT_THICKNESS, 0))
        .collect();
    let center = curves_bbox(&gt_curves).map(|b| b.center()).unwrap_or_default();
    let cameras = sphere_cameras(n_views, size, center, seed);
    let edge_maps = cameras
        .par_iter()
        .map(|cam| oracle_render(&gt_curves, cam, DEFAULT_LINE_WIDTH))
        .collect();
    SyntheticScene {
        name: kind.name().to_string(),
        gt_curves,
        cameras,
        edge_maps,
    }
}

/// Segment `a`-`b` in camera space clipped to the near plane.
fn clip_near(a: Vec3, b: Vec3) -> Option<(Vec3, Vec3)> {
    match (a.z > NEAR, b.z > NEAR) {
        (true, true) => Some((a, b)),
        (false, false) => None,
        (front_a, _) => {
            let s = (NEAR - a.z) / (b.z - a.z);
            let m = a + (b - a) * s;
            if front_a {
                Some((a, m))
            } else {
                Some((m, b))
            }
        }
    }
}

fn project(cam: &Camera, pc: &Vec3) -> (f64, f64) {
    (cam.fx * pc.x / pc.z + cam.cx, cam.fy * pc.y / pc.z + cam.cy)
}

/// Projected 2D polyline pieces of one curve, dense enough that every
/// segment spans at most a quarter pixel.
fn projected_polyline(geometry: &Geometry, cam: &Camera) -> Vec<[(f64, f64); 2]> {
    const COARSE: usize = 64;
    let coarse: Vec<Vec3> = (0..=COARSE)
        .map(|k| cam.to_camera(&geometry.evaluate(k as f64 / COARSE as f64)))
        .collect();
    let mut px_len = 0.0;
    for w in coarse.windows(2) {
        if let Some((a, b)) = clip_near(w[0], w[1]) {
            let (pa, pb) = (project(cam, &a), project(cam, &b));
            px_len += ((pb.0 - pa.0).powi(2) + (pb.1 - pa.1).powi(2)).sqrt();
        }
    }
    let n = ((4.0 * px_len).ceil() as usize).clamp(COARSE, 1 << 16);
    let pts: Vec<Vec3> = (0..=n)
        .map(|k| cam.to_camera(&geometry.evaluate(k as f64 / n as f64)))
        .collect();
    pts.windows(2)
        .filter_map(|w| clip_near(w[0], w[1]))
        .map(|(a, b)| [project(cam, &a), project(cam, &b)])
        .collect()
}

fn point_segment_distance_sq(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    qx * qx + qy * qy
}

/// Wireframe edge map: every curve drawn with value 1.0 and width
/// `line_width_px`, ignoring occlusion. Pixel value is the covered fraction
/// of its 2x2 subsamples.
pub fn oracle_render(curves: &[ParametricCurve], cam: &Camera, line_width_px: f64) -> EdgeMap {
    assert!(line_width_px >= 1.0, "line width must be at least one pixel");
    const SS: usize = 2;
    let (w, h) = (cam.width, cam.height);
    let (sw, sh) = (w * SS, h * SS);
    let mut covered = vec![false; sw * sh];
    let r = line_width_px / 2.0;
    let r2 = r * r;
    for c in curves {
        for [a, b] in projected_polyline(&c.geometry, cam) {
            // Subsample (i, j) sits at ((i + 0.5) / SS, (j + 0.5) / SS).
            let to_sub = |v: f64| v * SS as f64 - 0.5;
            let x0 = to_sub(a.0.min(b.0) - r).ceil().max(0.0);
            let x1 = to_sub(a.0.max(b.0) + r).floor().min(sw as f64 - 1.0);
            let y0 = to_sub(a.1.min(b.1) - r).ceil().max(0.0);
            let y1 = to_sub(a.1.max(b.1) + r).floor().min(sh as f64 - 1.0);
            if x0 > x1 || y0 > y1 {
                continue;
            }
            for j in y0 as usize..=y1 as usize {
                for i in x0 as usize..=x1 as usize {
                    let idx = j * sw + i;
                    if covered[idx] {
                        continue;
                    }
                    let p = ((i as f64 + 0.5) / SS as f64, (j as f64 + 0.5) / SS as f64);
                    if point_segment_distance_sq(p, a, b) <= r2 {
                        covered[idx] = true;
                    }
                }
            }
        }
    }
    let mut values = vec![0.0; w * h];
    for (y, row) in values.chunks_mut(w).enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            let mut count = 0;
            for dj in 0..SS {
                for di in 0..SS {
                    count += covered[(y * SS + dj) * sw + x * SS + di] as usize;
                }
            }
            *v = count as f64 / (SS * SS) as f64;
        }
    }
    EdgeMap {
        width: w,
        height: h,
        values,
    }
}
