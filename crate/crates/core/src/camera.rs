//! Pinhole cameras with a rigid world-to-camera transform (+z forward).

use nalgebra::{Matrix3, Matrix4, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curve::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("camera {id}: {reason}")]
    Invalid { id: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRecord", into = "CameraRecord")]
pub struct Camera {
    pub id: usize,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub world_to_camera: Matrix4<f64>,
}

/// On-disk layout: the pose is 16 row-major floats.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraRecord {
    id: usize,
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    world_to_camera: Vec<f64>,
}

impl TryFrom<CameraRecord> for Camera {
    type Error = CameraError;

    fn try_from(r: CameraRecord) -> Result<Self, Self::Error> {
        if r.world_to_camera.len() != 16 {
            return Err(CameraError::Invalid {
                id: r.id,
                reason: format!(
                    "world_to_camera has {} entries, expected 16",
                    r.world_to_camera.len()
                ),
            });
        }
        let cam = Camera {
            id: r.id,
            width: r.width,
            height: r.height,
            fx: r.fx,
            fy: r.fy,
            cx: r.cx,
            cy: r.cy,
            world_to_camera: Matrix4::from_row_slice(&r.world_to_camera),
        };
        cam.validate()?;
        Ok(cam)
    }
}

impl From<Camera> for CameraRecord {
    fn from(c: Camera) -> Self {
        let m = c.world_to_camera;
        let mut rows = Vec::with_capacity(16);
        for i in 0..4 {
            for j in 0..4 {
                rows.push(m[(i, j)]);
            }
        }
        CameraRecord {
            id: c.id,
            width: c.width,
            height: c.height,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            world_to_camera: rows,
        }
    }
}

impl Camera {
    /// Camera at `eye` looking at `target`; image y grows along `-up`.
    pub fn look_at(
        id: usize,
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        width: usize,
        height: usize,
        focal: f64,
    ) -> Self {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(&up);
        if right.norm() < 1e-9 {
            right = forward.cross(&Vec3::x());
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rot = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let trans = -(rot * eye);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&trans);
        Camera {
            id,
            width,
            height,
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            world_to_camera: m,
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.world_to_camera.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vec3 {
        self.world_to_camera.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation() * p + self.translation()
    }

    /// Pixel coordinates of a camera-space point (no depth test).
    pub fn project_camera_point(&self, pc: &Vec3) -> Vector2<f64> {
        Vector2::new(self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy)
    }

    /// Optical center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation().transpose() * self.translation())
    }

    /// Viewing direction (+z of the camera) in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.rotation().row(2).transpose()
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let invalid = |reason: String| CameraError::Invalid {
            id: self.id,
            reason,
        };
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(invalid(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(invalid("image size must be nonzero".into()));
        }
        if !self.world_to_camera.iter().all(|v| v.is_finite()) {
            return Err(invalid("pose has non-finite entries".into()));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(invalid(format!(
                "rotation block is not orthonormal (error {err:e})"
            )));
        }
        if r.determinant() < 0.0 {
            return Err(invalid("rotation block is a reflection".into()));
        }
        Ok(())
    }
}
