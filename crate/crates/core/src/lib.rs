//! One-stage reconstruction of 3D parametric curves from multi-view edge
//! maps.
//!
//! Cubic and linear Bézier curves are coupled to rod-shaped Gaussians, the
//! Gaussians are splatted into single-channel edge images, and image-space
//! losses are back-propagated to the curve control points. A topology
//! controller linearizes, merges, splits and prunes curves during training.

pub mod adaptive;
pub mod camera;
pub mod coupling;
pub mod curve;
pub mod curve_set;
pub mod edge_map;
pub mod evaluation;
pub mod io;
pub mod losses;
pub mod render;
pub mod trainer;
pub mod scene;

pub use camera::Camera;
pub use coupling::{CouplingConfig, CurveGrad, GaussianGrad, GaussianPrimitive};
pub use curve_set::{Aabb, CurveSet};
pub use curve::{CubicBezier, CurveId, CurveKind, Geometry, LineSegment, ParametricCurve, Vec3};
pub use edge_map::EdgeMap;
