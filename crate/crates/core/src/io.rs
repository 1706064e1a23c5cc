//! Curve files, camera lists and the dataset directory layout.
//!
//! A dataset directory holds `cameras.json`, one edge map per camera under
//! `edges/<id>.png` (or `.pgm`), and optionally `gt_curves.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Camera;
use crate::curve::{
    CubicBezier, CurveError, CurveId, CurveKind, Geometry, LineSegment, ParametricCurve, Vec3,
};
use crate::edge_map::{EdgeMap, EdgeMapError};

pub const CAMERAS_FILE: &str = "cameras.json";
pub const GT_CURVES_FILE: &str = "gt_curves.json";
pub const EDGES_DIR: &str = "edges";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
    #[error(transparent)]
    EdgeMap(#[from] EdgeMapError),
}

impl IoError {
    /// True for malformed or inconsistent inputs, as opposed to I/O failures.
    pub fn is_validation(&self) -> bool {
        match self {
            IoError::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            IoError::EdgeMap(EdgeMapError::Io { .. }) => false,
            _ => true,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, e: serde_json::Error) -> IoError {
    IoError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveRecord {
    pub id: u64,
    #[serde(rename = "type")]
    pub kind: CurveKind,
    pub control_points: Vec<[f64; 3]>,
    pub opacity: f64,
    pub thickness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveFile {
    pub curves: Vec<CurveRecord>,
}

impl CurveRecord {
    pub fn from_curve(c: &ParametricCurve) -> Self {
        Self {
            id: c.id.0,
            kind: c.geometry.kind(),
            control_points: c
                .geometry
                .control_points()
                .iter()
                .map(|p| [p.x, p.y, p.z])
                .collect(),
            opacity: c.opacity,
            thickness: c.thickness,
        }
    }

    /// Curve with `samples` zero mask logits.
    pub fn to_curve(&self, samples: usize) -> Result<ParametricCurve, CurveError> {
        let pts: Vec<Vec3> = self
            .control_points
            .iter()
            .map(|p| Vec3::new(p[0], p[1], p[2]))
            .collect();
        let geometry = match (self.kind, pts.as_slice()) {
            (CurveKind::Cubic, [a, b, c, d]) => Geometry::Cubic(CubicBezier::new(*a, *b, *c, *d)),
            (CurveKind::Line, [a, b]) => Geometry::Line(LineSegment::new(*a, *b)),
            (kind, _) => {
                return Err(CurveError::Invalid {
                    id: self.id,
                    reason: format!(
                        "{} control points for a {kind:?} curve",
                        self.control_points.len()
                    ),
                })
            }
        };
        let curve = ParametricCurve::new(CurveId(self.id), geometry, self.opacity, self.thickness, samples);
        curve.validate(samples)?;
        Ok(curve)
    }
}

pub fn curves_to_json(curves: &[ParametricCurve]) -> String {
    let file = CurveFile {
        curves: curves.iter().map(CurveRecord::from_curve).collect(),
    };
    let mut s = serde_json::to_string_pretty(&file).expect("curve records serialize");
    s.push('\n');
    s
}

pub fn write_curves(path: &Path, curves: &[ParametricCurve]) -> Result<(), IoError> {
    fs::write(path, curves_to_json(curves)).map_err(io_err(path))
}

pub fn read_curves(path: &Path, samples: usize) -> Result<Vec<ParametricCurve>, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_curves(&text, samples).map_err(|e| match e {
        IoError::Parse {
            line,
            column,
            message,
            ..
        } => IoError::Parse {
            path: path.to_path_buf(),
            line,
            column,
            message,
        },
        IoError::Invalid { message, .. } => IoError::Invalid {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

pub fn parse_curves(text: &str, samples: usize) -> Result<Vec<ParametricCurve>, IoError> {
    let file: CurveFile =
        serde_json::from_str(text).map_err(|e| parse_err(Path::new("<curves>"), e))?;
    let curves = file
        .curves
        .iter()
        .map(|r| r.to_curve(samples))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| IoError::Invalid {
            path: PathBuf::from("<curves>"),
            message: e.to_string(),
        })?;
    let mut ids: Vec<u64> = curves.iter().map(|c| c.id.0).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(IoError::Invalid {
            path: PathBuf::from("<curves>"),
            message: format!("duplicate curve id {}", w[0]),
        });
    }
    Ok(curves)
}

pub fn write_cameras(path: &Path, cameras: &[Camera]) -> Result<(), IoError> {
    let mut s = serde_json::to_string_pretty(cameras).expect("cameras serialize");
    s.push('\n');
    fs::write(path, s).map_err(io_err(path))
}

pub fn read_cameras(path: &Path) -> Result<Vec<Camera>, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let cams: Vec<Camera> = serde_json::from_str(&text).map_err(|e| parse_err(path, e))?;
    let mut ids: Vec<usize> = cams.iter().map(|c| c.id).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(IoError::Invalid {
            path: path.to_path_buf(),
            message: format!("duplicate camera id {}", w[0]),
        });
    }
    Ok(cams)
}

/// Cameras with their observed edge maps, plus ground truth when present.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub cameras: Vec<Camera>,
    pub edge_maps: Vec<EdgeMap>,
    pub gt_curves: Option<Vec<ParametricCurve>>,
}

impl Dataset {
    pub fn views(&self) -> Vec<(Camera, EdgeMap)> {
        self.cameras
            .iter()
            .cloned()
            .zip(self.edge_maps.iter().cloned())
            .collect()
    }
}

pub fn edge_map_path(dir: &Path, camera_id: usize) -> PathBuf {
    dir.join(EDGES_DIR).join(format!("{camera_id}.png"))
}

pub fn load_dataset(dir: &Path, samples: usize) -> Result<Dataset, IoError> {
    if !dir.is_dir() {
        return Err(IoError::Invalid {
            path: dir.to_path_buf(),
            message: "dataset directory does not exist".into(),
        });
    }
    let cam_path = dir.join(CAMERAS_FILE);
    if !cam_path.is_file() {
        return Err(IoError::Invalid {
            path: cam_path,
            message: "missing camera file".into(),
        });
    }
    let cameras = read_cameras(&cam_path)?;
    if cameras.is_empty() {
        return Err(IoError::Invalid {
            path: cam_path,
            message: "no cameras".into(),
        });
    }
    let mut edge_maps = Vec::with_capacity(cameras.len());
    for cam in &cameras {
        let png = edge_map_path(dir, cam.id);
        let pgm = png.with_extension("pgm");
        let path = if png.is_file() {
            png
        } else if pgm.is_file() {
            pgm
        } else {
            return Err(IoError::Invalid {
                path: png,
                message: format!("missing edge map for camera {}", cam.id),
            });
        };
        let map = EdgeMap::load(&path)?;
        if (map.width, map.height) != (cam.width, cam.height) {
            return Err(IoError::Invalid {
                path,
                message: format!(
                    "edge map is {}x{}, camera {} is {}x{}",
                    map.width, map.height, cam.id, cam.width, cam.height
                ),
            });
        }
        edge_maps.push(map);
    }
    let gt_path = dir.join(GT_CURVES_FILE);
    let gt_curves = if gt_path.is_file() {
        Some(read_curves(&gt_path, samples)?)
    } else {
        None
    };
    Ok(Dataset {
        cameras,
        edge_maps,
        gt_curves,
    })
}

pub fn write_dataset(
    dir: &Path,
    cameras: &[Camera],
    edge_maps: &[EdgeMap],
    gt_curves: Option<&[ParametricCurve]>,
) -> Result<(), IoError> {
    let edges = dir.join(EDGES_DIR);
    fs::create_dir_all(&edges).map_err(io_err(&edges))?;
    write_cameras(&dir.join(CAMERAS_FILE), cameras)?;
    for (cam, map) in cameras.iter().zip(edge_maps) {
        map.save_png(&edge_map_path(dir, cam.id))?;
    }
    if let Some(gt) = gt_curves {
        write_curves(&dir.join(GT_CURVES_FILE), gt)?;
    }
    Ok(())
}
