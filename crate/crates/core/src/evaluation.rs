//! Chamfer accuracy/completeness and thresholded precision, recall and
//! F-score between sampled curve sets.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curve::{ParametricCurve, Vec3};

/// Segments of the polyline used to estimate arclength.
pub const ARCLENGTH_SEGMENTS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{0} point cloud is empty")]
    EmptyCloud(CloudSource),
    #[error("sampling resolution must be positive, got {0}")]
    Resolution(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CloudSource {
    Predicted,
    GroundTruth,
}

impl std::fmt::Display for CloudSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CloudSource::Predicted => "predicted",
            CloudSource::GroundTruth => "ground-truth",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledEdgeCloud {
    pub points: Vec<Vec3>,
    pub source: CloudSource,
    pub resolution: f64,
}

/// Samples of one curve spaced uniformly in arclength: `ceil(L / resolution)
/// + 1` points, or a single point for a zero-length curve. Parameters come
/// from inverting the polyline arclength table.
pub fn sample_curve(curve: &ParametricCurve, resolution: f64) -> Vec<Vec3> {
    let g = &curve.geometry;
    let m = ARCLENGTH_SEGMENTS;
    let knots: Vec<Vec3> = (0..=m).map(|k| g.evaluate(k as f64 / m as f64)).collect();
    let mut cum = Vec::with_capacity(m + 1);
    cum.push(0.0);
    for w in knots.windows(2) {
        cum.push(cum.last().unwrap() + (w[1] - w[0]).norm());
    }
    let len = cum[m];
    if len <= 0.0 {
        return vec![g.start()];
    }
    let n = (len / resolution).ceil() as usize + 1;
    let mut seg = 0;
    (0..n)
        .map(|k| {
            let target = len * k as f64 / (n - 1) as f64;
            while seg + 1 < m && cum[seg + 1] < target {
                seg += 1;
            }
            let span = cum[seg + 1] - cum[seg];
            let frac = if span > 0.0 { ((target - cum[seg]) / span).clamp(0.0, 1.0) } else { 0.0 };
            g.evaluate((seg as f64 + frac) / m as f64)
        })
        .collect()
}

/// One centroid per occupied voxel of side `resolution`, in voxel order.
pub fn voxel_downsample(points: &[Vec3], resolution: f64) -> Vec<Vec3> {
    let mut cells: BTreeMap<[i64; 3], (Vec3, usize)> = BTreeMap::new();
    for p in points {
        let key = [
            (p.x / resolution).floor() as i64,
            (p.y / resolution).floor() as i64,
            (p.z / resolution).floor() as i64,
        ];
        let e = cells.entry(key).or_insert((Vec3::zeros(), 0));
        e.0 += p;
        e.1 += 1;
    }
    cells.into_values().map(|(s, n)| s / n as f64).collect()
}

pub fn sample_curves(
    curves: &[ParametricCurve],
    resolution: f64,
    source: CloudSource,
) -> Result<SampledEdgeCloud, EvalError> {
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(EvalError::Resolution(resolution));
    }
    let raw: Vec<Vec3> = curves
        .iter()
        .flat_map(|c| sample_curve(c, resolution))
        .collect();
    Ok(SampledEdgeCloud {
        points: voxel_downsample(&raw, resolution),
        source,
        resolution,
    })
}

/// Static 3D kd-tree with exact nearest-neighbour queries.
pub struct KdTree {
    points: Vec<Vec3>,
    nodes: Vec<Node>,
}

struct Node {
    /// Index into `points`.
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        let mut tree = KdTree {
            points: points.to_vec(),
            nodes: Vec::with_capacity(points.len()),
        };
        tree.build(&mut idx, 0);
        tree
    }

    fn build(&mut self, idx: &mut [usize], depth: usize) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        let axis = depth % 3;
        let pts = &self.points;
        idx.sort_by(|&a, &b| pts[a][axis].total_cmp(&pts[b][axis]).then(a.cmp(&b)));
        let mid = idx.len() / 2;
        let node = self.nodes.len();
        self.nodes.push(Node {
            point: idx[mid],
            axis,
            left: None,
            right: None,
        });
        let (lo, rest) = idx.split_at_mut(mid);
        let left = self.build(lo, depth + 1);
        let right = self.build(&mut rest[1..], depth + 1);
        self.nodes[node].left = left;
        self.nodes[node].right = right;
        Some(node)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Squared distance to the nearest stored point.
    pub fn nearest_distance_sq(&self, q: &Vec3) -> Option<f64> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = f64::INFINITY;
        self.search(0, q, &mut best);
        Some(best)
    }

    fn search(&self, node: usize, q: &Vec3, best: &mut f64) {
        let n = &self.nodes[node];
        let p = &self.points[n.point];
        let d2 = (p - q).norm_squared();
        if d2 < *best {
            *best = d2;
        }
        let diff = q[n.axis] - p[n.axis];
        let (near, far) = if diff < 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if let Some(c) = near {
            self.search(c, q, best);
        }
        if let Some(c) = far {
            if diff * diff <= *best {
                self.search(c, q, best);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub completeness: f64,
    /// Percentages.
    pub recall: f64,
    pub precision: f64,
    pub fscore: f64,
    pub threshold: f64,
    pub n_curves: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "accuracy,completeness,recall,precision,fscore,threshold,n_curves";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.accuracy,
            self.completeness,
            self.recall,
            self.precision,
            self.fscore,
            self.threshold,
            self.n_curves
        )
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", Self::CSV_HEADER)?;
        writeln!(out, "{}", self.csv_row())
    }
}

pub fn fscore(precision: f64, recall: f64) -> f64 {
    if precision > 0.0 && recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Nearest distances from every query point to `targets`.
pub fn nearest_distances(queries: &[Vec3], targets: &[Vec3]) -> Vec<f64> {
    let tree = KdTree::new(targets);
    queries
        .par_iter()
        .map(|q| tree.nearest_distance_sq(q).unwrap_or(f64::INFINITY).sqrt())
        .collect()
}

/// Mean distance and percentage within `tau`, summed in input order.
fn summarize(dists: &[f64], tau: f64) -> (f64, f64) {
    let mean = dists.iter().sum::<f64>() / dists.len() as f64;
    let within = dists.iter().filter(|&&d| d <= tau).count();
    (mean, 100.0 * within as f64 / dists.len() as f64)
}

/// Metrics from precomputed nearest distances (pred to truth and back).
pub fn metrics_from_distances(pred_to_truth: &[f64], truth_to_pred: &[f64], tau: f64) -> MetricsReport {
    let (accuracy, precision) = summarize(pred_to_truth, tau);
    let (completeness, recall) = summarize(truth_to_pred, tau);
    MetricsReport {
        accuracy,
        completeness,
        recall,
        precision,
        fscore: fscore(precision, recall),
        threshold: tau,
        n_curves: 0,
    }
}

pub fn chamfer_metrics(
    pred: &SampledEdgeCloud,
    truth: &SampledEdgeCloud,
    tau: f64,
) -> Result<MetricsReport, EvalError> {
    if pred.points.is_empty() {
        return Err(EvalError::EmptyCloud(pred.source));
    }
    if truth.points.is_empty() {
        return Err(EvalError::EmptyCloud(truth.source));
    }
    let p2t = nearest_distances(&pred.points, &truth.points);
    let t2p = nearest_distances(&truth.points, &pred.points);
    Ok(metrics_from_distances(&p2t, &t2p, tau))
}

pub fn evaluate_run(
    pred: &[ParametricCurve],
    truth: &[ParametricCurve],
    tau: f64,
    resolution: f64,
) -> Result<MetricsReport, EvalError> {
    let p = sample_curves(pred, resolution, CloudSource::Predicted)?;
    let t = sample_curves(truth, resolution, CloudSource::GroundTruth)?;
    let mut report = chamfer_metrics(&p, &t, tau)?;
    report.n_curves = pred.len();
    Ok(report)
}
