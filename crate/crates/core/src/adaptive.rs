//! Topology control during training: linearize, split, merge and prune.
//!
//! Length thresholds in [`AdaptiveConfig`] are fractions of the scene
//! bounding-box diagonal; [`AdaptiveConfig::resolve`] turns them into
//! absolute values. The pass functions take absolute thresholds.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::coupling::{couple, sample_parameters, CouplingConfig};
use crate::curve::{
    chord_deviation, fit_cubic, CurveId, Geometry, LineSegment, ParametricCurve, Vec3,
};
use crate::curve_set::CurveSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub linearize_start: u64,
    pub merge_start: u64,
    pub op_period: u64,
    pub opacity_freeze: u64,
    pub total_iters: u64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            linearize_start: 3000,
            merge_start: 7000,
            op_period: 1000,
            opacity_freeze: 7000,
            total_iters: 10000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptiveConfig {
    /// Linearization error, fraction of the bbox diagonal.
    pub linearize_error: f64,
    /// Line-merge angle in radians.
    pub merge_angle: f64,
    /// Endpoint merge distance, fraction of the bbox diagonal.
    pub merge_distance: f64,
    /// Cubic-merge fit error, fraction of the bbox diagonal.
    pub merge_fit_error: f64,
    /// Geometric split angle in radians.
    pub split_angle: f64,
    pub low_mask: f64,
    pub prune_opacity: f64,
    pub enable_linearize: bool,
    pub enable_merge: bool,
    pub enable_split: bool,
    pub enable_prune: bool,
    pub schedule: Schedule,
}

impl Default for AdaptiveConfig {
    fn default() -> Self {
        Self {
            linearize_error: 0.005,
            merge_angle: 5f64.to_radians(),
            merge_distance: 0.01,
            merge_fit_error: 0.005,
            split_angle: 30f64.to_radians(),
            low_mask: 0.1,
            prune_opacity: 0.05,
            enable_linearize: true,
            enable_merge: true,
            enable_split: true,
            enable_prune: true,
            schedule: Schedule::default(),
        }
    }
}

/// Thresholds in scene units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub linearize_error: f64,
    pub merge_angle: f64,
    pub merge_distance: f64,
    pub merge_fit_error: f64,
    pub split_angle: f64,
    pub low_mask: f64,
    pub prune_opacity: f64,
}

impl AdaptiveConfig {
    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("linearize_error", self.linearize_error),
            ("merge_distance", self.merge_distance),
            ("merge_fit_error", self.merge_fit_error),
            ("low_mask", self.low_mask),
            ("prune_opacity", self.prune_opacity),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("adaptive.{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("merge_angle", self.merge_angle), ("split_angle", self.split_angle)] {
            if !(v > 0.0 && v < std::f64::consts::PI) {
                return Err(format!("adaptive.{name} must lie in (0, pi), got {v}"));
            }
        }
        let s = &self.schedule;
        if s.op_period == 0 {
            return Err("adaptive.schedule.op_period must be positive".into());
        }
        if !(s.linearize_start < s.merge_start
            && s.merge_start <= s.opacity_freeze
            && s.opacity_freeze <= s.total_iters)
        {
            return Err(format!(
                "adaptive.schedule must satisfy linearize_start < merge_start <= opacity_freeze <= total_iters, got {} / {} / {} / {}",
                s.linearize_start, s.merge_start, s.opacity_freeze, s.total_iters
            ));
        }
        Ok(())
    }

    pub fn resolve(&self, scale: f64) -> Thresholds {
        Thresholds {
            linearize_error: self.linearize_error * scale,
            merge_angle: self.merge_angle,
            merge_distance: self.merge_distance * scale,
            merge_fit_error: self.merge_fit_error * scale,
            split_angle: self.split_angle,
            low_mask: self.low_mask,
            prune_opacity: self.prune_opacity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Linearize,
    MergeLines,
    MergeCubics,
    SplitGeometric,
    SplitLowMask,
    PruneOpacity,
    PruneMask,
    PruneDegenerate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologyEvent {
    pub iteration: u64,
    pub kind: EventKind,
    pub sources: Vec<CurveId>,
    pub results: Vec<CurveId>,
}

impl TopologyEvent {
    fn new(iteration: u64, kind: EventKind, sources: Vec<CurveId>, results: Vec<CurveId>) -> Self {
        Self {
            iteration,
            kind,
            sources,
            results,
        }
    }
}

/// One JSON object per line.
pub fn write_events<W: Write>(events: &[TopologyEvent], mut out: W) -> std::io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Apply an event log to a set of ids. Fails on a source id that is not
/// live or a result id that already is.
pub fn replay_ids(
    initial: impl IntoIterator<Item = CurveId>,
    events: &[TopologyEvent],
) -> Result<BTreeSet<CurveId>, String> {
    let mut live: BTreeSet<CurveId> = initial.into_iter().collect();
    for e in events {
        for s in &e.sources {
            if !live.remove(s) {
                return Err(format!("event at {} removes unknown curve {s}", e.iteration));
            }
        }
        for r in &e.results {
            if !live.insert(*r) {
                return Err(format!("event at {} recreates curve {r}", e.iteration));
            }
        }
    }
    Ok(live)
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Replace near-straight cubics by their endpoint chords.
pub fn linearize_pass(
    set: &mut CurveSet,
    tau_l: f64,
    samples: usize,
    iteration: u64,
) -> Vec<TopologyEvent> {
    let ts = sample_parameters(samples);
    let mut events = Vec::new();
    for k in 0..set.curves.len() {
        let c = &set.curves[k];
        if !matches!(c.geometry, Geometry::Cubic(_)) || chord_deviation(&c.geometry, &ts) >= tau_l {
            continue;
        }
        let old = c.id;
        let line = Geometry::Line(LineSegment::new(c.geometry.start(), c.geometry.end()));
        let id = set.allocate_id();
        let c = &mut set.curves[k];
        c.id = id;
        c.geometry = line;
        events.push(TopologyEvent::new(iteration, EventKind::Linearize, vec![old], vec![id]));
    }
    events
}

/// Closest endpoint pair: (distance, end of a, end of b), where end 0 is the
/// start and end 1 the end.
fn closest_ends(a: &Geometry, b: &Geometry) -> (f64, usize, usize) {
    let ea = [a.start(), a.end()];
    let eb = [b.start(), b.end()];
    let mut best = (f64::INFINITY, 0, 0);
    for (i, pa) in ea.iter().enumerate() {
        for (j, pb) in eb.iter().enumerate() {
            let d = (pa - pb).norm();
            if d < best.0 {
                best = (d, i, j);
            }
        }
    }
    best
}

/// Unordered index pairs whose closest endpoints lie within `radius`, found
/// through a uniform hash of endpoints with cell size `radius`.
fn endpoint_pairs(curves: &[ParametricCurve], radius: f64) -> Vec<(usize, usize)> {
    let cell = |p: &Vec3| -> [i64; 3] {
        [
            (p.x / radius).floor() as i64,
            (p.y / radius).floor() as i64,
            (p.z / radius).floor() as i64,
        ]
    };
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (k, c) in curves.iter().enumerate() {
        for p in [c.geometry.start(), c.geometry.end()] {
            let bucket = grid.entry(cell(&p)).or_default();
            if bucket.last() != Some(&k) {
                bucket.push(k);
            }
        }
    }
    let mut pairs = BTreeSet::new();
    for (k, c) in curves.iter().enumerate() {
        for p in [c.geometry.start(), c.geometry.end()] {
            let base = cell(&p);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let key = [base[0] + dx, base[1] + dy, base[2] + dz];
                        for &j in grid.get(&key).into_iter().flatten() {
                            if j > k {
                                pairs.insert((k, j));
                            }
                        }
                    }
                }
            }
        }
    }
    pairs.into_iter().collect()
}

/// Points of `g` at `k / (n - 1)`, optionally in reverse order.
fn oriented_samples(g: &Geometry, n: usize, reverse: bool) -> Vec<Vec3> {
    let mut pts: Vec<Vec3> = (0..n)
        .map(|k| g.evaluate(k as f64 / (n - 1) as f64))
        .collect();
    if reverse {
        pts.reverse();
    }
    pts
}

fn max_adjacent_angle(tangents: &[Vec3]) -> Option<(usize, f64)> {
    tangents
        .windows(2)
        .map(|w| w[0].dot(&w[1]).clamp(-1.0, 1.0).acos())
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, a)| match best {
            Some((_, b)) if b >= a => best,
            _ => Some((i, a)),
        })
}

fn sampled_tangents(g: &Geometry, samples: usize, eps: f64) -> Option<Vec<Vec3>> {
    sample_parameters(samples)
        .iter()
        .map(|&t| g.tangent(t, eps).ok())
        .collect()
}

/// Merge nearby collinear lines and adjacent curves that one cubic fits.
///
/// Cubic merging pools `samples` points per curve at `k / (samples - 1)` so
/// the merged endpoints coincide with the outer endpoints. A merged cubic is
/// rejected when it would immediately trigger a geometric split at
/// `split_angle`.
#[allow(clippy::too_many_arguments)]
pub fn merge_pass(
    set: &mut CurveSet,
    tau_la: f64,
    tau_ld: f64,
    tau_b: f64,
    split_angle: f64,
    coupling: &CouplingConfig,
    iteration: u64,
) -> Vec<TopologyEvent> {
    let samples = coupling.samples;
    let mut candidates: Vec<(f64, usize, usize)> = endpoint_pairs(&set.curves, tau_ld)
        .into_iter()
        .filter_map(|(i, j)| {
            let (d, _, _) = closest_ends(&set.curves[i].geometry, &set.curves[j].geometry);
            (d < tau_ld).then_some((d, i, j))
        })
        .collect();
    candidates.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(set.curves[a.1].id.cmp(&set.curves[b.1].id))
            .then(set.curves[a.2].id.cmp(&set.curves[b.2].id))
    });

    let mut used = vec![false; set.curves.len()];
    let mut merged: Vec<(usize, usize, Geometry, EventKind)> = Vec::new();
    for (_, i, j) in candidates {
        if used[i] || used[j] {
            continue;
        }
        let (a, b) = (&set.curves[i].geometry, &set.curves[j].geometry);
        let result = match (a, b) {
            (Geometry::Line(la), Geometry::Line(lb)) => {
                merge_lines(la, lb, tau_la).map(|g| (g, EventKind::MergeLines))
            }
            _ => merge_cubic(a, b, samples, tau_b, split_angle, coupling.tangent_epsilon)
                .map(|g| (g, EventKind::MergeCubics)),
        };
        if let Some((g, kind)) = result {
            used[i] = true;
            used[j] = true;
            merged.push((i, j, g, kind));
        }
    }

    let mut events = Vec::with_capacity(merged.len());
    let mut removed = Vec::new();
    for (i, j, geometry, kind) in merged {
        let (a, b) = (&set.curves[i], &set.curves[j]);
        let opacity = a.opacity.max(b.opacity);
        let thickness = 0.5 * (a.thickness + b.thickness);
        let pooled: Vec<f64> = a.mask_logits.iter().chain(&b.mask_logits).copied().collect();
        let logits = vec![mean(&pooled); samples];
        let sources = vec![a.id, b.id];
        removed.extend_from_slice(&sources);
        let id = set.push_new(geometry, opacity, thickness, logits);
        events.push(TopologyEvent::new(iteration, kind, sources, vec![id]));
    }
    set.remove(&removed);
    events
}

fn merge_lines(a: &LineSegment, b: &LineSegment, tau_la: f64) -> Option<Geometry> {
    let (da, db) = (a.direction(), b.direction());
    let (na, nb) = (da.norm(), db.norm());
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let (ua, mut ub) = (da / na, db / nb);
    let cos = ua.dot(&ub);
    if cos.abs().min(1.0).acos() >= tau_la {
        return None;
    }
    if cos < 0.0 {
        ub = -ub;
    }
    // Span the extreme endpoints along the mean direction.
    let axis = (ua * na + ub * nb).normalize();
    let ends = [a.points[0], a.points[1], b.points[0], b.points[1]];
    let proj = |p: &Vec3| p.dot(&axis);
    let lo = ends.iter().min_by(|p, q| proj(p).total_cmp(&proj(q)))?;
    let hi = ends.iter().max_by(|p, q| proj(p).total_cmp(&proj(q)))?;
    Some(Geometry::Line(LineSegment::new(*lo, *hi)))
}

fn merge_cubic(
    a: &Geometry,
    b: &Geometry,
    samples: usize,
    tau_b: f64,
    split_angle: f64,
    eps: f64,
) -> Option<Geometry> {
    let n = samples.max(2);
    let (_, ea, eb) = closest_ends(a, b);
    let mut pts = oriented_samples(a, n, ea == 0);
    pts.extend(oriented_samples(b, n, eb == 1));
    let (cubic, err) = fit_cubic(&pts).ok()?;
    if !(err < tau_b) {
        return None;
    }
    let g = Geometry::Cubic(cubic);
    let tangents = sampled_tangents(&g, samples, eps)?;
    match max_adjacent_angle(&tangents) {
        Some((_, angle)) if angle > split_angle => None,
        _ => Some(g),
    }
}

/// Split cubics at sharp turns, and any curve at its lowest-mask Gaussian.
/// Each curve splits at most once per pass, geometric splits first.
pub fn split_pass(
    set: &mut CurveSet,
    split_angle: f64,
    tau_m: f64,
    coupling: &CouplingConfig,
    iteration: u64,
) -> Vec<TopologyEvent> {
    let n = coupling.samples;
    let ts = sample_parameters(n);
    let mut plans: Vec<(usize, Vec<Geometry>, EventKind)> = Vec::new();
    for (k, c) in set.curves.iter().enumerate() {
        let Ok(gaussians) = couple(c, coupling) else {
            continue;
        };
        if let Geometry::Cubic(cubic) = &c.geometry {
            let axes: Vec<Vec3> = gaussians.iter().map(|g| g.principal_axis()).collect();
            if let Some((i, angle)) = max_adjacent_angle(&axes) {
                if angle > split_angle {
                    let s = 0.5 * (ts[i] + ts[i + 1]);
                    if let Ok((l, r)) = cubic.split(s) {
                        plans.push((k, vec![Geometry::Cubic(l), Geometry::Cubic(r)], EventKind::SplitGeometric));
                        continue;
                    }
                }
            }
        }
        let masks: Vec<f64> = gaussians.iter().map(|g| g.mask).collect();
        if masks.iter().all(|&m| m < tau_m) {
            continue;
        }
        let Some((i, &m)) = masks.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)) else {
            continue;
        };
        if m >= tau_m || n < 2 {
            continue;
        }
        let mut pieces = Vec::with_capacity(2);
        if i >= 1 {
            pieces.push(c.geometry.restrict(0.0, ts[i - 1]));
        }
        if i + 1 < n {
            pieces.push(c.geometry.restrict(ts[i + 1], 1.0));
        }
        plans.push((k, pieces, EventKind::SplitLowMask));
    }

    let mut events = Vec::with_capacity(plans.len());
    let mut removed = Vec::new();
    for (k, pieces, kind) in plans {
        let parent = set.curves[k].clone();
        let logit = mean(&parent.mask_logits);
        let results = pieces
            .into_iter()
            .map(|g| set.push_new(g, parent.opacity, parent.thickness, vec![logit; n]))
            .collect();
        removed.push(parent.id);
        events.push(TopologyEvent::new(iteration, kind, vec![parent.id], results));
    }
    set.remove(&removed);
    events
}

/// Remove transparent, fully masked and degenerate curves.
pub fn prune_pass(
    set: &mut CurveSet,
    tau_d: f64,
    tau_m: f64,
    coupling: &CouplingConfig,
    iteration: u64,
) -> Vec<TopologyEvent> {
    let ts = sample_parameters(coupling.samples);
    let mut events = Vec::new();
    for c in &set.curves {
        let kind = if c.opacity < tau_d {
            EventKind::PruneOpacity
        } else if c.masks().all(|m| m < tau_m) {
            EventKind::PruneMask
        } else if !c.geometry.is_finite()
            || ts
                .iter()
                .any(|&t| c.geometry.tangent(t, coupling.tangent_epsilon).is_err())
        {
            EventKind::PruneDegenerate
        } else {
            continue;
        };
        events.push(TopologyEvent::new(iteration, kind, vec![c.id], vec![]));
    }
    let removed: Vec<CurveId> = events.iter().flat_map(|e| e.sources.clone()).collect();
    set.remove(&removed);
    events
}

/// Trainer flags for one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleFlags {
    pub opacity_learnable: bool,
    pub mask_loss_active: bool,
}

impl Schedule {
    pub fn flags(&self, iteration: u64) -> ScheduleFlags {
        ScheduleFlags {
            opacity_learnable: iteration < self.opacity_freeze,
            mask_loss_active: iteration >= self.opacity_freeze,
        }
    }

    fn is_op(&self, iteration: u64) -> bool {
        iteration > 0 && iteration % self.op_period == 0
    }

    pub fn linearize_due(&self, iteration: u64) -> bool {
        self.is_op(iteration) && iteration >= self.linearize_start
    }

    pub fn restructure_due(&self, iteration: u64) -> bool {
        self.is_op(iteration) && iteration >= self.merge_start
    }
}

/// Run the passes due at `iteration` in the order linearize, split, merge,
/// prune, and report the trainer flags.
pub fn run_schedule(
    iteration: u64,
    set: &mut CurveSet,
    config: &AdaptiveConfig,
    coupling: &CouplingConfig,
) -> (Vec<TopologyEvent>, ScheduleFlags) {
    let th = config.resolve(set.scale());
    let sched = &config.schedule;
    let mut events = Vec::new();
    if sched.linearize_due(iteration) && config.enable_linearize {
        events.extend(linearize_pass(set, th.linearize_error, coupling.samples, iteration));
    }
    if sched.restructure_due(iteration) {
        if config.enable_split {
            events.extend(split_pass(set, th.split_angle, th.low_mask, coupling, iteration));
        }
        if config.enable_merge {
            events.extend(merge_pass(
                set,
                th.merge_angle,
                th.merge_distance,
                th.merge_fit_error,
                th.split_angle,
                coupling,
                iteration,
            ));
        }
        if config.enable_prune {
            events.extend(prune_pass(set, th.prune_opacity, th.low_mask, coupling, iteration));
        }
    }
    (events, sched.flags(iteration))
}
