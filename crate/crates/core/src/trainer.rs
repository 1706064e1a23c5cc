//! Optimization loop: random initialization, per-view render and loss,
//! Adam updates per parameter group, topology schedule and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adaptive::{run_schedule, AdaptiveConfig, EventKind, ScheduleFlags, TopologyEvent};
use crate::camera::Camera;
use crate::coupling::{CoupledScene, CouplingConfig, CurveGrad};
use crate::curve::{CubicBezier, CurveId, Geometry, ParametricCurve, Vec3};
use crate::curve_set::{Aabb, CurveSet};
use crate::edge_map::EdgeMap;
use crate::io::{self, IoError};
use crate::losses::{total_loss, LossError, LossInputs, LossReport, LossWeights};
use crate::render::{render, RenderError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("scene bounds are degenerate: {0:?}")]
    DegenerateBounds(Aabb),
    #[error("dataset has no views")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("view {view}: edge map is {map:?}, camera is {camera:?}")]
    ViewSize {
        view: usize,
        map: (usize, usize),
        camera: (usize, usize),
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

/// Step sizes. Control points and thickness are fractions of the bbox
/// diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub control_points: f64,
    pub opacity: f64,
    pub thickness: f64,
    pub mask_logits: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            control_points: 1e-3,
            opacity: 0.02,
            thickness: 1e-4,
            mask_logits: 0.01,
        }
    }
}

/// Initial curve attributes. Lengths are fractions of the bbox diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// Standard deviation of the inner control point jitter.
    pub jitter: f64,
    pub opacity: f64,
    pub thickness: f64,
    pub mask_logit: f64,
    /// Lower bound on thickness after every update.
    pub thickness_floor: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            jitter: 0.05,
            opacity: 0.5,
            thickness: 0.005,
            mask_logit: 2.0,
            thickness_floor: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_curve_count: usize,
    pub iterations: u64,
    pub views_per_step: usize,
    pub learning_rates: LearningRates,
    pub weights: LossWeights,
    pub adaptive: AdaptiveConfig,
    /// `tangent_epsilon` is a fraction of the bbox diagonal here.
    pub coupling: CouplingConfig,
    pub init: InitConfig,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Scene bounds; derived from the cameras when absent.
    pub bbox: Option<Aabb>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_curve_count: 256,
            iterations: 10000,
            views_per_step: 1,
            learning_rates: LearningRates::default(),
            weights: LossWeights::default(),
            adaptive: AdaptiveConfig::default(),
            coupling: CouplingConfig::default(),
            init: InitConfig::default(),
            seed: 0,
            checkpoint_every: 1000,
            bbox: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.initial_curve_count == 0 {
            return Err("initial_curve_count must be at least 1".into());
        }
        if self.iterations == 0 {
            return Err("iterations must be at least 1".into());
        }
        if self.views_per_step == 0 {
            return Err("views_per_step must be at least 1".into());
        }
        if self.checkpoint_every == 0 {
            return Err("checkpoint_every must be at least 1".into());
        }
        if self.coupling.samples < 2 {
            return Err("coupling.samples must be at least 2".into());
        }
        if !(self.coupling.overlap > 0.0) || !(self.coupling.tangent_epsilon > 0.0) {
            return Err("coupling.overlap and coupling.tangent_epsilon must be positive".into());
        }
        let lr = &self.learning_rates;
        for (name, v) in [
            ("control_points", lr.control_points),
            ("opacity", lr.opacity),
            ("thickness", lr.thickness),
            ("mask_logits", lr.mask_logits),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("learning_rates.{name} must be positive, got {v}"));
            }
        }
        let init = &self.init;
        if !(init.jitter >= 0.0) || !(0.0..=1.0).contains(&init.opacity) {
            return Err("init.jitter must be nonnegative and init.opacity in [0, 1]".into());
        }
        if !(init.thickness > 0.0 && init.thickness_floor > 0.0) {
            return Err("init.thickness and init.thickness_floor must be positive".into());
        }
        if let Some(b) = &self.bbox {
            if !b.is_solid() {
                return Err("bbox must have positive extent on every axis".into());
            }
        }
        self.weights.validate().map_err(|e| format!("weights: {e}"))?;
        self.adaptive.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }
}

/// Cube around the point closest to all optical axes, inscribed in the
/// sphere that every camera sees at its median distance.
pub fn bbox_from_cameras(cameras: &[Camera]) -> Option<Aabb> {
    if cameras.is_empty() {
        return None;
    }
    let mut a = nalgebra::Matrix3::<f64>::zeros();
    let mut b = Vec3::zeros();
    for cam in cameras {
        let c = cam.center();
        let d = cam.forward();
        let proj = nalgebra::Matrix3::identity() - d * d.transpose();
        a += proj;
        b += proj * c;
    }
    let center = a.try_inverse()? * b;
    let mut radii: Vec<f64> = cameras
        .iter()
        .map(|cam| {
            let dist = (cam.center() - center).norm();
            let half_px = cam
                .cx
                .min(cam.width as f64 - cam.cx)
                .min(cam.cy.min(cam.height as f64 - cam.cy));
            let focal = cam.fx.max(cam.fy);
            dist * (half_px / focal).atan().sin()
        })
        .collect();
    radii.sort_by(f64::total_cmp);
    let r = radii[radii.len() / 2];
    let half = Vec3::repeat(r / 3f64.sqrt());
    let bbox = Aabb::new(center - half, center + half);
    bbox.is_solid().then_some(bbox)
}

/// Random cubics: endpoints uniform in the box, inner controls at the chord
/// thirds plus Gaussian jitter.
pub fn initialize(config: &TrainConfig, bbox: Aabb) -> Result<CurveSet, TrainError> {
    if !bbox.is_solid() {
        return Err(TrainError::DegenerateBounds(bbox));
    }
    let diag = bbox.diagonal();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let jitter = Normal::new(0.0, config.init.jitter * diag)
        .map_err(|e| TrainError::Config(format!("init.jitter: {e}")))?;
    let uniform = |rng: &mut ChaCha8Rng| {
        Vec3::new(
            rng.random_range(bbox.min.x..=bbox.max.x),
            rng.random_range(bbox.min.y..=bbox.max.y),
            rng.random_range(bbox.min.z..=bbox.max.z),
        )
    };
    let mut set = CurveSet::new(bbox, config.seed);
    for _ in 0..config.initial_curve_count {
        let p0 = uniform(&mut rng);
        let p3 = uniform(&mut rng);
        let mut noise = || Vec3::new(jitter.sample(&mut rng), jitter.sample(&mut rng), jitter.sample(&mut rng));
        let p1 = p0 + (p3 - p0) / 3.0 + noise();
        let p2 = p0 + (p3 - p0) * (2.0 / 3.0) + noise();
        set.push_new(
            Geometry::Cubic(CubicBezier::new(p0, p1, p2, p3)),
            config.init.opacity,
            config.init.thickness * diag,
            vec![config.init.mask_logit; config.coupling.samples],
        );
    }
    Ok(set)
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-15;

/// Adam moments of one curve, flat in the order control points (x, y, z per
/// point), thickness, opacity, mask logits. `step` counts updates of this
/// curve, so curves created mid-run get full bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    fn zeros(n: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

pub fn parameter_count(curve: &ParametricCurve) -> usize {
    3 * curve.geometry.control_points().len() + 2 + curve.mask_logits.len()
}

/// Gradient flattened in the moment order.
pub fn flatten_grad(g: &CurveGrad) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * g.control_points.len() + 2 + g.mask_logits.len());
    for p in &g.control_points {
        out.extend_from_slice(&[p.x, p.y, p.z]);
    }
    out.push(g.thickness);
    out.push(g.opacity);
    out.extend_from_slice(&g.mask_logits);
    out
}

/// Learning rate per flat slot, zero for frozen slots.
fn slot_rates(curve: &ParametricCurve, lr: &LearningRates, diag: f64, opacity_learnable: bool) -> Vec<f64> {
    let n_cp = 3 * curve.geometry.control_points().len();
    let mut rates = vec![lr.control_points * diag; n_cp];
    rates.push(lr.thickness * diag);
    rates.push(if opacity_learnable { lr.opacity } else { 0.0 });
    rates.extend(std::iter::repeat_n(lr.mask_logits, curve.mask_logits.len()));
    rates
}

fn apply_flat(curve: &mut ParametricCurve, delta: &[f64]) {
    let mut k = 0;
    for p in curve.geometry.control_points_mut() {
        for c in 0..3 {
            p[c] -= delta[k];
            k += 1;
        }
    }
    curve.thickness -= delta[k];
    curve.opacity -= delta[k + 1];
    k += 2;
    for l in curve.mask_logits.iter_mut() {
        *l -= delta[k];
        k += 1;
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: u64,
    pub loss: LossReport,
    pub curves: usize,
    pub gaussians: usize,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "iteration,edge,conn,smo,reg,mask,dssim,total,curves,gaussians";

    pub fn csv(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.iteration, l.edge, l.conn, l.smo, l.reg, l.mask, l.dssim, l.total, self.curves, self.gaussians
        )
    }
}

/// Everything needed to continue a run bit-identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub iteration: u64,
    pub seed: u64,
    pub next_id: u64,
    pub bbox: Aabb,
    pub mask_logits: BTreeMap<CurveId, Vec<f64>>,
    pub moments: BTreeMap<CurveId, Moments>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub set: CurveSet,
    views: Vec<(Camera, EdgeMap)>,
    moments: BTreeMap<CurveId, Moments>,
    iteration: u64,
    coupling: CouplingConfig,
}

pub struct IterationOutput {
    pub row: LogRow,
    pub events: Vec<TopologyEvent>,
}

fn check_views(views: &[(Camera, EdgeMap)]) -> Result<(), TrainError> {
    if views.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for (k, (cam, map)) in views.iter().enumerate() {
        if (cam.width, cam.height) != (map.width, map.height) {
            return Err(TrainError::ViewSize {
                view: k,
                map: (map.width, map.height),
                camera: (cam.width, cam.height),
            });
        }
    }
    Ok(())
}

impl Trainer {
    pub fn new(config: TrainConfig, views: Vec<(Camera, EdgeMap)>) -> Result<Self, TrainError> {
        config.validate().map_err(TrainError::Config)?;
        check_views(&views)?;
        let cams: Vec<Camera> = views.iter().map(|v| v.0.clone()).collect();
        let bbox = match config.bbox {
            Some(b) => b,
            None => bbox_from_cameras(&cams).ok_or_else(|| {
                TrainError::DegenerateBounds(Aabb::new(Vec3::zeros(), Vec3::zeros()))
            })?,
        };
        let set = initialize(&config, bbox)?;
        Ok(Self::with_set(config, views, set, BTreeMap::new(), 0))
    }

    /// Start from a given curve set instead of a random initialization.
    pub fn from_set(config: TrainConfig, views: Vec<(Camera, EdgeMap)>, set: CurveSet) -> Result<Self, TrainError> {
        config.validate().map_err(TrainError::Config)?;
        check_views(&views)?;
        set.validate(config.coupling.samples).map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(Self::with_set(config, views, set, BTreeMap::new(), 0))
    }

    fn with_set(
        config: TrainConfig,
        views: Vec<(Camera, EdgeMap)>,
        set: CurveSet,
        moments: BTreeMap<CurveId, Moments>,
        iteration: u64,
    ) -> Self {
        let mut coupling = config.coupling;
        coupling.tangent_epsilon *= set.scale();
        Self {
            config,
            set,
            views,
            moments,
            iteration,
            coupling,
        }
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    /// Coupling configuration with the tangent threshold in scene units.
    pub fn coupling(&self) -> &CouplingConfig {
        &self.coupling
    }

    /// View indices drawn at `iteration` (1-based): views are cycled in an
    /// order reshuffled every pass, seeded by the run seed and pass number.
    pub fn views_for(&self, iteration: u64) -> Vec<usize> {
        let n = self.views.len() as u64;
        let per = self.config.views_per_step as u64;
        (0..per)
            .map(|j| {
                let draw = (iteration - 1) * per + j;
                let epoch = draw / n;
                let mut order: Vec<usize> = (0..self.views.len()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                order.shuffle(&mut rng);
                order[(draw % n) as usize]
            })
            .collect()
    }

    /// Loss and mean gradient over `views` for the current curves.
    pub fn loss_and_grad(
        &self,
        views: &[usize],
        weights: &LossWeights,
    ) -> Result<(LossReport, Vec<CurveGrad>), TrainError> {
        let curves = &self.set.curves;
        let scene = CoupledScene::build(curves, &self.coupling);
        let mut report = LossReport::default();
        let mut grads: Vec<CurveGrad> = curves.iter().map(CurveGrad::zeros_like).collect();
        let inv = 1.0 / views.len() as f64;
        for &v in views {
            let (cam, truth) = &self.views[v];
            let out = render(&scene.gaussians, cam)?;
            let (r, g) = total_loss(
                &LossInputs {
                    render: &out,
                    truth,
                    curves,
                    scene: &scene,
                    coupling: &self.coupling,
                    scene_scale: self.set.scale(),
                },
                weights,
            )?;
            report.total += inv * r.total;
            report.edge += inv * r.edge;
            report.conn += inv * r.conn;
            report.smo += inv * r.smo;
            report.reg += inv * r.reg;
            report.mask += inv * r.mask;
            report.dssim += inv * r.dssim;
            for (acc, gk) in grads.iter_mut().zip(&g) {
                let mut scaled = gk.clone();
                scale_grad(&mut scaled, inv);
                acc.add_assign(&scaled);
            }
        }
        Ok((report, grads))
    }

    /// Render, back-propagate and apply one Adam update on `views`.
    pub fn train_step(&mut self, views: &[usize], flags: ScheduleFlags) -> Result<LossReport, TrainError> {
        let mut weights = self.config.weights;
        if !flags.mask_loss_active {
            weights.mask = 0.0;
        }
        let (report, grads) = self.loss_and_grad(views, &weights)?;
        let diag = self.set.scale();
        let floor = self.config.init.thickness_floor * diag;
        let lr = self.config.learning_rates;
        for (curve, g) in self.set.curves.iter_mut().zip(&grads) {
            let flat = flatten_grad(g);
            let rates = slot_rates(curve, &lr, diag, flags.opacity_learnable);
            let mom = self
                .moments
                .entry(curve.id)
                .or_insert_with(|| Moments::zeros(flat.len()));
            if mom.m.len() != flat.len() {
                *mom = Moments::zeros(flat.len());
            }
            mom.step += 1;
            let bc1 = 1.0 - BETA1.powi(mom.step as i32);
            let bc2 = 1.0 - BETA2.powi(mom.step as i32);
            let mut delta = vec![0.0; flat.len()];
            for k in 0..flat.len() {
                if rates[k] == 0.0 {
                    continue;
                }
                mom.m[k] = BETA1 * mom.m[k] + (1.0 - BETA1) * flat[k];
                mom.v[k] = BETA2 * mom.v[k] + (1.0 - BETA2) * flat[k] * flat[k];
                let mhat = mom.m[k] / bc1;
                let vhat = mom.v[k] / bc2;
                delta[k] = rates[k] * mhat / (vhat.sqrt() + ADAM_EPS);
            }
            apply_flat(curve, &delta);
            if flags.opacity_learnable {
                curve.opacity = curve.opacity.clamp(0.0, 1.0);
            }
            curve.thickness = curve.thickness.max(floor);
        }
        Ok(report)
    }

    /// One full iteration: update, then any topology operations due.
    pub fn step(&mut self) -> Result<IterationOutput, TrainError> {
        let it = self.iteration + 1;
        let flags = self.config.adaptive.schedule.flags(it);
        let views = self.views_for(it);
        let loss = self.train_step(&views, flags)?;
        let (events, _) = run_schedule(it, &mut self.set, &self.config.adaptive, &self.coupling);
        self.moments.retain(|id, _| self.set.curves.iter().any(|c| c.id == *id));
        self.iteration = it;
        Ok(IterationOutput {
            row: LogRow {
                iteration: it,
                loss,
                curves: self.set.len(),
                gaussians: self.set.gaussian_count(),
            },
            events,
        })
    }

    /// Remove curves below the opacity threshold; returns the events.
    pub fn final_prune(&mut self) -> Vec<TopologyEvent> {
        let tau = self.config.adaptive.prune_opacity;
        let events: Vec<TopologyEvent> = self
            .set
            .curves
            .iter()
            .filter(|c| c.opacity < tau)
            .map(|c| TopologyEvent {
                iteration: self.iteration,
                kind: EventKind::PruneOpacity,
                sources: vec![c.id],
                results: vec![],
            })
            .collect();
        let ids: Vec<CurveId> = events.iter().map(|e| e.sources[0]).collect();
        self.set.remove(&ids);
        self.moments.retain(|id, _| !ids.contains(id));
        events
    }

    pub fn optimizer_state(&self) -> OptimizerState {
        OptimizerState {
            iteration: self.iteration,
            seed: self.set.seed,
            next_id: self.set.next_id(),
            bbox: self.set.bbox,
            mask_logits: self
                .set
                .curves
                .iter()
                .map(|c| (c.id, c.mask_logits.clone()))
                .collect(),
            moments: self.moments.clone(),
        }
    }

    /// Write `curves_<it>.json` and `state_<it>.json` into `dir`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<PathBuf, TrainError> {
        self.set
            .validate(self.config.coupling.samples)
            .map_err(|e| TrainError::Checkpoint {
                path: dir.to_path_buf(),
                message: e.to_string(),
            })?;
        fs::create_dir_all(dir).map_err(|source| IoError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let (curves_path, state_path) = checkpoint_paths(dir, self.iteration);
        io::write_curves(&curves_path, &self.set.curves)?;
        let state = serde_json::to_string(&self.optimizer_state()).expect("state serializes");
        fs::write(&state_path, state).map_err(|source| IoError::Io {
            path: state_path,
            source,
        })?;
        Ok(curves_path)
    }

    /// Restore a run from the checkpoint written at `iteration`.
    pub fn resume(
        config: TrainConfig,
        views: Vec<(Camera, EdgeMap)>,
        dir: &Path,
        iteration: u64,
    ) -> Result<Self, TrainError> {
        config.validate().map_err(TrainError::Config)?;
        check_views(&views)?;
        let (curves_path, state_path) = checkpoint_paths(dir, iteration);
        let samples = config.coupling.samples;
        let mut curves = io::read_curves(&curves_path, samples)?;
        let text = fs::read_to_string(&state_path).map_err(|source| IoError::Io {
            path: state_path.clone(),
            source,
        })?;
        let bad = |message: String| TrainError::Checkpoint {
            path: state_path.clone(),
            message,
        };
        let state: OptimizerState = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if state.iteration != iteration {
            return Err(bad(format!("records iteration {}", state.iteration)));
        }
        for c in &mut curves {
            c.mask_logits = state
                .mask_logits
                .get(&c.id)
                .cloned()
                .ok_or_else(|| bad(format!("no mask logits for curve {}", c.id)))?;
        }
        let mut set = CurveSet::from_curves(curves, state.bbox, state.seed);
        set.reserve_ids_below(state.next_id);
        set.validate(samples).map_err(|e| bad(e.to_string()))?;
        Ok(Self::with_set(config, views, set, state.moments, iteration))
    }
}

fn scale_grad(g: &mut CurveGrad, s: f64) {
    for p in &mut g.control_points {
        *p *= s;
    }
    g.thickness *= s;
    g.opacity *= s;
    for l in &mut g.mask_logits {
        *l *= s;
    }
}

pub fn checkpoint_paths(dir: &Path, iteration: u64) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("curves_{iteration:06}.json")),
        dir.join(format!("state_{iteration:06}.json")),
    )
}

/// Result of an in-memory run.
pub struct TrainOutput {
    pub curves: CurveSet,
    pub log: Vec<LogRow>,
    pub events: Vec<TopologyEvent>,
    pub initial_ids: Vec<CurveId>,
}

/// Receives progress while a run is in flight.
pub trait TrainObserver {
    fn on_iteration(&mut self, _trainer: &Trainer, _out: &IterationOutput) -> Result<(), TrainError> {
        Ok(())
    }
}

/// Observer that does nothing.
pub struct Quiet;

impl TrainObserver for Quiet {}

/// Writes the CSV log, event log and periodic checkpoints into a directory.
pub struct RunWriter<W: Write> {
    pub log: W,
    pub events: W,
    pub checkpoint_dir: PathBuf,
}

impl<W: Write> RunWriter<W> {
    /// `header` is false when appending to the log of a resumed run.
    pub fn new(mut log: W, events: W, checkpoint_dir: PathBuf, header: bool) -> std::io::Result<Self> {
        if header {
            writeln!(log, "{}", LogRow::CSV_HEADER)?;
        }
        Ok(Self {
            log,
            events,
            checkpoint_dir,
        })
    }
}

impl<W: Write> TrainObserver for RunWriter<W> {
    fn on_iteration(&mut self, trainer: &Trainer, out: &IterationOutput) -> Result<(), TrainError> {
        let wrap = |source| {
            TrainError::Io(IoError::Io {
                path: PathBuf::from("<log>"),
                source,
            })
        };
        writeln!(self.log, "{}", out.row.csv()).map_err(wrap)?;
        crate::adaptive::write_events(&out.events, &mut self.events).map_err(wrap)?;
        if out.row.iteration % trainer.config.checkpoint_every == 0 {
            self.log.flush().map_err(wrap)?;
            self.events.flush().map_err(wrap)?;
            trainer.save_checkpoint(&self.checkpoint_dir)?;
        }
        Ok(())
    }
}

/// Run `trainer` to its configured iteration count, then prune faint curves.
pub fn run(trainer: &mut Trainer, observer: &mut dyn TrainObserver) -> Result<TrainOutput, TrainError> {
    let initial_ids = trainer.set.ids();
    let mut log = Vec::new();
    let mut events = Vec::new();
    while !trainer.is_done() {
        let out = trainer.step()?;
        observer.on_iteration(trainer, &out)?;
        if out.row.iteration % 1000 == 0 {
            log::info!(
                "iteration {}: loss {:.6} edge {:.6}, {} curves",
                out.row.iteration,
                out.row.loss.total,
                out.row.loss.edge,
                out.row.curves
            );
        }
        log.push(out.row);
        events.extend(out.events);
    }
    events.extend(trainer.final_prune());
    Ok(TrainOutput {
        curves: trainer.set.clone(),
        log,
        events,
        initial_ids,
    })
}

/// Full run from random initialization, in memory.
pub fn train(config: &TrainConfig, views: Vec<(Camera, EdgeMap)>) -> Result<TrainOutput, TrainError> {
    let mut trainer = Trainer::new(config.clone(), views)?;
    run(&mut trainer, &mut Quiet)
}
