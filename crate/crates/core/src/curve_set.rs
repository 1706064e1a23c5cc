//! The dynamic collection of curves under optimization.

use serde::{Deserialize, Serialize};

use crate::curve::{CurveError, CurveId, Geometry, ParametricCurve, Vec3};

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let mut b = Aabb::new(first, first);
        for p in it {
            b.min = b.min.inf(p);
            b.max = b.max.sup(p);
        }
        Some(b)
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) / 2.0
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    /// All three extents positive and finite.
    pub fn is_solid(&self) -> bool {
        self.extent().iter().all(|e| *e > 0.0 && e.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveSet {
    pub curves: Vec<ParametricCurve>,
    pub bbox: Aabb,
    pub seed: u64,
    next_id: u64,
}

impl CurveSet {
    pub fn new(bbox: Aabb, seed: u64) -> Self {
        Self {
            curves: Vec::new(),
            bbox,
            seed,
            next_id: 0,
        }
    }

    /// Wrap existing curves; fresh ids continue after the largest one present.
    pub fn from_curves(curves: Vec<ParametricCurve>, bbox: Aabb, seed: u64) -> Self {
        let next_id = curves.iter().map(|c| c.id.0 + 1).max().unwrap_or(0);
        Self {
            curves,
            bbox,
            seed,
            next_id,
        }
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    /// Never hand out an id below `id` (used when restoring checkpoints).
    pub fn reserve_ids_below(&mut self, id: u64) {
        self.next_id = self.next_id.max(id);
    }

    pub fn allocate_id(&mut self) -> CurveId {
        let id = CurveId(self.next_id);
        self.next_id += 1;
        id
    }

    /// Add a curve under a freshly allocated id and return that id.
    pub fn push_new(
        &mut self,
        geometry: Geometry,
        opacity: f64,
        thickness: f64,
        mask_logits: Vec<f64>,
    ) -> CurveId {
        let id = self.allocate_id();
        self.curves.push(ParametricCurve {
            id,
            geometry,
            opacity,
            thickness,
            mask_logits,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.curves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }

    pub fn scale(&self) -> f64 {
        self.bbox.diagonal()
    }

    pub fn get(&self, id: CurveId) -> Option<&ParametricCurve> {
        self.curves.iter().find(|c| c.id == id)
    }

    pub fn ids(&self) -> Vec<CurveId> {
        self.curves.iter().map(|c| c.id).collect()
    }

    pub fn remove(&mut self, ids: &[CurveId]) {
        self.curves.retain(|c| !ids.contains(&c.id));
    }

    pub fn gaussian_count(&self) -> usize {
        self.curves.iter().map(|c| c.mask_logits.len()).sum()
    }

    /// Every curve valid for `samples` Gaussians and all ids unique.
    pub fn validate(&self, samples: usize) -> Result<(), CurveError> {
        let mut ids: Vec<u64> = self.curves.iter().map(|c| c.id.0).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(CurveError::Invalid {
                id: w[0],
                reason: "duplicate curve id".into(),
            });
        }
        self.curves.iter().try_for_each(|c| c.validate(samples))
    }
}
