//! Ground-truth 2D scenes with closed-form signed distance fields, and a
//! simulated range sensor that scans them.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Aabb, Vec2};
use crate::rng::Rng;

/// Sphere tracing stops once the field is this close to zero.
pub const HIT_EPSILON: f64 = 1e-5;
/// Sphere tracing step budget.
pub const MAX_TRACE_STEPS: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("scene bounds are empty or non-finite")]
    InvalidBounds,
    #[error("shape {index} is not contained in the scene bounds")]
    ShapeOutOfBounds { index: usize },
    #[error("shape {index} has a non-positive size")]
    DegenerateShape { index: usize },
    #[error("scene has no shapes and walls are disabled")]
    EmptyScene,
    #[error("invalid sensor pose: {0}")]
    InvalidPose(&'static str),
    #[error("sensor at ({x:.4}, {y:.4}) is inside an obstacle (sdf = {sdf:.4})")]
    PoseInObstacle { x: f64, y: f64, sdf: f64 },
    #[error("malformed scene document: {0}")]
    Parse(String),
}

/// Primitive obstacle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "lowercase")]
pub enum Shape {
    Circle { center: Vec2, radius: f64 },
    Rectangle { center: Vec2, half_extents: Vec2 },
}

impl Shape {
    pub fn sdf(&self, p: Vec2) -> f64 {
        match *self {
            Shape::Circle { center, radius } => p.distance(center) - radius,
            Shape::Rectangle {
                center,
                half_extents,
            } => {
                let q = (p - center).abs() - half_extents;
                q.max_elem(0.0).norm() + q.x.max(q.y).min(0.0)
            }
        }
    }

    fn bounding_box(&self) -> Aabb {
        match *self {
            Shape::Circle { center, radius } => Aabb::new(
                center - Vec2::new(radius, radius),
                center + Vec2::new(radius, radius),
            ),
            Shape::Rectangle {
                center,
                half_extents,
            } => Aabb::new(center - half_extents, center + half_extents),
        }
    }

    fn is_degenerate(&self) -> bool {
        match *self {
            Shape::Circle { radius, .. } => !(radius > 0.0),
            Shape::Rectangle { half_extents, .. } => {
                !(half_extents.x > 0.0 && half_extents.y > 0.0)
            }
        }
    }
}

/// A bounded 2D world: a list of solid primitives and optionally the
/// boundary of the bounding box itself as a wall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub bounds: Aabb,
    pub shapes: Vec<Shape>,
    #[serde(default)]
    pub walls: bool,
}

impl Scene {
    pub fn new(bounds: Aabb, shapes: Vec<Shape>, walls: bool) -> Result<Self, SceneError> {
        let scene = Self {
            bounds,
            shapes,
            walls,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if !self.bounds.is_valid() {
            return Err(SceneError::InvalidBounds);
        }
        if self.shapes.is_empty() && !self.walls {
            return Err(SceneError::EmptyScene);
        }
        for (index, shape) in self.shapes.iter().enumerate() {
            if shape.is_degenerate() {
                return Err(SceneError::DegenerateShape { index });
            }
            let bb = shape.bounding_box();
            if !(self.bounds.contains(bb.min) && self.bounds.contains(bb.max)) {
                return Err(SceneError::ShapeOutOfBounds { index });
            }
        }
        Ok(())
    }

    /// Parse and validate a scene from its JSON description.
    pub fn from_json(text: &str) -> Result<Self, SceneError> {
        let scene: Scene =
            serde_json::from_str(text).map_err(|e| SceneError::Parse(e.to_string()))?;
        scene.validate()?;
        Ok(scene)
    }

    /// Exact signed distance to the nearest surface; negative inside solids.
    pub fn gt_sdf(&self, p: Vec2) -> f64 {
        let mut d = self
            .shapes
            .iter()
            .map(|s| s.sdf(p))
            .fold(f64::INFINITY, f64::min);
        if self.walls {
            d = d.min(self.bounds.interior_distance(p));
        }
        d
    }

    /// Distance along `direction` from `origin` to the first surface, or
    /// `None` when nothing is hit within `max_range`.
    pub fn trace(&self, origin: Vec2, direction: Vec2, max_range: f64) -> Option<f64> {
        let mut t = 0.0;
        let mut last = f64::INFINITY;
        for _ in 0..MAX_TRACE_STEPS {
            let d = self.gt_sdf(origin + direction * t);
            last = d;
            if d.abs() < HIT_EPSILON {
                return Some(t);
            }
            t += d;
            if t >= max_range {
                return None;
            }
        }
        // Grazing rays can exhaust the budget while creeping along a surface.
        (last.abs() < 1e-3 && t < max_range).then_some(t)
    }
}

/// A 2D stand-in for a camera pose plus intrinsics: position, heading and a
/// fan of `n_rays` rays spread evenly over `fov`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorPose {
    pub position: Vec2,
    pub heading: f64,
    pub fov: f64,
    pub n_rays: usize,
    pub max_range: f64,
}

impl SensorPose {
    pub fn validate(&self) -> Result<(), SceneError> {
        if !(self.fov > 0.0 && self.fov <= std::f64::consts::TAU) {
            return Err(SceneError::InvalidPose("fov must lie in (0, 2π]"));
        }
        if self.n_rays == 0 {
            return Err(SceneError::InvalidPose("n_rays must be at least 1"));
        }
        if !(self.max_range > 0.0) {
            return Err(SceneError::InvalidPose("max_range must be positive"));
        }
        Ok(())
    }

    /// Unit direction of ray `k`, centred in its angular bin.
    pub fn ray_direction(&self, k: usize) -> Vec2 {
        let step = self.fov / self.n_rays as f64;
        Vec2::from_angle(self.heading - 0.5 * self.fov + (k as f64 + 0.5) * step)
    }
}

/// Which supervision a sample point receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    NearSurface,
    FreeSpace,
}

/// One point along a ray with its truncated SDF label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub distance: f64,
    pub target_sdf: f64,
    pub regime: Regime,
}

/// A single depth measurement and its labelled samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedRay {
    pub origin: Vec2,
    pub direction: Vec2,
    pub measured_depth: f64,
    pub hit: bool,
    pub max_range: f64,
    pub samples: Vec<Sample>,
}

impl ObservedRay {
    pub fn point_at(&self, distance: f64) -> Vec2 {
        self.origin + self.direction * distance
    }
}

/// All rays of one scan, or a minibatch drawn from many scans.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObservationBatch {
    pub rays: Vec<ObservedRay>,
}

impl ObservationBatch {
    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn sample_count(&self) -> usize {
        self.rays.iter().map(|r| r.samples.len()).sum()
    }
}

/// Stratified distances on `(0, far]` with truncated-SDF labels.
///
/// `gt_depth` is `None` for rays that saw nothing within range; all of their
/// samples are free space.
pub fn sample_along_ray(
    m: usize,
    tr: f64,
    gt_depth: Option<f64>,
    max_range: f64,
    rng: &mut Rng,
) -> Vec<Sample> {
    assert!(m >= 2, "need at least two samples per ray");
    assert!(tr > 0.0, "truncation must be positive");
    let far = match gt_depth {
        Some(d) => (d + tr).min(max_range),
        None => max_range,
    };
    let bin = far / m as f64;
    (0..m)
        .map(|k| {
            // jitter in (0, 1] keeps every distance strictly positive and
            // strictly increasing across bins
            let jitter = 1.0 - rng.random::<f64>();
            let distance = bin * (k as f64 + jitter);
            label_sample(distance, tr, gt_depth)
        })
        .collect()
}

/// Label a sample at `distance` along a ray whose true depth is `gt_depth`.
pub fn label_sample(distance: f64, tr: f64, gt_depth: Option<f64>) -> Sample {
    match gt_depth {
        Some(depth) => {
            let gap = depth - distance;
            Sample {
                distance,
                target_sdf: gap.clamp(-tr, tr),
                regime: if gap.abs() < tr {
                    Regime::NearSurface
                } else {
                    Regime::FreeSpace
                },
            }
        }
        None => Sample {
            distance,
            target_sdf: tr,
            regime: Regime::FreeSpace,
        },
    }
}

/// Scan `scene` from `pose`.
///
/// Depths come from sphere tracing the exact field; Gaussian noise is added
/// to the measured depth of hits only. Sample labels use the noise-free depth.
pub fn capture_scan(
    scene: &Scene,
    pose: &SensorPose,
    noise_std: f64,
    samples_per_ray: usize,
    tr: f64,
    rng: &mut Rng,
) -> Result<ObservationBatch, SceneError> {
    pose.validate()?;
    let sdf = scene.gt_sdf(pose.position);
    if sdf <= 0.0 {
        return Err(SceneError::PoseInObstacle {
            x: pose.position.x,
            y: pose.position.y,
            sdf,
        });
    }
    let noise = (noise_std > 0.0).then(|| Normal::new(0.0, noise_std).expect("finite std"));
    let rays = (0..pose.n_rays)
        .map(|k| {
            let direction = pose.ray_direction(k);
            let gt_depth = scene.trace(pose.position, direction, pose.max_range);
            let measured_depth = match (gt_depth, &noise) {
                (Some(d), Some(n)) => (d + n.sample(rng)).max(1e-6),
                (Some(d), None) => d,
                (None, _) => pose.max_range,
            };
            let samples = sample_along_ray(samples_per_ray, tr, gt_depth, pose.max_range, rng);
            ObservedRay {
                origin: pose.position,
                direction,
                measured_depth,
                hit: gt_depth.is_some(),
                max_range: pose.max_range,
                samples,
            }
        })
        .collect();
    Ok(ObservationBatch { rays })
}
