//! Reconstruction quality of a 2D field and consensus diagnostics.
//!
//! A field's surface is its zero contour, extracted with marching squares on a
//! uniform pixel grid and resampled uniformly by arc length. Surfaces are then
//! compared with nearest-neighbour distances.

use serde::{Deserialize, Serialize};

use crate::geometry::{Aabb, Vec2};
use crate::par;

/// Default number of arc-length samples per zero set.
pub const DEFAULT_SAMPLES: usize = 500;
/// Default completion threshold in scene units.
pub const DEFAULT_THRESHOLD: f64 = 0.02;

/// Field values on the `(res + 1)²` vertices of a uniform grid over `bounds`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSamples {
    pub bounds: Aabb,
    pub resolution: usize,
    /// Row-major, `values[iy * (res + 1) + ix]`.
    pub values: Vec<f64>,
}

impl FieldSamples {
    pub fn sample<F>(bounds: Aabb, resolution: usize, parallel: bool, field: F) -> Self
    where
        F: Fn(Vec2) -> f64 + Sync + Send,
    {
        let side = resolution + 1;
        let values = par::map_range(side * side, parallel, |k| {
            field(vertex(bounds, resolution, k % side, k / side))
        });
        Self {
            bounds,
            resolution,
            values,
        }
    }

    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * (self.resolution + 1) + ix]
    }

    pub fn position(&self, ix: usize, iy: usize) -> Vec2 {
        vertex(self.bounds, self.resolution, ix, iy)
    }
}

fn vertex(bounds: Aabb, res: usize, ix: usize, iy: usize) -> Vec2 {
    let e = bounds.extent();
    Vec2::new(
        bounds.min.x + e.x * ix as f64 / res as f64,
        bounds.min.y + e.y * iy as f64 / res as f64,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: Vec2,
    pub b: Vec2,
}

impl Segment {
    pub fn length(&self) -> f64 {
        self.a.distance(self.b)
    }

    pub fn distance_to(&self, p: Vec2) -> f64 {
        let d = self.b - self.a;
        let len2 = d.dot(d);
        let t = if len2 > 0.0 {
            ((p - self.a).dot(d) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        p.distance(self.a.lerp(self.b, t))
    }
}

fn inside(v: f64) -> bool {
    // a corner that is exactly zero counts as outside
    v < 0.0
}

/// Marching squares over `samples`. `center` is queried only for saddle cells
/// and decides whether the two inside corners connect through the middle.
pub fn marching_squares<F>(samples: &FieldSamples, center: F) -> Vec<Segment>
where
    F: Fn(Vec2) -> f64,
{
    let res = samples.resolution;
    let mut out = Vec::new();
    for iy in 0..res {
        for ix in 0..res {
            // counter-clockwise from the lower-left corner
            let idx = [(ix, iy), (ix + 1, iy), (ix + 1, iy + 1), (ix, iy + 1)];
            let v = idx.map(|(x, y)| samples.at(x, y));
            let p = idx.map(|(x, y)| samples.position(x, y));
            let crossing = |e: usize| -> Option<Vec2> {
                let (a, b) = (e, (e + 1) % 4);
                if inside(v[a]) == inside(v[b]) {
                    return None;
                }
                Some(p[a].lerp(p[b], v[a] / (v[a] - v[b])))
            };
            let c: [Option<Vec2>; 4] = [crossing(0), crossing(1), crossing(2), crossing(3)];
            let hits: Vec<usize> = (0..4).filter(|&e| c[e].is_some()).collect();
            match hits.len() {
                0 => {}
                2 => out.push(Segment {
                    a: c[hits[0]].unwrap(),
                    b: c[hits[1]].unwrap(),
                }),
                4 => {
                    let mid = p[0].lerp(p[2], 0.5);
                    let joined = inside(center(mid)) == inside(v[0]);
                    // edge e runs from corner e to corner e+1
                    let pairs = if joined {
                        // corners 0 and 2 connect; cut off corners 1 and 3
                        [(0, 1), (2, 3)]
                    } else {
                        [(3, 0), (1, 2)]
                    };
                    for (e1, e2) in pairs {
                        out.push(Segment {
                            a: c[e1].unwrap(),
                            b: c[e2].unwrap(),
                        });
                    }
                }
                _ => unreachable!("a closed cell boundary has an even number of sign changes"),
            }
        }
    }
    out
}

/// Points spread uniformly by arc length over a contour.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ZeroSet {
    pub points: Vec<Vec2>,
}

impl ZeroSet {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    /// `count` points at the midpoints of equal arc-length bins over all
    /// segments taken in order.
    pub fn from_segments(segments: &[Segment], count: usize) -> Self {
        let total: f64 = segments.iter().map(Segment::length).sum();
        if segments.is_empty() || total <= 0.0 || count == 0 {
            return Self::default();
        }
        let mut points = Vec::with_capacity(count);
        let mut seg = 0;
        let mut start = 0.0;
        for k in 0..count {
            let s = (k as f64 + 0.5) * total / count as f64;
            while seg + 1 < segments.len() && start + segments[seg].length() < s {
                start += segments[seg].length();
                seg += 1;
            }
            let len = segments[seg].length();
            let t = if len > 0.0 {
                ((s - start) / len).clamp(0.0, 1.0)
            } else {
                0.0
            };
            points.push(segments[seg].a.lerp(segments[seg].b, t));
        }
        Self { points }
    }
}

/// Sample `field` on a `resolution²` pixel grid over `bounds`, extract its
/// zero contour and resample it with `samples` points.
pub fn extract_zero_set<F>(
    field: F,
    bounds: Aabb,
    resolution: usize,
    samples: usize,
    parallel: bool,
) -> ZeroSet
where
    F: Fn(Vec2) -> f64 + Sync + Send,
{
    let grid = FieldSamples::sample(bounds, resolution, parallel, &field);
    ZeroSet::from_segments(&marching_squares(&grid, &field), samples)
}

fn nearest_distances(from: &[Vec2], to: &[Vec2], parallel: bool) -> Vec<f64> {
    par::map_slice(from, parallel, |p| {
        to.iter()
            .map(|q| p.distance(*q))
            .fold(f64::INFINITY, f64::min)
    })
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean distance from each predicted point to the nearest ground-truth point.
/// `None` when either set is empty.
pub fn artifacts(pred: &ZeroSet, gt: &ZeroSet, parallel: bool) -> Option<f64> {
    if pred.is_empty() || gt.is_empty() {
        return None;
    }
    Some(mean(&nearest_distances(&pred.points, &gt.points, parallel)))
}

/// Mean distance from each ground-truth point to the nearest predicted point.
/// `None` when either set is empty.
pub fn holes(pred: &ZeroSet, gt: &ZeroSet, parallel: bool) -> Option<f64> {
    artifacts(gt, pred, parallel)
}

/// Percentage of ground-truth points within `threshold` of a predicted point.
/// 0 for an empty prediction, 100 for an empty ground truth.
pub fn completion_ratio(pred: &ZeroSet, gt: &ZeroSet, threshold: f64, parallel: bool) -> f64 {
    if gt.is_empty() {
        return 100.0;
    }
    if pred.is_empty() {
        return 0.0;
    }
    let d = nearest_distances(&gt.points, &pred.points, parallel);
    100.0 * d.iter().filter(|&&x| x <= threshold).count() as f64 / d.len() as f64
}

/// Largest pairwise `‖Θ_i − Θ_j‖_∞`.
pub fn disagreement(states: &[&[f64]]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, a) in states.iter().enumerate() {
        for b in &states[i + 1..] {
            for (x, y) in a.iter().zip(b.iter()) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub artifacts: Option<f64>,
    pub holes: Option<f64>,
    pub completion: f64,
    pub disagreement: f64,
}

/// Surface metrics of one prediction against a ground-truth set.
pub fn compare(pred: &ZeroSet, gt: &ZeroSet, threshold: f64, disagreement: f64, parallel: bool) -> MetricReport {
    MetricReport {
        artifacts: artifacts(pred, gt, parallel),
        holes: holes(pred, gt, parallel),
        completion: completion_ratio(pred, gt, threshold, parallel),
        disagreement,
    }
}
