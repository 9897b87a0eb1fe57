//! Per-agent mapping loss over a minibatch of labelled rays, its analytic
//! gradient, and the touched-parameter mask used for uncertainty counting.
//!
//! ```text
//! L = λ_d   · mean_hit_rays   (d̂ − d_meas)²
//!   + λ_sdf · mean_near       (s − target)²
//!   + λ_fs  · mean_free       (s − tr)²
//!   + λ_sm  · mean_probes     Σ_ch (θ_a,ch − θ_b,ch)²
//! ```
//!
//! Smoothness probes are adjacent vertex pairs on the finest level, taken
//! from cells that contain a sample point of the batch, so the gradient
//! support never leaves the neighbourhood of the observations.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neural_map::{ray_weight, ray_weight_derivative, NeuralMap, SparseGrad, WEIGHT_SUM_FLOOR};
use crate::rng::Rng;
use crate::scene2d::{ObservationBatch, ObservedRay, Regime};

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("observation batch is empty")]
    EmptyBatch,
    #[error("parameter vector has length {got}, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub depth_weight: f64,
    pub sdf_weight: f64,
    pub free_space_weight: f64,
    pub smooth_weight: f64,
    /// Smoothness probes drawn per evaluation.
    pub smooth_samples: usize,
    /// Rays drawn from the observation store per SGD step.
    pub rays_per_step: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            depth_weight: 0.1,
            sdf_weight: 10.0,
            free_space_weight: 1.0,
            smooth_weight: 0.01,
            smooth_samples: 32,
            rays_per_step: 64,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), String> {
        let weights = [
            ("depth_weight", self.depth_weight),
            ("sdf_weight", self.sdf_weight),
            ("free_space_weight", self.free_space_weight),
            ("smooth_weight", self.smooth_weight),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(format!("{name} must be a finite non-negative number"));
            }
        }
        if self.rays_per_step == 0 {
            return Err("rays_per_step must be at least 1".into());
        }
        Ok(())
    }
}

/// Loss value, dense gradient and the set of parameters it touched.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub loss: f64,
    pub gradient: Vec<f64>,
    pub touched: Vec<bool>,
}

impl GradReport {
    pub fn from_gradient(loss: f64, gradient: Vec<f64>) -> Self {
        let touched = gradient.iter().map(|g| *g != 0.0).collect();
        Self {
            loss,
            gradient,
            touched,
        }
    }
}

/// A pair of adjacent finest-level vertices (channel-0 indices).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SmoothProbe {
    pub a: usize,
    pub b: usize,
}

/// Unweighted per-term means, for inspection and tests.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub depth: f64,
    pub sdf: f64,
    pub free_space: f64,
    pub smooth: f64,
}

impl LossTerms {
    pub fn weighted(&self, cfg: &LossConfig) -> f64 {
        cfg.depth_weight * self.depth
            + cfg.sdf_weight * self.sdf
            + cfg.free_space_weight * self.free_space
            + cfg.smooth_weight * self.smooth
    }
}

/// Draw `count` smoothness probes from cells that contain batch samples.
pub fn draw_smooth_probes(
    map: &NeuralMap,
    rays: &[&ObservedRay],
    count: usize,
    rng: &mut Rng,
) -> Vec<SmoothProbe> {
    let grid = &map.grid;
    let finest = grid.levels() - 1;
    let res = grid.resolution(finest);
    let f = grid.feature_dim();
    let row = res + 1;
    let base = grid.level_offset(finest);
    let vertex = |ix: usize, iy: usize| base + (iy * row + ix) * f;
    if rays.iter().all(|r| r.samples.is_empty()) {
        return Vec::new();
    }
    let mut probes = Vec::with_capacity(count);
    while probes.len() < count {
        let ray = rays[rng.random_range(0..rays.len())];
        if ray.samples.is_empty() {
            continue;
        }
        let sample = ray.samples[rng.random_range(0..ray.samples.len())];
        let (ix, iy) = grid.cell_of(finest, ray.point_at(sample.distance));
        let (a, b) = match rng.random_range(0..4u8) {
            0 => (vertex(ix, iy), vertex(ix + 1, iy)),
            1 => (vertex(ix, iy + 1), vertex(ix + 1, iy + 1)),
            2 => (vertex(ix, iy), vertex(ix, iy + 1)),
            _ => (vertex(ix + 1, iy), vertex(ix + 1, iy + 1)),
        };
        probes.push(SmoothProbe { a, b });
    }
    probes
}

struct Accumulator<'a> {
    gradient: Option<&'a mut [f64]>,
}

impl Accumulator<'_> {
    #[inline]
    fn add(&mut self, sparse: &SparseGrad, scale: f64) {
        if let Some(g) = self.gradient.as_deref_mut() {
            if scale != 0.0 {
                for &(k, v) in sparse {
                    g[k] += scale * v;
                }
            }
        }
    }
}

/// Evaluate the loss terms (and optionally accumulate the weighted gradient)
/// on a fixed set of rays and probes. Deterministic.
pub fn evaluate_terms(
    theta: &[f64],
    map: &NeuralMap,
    rays: &[&ObservedRay],
    probes: &[SmoothProbe],
    cfg: &LossConfig,
    gradient: Option<&mut [f64]>,
) -> LossTerms {
    let tr = map.truncation();
    let mut acc = Accumulator { gradient };

    let hit_rays = rays.iter().filter(|r| r.hit).count();
    let (mut near, mut free) = (0usize, 0usize);
    for r in rays {
        for s in &r.samples {
            match s.regime {
                Regime::NearSurface => near += 1,
                Regime::FreeSpace => free += 1,
            }
        }
    }
    let depth_scale = if hit_rays > 0 {
        cfg.depth_weight / hit_rays as f64
    } else {
        0.0
    };
    let sdf_scale = if near > 0 {
        cfg.sdf_weight / near as f64
    } else {
        0.0
    };
    let free_scale = if free > 0 {
        cfg.free_space_weight / free as f64
    } else {
        0.0
    };

    let mut terms = LossTerms::default();
    let mut values: Vec<(f64, SparseGrad)> = Vec::new();
    for ray in rays {
        values.clear();
        for s in &ray.samples {
            values.push(map.sdf_and_grad(theta, ray.point_at(s.distance)));
        }
        for (sample, (sdf, grad)) in ray.samples.iter().zip(&values) {
            match sample.regime {
                Regime::NearSurface => {
                    let r = sdf - sample.target_sdf;
                    terms.sdf += r * r;
                    acc.add(grad, 2.0 * sdf_scale * r);
                }
                Regime::FreeSpace => {
                    let r = sdf - tr;
                    terms.free_space += r * r;
                    acc.add(grad, 2.0 * free_scale * r);
                }
            }
        }
        if ray.hit && !ray.samples.is_empty() {
            let mut num = 0.0;
            let mut den = 0.0;
            for (sample, (sdf, _)) in ray.samples.iter().zip(&values) {
                let w = ray_weight(*sdf, tr);
                num += w * sample.distance;
                den += w;
            }
            let floored = den < WEIGHT_SUM_FLOOR;
            let den = den.max(WEIGHT_SUM_FLOOR);
            let rendered = num / den;
            let r = rendered - ray.measured_depth;
            terms.depth += r * r;
            let outer = 2.0 * depth_scale * r;
            if outer != 0.0 {
                for (sample, (sdf, grad)) in ray.samples.iter().zip(&values) {
                    let dw = ray_weight_derivative(*sdf, tr);
                    // with the floor active the denominator is constant
                    let d_rendered = if floored {
                        dw * sample.distance / den
                    } else {
                        dw * (sample.distance - rendered) / den
                    };
                    acc.add(grad, outer * d_rendered);
                }
            }
        }
    }
    if hit_rays > 0 {
        terms.depth /= hit_rays as f64;
    }
    if near > 0 {
        terms.sdf /= near as f64;
    }
    if free > 0 {
        terms.free_space /= free as f64;
    }

    if !probes.is_empty() {
        let f = map.grid.feature_dim();
        let smooth_scale = cfg.smooth_weight / probes.len() as f64;
        for p in probes {
            for ch in 0..f {
                let d = theta[p.a + ch] - theta[p.b + ch];
                terms.smooth += d * d;
                if let Some(g) = acc.gradient.as_deref_mut() {
                    if smooth_scale != 0.0 && d != 0.0 {
                        g[p.a + ch] += 2.0 * smooth_scale * d;
                        g[p.b + ch] -= 2.0 * smooth_scale * d;
                    }
                }
            }
        }
        terms.smooth /= probes.len() as f64;
    }
    terms
}

fn check(theta: &[f64], map: &NeuralMap, batch: &ObservationBatch) -> Result<(), ObjectiveError> {
    if batch.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    if theta.len() != map.param_count() {
        return Err(ObjectiveError::LengthMismatch {
            expected: map.param_count(),
            got: theta.len(),
        });
    }
    Ok(())
}

/// Loss of `batch` at `theta`; smoothness probes are drawn from `rng`.
pub fn objective(
    theta: &[f64],
    map: &NeuralMap,
    batch: &ObservationBatch,
    cfg: &LossConfig,
    rng: &mut Rng,
) -> Result<f64, ObjectiveError> {
    check(theta, map, batch)?;
    let rays: Vec<&ObservedRay> = batch.rays.iter().collect();
    let probes = draw_smooth_probes(map, &rays, cfg.smooth_samples, rng);
    Ok(evaluate_terms(theta, map, &rays, &probes, cfg, None).weighted(cfg))
}

/// Loss, gradient and touched mask of `batch` at `theta`. Consumes `rng`
/// exactly as [`objective`] does, so equal seeds give equal probes.
pub fn objective_grad(
    theta: &[f64],
    map: &NeuralMap,
    batch: &ObservationBatch,
    cfg: &LossConfig,
    rng: &mut Rng,
) -> Result<GradReport, ObjectiveError> {
    check(theta, map, batch)?;
    let rays: Vec<&ObservedRay> = batch.rays.iter().collect();
    Ok(grad_on_rays(theta, map, &rays, cfg, rng))
}

pub(crate) fn grad_on_rays(
    theta: &[f64],
    map: &NeuralMap,
    rays: &[&ObservedRay],
    cfg: &LossConfig,
    rng: &mut Rng,
) -> GradReport {
    let probes = draw_smooth_probes(map, rays, cfg.smooth_samples, rng);
    let mut gradient = vec![0.0; theta.len()];
    let terms = evaluate_terms(theta, map, rays, &probes, cfg, Some(&mut gradient));
    GradReport::from_gradient(terms.weighted(cfg), gradient)
}
