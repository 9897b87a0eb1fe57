//! Scripted sensor trajectories and the mapping objective they feed.

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::consensus::LocalObjective;
use crate::geometry::Vec2;
use crate::neural_map::NeuralMap;
use crate::objective::{grad_on_rays, GradReport, LossConfig};
use crate::rng::Rng;
use crate::scene2d::{capture_scan, ObservationBatch, ObservedRay, Scene, SceneError, SensorPose};

/// Range sensor intrinsics and noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    pub n_rays: usize,
    /// Angular span of the ray fan in radians.
    pub fov: f64,
    pub max_range: f64,
    pub noise_std: f64,
    pub scans_per_iteration: usize,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            n_rays: 48,
            fov: std::f64::consts::TAU,
            max_range: 0.35,
            noise_std: 0.002,
            scans_per_iteration: 1,
        }
    }
}

/// A closed loop through `waypoints`, traversed once every `steps_per_lap`
/// iterations at constant speed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub waypoints: Vec<Vec2>,
    pub steps_per_lap: usize,
}

/// Golden-angle heading increment, so successive scans interleave rays.
const HEADING_STEP: f64 = 2.399_963_229_728_653;

impl Trajectory {
    fn loop_length(&self) -> f64 {
        let n = self.waypoints.len();
        (0..n)
            .map(|k| self.waypoints[k].distance(self.waypoints[(k + 1) % n]))
            .sum()
    }

    /// Position after `fraction` of a lap.
    pub fn position_at(&self, fraction: f64) -> Vec2 {
        let n = self.waypoints.len();
        if n == 1 {
            return self.waypoints[0];
        }
        let total = self.loop_length();
        let mut s = fraction.rem_euclid(1.0) * total;
        for k in 0..n {
            let (a, b) = (self.waypoints[k], self.waypoints[(k + 1) % n]);
            let len = a.distance(b);
            if s <= len && len > 0.0 {
                return a.lerp(b, s / len);
            }
            s -= len;
        }
        self.waypoints[0]
    }

    /// Pose of scan `scan` out of `per_iteration` at iteration `t`.
    pub fn pose(&self, t: usize, scan: usize, per_iteration: usize, sensor: &SensorConfig) -> SensorPose {
        let step = t * per_iteration + scan;
        let fraction = step as f64 / (self.steps_per_lap * per_iteration) as f64;
        SensorPose {
            position: self.position_at(fraction),
            heading: step as f64 * HEADING_STEP,
            fov: sensor.fov,
            n_rays: sensor.n_rays,
            max_range: sensor.max_range,
        }
    }

    /// Check that the whole loop stays in free space, probing it densely.
    pub fn validate(&self, scene: &Scene) -> Result<(), String> {
        if self.waypoints.is_empty() {
            return Err("needs at least one waypoint".into());
        }
        if self.steps_per_lap == 0 {
            return Err("steps_per_lap must be at least 1".into());
        }
        const PROBES: usize = 512;
        for k in 0..PROBES {
            let p = self.position_at(k as f64 / PROBES as f64);
            if !scene.bounds.contains(p) {
                return Err(format!("passes outside the scene at ({:.3}, {:.3})", p.x, p.y));
            }
            let d = scene.gt_sdf(p);
            if d <= 0.0 {
                return Err(format!("passes through an obstacle at ({:.3}, {:.3})", p.x, p.y));
            }
        }
        Ok(())
    }
}

/// One agent's mapping loss: it scans the scene along its trajectory, keeps
/// every scan, and evaluates each gradient on a random subset of stored rays.
#[derive(Debug, Clone)]
pub struct MappingObjective {
    map: Arc<NeuralMap>,
    loss: LossConfig,
    scene: Arc<Scene>,
    sensor: SensorConfig,
    trajectory: Trajectory,
    store: Vec<ObservationBatch>,
}

impl MappingObjective {
    pub fn new(
        map: Arc<NeuralMap>,
        loss: LossConfig,
        scene: Arc<Scene>,
        sensor: SensorConfig,
        trajectory: Trajectory,
    ) -> Self {
        Self {
            map,
            loss,
            scene,
            sensor,
            trajectory,
            store: Vec::new(),
        }
    }

    pub fn store(&self) -> &[ObservationBatch] {
        &self.store
    }

    pub fn map(&self) -> &NeuralMap {
        &self.map
    }

    fn try_capture(&mut self, t: usize, rng: &mut Rng) -> Result<(), SceneError> {
        let tr = self.map.truncation();
        let m = self.map.grid.config().samples_per_ray;
        for scan in 0..self.sensor.scans_per_iteration {
            let pose = self
                .trajectory
                .pose(t, scan, self.sensor.scans_per_iteration, &self.sensor);
            let batch = capture_scan(&self.scene, &pose, self.sensor.noise_std, m, tr, rng)?;
            self.store.push(batch);
        }
        Ok(())
    }
}

impl LocalObjective for MappingObjective {
    fn dim(&self) -> usize {
        self.map.param_count()
    }

    fn capture(&mut self, iteration: usize, rng: &mut Rng) {
        // trajectories are validated against the scene before a run starts
        self.try_capture(iteration, rng)
            .expect("validated trajectory stays in free space");
    }

    /// Scan uniformly among stored scans, then a ray uniformly within it.
    fn evaluate(&self, theta: &[f64], rng: &mut Rng) -> GradReport {
        if self.store.is_empty() {
            return GradReport::from_gradient(0.0, vec![0.0; theta.len()]);
        }
        let rays: Vec<&ObservedRay> = (0..self.loss.rays_per_step)
            .map(|_| {
                let scan = &self.store[rng.random_range(0..self.store.len())];
                &scan.rays[rng.random_range(0..scan.rays.len())]
            })
            .collect();
        grad_on_rays(theta, &self.map, &rays, &self.loss, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Aabb;
    use crate::neural_map::{DecoderSpec, GridConfig};
    use crate::rng::derive;
    use crate::scene2d::Shape;

    fn square() -> Trajectory {
        Trajectory {
            waypoints: vec![
                Vec2::new(0.1, 0.1),
                Vec2::new(0.3, 0.1),
                Vec2::new(0.3, 0.3),
                Vec2::new(0.1, 0.3),
            ],
            steps_per_lap: 8,
        }
    }

    #[test]
    fn loop_positions() {
        let tr = square();
        assert_eq!(tr.position_at(0.0), Vec2::new(0.1, 0.1));
        let p = tr.position_at(0.125);
        assert_close!(p.x, 0.2, 1e-12);
        assert_close!(p.y, 0.1, 1e-12);
        let q = tr.position_at(1.5);
        assert_close!(q.x, 0.3, 1e-12);
        assert_close!(q.y, 0.3, 1e-12);
        let s = SensorConfig::default();
        assert_eq!(tr.pose(8, 0, 1, &s).position, tr.pose(0, 0, 1, &s).position);
    }

    #[test]
    fn validation_catches_obstacles() {
        let scene = Scene::new(
            Aabb::UNIT,
            vec![Shape::Circle {
                center: Vec2::new(0.2, 0.1),
                radius: 0.03,
            }],
            false,
        )
        .unwrap();
        assert!(square().validate(&scene).is_err());
        let mut ok = square();
        ok.waypoints = vec![Vec2::new(0.6, 0.6), Vec2::new(0.8, 0.8)];
        assert!(ok.validate(&scene).is_ok());
    }

    #[test]
    fn objective_accumulates_scans() {
        let scene = Arc::new(
            Scene::new(
                Aabb::UNIT,
                vec![Shape::Circle {
                    center: Vec2::new(0.6, 0.6),
                    radius: 0.1,
                }],
                false,
            )
            .unwrap(),
        );
        let map = Arc::new(NeuralMap::new(GridConfig::default(), DecoderSpec::default()).unwrap());
        let mut obj = MappingObjective::new(
            map.clone(),
            LossConfig::default(),
            scene,
            SensorConfig {
                scans_per_iteration: 2,
                ..SensorConfig::default()
            },
            square(),
        );
        let theta = map.zeros();
        let empty = obj.evaluate(&theta, &mut derive(0, &[]));
        assert!(empty.touched.iter().all(|t| !t));
        obj.capture(0, &mut derive(0, &[1]));
        obj.capture(1, &mut derive(0, &[2]));
        assert_eq!(obj.store().len(), 4);
        let a = obj.evaluate(&theta, &mut derive(3, &[]));
        let b = obj.evaluate(&theta, &mut derive(3, &[]));
        assert_eq!(a, b);
        assert!(a.touched.iter().any(|t| *t));
    }
}
