//! Built-in experiment configurations.

use crate::consensus::{ConsensusConfig, OptimizerKind, WeightMode};
use crate::geometry::{Aabb, Vec2};
use crate::network_sim::{LinkPolicy, TopologyKind};
use crate::neural_map::{DecoderSpec, GridConfig};
use crate::objective::LossConfig;
use crate::scene2d::{Scene, Shape};
use crate::uncertainty::WeightBounds;

use super::{
    EvalConfig, ExperimentConfig, NetworkConfig, SensorConfig, Sweep, Trajectory, TrajectorySpec,
};

pub const PRESET_NAMES: [&str; 3] = ["split-room", "success-sweep", "agent-scaling"];

fn circle(x: f64, y: f64, r: f64) -> Shape {
    Shape::Circle {
        center: Vec2::new(x, y),
        radius: r,
    }
}

fn rect(x: f64, y: f64, hx: f64, hy: f64) -> Shape {
    Shape::Rectangle {
        center: Vec2::new(x, y),
        half_extents: Vec2::new(hx, hy),
    }
}

fn scene(shapes: Vec<Shape>) -> Scene {
    Scene {
        bounds: Aabb::UNIT,
        shapes,
        walls: false,
    }
}

/// A small penalty keeps the dual from winding up while copies are stale for
/// many iterations. Every vertex ends up seen by some agent, so the affine
/// weight map sends unseen vertices below `lower`; the floor holds them there.
fn consensus() -> ConsensusConfig {
    ConsensusConfig {
        optimizer: OptimizerKind::Ramen,
        rho: 0.01,
        inner_steps: 5,
        lr: 0.1,
        weights: WeightMode::Uncertainty(WeightBounds {
            floor: 0.2,
            ..WeightBounds::default()
        }),
        ..ConsensusConfig::default()
    }
}

fn base(name: &str, scene: Scene, n_agents: usize, trajectories: TrajectorySpec, network: NetworkConfig) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        scene,
        n_agents,
        trajectories,
        sensor: SensorConfig::default(),
        consensus: consensus(),
        compare: vec![OptimizerKind::Ramen, OptimizerKind::Cadmm],
        grid: GridConfig::default(),
        decoder: DecoderSpec::default(),
        loss: LossConfig::default(),
        network,
        sweep: None,
        iterations: 600,
        trials: 5,
        seed: 0,
        eval: EvalConfig::default(),
    }
}

/// Two rooms separated by a full-height wall; each agent only ever sees its
/// own room and the two exchange maps once every 30 iterations.
fn split_room() -> ExperimentConfig {
    // the right room is the left one turned half a revolution
    let scene = scene(vec![
        rect(0.5, 0.5, 0.03, 0.5),
        circle(0.24, 0.28, 0.08),
        rect(0.22, 0.72, 0.09, 0.06),
        circle(0.76, 0.72, 0.08),
        rect(0.78, 0.28, 0.09, 0.06),
    ]);
    let lap = |x0: f64, x1: f64| Trajectory {
        waypoints: vec![
            Vec2::new(x0, 0.07),
            Vec2::new(x1, 0.07),
            Vec2::new(x1, 0.93),
            Vec2::new(x0, 0.93),
        ],
        steps_per_lap: 100,
    };
    base(
        "split-room",
        scene,
        2,
        TrajectorySpec::Explicit(vec![lap(0.07, 0.41), lap(0.59, 0.93)]),
        NetworkConfig {
            topology: TopologyKind::Full,
            policy: LinkPolicy::Periodic { period: 30 },
        },
    )
}

/// Three agents on a fully connected graph, each patrolling one vertical
/// strip, swept over message success rates.
fn success_sweep() -> ExperimentConfig {
    let scene = scene(vec![
        circle(0.167, 0.3, 0.06),
        rect(0.17, 0.75, 0.05, 0.05),
        circle(0.333, 0.75, 0.04),
        circle(0.5, 0.25, 0.05),
        rect(0.5, 0.65, 0.06, 0.08),
        rect(0.667, 0.2, 0.035, 0.05),
        circle(0.833, 0.4, 0.06),
        circle(0.83, 0.78, 0.05),
    ]);
    let mut cfg = base(
        "success-sweep",
        scene,
        3,
        TrajectorySpec::Strips {
            margin: 0.07,
            steps_per_lap: 100,
        },
        NetworkConfig {
            topology: TopologyKind::Full,
            policy: LinkPolicy::Lossy { drop_prob: 0.0 },
        },
    );
    // lossy links leave copies stale for a few iterations, not tens
    cfg.consensus.rho = 0.3;
    cfg.sweep = Some(Sweep::SuccessRates(vec![1.0, 0.8, 0.5, 0.2]));
    cfg
}

/// Chains of four to six agents at a 50% success rate.
fn agent_scaling() -> ExperimentConfig {
    let scene = scene(vec![
        circle(0.085, 0.3, 0.03),
        rect(0.333, 0.6, 0.025, 0.1),
        circle(0.333, 0.2, 0.025),
        circle(0.5, 0.35, 0.035),
        rect(0.5, 0.75, 0.03, 0.05),
        circle(0.675, 0.55, 0.02),
        rect(0.915, 0.7, 0.025, 0.08),
    ]);
    let mut cfg = base(
        "agent-scaling",
        scene,
        4,
        TrajectorySpec::Strips {
            margin: 0.04,
            steps_per_lap: 100,
        },
        NetworkConfig {
            topology: TopologyKind::Chain,
            policy: LinkPolicy::from_success_rate(0.5),
        },
    );
    cfg.consensus.rho = 0.3;
    cfg.sweep = Some(Sweep::AgentCounts(vec![4, 5, 6]));
    cfg
}

/// Look up a preset by name.
pub fn preset(name: &str) -> Option<ExperimentConfig> {
    match name {
        "split-room" => Some(split_room()),
        "success-sweep" => Some(success_sweep()),
        "agent-scaling" => Some(agent_scaling()),
        _ => None,
    }
}
