//! Experiment orchestration: configuration, presets, seeded trial loops and
//! output files.

mod mapping;
mod output;
mod presets;
pub mod svg;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consensus::{ConsensusConfig, OptimizerKind};
use crate::engine::{Engine, EngineOptions};
use crate::geometry::Vec2;
use crate::metrics::{self, MetricReport, ZeroSet};
use crate::network_sim::{topology, LinkPolicy, TopologyKind, TraceEntry, WireLayout};
use crate::neural_map::{DecoderSpec, GridConfig, NeuralMap};
use crate::objective::LossConfig;
use crate::par;
use crate::scene2d::Scene;

pub use mapping::{MappingObjective, SensorConfig, Trajectory};
pub use output::{aggregate, emit_outputs, metrics_csv, summary_rows, Aggregate, SummaryRow};
pub use presets::{preset, PRESET_NAMES};

/// Every problem found while validating a config, with its field path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub problems: Vec<(String, String)>,
}

impl ConfigError {
    fn single(path: &str, msg: impl Into<String>) -> Self {
        Self {
            problems: vec![(path.into(), msg.into())],
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid experiment config:")?;
        for (path, msg) in &self.problems {
            writeln!(f, "  {path}: {msg}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

/// How agents' trajectories are laid out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectorySpec {
    /// One explicit loop per agent.
    Explicit(Vec<Trajectory>),
    /// Agent `k` of `n` patrols a rectangle inside the `k`-th vertical strip.
    Strips { margin: f64, steps_per_lap: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub topology: TopologyKind,
    pub policy: LinkPolicy,
}

/// Dimension swept across cells of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    SuccessRates(Vec<f64>),
    AgentCounts(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Pixels per axis for extracting predicted surfaces.
    pub resolution: usize,
    /// Pixels per axis for the ground-truth surface.
    pub gt_resolution: usize,
    pub samples: usize,
    pub threshold: f64,
    /// Evaluate every this many iterations (and always at the end).
    pub every: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            resolution: 128,
            gt_resolution: 256,
            samples: metrics::DEFAULT_SAMPLES,
            threshold: metrics::DEFAULT_THRESHOLD,
            every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub scene: Scene,
    pub n_agents: usize,
    pub trajectories: TrajectorySpec,
    #[serde(default)]
    pub sensor: SensorConfig,
    #[serde(default)]
    pub consensus: ConsensusConfig,
    /// Optimizers to run side by side; empty means `consensus.optimizer`.
    #[serde(default)]
    pub compare: Vec<OptimizerKind>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub decoder: DecoderSpec,
    #[serde(default)]
    pub loss: LossConfig,
    pub network: NetworkConfig,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    pub iterations: usize,
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub eval: EvalConfig,
}

/// What one cell of an experiment varies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Base,
    SuccessRate(f64),
    Agents(usize),
}

impl Variant {
    pub fn column(&self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::SuccessRate(_) => "success_rate",
            Variant::Agents(_) => "agents",
        }
    }

    pub fn value(&self) -> Option<f64> {
        match *self {
            Variant::Base => None,
            Variant::SuccessRate(r) => Some(r),
            Variant::Agents(n) => Some(n as f64),
        }
    }
}

/// One optimizer under one variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub optimizer: OptimizerKind,
    pub variant: Variant,
}

impl Cell {
    /// Directory-safe name, e.g. `ramen-success-0.50`.
    pub fn label(&self) -> String {
        match self.variant {
            Variant::Base => self.optimizer.name().to_string(),
            Variant::SuccessRate(r) => format!("{}-success-{r:.2}", self.optimizer.name()),
            Variant::Agents(n) => format!("{}-agents-{n}", self.optimizer.name()),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| ConfigError::single("$", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn optimizers(&self) -> Vec<OptimizerKind> {
        if self.compare.is_empty() {
            vec![self.consensus.optimizer]
        } else {
            self.compare.clone()
        }
    }

    pub fn cells(&self) -> Vec<Cell> {
        let variants: Vec<Variant> = match &self.sweep {
            None => vec![Variant::Base],
            Some(Sweep::SuccessRates(r)) => r.iter().map(|&r| Variant::SuccessRate(r)).collect(),
            Some(Sweep::AgentCounts(n)) => n.iter().map(|&n| Variant::Agents(n)).collect(),
        };
        self.optimizers()
            .into_iter()
            .flat_map(|optimizer| variants.iter().map(move |&variant| Cell { optimizer, variant }))
            .collect()
    }

    /// Agent count and link policy in effect for `variant`.
    pub fn resolve(&self, variant: Variant) -> (usize, LinkPolicy) {
        match variant {
            Variant::Base => (self.n_agents, self.network.policy),
            Variant::SuccessRate(r) => (self.n_agents, LinkPolicy::from_success_rate(r)),
            Variant::Agents(n) => (n, self.network.policy),
        }
    }

    pub fn trajectories_for(&self, n_agents: usize) -> Vec<Trajectory> {
        match &self.trajectories {
            TrajectorySpec::Explicit(list) => list.clone(),
            TrajectorySpec::Strips {
                margin,
                steps_per_lap,
            } => {
                let b = self.scene.bounds;
                let w = b.extent().x / n_agents as f64;
                (0..n_agents)
                    .map(|k| {
                        let x0 = b.min.x + k as f64 * w + margin;
                        let x1 = b.min.x + (k + 1) as f64 * w - margin;
                        let (y0, y1) = (b.min.y + margin, b.max.y - margin);
                        Trajectory {
                            waypoints: vec![
                                Vec2::new(x0, y0),
                                Vec2::new(x1, y0),
                                Vec2::new(x1, y1),
                                Vec2::new(x0, y1),
                            ],
                            steps_per_lap: *steps_per_lap,
                        }
                    })
                    .collect()
            }
        }
    }

    /// Collect every problem rather than stopping at the first.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        let mut bad = |path: &str, msg: String| problems.push((path.to_string(), msg));

        if let Err(e) = self.scene.validate() {
            bad("scene", e.to_string());
        }
        if self.n_agents == 0 {
            bad("n_agents", "must be at least 1".into());
        }
        if self.trials == 0 {
            bad("trials", "must be at least 1".into());
        }
        if let Err(e) = self.consensus.validate() {
            bad("consensus", e.to_string());
        }
        if let Err(e) = self.grid.validate() {
            bad("grid", e.to_string());
        }
        if self.grid.bounds != self.scene.bounds {
            bad("grid.bounds", "must equal scene.bounds".into());
        }
        if let Err(e) = self.loss.validate() {
            bad("loss", e);
        }
        let s = &self.sensor;
        if s.n_rays == 0 {
            bad("sensor.n_rays", "must be at least 1".into());
        }
        if !(s.fov > 0.0 && s.fov <= std::f64::consts::TAU) {
            bad("sensor.fov", "must lie in (0, 2π]".into());
        }
        if !(s.max_range > 0.0) {
            bad("sensor.max_range", "must be positive".into());
        }
        if !(s.noise_std >= 0.0) {
            bad("sensor.noise_std", "must be non-negative".into());
        }
        if s.scans_per_iteration == 0 {
            bad("sensor.scans_per_iteration", "must be at least 1".into());
        }
        if let Err(e) = self.network.policy.validate() {
            bad("network.policy", e.to_string());
        }
        let e = &self.eval;
        if e.resolution < 8 || e.gt_resolution < 8 {
            bad("eval.resolution", "must be at least 8".into());
        }
        if e.samples == 0 {
            bad("eval.samples", "must be at least 1".into());
        }
        if !(e.threshold > 0.0) {
            bad("eval.threshold", "must be positive".into());
        }
        if e.every == 0 {
            bad("eval.every", "must be at least 1".into());
        }

        let mut counts = vec![self.n_agents];
        match &self.sweep {
            Some(Sweep::SuccessRates(rates)) => {
                if rates.is_empty() {
                    bad("sweep.success_rates", "must not be empty".into());
                }
                for (k, r) in rates.iter().enumerate() {
                    if !(0.0..=1.0).contains(r) {
                        bad(&format!("sweep.success_rates[{k}]"), "must lie in [0, 1]".into());
                    }
                }
            }
            Some(Sweep::AgentCounts(ns)) => {
                if ns.is_empty() {
                    bad("sweep.agent_counts", "must not be empty".into());
                }
                for (k, n) in ns.iter().enumerate() {
                    if *n == 0 {
                        bad(&format!("sweep.agent_counts[{k}]"), "must be at least 1".into());
                    }
                }
                counts = ns.clone();
            }
            None => {}
        }
        if self.scene.validate().is_ok() {
            for n in counts.into_iter().filter(|n| *n > 0) {
                match &self.trajectories {
                    TrajectorySpec::Explicit(list) if list.len() != n => bad(
                        "trajectories.explicit",
                        format!("has {} loops for {n} agents", list.len()),
                    ),
                    TrajectorySpec::Strips { margin, .. }
                        if !(*margin >= 0.0
                            && 2.0 * margin < self.scene.bounds.extent().x / n as f64) =>
                    {
                        bad("trajectories.strips.margin", format!("too wide for {n} strips"))
                    }
                    _ => {
                        for (k, t) in self.trajectories_for(n).iter().enumerate() {
                            if let Err(e) = t.validate(&self.scene) {
                                bad(&format!("trajectories[{k}] ({n} agents)"), e);
                            }
                        }
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { problems })
        }
    }

    /// SHA-256 over the canonical JSON of every field that affects results.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.name.clear();
        let json = serde_json::to_string(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Execution knobs that never change results.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunOptions {
    pub parallel_trials: bool,
    pub parallel_agents: bool,
}

/// One evaluated (trial, agent, iteration) cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub trial: usize,
    pub agent: usize,
    pub iter: usize,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    pub rows: Vec<MetricRow>,
    /// Final parameters per agent.
    pub thetas: Vec<Vec<f64>>,
    /// Final update counts per agent.
    pub counts: Vec<Vec<u32>>,
    pub trace: Vec<TraceEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellRecord {
    pub cell: Cell,
    pub trials: Vec<TrialRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub cells: Vec<CellRecord>,
}

impl CellRecord {
    pub fn rows(&self) -> impl Iterator<Item = &MetricRow> {
        self.trials.iter().flat_map(|t| t.rows.iter())
    }

    /// Rows at the last evaluated iteration.
    pub fn final_rows(&self) -> Vec<&MetricRow> {
        let last = self.rows().map(|r| r.iter).max().unwrap_or(0);
        self.rows().filter(|r| r.iter == last).collect()
    }
}

/// Shared, read-only inputs of every trial.
struct Fixture {
    map: Arc<NeuralMap>,
    scene: Arc<Scene>,
    gt: ZeroSet,
}

impl Fixture {
    fn new(cfg: &ExperimentConfig, parallel: bool) -> Self {
        let map = NeuralMap::new(cfg.grid.clone(), cfg.decoder).expect("validated grid");
        let scene = cfg.scene.clone();
        let gt = metrics::extract_zero_set(
            |p| scene.gt_sdf(p),
            scene.bounds,
            cfg.eval.gt_resolution,
            cfg.eval.samples,
            parallel,
        );
        Self {
            map: Arc::new(map),
            scene: Arc::new(scene),
            gt,
        }
    }
}

/// Surface of one parameter vector.
pub fn zero_set_of(map: &NeuralMap, theta: &[f64], eval: &EvalConfig, parallel: bool) -> ZeroSet {
    metrics::extract_zero_set(
        |p| map.sdf(theta, p),
        map.grid.config().bounds,
        eval.resolution,
        eval.samples,
        parallel,
    )
}

fn evaluate<O>(
    engine: &Engine<O>,
    fixture: &Fixture,
    eval: &EvalConfig,
    trial: usize,
    parallel: bool,
) -> Vec<MetricRow>
where
    O: crate::consensus::LocalObjective,
{
    let thetas: Vec<&[f64]> = engine.agents().map(|a| a.theta.as_slice()).collect();
    let spread = metrics::disagreement(&thetas);
    thetas
        .iter()
        .enumerate()
        .map(|(agent, theta)| {
            let pred = zero_set_of(&fixture.map, theta, eval, parallel);
            MetricRow {
                trial,
                agent,
                iter: engine.iteration(),
                report: metrics::compare(&pred, &fixture.gt, eval.threshold, spread, parallel),
            }
        })
        .collect()
}

fn run_trial(
    cfg: &ExperimentConfig,
    fixture: &Fixture,
    cell: Cell,
    trial: usize,
    parallel_agents: bool,
) -> TrialRecord {
    let (n_agents, policy) = cfg.resolve(cell.variant);
    let graph = topology(cfg.network.topology, n_agents, policy).expect("validated network");
    let objectives: Vec<MappingObjective> = cfg
        .trajectories_for(n_agents)
        .into_iter()
        .map(|t| {
            MappingObjective::new(
                fixture.map.clone(),
                cfg.loss.clone(),
                fixture.scene.clone(),
                cfg.sensor.clone(),
                t,
            )
        })
        .collect();
    let consensus = ConsensusConfig {
        optimizer: cell.optimizer,
        ..cfg.consensus.clone()
    };
    let opts = EngineOptions {
        seed: cfg.seed,
        trial,
        parallel: parallel_agents,
        layout: WireLayout {
            levels: cfg.grid.levels() as u32,
            feature_dim: cfg.grid.feature_dim as u32,
        },
    };
    let mut engine = Engine::new(consensus, graph, objectives, fixture.map.zeros(), opts)
        .expect("validated consensus config");
    let mut rows = evaluate(&engine, fixture, &cfg.eval, trial, parallel_agents);
    for t in 1..=cfg.iterations {
        engine.step().expect("agents share one parameter layout");
        if t % cfg.eval.every == 0 || t == cfg.iterations {
            rows.extend(evaluate(&engine, fixture, &cfg.eval, trial, parallel_agents));
        }
    }
    TrialRecord {
        trial,
        rows,
        thetas: engine.agents().map(|a| a.theta.clone()).collect(),
        counts: engine.agents().map(|a| a.counts.counts().to_vec()).collect(),
        trace: engine.take_trace(),
    }
}

/// Run every cell and trial of `cfg`. Trials use independent random streams,
/// so parallel and sequential execution give identical records.
pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunRecord, ConfigError> {
    cfg.validate()?;
    let fixture = Fixture::new(cfg, opts.parallel_trials || opts.parallel_agents);
    let cells = cfg.cells();
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..cfg.trials).map(move |t| (c, t)))
        .collect();
    let mut results = par::map_slice(&jobs, opts.parallel_trials, |&(c, t)| {
        run_trial(cfg, &fixture, cells[c], t, opts.parallel_agents)
    })
    .into_iter();
    let cells = cells
        .iter()
        .map(|&cell| CellRecord {
            cell,
            trials: results.by_ref().take(cfg.trials).collect(),
        })
        .collect();
    Ok(RunRecord {
        config_hash: cfg.hash(),
        config: cfg.clone(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = preset("split-room").unwrap();
        cfg.iterations = 4;
        cfg.trials = 2;
        cfg.eval.every = 2;
        cfg.eval.resolution = 32;
        cfg.eval.gt_resolution = 64;
        cfg.eval.samples = 50;
        cfg
    }

    #[test]
    fn presets_validate() {
        for name in PRESET_NAMES {
            let cfg = preset(name).unwrap();
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
            assert_eq!(back, cfg);
        }
        assert!(preset("nope").is_none());
    }

    #[test]
    fn validation_lists_field_paths() {
        let mut cfg = preset("split-room").unwrap();
        cfg.trials = 0;
        cfg.sensor.max_range = -1.0;
        cfg.consensus.rho = 0.0;
        let err = cfg.validate().unwrap_err();
        let paths: Vec<&str> = err.problems.iter().map(|p| p.0.as_str()).collect();
        assert!(paths.contains(&"trials"));
        assert!(paths.contains(&"sensor.max_range"));
        assert!(paths.contains(&"consensus"));
        assert!(err.to_string().contains("trials: must be at least 1"));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&preset("split-room").unwrap().to_json()).unwrap();
        v["bogus"] = 1.into();
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn hash_tracks_semantic_fields_only() {
        let a = preset("split-room").unwrap();
        let mut b = a.clone();
        b.name = "renamed".into();
        assert_eq!(a.hash(), b.hash());
        b.consensus.rho *= 2.0;
        assert_ne!(a.hash(), b.hash());
        let mut c = a.clone();
        c.seed += 1;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn cells_cover_optimizers_and_sweep() {
        let cfg = preset("success-sweep").unwrap();
        let cells = cfg.cells();
        assert_eq!(cells.len(), cfg.optimizers().len() * 4);
        assert_eq!(cells[0].label(), "ramen-success-1.00");
    }

    #[test]
    fn strips_split_the_room() {
        let cfg = preset("agent-scaling").unwrap();
        let t = cfg.trajectories_for(4);
        assert_eq!(t.len(), 4);
        for (k, tr) in t.iter().enumerate() {
            for p in &tr.waypoints {
                assert!(p.x > k as f64 * 0.25 && p.x < (k + 1) as f64 * 0.25);
            }
        }
    }

    #[test]
    fn zero_iterations_gives_initial_rows_only() {
        let mut cfg = tiny();
        cfg.iterations = 0;
        let rec = run_experiment(&cfg, RunOptions::default()).unwrap();
        for cell in &rec.cells {
            for t in &cell.trials {
                assert!(t.rows.iter().all(|r| r.iter == 0 && r.report.disagreement == 0.0));
                assert!(t.trace.is_empty());
            }
        }
    }

    #[test]
    fn runs_are_reproducible_and_parallel_safe() {
        let cfg = tiny();
        let a = run_experiment(&cfg, RunOptions::default()).unwrap();
        let b = run_experiment(
            &cfg,
            RunOptions {
                parallel_trials: true,
                parallel_agents: true,
            },
        )
        .unwrap();
        assert_eq!(a, b);
        let rows: Vec<usize> = a.cells[0].trials[0].rows.iter().map(|r| r.iter).collect();
        assert_eq!(rows, vec![0, 0, 2, 2, 4, 4]);
    }
}
