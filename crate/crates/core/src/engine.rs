//! The outer loop shared by every optimizer.
//!
//! One call to [`Engine::step`] is one iteration for all agents:
//!
//! 1. every agent captures new data;
//! 2. every agent publishes `(Θ, u)` and the network decides which copies
//!    arrive; receivers overwrite their cached copy of the sender;
//! 3. every agent runs its local update against its own cache only.
//!
//! For the ADMM variants the dual ascent that closes iteration `t` needs the
//! neighbours' `Θ^{t+1}`, which an agent only learns at the next exchange.
//! The engine therefore applies that ascent at the start of the local phase of
//! `t + 1`, right after the exchange and with the weights of iteration `t`.
//! Under a fully synchronous network this is exactly the textbook update.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::consensus::{
    cadmm_dual, cadmm_primal, descend, dsgd_step, dsgt_step, metropolis_weights, ramen_dual,
    ramen_primal, ConsensusConfig, ConsensusError, OptimizerKind, Penalty, SgdSettings, Tracker,
    WeightMode, WeightedNeighbor, LocalObjective,
};
use crate::network_sim::{broadcast_round, CommGraph, Message, TraceEntry, WireLayout};
use crate::par;
use crate::rng::{derive, stream, Purpose};
use crate::uncertainty::{compute_weights, UncertaintyCounter, WeightVector};

/// Weights one agent used toward one neighbour in a weighted update.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeWeights {
    pub local: WeightVector,
    pub neighbor: WeightVector,
}

/// Dual ascent owed for the previous iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingDual {
    pub neighbors: Vec<usize>,
    /// Present for the weighted variant only.
    pub weights: Option<Vec<EdgeWeights>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub id: usize,
    pub theta: Vec<f64>,
    pub dual: Vec<f64>,
    pub counts: UncertaintyCounter,
    /// Last message received from each neighbour; its `iteration` is the
    /// staleness stamp.
    pub cache: BTreeMap<usize, Message>,
    pub tracker: Option<Tracker>,
    pub pending: Option<PendingDual>,
    /// Consensus targets of the most recent primal update, per neighbour.
    pub last_targets: BTreeMap<usize, Vec<f64>>,
    /// Objective loss at the start of the most recent local update.
    pub last_loss: f64,
    velocity: Vec<f64>,
}

impl AgentState {
    pub fn new(id: usize, theta: Vec<f64>) -> Self {
        let n = theta.len();
        Self {
            id,
            theta,
            dual: vec![0.0; n],
            counts: UncertaintyCounter::zeros(n),
            cache: BTreeMap::new(),
            tracker: None,
            pending: None,
            last_targets: BTreeMap::new(),
            last_loss: f64::NAN,
            velocity: vec![0.0; n],
        }
    }

    fn publish(&self, iteration: usize) -> Message {
        Message {
            sender: self.id,
            iteration,
            theta: Arc::from(self.theta.as_slice()),
            counts: Arc::from(self.counts.counts()),
            tracker: self.tracker.as_ref().map(|t| Arc::from(t.y.as_slice())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EngineOptions {
    pub seed: u64,
    pub trial: usize,
    /// Step agents concurrently. Results are identical either way.
    pub parallel: bool,
    pub layout: WireLayout,
}


struct Slot<O> {
    state: AgentState,
    objective: O,
}

pub struct Engine<O> {
    cfg: ConsensusConfig,
    graph: CommGraph,
    slots: Vec<Slot<O>>,
    opts: EngineOptions,
    iteration: usize,
    trace: Vec<TraceEntry>,
}

/// Tag for the network stream, outside any agent id.
const NETWORK_AGENT: u64 = u64::MAX;

impl<O: LocalObjective> Engine<O> {
    /// Every agent starts from the same `theta0`.
    pub fn new(
        cfg: ConsensusConfig,
        graph: CommGraph,
        objectives: Vec<O>,
        theta0: Vec<f64>,
        opts: EngineOptions,
    ) -> Result<Self, ConsensusError> {
        cfg.validate()?;
        if objectives.len() != graph.n_agents() {
            return Err(ConsensusError::LengthMismatch {
                left: graph.n_agents(),
                right: objectives.len(),
            });
        }
        if let Some(o) = objectives.iter().find(|o| o.dim() != theta0.len()) {
            return Err(ConsensusError::LengthMismatch {
                left: theta0.len(),
                right: o.dim(),
            });
        }
        let slots = objectives
            .into_iter()
            .enumerate()
            .map(|(id, objective)| Slot {
                state: AgentState::new(id, theta0.clone()),
                objective,
            })
            .collect();
        Ok(Self {
            cfg,
            graph,
            slots,
            opts,
            iteration: 0,
            trace: Vec::new(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn config(&self) -> &ConsensusConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &CommGraph {
        &self.graph
    }

    pub fn agent(&self, i: usize) -> &AgentState {
        &self.slots[i].state
    }

    pub fn agents(&self) -> impl Iterator<Item = &AgentState> {
        self.slots.iter().map(|s| &s.state)
    }

    pub fn objective(&self, i: usize) -> &O {
        &self.slots[i].objective
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<TraceEntry> {
        std::mem::take(&mut self.trace)
    }

    /// One full iteration for every agent.
    pub fn step(&mut self) -> Result<(), ConsensusError> {
        let t = self.iteration;
        let EngineOptions {
            seed,
            trial,
            parallel,
            ..
        } = self.opts;

        par::for_each_mut(&mut self.slots, parallel, |i, s| {
            s.objective
                .capture(t, &mut stream(seed, trial, i, t, Purpose::Capture));
        });
        if t == 0 && self.cfg.optimizer == OptimizerKind::Dsgt {
            par::for_each_mut(&mut self.slots, parallel, |i, s| {
                let mut rng = stream(seed, trial, i, t, Purpose::Agent);
                s.state.tracker = Some(Tracker::init(&s.state.theta, &s.objective, &mut rng));
            });
        }

        self.communicate(t);

        let cfg = &self.cfg;
        let graph = &self.graph;
        let results = par::map_mut(&mut self.slots, parallel, |i, s| {
            let mut rng = stream(seed, trial, i, t, Purpose::Sampling);
            local_update(&mut s.state, &s.objective, graph, cfg, t, &mut rng)
        });
        results.into_iter().collect::<Result<Vec<()>, _>>()?;
        self.iteration += 1;
        Ok(())
    }

    pub fn run(&mut self, iterations: usize) -> Result<(), ConsensusError> {
        for _ in 0..iterations {
            self.step()?;
        }
        Ok(())
    }

    fn communicate(&mut self, t: usize) {
        let messages: Vec<Message> = self.slots.iter().map(|s| s.state.publish(t)).collect();
        let mut rng = derive(
            self.opts.seed,
            &[self.opts.trial as u64, NETWORK_AGENT, t as u64, Purpose::Network as u64],
        );
        for ev in broadcast_round(&self.graph, t, &mut rng) {
            let msg = &messages[ev.from];
            self.trace.push(TraceEntry {
                trial: self.opts.trial,
                iter: t,
                from: ev.from,
                to: ev.to,
                delivered: ev.delivered,
                bytes: msg.wire_len(),
            });
            if ev.delivered {
                self.slots[ev.to].state.cache.insert(ev.from, msg.clone());
            }
        }
    }
}

fn local_update<O: LocalObjective>(
    state: &mut AgentState,
    objective: &O,
    graph: &CommGraph,
    cfg: &ConsensusConfig,
    t: usize,
    rng: &mut crate::rng::Rng,
) -> Result<(), ConsensusError> {
    let settings = SgdSettings {
        steps: cfg.inner_steps,
        lr: cfg.lr_at(t),
        momentum: cfg.momentum,
    };
    // never-heard-from neighbours are skipped
    let available: Vec<usize> = graph
        .neighbors(state.id)
        .iter()
        .copied()
        .filter(|j| state.cache.contains_key(j))
        .collect();

    let touched = match cfg.optimizer {
        OptimizerKind::Ramen | OptimizerKind::Cadmm => {
            apply_pending_dual(state, cfg.rho);
            let weighted = cfg.optimizer == OptimizerKind::Ramen;
            let AgentState {
                theta,
                dual,
                counts,
                cache,
                velocity,
                last_targets,
                ..
            } = state;
            let descent = if weighted {
                let weights = available
                    .iter()
                    .map(|j| edge_weights(counts, &cache[j], cfg.weights, theta.len()))
                    .collect::<Result<Vec<_>, _>>()?;
                let nbs: Vec<WeightedNeighbor<'_>> = available
                    .iter()
                    .zip(&weights)
                    .map(|(j, w)| WeightedNeighbor {
                        theta: &cache[j].theta,
                        w_local: &w.local,
                        w_neighbor: &w.neighbor,
                    })
                    .collect();
                let penalty = crate::consensus::ramen_penalty(theta, &nbs, cfg.rho)?;
                *last_targets = available.iter().copied().zip(penalty.targets).collect();
                let d = ramen_primal(theta, velocity, dual, &nbs, cfg.rho, objective, settings, rng)?;
                state.pending = Some(PendingDual {
                    neighbors: available,
                    weights: Some(weights),
                });
                d
            } else {
                let nbs: Vec<&[f64]> = available.iter().map(|j| &*cache[j].theta).collect();
                *last_targets = available
                    .iter()
                    .zip(&nbs)
                    .map(|(j, nb)| (*j, theta.iter().zip(*nb).map(|(a, b)| (a + b) / 2.0).collect()))
                    .collect();
                let d = cadmm_primal(theta, velocity, dual, &nbs, cfg.rho, objective, settings, rng);
                state.pending = Some(PendingDual {
                    neighbors: available,
                    weights: None,
                });
                d
            };
            state.last_loss = descent.loss;
            descent.touched
        }
        OptimizerKind::Dsgd => {
            let (own, pairs) = metropolis_weights(graph, state.id, &available);
            let nbs: Vec<(f64, &[f64])> = pairs
                .iter()
                .map(|(j, a)| (*a, &*state.cache[j].theta))
                .collect();
            let report = dsgd_step(&mut state.theta, own, &nbs, settings.lr, objective, rng);
            state.last_loss = report.loss;
            let mut touched = report.touched;
            if settings.steps > 1 {
                let rest = SgdSettings {
                    steps: settings.steps - 1,
                    ..settings
                };
                let zero = vec![0.0; state.theta.len()];
                let d = descend(
                    &mut state.theta,
                    &mut state.velocity,
                    &zero,
                    &Penalty::default(),
                    objective,
                    rest,
                    rng,
                );
                for (a, b) in touched.iter_mut().zip(d.touched) {
                    *a |= b;
                }
            }
            touched
        }
        OptimizerKind::Dsgt => {
            let (own, pairs) = metropolis_weights(graph, state.id, &available);
            let cache = &state.cache;
            let nbs: Vec<(f64, &[f64], &[f64])> = pairs
                .iter()
                .filter_map(|(j, a)| {
                    let m = &cache[j];
                    m.tracker.as_ref().map(|y| (*a, &*m.theta, &**y))
                })
                .collect();
            // neighbours without a tracker fall back into the self weight
            let own = own
                + pairs.iter().map(|p| p.1).sum::<f64>()
                - nbs.iter().map(|p| p.0).sum::<f64>();
            let tracker = state.tracker.as_mut().expect("tracker initialised at t = 0");
            let report = dsgt_step(&mut state.theta, tracker, own, &nbs, settings.lr, objective, rng);
            state.last_loss = report.loss;
            report.touched
        }
    };
    state
        .counts
        .record_mask(&touched)
        .map_err(|_| ConsensusError::LengthMismatch {
            left: state.counts.len(),
            right: touched.len(),
        })
}

fn edge_weights(
    counts: &UncertaintyCounter,
    neighbor: &Message,
    mode: WeightMode,
    n: usize,
) -> Result<EdgeWeights, ConsensusError> {
    match mode {
        WeightMode::Uniform(w) => Ok(EdgeWeights {
            local: WeightVector::uniform(n, w),
            neighbor: WeightVector::uniform(n, w),
        }),
        WeightMode::Uncertainty(bounds) => {
            let pw = compute_weights(counts.counts(), &neighbor.counts, &bounds).map_err(|_| {
                ConsensusError::LengthMismatch {
                    left: n,
                    right: neighbor.counts.len(),
                }
            })?;
            Ok(EdgeWeights {
                local: pw.local,
                neighbor: pw.neighbor,
            })
        }
    }
}

fn apply_pending_dual(state: &mut AgentState, rho: f64) {
    let Some(pending) = state.pending.take() else {
        return;
    };
    let cache = &state.cache;
    match &pending.weights {
        Some(weights) => {
            let nbs: Vec<WeightedNeighbor<'_>> = pending
                .neighbors
                .iter()
                .zip(weights)
                .map(|(j, w)| WeightedNeighbor {
                    theta: &cache[j].theta,
                    w_local: &w.local,
                    w_neighbor: &w.neighbor,
                })
                .collect();
            ramen_dual(&mut state.dual, &state.theta, &nbs, rho);
        }
        None => {
            let nbs: Vec<&[f64]> = pending.neighbors.iter().map(|j| &*cache[j].theta).collect();
            cadmm_dual(&mut state.dual, &state.theta, &nbs, rho);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::QuadraticObjective;
    use crate::network_sim::{topology, LinkPolicy, TopologyKind};

    fn quad_engine(kind: OptimizerKind, weights: WeightMode, policy: LinkPolicy) -> Engine<QuadraticObjective> {
        let cfg = ConsensusConfig {
            optimizer: kind,
            rho: 1.0,
            inner_steps: 50,
            lr: 0.05,
            weights,
            ..Default::default()
        };
        Engine::new(
            cfg,
            topology(TopologyKind::Full, 2, policy).unwrap(),
            vec![QuadraticObjective::scalar(1.0), QuadraticObjective::scalar(3.0)],
            vec![0.0],
            EngineOptions::default(),
        )
        .unwrap()
    }

    const SYNC: LinkPolicy = LinkPolicy::Lossy { drop_prob: 0.0 };

    #[test]
    fn admm_converges_on_scalar_quadratics() {
        for kind in [OptimizerKind::Ramen, OptimizerKind::Cadmm] {
            let mut e = quad_engine(kind, WeightMode::default(), SYNC);
            e.run(500).unwrap();
            for a in e.agents() {
                assert!((a.theta[0] - 2.0).abs() < 1e-4, "{kind:?}: {}", a.theta[0]);
            }
        }
    }

    #[test]
    fn duals_cancel_and_targets_agree_under_sync() {
        let mut e = quad_engine(OptimizerKind::Ramen, WeightMode::default(), SYNC);
        for _ in 0..100 {
            e.step().unwrap();
            let (a, b) = (e.agent(0), e.agent(1));
            assert!((a.dual[0] + b.dual[0]).abs() <= 1e-10);
            assert_eq!(a.last_targets[&1], b.last_targets[&0]);
        }
    }

    #[test]
    fn cache_keeps_stale_copy_between_deliveries() {
        let mut e = quad_engine(OptimizerKind::Cadmm, WeightMode::default(), LinkPolicy::Periodic { period: 5 });
        e.run(3).unwrap();
        let first = e.agent(1).cache[&0].clone();
        assert_eq!(first.iteration, 0);
        assert_eq!(&*first.theta, &[0.0]);
        e.run(2).unwrap();
        assert_eq!(e.agent(1).cache[&0], first);
        e.step().unwrap();
        assert_eq!(e.agent(1).cache[&0].iteration, 5);
    }

    #[test]
    fn disconnected_agents_do_plain_sgd() {
        let mut e = quad_engine(OptimizerKind::Ramen, WeightMode::default(), LinkPolicy::Lossy { drop_prob: 1.0 });
        e.run(10).unwrap();
        assert!(e.agent(0).cache.is_empty());
        assert_eq!(e.agent(0).dual, vec![0.0]);
        assert!((e.agent(0).theta[0] - 1.0).abs() < 1e-6);
        assert!((e.agent(1).theta[0] - 3.0).abs() < 1e-6);
        assert_eq!(e.trace().len(), 20);
        assert!(e.trace().iter().all(|t| !t.delivered && t.bytes == 16 + 4 + 4));
    }

    #[test]
    fn gradient_methods_approach_optimum() {
        for kind in [OptimizerKind::Dsgd, OptimizerKind::Dsgt] {
            let cfg = ConsensusConfig {
                optimizer: kind,
                inner_steps: 1,
                lr: 0.05,
                ..Default::default()
            };
            let mut e = Engine::new(
                cfg,
                topology(TopologyKind::Full, 2, SYNC).unwrap(),
                vec![QuadraticObjective::scalar(1.0), QuadraticObjective::scalar(3.0)],
                vec![0.0],
                EngineOptions::default(),
            )
            .unwrap();
            e.run(500).unwrap();
            let tol = if kind == OptimizerKind::Dsgt { 1e-6 } else { 0.2 };
            for a in e.agents() {
                assert!((a.theta[0] - 2.0).abs() < tol, "{kind:?}: {}", a.theta[0]);
            }
        }
    }

    #[test]
    fn tracker_sum_matches_gradient_sum() {
        let cfg = ConsensusConfig {
            optimizer: OptimizerKind::Dsgt,
            inner_steps: 1,
            lr: 0.02,
            ..Default::default()
        };
        let objectives = (0..3).map(|i| QuadraticObjective::scalar(i as f64)).collect();
        let mut e = Engine::new(
            cfg,
            topology(TopologyKind::Full, 3, SYNC).unwrap(),
            objectives,
            vec![0.5],
            EngineOptions::default(),
        )
        .unwrap();
        for _ in 0..50 {
            e.step().unwrap();
            let ys: f64 = e.agents().map(|a| a.tracker.as_ref().unwrap().y[0]).sum();
            let gs: f64 = e.agents().map(|a| a.tracker.as_ref().unwrap().last_grad[0]).sum();
            assert!((ys - gs).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let run = |parallel| {
            let mut e = Engine::new(
                ConsensusConfig::default(),
                topology(TopologyKind::Full, 4, LinkPolicy::Lossy { drop_prob: 0.4 }).unwrap(),
                (0..4).map(|i| QuadraticObjective::scalar(i as f64)).collect(),
                vec![0.0],
                EngineOptions {
                    seed: 9,
                    parallel,
                    ..Default::default()
                },
            )
            .unwrap();
            e.run(40).unwrap();
            (e.agents().map(|a| a.theta.clone()).collect::<Vec<_>>(), e.trace().to_vec())
        };
        assert_eq!(run(false), run(true));
    }
}
