//! Simulated lossy, asynchronous links between agents.
//!
//! Communication happens only at iteration boundaries. Each round every
//! directed neighbour pair either delivers the sender's current snapshot or
//! loses it; there is no queueing or latency. A receiver keeps the last
//! snapshot it got from each neighbour until a newer one arrives.

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neural_map::{encode_snapshot, snapshot_len};
use crate::rng::Rng;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("edge ({0}, {1}) references an agent outside 0..{2}")]
    UnknownAgent(usize, usize, usize),
    #[error("self-edge on agent {0}")]
    SelfEdge(usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("invalid link policy: {0}")]
    InvalidPolicy(&'static str),
    #[error("a graph needs at least one agent")]
    NoAgents,
}

/// When a link carries a message.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LinkPolicy {
    /// Each directed message is lost independently with this probability.
    Lossy { drop_prob: f64 },
    /// Both directions deliver on iterations `t ≡ 0 (mod period)` only.
    Periodic { period: usize },
}

impl LinkPolicy {
    pub fn from_success_rate(rate: f64) -> Self {
        LinkPolicy::Lossy {
            drop_prob: 1.0 - rate,
        }
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        match *self {
            LinkPolicy::Lossy { drop_prob } if !(0.0..=1.0).contains(&drop_prob) => Err(
                GraphError::InvalidPolicy("drop_prob must lie in [0, 1]"),
            ),
            LinkPolicy::Periodic { period: 0 } => {
                Err(GraphError::InvalidPolicy("period must be at least 1"))
            }
            _ => Ok(()),
        }
    }

    /// Long-run fraction of delivered messages.
    pub fn success_rate(&self) -> f64 {
        match *self {
            LinkPolicy::Lossy { drop_prob } => 1.0 - drop_prob,
            LinkPolicy::Periodic { period } => 1.0 / period as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub policy: LinkPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyKind {
    Full,
    Chain,
}

/// Undirected communication graph with a policy per edge.
#[derive(Debug, Clone, PartialEq)]
pub struct CommGraph {
    n_agents: usize,
    edges: Vec<Edge>,
    neighbors: Vec<Vec<usize>>,
}

impl CommGraph {
    pub fn new(n_agents: usize, edges: Vec<Edge>) -> Result<Self, GraphError> {
        if n_agents == 0 {
            return Err(GraphError::NoAgents);
        }
        let mut neighbors = vec![Vec::new(); n_agents];
        for e in &edges {
            if e.a >= n_agents || e.b >= n_agents {
                return Err(GraphError::UnknownAgent(e.a, e.b, n_agents));
            }
            if e.a == e.b {
                return Err(GraphError::SelfEdge(e.a));
            }
            if neighbors[e.a].contains(&e.b) {
                return Err(GraphError::DuplicateEdge(e.a, e.b));
            }
            e.policy.validate()?;
            neighbors[e.a].push(e.b);
            neighbors[e.b].push(e.a);
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        Ok(Self {
            n_agents,
            edges,
            neighbors,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn neighbors(&self, agent: usize) -> &[usize] {
        &self.neighbors[agent]
    }

    pub fn degree(&self, agent: usize) -> usize {
        self.neighbors[agent].len()
    }

    pub fn are_neighbors(&self, a: usize, b: usize) -> bool {
        self.neighbors[a].contains(&b)
    }
}

/// `full`: every pair; `chain`: consecutive ids only.
pub fn topology(
    kind: TopologyKind,
    n_agents: usize,
    policy: LinkPolicy,
) -> Result<CommGraph, GraphError> {
    let pairs: Vec<(usize, usize)> = match kind {
        TopologyKind::Full => (0..n_agents)
            .flat_map(|a| (a + 1..n_agents).map(move |b| (a, b)))
            .collect(),
        TopologyKind::Chain => (1..n_agents).map(|b| (b - 1, b)).collect(),
    };
    CommGraph::new(
        n_agents,
        pairs
            .into_iter()
            .map(|(a, b)| Edge { a, b, policy })
            .collect(),
    )
}

/// Outcome of one directed transmission attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkEvent {
    pub from: usize,
    pub to: usize,
    pub delivered: bool,
}

/// Decide which directed messages get through at iteration `t`.
///
/// Edges are visited in order, `a → b` before `b → a`, and lossy links draw
/// one Bernoulli each from `rng`, so the outcome depends only on the graph,
/// `t` and the seed. Always returns `2·|E|` events.
pub fn broadcast_round(graph: &CommGraph, t: usize, rng: &mut Rng) -> Vec<LinkEvent> {
    let mut events = Vec::with_capacity(2 * graph.edges.len());
    for e in &graph.edges {
        for (from, to) in [(e.a, e.b), (e.b, e.a)] {
            let delivered = match e.policy {
                LinkPolicy::Lossy { drop_prob } => rng.random::<f64>() >= drop_prob,
                LinkPolicy::Periodic { period } => t % period == 0,
            };
            events.push(LinkEvent {
                from,
                to,
                delivered,
            });
        }
    }
    events
}

/// An immutable snapshot of an agent's shareable state.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub sender: usize,
    /// Iteration at which the snapshot was taken.
    pub iteration: usize,
    pub theta: Arc<[f64]>,
    pub counts: Arc<[u32]>,
    /// Gradient tracker, only for the tracking baseline.
    pub tracker: Option<Arc<[f64]>>,
}

/// Header fields written in front of each encoded parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WireLayout {
    pub levels: u32,
    pub feature_dim: u32,
}

impl Message {
    /// Wire encoding: parameter snapshot, then the counts as little-endian
    /// u32, then (if present) the tracker as a second snapshot.
    ///
    /// The in-memory message keeps full precision; only the wire bytes are
    /// narrowed to f32.
    pub fn encode(&self, layout: WireLayout) -> Vec<u8> {
        let mut out = encode_snapshot(&self.theta, layout.levels, layout.feature_dim);
        out.reserve(4 * self.counts.len());
        for c in self.counts.iter() {
            out.extend_from_slice(&c.to_le_bytes());
        }
        if let Some(y) = &self.tracker {
            out.extend(encode_snapshot(y, layout.levels, layout.feature_dim));
        }
        out
    }

    pub fn wire_len(&self) -> usize {
        snapshot_len(self.theta.len())
            + 4 * self.counts.len()
            + self.tracker.as_ref().map_or(0, |y| snapshot_len(y.len()))
    }
}

/// One line of the message trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub trial: usize,
    pub iter: usize,
    pub from: usize,
    pub to: usize,
    pub delivered: bool,
    pub bytes: usize,
}

/// Render trace entries as JSON lines.
pub fn trace_jsonl(entries: &[TraceEntry]) -> String {
    let mut out = String::with_capacity(entries.len() * 64);
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("trace entry serializes"));
        out.push('\n');
    }
    out
}
