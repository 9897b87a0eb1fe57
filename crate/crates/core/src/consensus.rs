//! Decentralized optimizers over flat parameter vectors: uncertainty-weighted
//! C-ADMM, vanilla C-ADMM, DSGD and DSGT.
//!
//! Everything here is written against [`LocalObjective`], so the same update
//! rules drive both the mapping task and small quadratic test problems.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network_sim::CommGraph;
use crate::objective::GradReport;
use crate::rng::Rng;
use crate::uncertainty::WeightBounds;

#[derive(Debug, Error, PartialEq)]
pub enum ConsensusError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("non-positive weight sum at index {0}")]
    NonPositiveWeight(usize),
    #[error("invalid consensus config: {0}")]
    InvalidConfig(String),
}

/// An agent's private loss over the shared parameter vector.
pub trait LocalObjective: Send {
    fn dim(&self) -> usize;

    /// Acquire new data at the start of `iteration`. Default: nothing.
    fn capture(&mut self, _iteration: usize, _rng: &mut Rng) {}

    /// Loss and gradient at `theta`. Stochastic objectives draw from `rng`.
    fn evaluate(&self, theta: &[f64], rng: &mut Rng) -> GradReport;
}

/// `‖Aθ − b‖²` with a dense row-major `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticObjective {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub dim: usize,
}

impl QuadraticObjective {
    /// `(θ − c)²` in one dimension.
    pub fn scalar(c: f64) -> Self {
        Self {
            a: vec![1.0],
            b: vec![c],
            dim: 1,
        }
    }

    fn residual(&self, theta: &[f64]) -> Vec<f64> {
        self.b
            .iter()
            .enumerate()
            .map(|(r, b)| {
                let row = &self.a[r * self.dim..(r + 1) * self.dim];
                row.iter().zip(theta).map(|(a, t)| a * t).sum::<f64>() - b
            })
            .collect()
    }
}

impl LocalObjective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, theta: &[f64], _rng: &mut Rng) -> GradReport {
        let res = self.residual(theta);
        let mut grad = vec![0.0; self.dim];
        for (r, e) in res.iter().enumerate() {
            let row = &self.a[r * self.dim..(r + 1) * self.dim];
            for (g, a) in grad.iter_mut().zip(row) {
                *g += 2.0 * a * e;
            }
        }
        GradReport::from_gradient(res.iter().map(|e| e * e).sum(), grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Ramen,
    Cadmm,
    Dsgd,
    Dsgt,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Ramen => "ramen",
            OptimizerKind::Cadmm => "cadmm",
            OptimizerKind::Dsgd => "dsgd",
            OptimizerKind::Dsgt => "dsgt",
        }
    }

    pub fn is_admm(self) -> bool {
        matches!(self, OptimizerKind::Ramen | OptimizerKind::Cadmm)
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ramen" => Ok(OptimizerKind::Ramen),
            "cadmm" => Ok(OptimizerKind::Cadmm),
            "dsgd" => Ok(OptimizerKind::Dsgd),
            "dsgt" => Ok(OptimizerKind::Dsgt),
            other => Err(format!("unknown optimizer `{other}`")),
        }
    }
}

/// How the weighted optimizer obtains its per-parameter weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// From update counts through the bounded affine map.
    Uncertainty(WeightBounds),
    /// The same constant for every parameter and neighbour.
    Uniform(f64),
}

impl Default for WeightMode {
    fn default() -> Self {
        WeightMode::Uncertainty(WeightBounds::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusConfig {
    pub optimizer: OptimizerKind,
    pub rho: f64,
    /// SGD steps per primal update.
    pub inner_steps: usize,
    pub lr: f64,
    /// Heavy-ball coefficient for the inner SGD; 0 disables it.
    pub momentum: f64,
    /// Step size at outer iteration `t` is `lr / (1 + lr_decay · t)`.
    pub lr_decay: f64,
    pub weights: WeightMode,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Ramen,
            rho: 1.0,
            inner_steps: 5,
            lr: 1e-2,
            momentum: 0.0,
            lr_decay: 0.0,
            weights: WeightMode::default(),
        }
    }
}

impl ConsensusConfig {
    pub fn validate(&self) -> Result<(), ConsensusError> {
        let bad = |m: &str| Err(ConsensusError::InvalidConfig(m.into()));
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad("rho must be positive");
        }
        if self.inner_steps == 0 {
            return bad("inner_steps must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.lr_decay >= 0.0 && self.lr_decay.is_finite()) {
            return bad("lr_decay must be non-negative");
        }
        match self.weights {
            WeightMode::Uncertainty(b) => b
                .validate()
                .map_err(|e| ConsensusError::InvalidConfig(e.to_string())),
            WeightMode::Uniform(w) if !(w > 0.0 && w.is_finite()) => {
                bad("uniform weight must be positive")
            }
            WeightMode::Uniform(_) => Ok(()),
        }
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.lr / (1.0 + self.lr_decay * iteration as f64)
    }
}

/// Weighted consensus target `(w_ij Θ_i + w_ji Θ_j) / (w_ij + w_ji)`.
/// Swapping the two agents (with their weights) gives the same vector.
pub fn consensus_target(
    theta_i: &[f64],
    theta_j: &[f64],
    w_ij: &[f64],
    w_ji: &[f64],
) -> Result<Vec<f64>, ConsensusError> {
    let n = theta_i.len();
    for len in [theta_j.len(), w_ij.len(), w_ji.len()] {
        if len != n {
            return Err(ConsensusError::LengthMismatch { left: n, right: len });
        }
    }
    (0..n)
        .map(|k| {
            let s = w_ij[k] + w_ji[k];
            if s > 0.0 {
                Ok((w_ij[k] * theta_i[k] + w_ji[k] * theta_j[k]) / s)
            } else {
                Err(ConsensusError::NonPositiveWeight(k))
            }
        })
        .collect()
}

/// One neighbour's contribution to a weighted update.
#[derive(Debug, Clone, Copy)]
pub struct WeightedNeighbor<'a> {
    pub theta: &'a [f64],
    /// `w_ij`, the weight on the local copy.
    pub w_local: &'a [f64],
    /// `w_ji`, the weight on the neighbour's copy.
    pub w_neighbor: &'a [f64],
}

/// Fixed quadratic pull `ρ Σ_j ‖Θ − z_j‖²_{W_j}` toward frozen targets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Penalty {
    pub rho: f64,
    pub targets: Vec<Vec<f64>>,
    /// `None` means unit weights.
    pub weights: Vec<Option<Vec<f64>>>,
}

impl Penalty {
    pub fn value(&self, theta: &[f64]) -> f64 {
        let mut v = 0.0;
        for (z, w) in self.targets.iter().zip(&self.weights) {
            for k in 0..theta.len() {
                let d = theta[k] - z[k];
                v += w.as_ref().map_or(1.0, |w| w[k]) * d * d;
            }
        }
        self.rho * v
    }

    pub fn add_gradient(&self, theta: &[f64], grad: &mut [f64]) {
        for (z, w) in self.targets.iter().zip(&self.weights) {
            match w {
                Some(w) => {
                    for k in 0..theta.len() {
                        grad[k] += 2.0 * self.rho * w[k] * (theta[k] - z[k]);
                    }
                }
                None => {
                    for k in 0..theta.len() {
                        grad[k] += 2.0 * self.rho * (theta[k] - z[k]);
                    }
                }
            }
        }
    }
}

/// Inner-loop settings shared by all primal solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdSettings {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
}

/// Result of a local descent.
#[derive(Debug, Clone, PartialEq)]
pub struct Descent {
    /// Objective loss at the first inner step.
    pub loss: f64,
    /// Parameters whose objective gradient was nonzero in any inner step.
    pub touched: Vec<bool>,
}

/// Augmented primal objective `L(Θ) + Θᵀp + penalty(Θ)` and its gradient.
pub fn augmented<O: LocalObjective + ?Sized>(
    theta: &[f64],
    dual: &[f64],
    penalty: &Penalty,
    objective: &O,
    rng: &mut Rng,
) -> GradReport {
    let report = objective.evaluate(theta, rng);
    let mut grad = report.gradient.clone();
    for (g, p) in grad.iter_mut().zip(dual) {
        *g += p;
    }
    penalty.add_gradient(theta, &mut grad);
    let linear: f64 = theta.iter().zip(dual).map(|(t, p)| t * p).sum();
    GradReport {
        loss: report.loss + linear + penalty.value(theta),
        gradient: grad,
        touched: report.touched,
    }
}

/// Run `settings.steps` SGD steps on the augmented objective in place.
pub fn descend<O: LocalObjective + ?Sized>(
    theta: &mut [f64],
    velocity: &mut [f64],
    dual: &[f64],
    penalty: &Penalty,
    objective: &O,
    settings: SgdSettings,
    rng: &mut Rng,
) -> Descent {
    let mut touched = vec![false; theta.len()];
    let mut first_loss = None;
    for _ in 0..settings.steps {
        let report = augmented(theta, dual, penalty, objective, rng);
        first_loss.get_or_insert(report.loss);
        for (t, m) in touched.iter_mut().zip(&report.touched) {
            *t |= *m;
        }
        if settings.momentum > 0.0 {
            for k in 0..theta.len() {
                velocity[k] = settings.momentum * velocity[k] + report.gradient[k];
                theta[k] -= settings.lr * velocity[k];
            }
        } else {
            for k in 0..theta.len() {
                theta[k] -= settings.lr * report.gradient[k];
            }
        }
    }
    Descent {
        loss: first_loss.unwrap_or(f64::NAN),
        touched,
    }
}

/// Penalty of the weighted primal update: one target per neighbour, built
/// from the iteration-start parameters and held fixed over the inner steps.
pub fn ramen_penalty(
    theta: &[f64],
    neighbors: &[WeightedNeighbor<'_>],
    rho: f64,
) -> Result<Penalty, ConsensusError> {
    let mut penalty = Penalty {
        rho,
        ..Penalty::default()
    };
    for nb in neighbors {
        penalty
            .targets
            .push(consensus_target(theta, nb.theta, nb.w_local, nb.w_neighbor)?);
        penalty.weights.push(Some(nb.w_local.to_vec()));
    }
    Ok(penalty)
}

/// Weighted primal update: B SGD steps on
/// `L(Θ) + Θᵀp + ρ Σ_j ‖Θ − z_ij‖²_{W_ij}`.
#[allow(clippy::too_many_arguments)]
pub fn ramen_primal<O: LocalObjective + ?Sized>(
    theta: &mut [f64],
    velocity: &mut [f64],
    dual: &[f64],
    neighbors: &[WeightedNeighbor<'_>],
    rho: f64,
    objective: &O,
    settings: SgdSettings,
    rng: &mut Rng,
) -> Result<Descent, ConsensusError> {
    let penalty = ramen_penalty(theta, neighbors, rho)?;
    Ok(descend(theta, velocity, dual, &penalty, objective, settings, rng))
}

/// Weighted dual ascent
/// `p += 2ρ Σ_j w_ij ⊙ w_ji / (w_ij + w_ji) ⊙ (Θ_i − Θ_j)`.
pub fn ramen_dual(dual: &mut [f64], theta: &[f64], neighbors: &[WeightedNeighbor<'_>], rho: f64) {
    for nb in neighbors {
        for k in 0..dual.len() {
            let (a, b) = (nb.w_local[k], nb.w_neighbor[k]);
            dual[k] += 2.0 * rho * (a * b / (a + b)) * (theta[k] - nb.theta[k]);
        }
    }
}

/// Plain primal update: B SGD steps toward the midpoints `(Θ_i + Θ_j) / 2`.
#[allow(clippy::too_many_arguments)]
pub fn cadmm_primal<O: LocalObjective + ?Sized>(
    theta: &mut [f64],
    velocity: &mut [f64],
    dual: &[f64],
    neighbors: &[&[f64]],
    rho: f64,
    objective: &O,
    settings: SgdSettings,
    rng: &mut Rng,
) -> Descent {
    let penalty = Penalty {
        rho,
        targets: neighbors
            .iter()
            .map(|nb| theta.iter().zip(*nb).map(|(a, b)| (a + b) / 2.0).collect())
            .collect(),
        weights: vec![None; neighbors.len()],
    };
    descend(theta, velocity, dual, &penalty, objective, settings, rng)
}

/// Plain dual ascent `p += ρ Σ_j (Θ_i − Θ_j)`.
pub fn cadmm_dual(dual: &mut [f64], theta: &[f64], neighbors: &[&[f64]], rho: f64) {
    for nb in neighbors {
        for k in 0..dual.len() {
            dual[k] += rho * (theta[k] - nb[k]);
        }
    }
}

/// Metropolis weights `a_ij = 1 / (1 + max(deg_i, deg_j))` over the listed
/// neighbours; the self weight takes the remainder so each row sums to one.
/// Returns `(self_weight, [(j, a_ij)])`.
pub fn metropolis_weights(
    graph: &CommGraph,
    agent: usize,
    available: &[usize],
) -> (f64, Vec<(usize, f64)>) {
    let di = graph.degree(agent);
    let pairs: Vec<(usize, f64)> = available
        .iter()
        .map(|&j| (j, 1.0 / (1 + di.max(graph.degree(j))) as f64))
        .collect();
    let own = 1.0 - pairs.iter().map(|(_, a)| a).sum::<f64>();
    (own, pairs)
}

/// `a_ii x_i + Σ_j a_ij x_j`.
pub fn mix(own_weight: f64, own: &[f64], neighbors: &[(f64, &[f64])]) -> Vec<f64> {
    let mut out: Vec<f64> = own.iter().map(|x| own_weight * x).collect();
    for (a, x) in neighbors {
        for (o, v) in out.iter_mut().zip(x.iter()) {
            *o += a * v;
        }
    }
    out
}

/// DSGD: `Θ ← Σ_j a_ij Θ_j − lr · g(Θ_i)`.
pub fn dsgd_step<O: LocalObjective + ?Sized>(
    theta: &mut Vec<f64>,
    own_weight: f64,
    neighbors: &[(f64, &[f64])],
    lr: f64,
    objective: &O,
    rng: &mut Rng,
) -> GradReport {
    let report = objective.evaluate(theta, rng);
    let mut next = mix(own_weight, theta, neighbors);
    for (t, g) in next.iter_mut().zip(&report.gradient) {
        *t -= lr * g;
    }
    *theta = next;
    report
}

/// Gradient-tracking state kept next to the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracker {
    /// Running estimate of the network-average gradient.
    pub y: Vec<f64>,
    /// Local gradient at the current parameters.
    pub last_grad: Vec<f64>,
}

impl Tracker {
    /// `y⁰ = g⁰`.
    pub fn init<O: LocalObjective + ?Sized>(theta: &[f64], objective: &O, rng: &mut Rng) -> Self {
        let g = objective.evaluate(theta, rng).gradient;
        Self {
            y: g.clone(),
            last_grad: g,
        }
    }
}

/// DSGT:
/// `Θ ← Σ_j a_ij Θ_j − lr · y_i`, then `y ← Σ_j a_ij y_j + g(Θ_new) − g(Θ_old)`.
/// `neighbors` pairs each mixing weight with the neighbour's `(Θ_j, y_j)`.
pub fn dsgt_step<O: LocalObjective + ?Sized>(
    theta: &mut Vec<f64>,
    tracker: &mut Tracker,
    own_weight: f64,
    neighbors: &[(f64, &[f64], &[f64])],
    lr: f64,
    objective: &O,
    rng: &mut Rng,
) -> GradReport {
    let theta_nb: Vec<(f64, &[f64])> = neighbors.iter().map(|(a, t, _)| (*a, *t)).collect();
    let y_nb: Vec<(f64, &[f64])> = neighbors.iter().map(|(a, _, y)| (*a, *y)).collect();
    let mut next = mix(own_weight, theta, &theta_nb);
    for (t, y) in next.iter_mut().zip(&tracker.y) {
        *t -= lr * y;
    }
    let report = objective.evaluate(&next, rng);
    let mut y = mix(own_weight, &tracker.y, &y_nb);
    for k in 0..y.len() {
        y[k] += report.gradient[k] - tracker.last_grad[k];
    }
    *theta = next;
    tracker.y = y;
    tracker.last_grad = report.gradient.clone();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network_sim::{topology, LinkPolicy, TopologyKind};
    use crate::rng::derive;
    use proptest::prelude::*;

    fn sgd(steps: usize, lr: f64) -> SgdSettings {
        SgdSettings {
            steps,
            lr,
            momentum: 0.0,
        }
    }

    #[test]
    fn target_examples() {
        let z = consensus_target(&[0.0], &[4.0], &[1.0], &[3.0]).unwrap();
        assert_eq!(z, vec![3.0]);
        let z = consensus_target(&[1.0, -2.0], &[3.0, 2.0], &[0.4, 0.4], &[0.4, 0.4]).unwrap();
        assert_eq!(z, vec![2.0, 0.0]);
        assert_eq!(
            consensus_target(&[1.0], &[2.0], &[0.0], &[0.0]),
            Err(ConsensusError::NonPositiveWeight(0))
        );
        assert!(consensus_target(&[1.0], &[2.0, 3.0], &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn dual_examples() {
        let mut p = vec![0.0];
        let nb = WeightedNeighbor {
            theta: &[0.0],
            w_local: &[0.2],
            w_neighbor: &[1.0],
        };
        ramen_dual(&mut p, &[1.0], &[nb], 1.0);
        assert_close!(p[0], 1.0 / 3.0, 1e-15);

        let mut p = vec![0.5, -0.5];
        let nb = WeightedNeighbor {
            theta: &[1.0, 2.0],
            w_local: &[0.3, 0.3],
            w_neighbor: &[0.7, 0.7],
        };
        ramen_dual(&mut p, &[1.0, 2.0], &[nb], 1.0);
        assert_eq!(p, vec![0.5, -0.5]);
    }

    #[test]
    fn symmetric_weight_dual_is_scaled_plain_increment() {
        let theta_i = [0.3, -1.2, 2.5];
        let theta_j = [1.1, 0.4, -0.7];
        let w = [0.25, 0.6, 1.0];
        let rho = 1.7;
        let mut p = vec![0.0; 3];
        ramen_dual(
            &mut p,
            &theta_i,
            &[WeightedNeighbor {
                theta: &theta_j,
                w_local: &w,
                w_neighbor: &w,
            }],
            rho,
        );
        for k in 0..3 {
            assert_close!(p[k], rho * w[k] * (theta_i[k] - theta_j[k]), 1e-12);
        }
    }

    #[test]
    fn no_neighbors_is_plain_sgd() {
        let obj = QuadraticObjective::scalar(3.0);
        let mut theta = vec![0.0];
        let mut v = vec![0.0];
        ramen_primal(&mut theta, &mut v, &[0.0], &[], 1.0, &obj, sgd(4, 0.1), &mut derive(0, &[]))
            .unwrap();
        let mut expect = 0.0;
        for _ in 0..4 {
            expect -= 0.1 * 2.0 * (expect - 3.0);
        }
        assert_eq!(theta[0], expect);
    }

    #[test]
    fn stationary_point_is_kept() {
        let obj = QuadraticObjective::scalar(2.0);
        let mut theta = vec![2.0];
        let mut v = vec![0.0];
        let nb = WeightedNeighbor {
            theta: &[2.0],
            w_local: &[0.4],
            w_neighbor: &[0.9],
        };
        ramen_primal(&mut theta, &mut v, &[0.0], &[nb], 1.0, &obj, sgd(10, 0.1), &mut derive(0, &[]))
            .unwrap();
        assert_eq!(theta, vec![2.0]);
        cadmm_primal(&mut theta, &mut v, &[0.0], &[&[2.0]], 1.0, &obj, sgd(10, 0.1), &mut derive(0, &[]));
        assert_eq!(theta, vec![2.0]);
    }

    #[test]
    fn primal_matches_closed_form_minimizer() {
        // (θ−1)² + pθ + ρ w (θ − z)², z = (w θ0 + w' θj)/(w + w')
        let (p, rho, w, wn, theta0, theta_j) = (0.3, 1.5, 0.4, 0.9, 0.5, 3.0);
        let z = (w * theta0 + wn * theta_j) / (w + wn);
        let expect = (2.0 - p + 2.0 * rho * w * z) / (2.0 + 2.0 * rho * w);
        let obj = QuadraticObjective::scalar(1.0);
        let mut theta = vec![theta0];
        let nb = WeightedNeighbor {
            theta: &[theta_j],
            w_local: &[w],
            w_neighbor: &[wn],
        };
        ramen_primal(&mut theta, &mut [0.0], &[p], &[nb], rho, &obj, sgd(2000, 0.05), &mut derive(0, &[]))
            .unwrap();
        assert_close!(theta[0], expect, 1e-12);
    }

    #[test]
    fn augmented_gradient_matches_finite_differences() {
        let obj = QuadraticObjective {
            a: vec![1.0, 2.0, -0.5, 0.3, 1.5, 0.7],
            b: vec![0.4, -1.0],
            dim: 3,
        };
        let theta = [0.2, -0.4, 0.9];
        let dual = [0.1, -0.3, 0.25];
        let nb_theta = [1.0, 0.5, -0.2];
        let penalty = ramen_penalty(
            &theta,
            &[WeightedNeighbor {
                theta: &nb_theta,
                w_local: &[0.3, 0.8, 1.0],
                w_neighbor: &[0.9, 0.2, 0.5],
            }],
            1.3,
        )
        .unwrap();
        let mut rng = derive(0, &[]);
        let g = augmented(&theta, &dual, &penalty, &obj, &mut rng).gradient;
        let h = 1e-6;
        for k in 0..3 {
            let mut up = theta;
            let mut dn = theta;
            up[k] += h;
            dn[k] -= h;
            let fd = (augmented(&up, &dual, &penalty, &obj, &mut rng).loss
                - augmented(&dn, &dual, &penalty, &obj, &mut rng).loss)
                / (2.0 * h);
            assert_close!(g[k], fd, 1e-6);
        }
    }

    #[test]
    fn metropolis_rows_sum_to_one() {
        let g = topology(TopologyKind::Chain, 4, LinkPolicy::Lossy { drop_prob: 0.0 }).unwrap();
        let (own, pairs) = metropolis_weights(&g, 1, &[0, 2]);
        assert_eq!(pairs, vec![(0, 1.0 / 3.0), (2, 1.0 / 3.0)]);
        assert_close!(own + pairs.iter().map(|p| p.1).sum::<f64>(), 1.0, 1e-15);
        let (own, pairs) = metropolis_weights(&g, 0, &[]);
        assert!(pairs.is_empty());
        assert_eq!(own, 1.0);
    }

    #[test]
    fn dsgd_zero_gradient_mixes() {
        let obj = QuadraticObjective {
            a: vec![0.0],
            b: vec![0.0],
            dim: 1,
        };
        let mut theta = vec![1.0];
        dsgd_step(&mut theta, 0.5, &[(0.5, &[3.0])], 0.1, &obj, &mut derive(0, &[]));
        assert_eq!(theta, vec![2.0]);
        let mut theta = vec![1.0];
        dsgd_step(&mut theta, 0.5, &[(0.5, &[1.0])], 0.1, &obj, &mut derive(0, &[]));
        assert_eq!(theta, vec![1.0]);
    }

    #[test]
    fn dsgt_single_agent_is_sgd() {
        let obj = QuadraticObjective::scalar(3.0);
        let mut rng = derive(0, &[]);
        let mut theta = vec![0.0];
        let mut tracker = Tracker::init(&theta, &obj, &mut rng);
        let mut plain = 0.0;
        for _ in 0..20 {
            dsgt_step(&mut theta, &mut tracker, 1.0, &[], 0.1, &obj, &mut rng);
            plain -= 0.1 * 2.0 * (plain - 3.0);
            assert_close!(theta[0], plain, 1e-14);
            assert_eq!(tracker.y, tracker.last_grad);
        }
    }

    #[test]
    fn momentum_accumulates() {
        let obj = QuadraticObjective {
            a: vec![0.0],
            b: vec![-1.0],
            dim: 1,
        };
        // constant gradient 0 from the objective; dual gives constant 1
        let mut theta = vec![0.0];
        let mut v = vec![0.0];
        let settings = SgdSettings {
            steps: 2,
            lr: 0.1,
            momentum: 0.9,
        };
        descend(&mut theta, &mut v, &[1.0], &Penalty::default(), &obj, settings, &mut derive(0, &[]));
        assert_close!(theta[0], -0.1 - 0.19, 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(ConsensusConfig::default().validate().is_ok());
        let bad = [
            ConsensusConfig { rho: 0.0, ..Default::default() },
            ConsensusConfig { inner_steps: 0, ..Default::default() },
            ConsensusConfig { lr: -1.0, ..Default::default() },
            ConsensusConfig { momentum: 1.0, ..Default::default() },
            ConsensusConfig { weights: WeightMode::Uniform(0.0), ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        let parsed: ConsensusConfig =
            serde_json::from_str(r#"{"optimizer":"cadmm","weights":{"uniform":1.0}}"#).unwrap();
        assert_eq!(parsed.optimizer, OptimizerKind::Cadmm);
        assert_eq!(parsed.weights, WeightMode::Uniform(1.0));
    }

    proptest! {
        #[test]
        fn target_is_symmetric_and_between(
            a in -5.0f64..5.0, b in -5.0f64..5.0, wa in 1e-3f64..1.0, wb in 1e-3f64..1.0,
        ) {
            let z1 = consensus_target(&[a], &[b], &[wa], &[wb]).unwrap()[0];
            let z2 = consensus_target(&[b], &[a], &[wb], &[wa]).unwrap()[0];
            prop_assert_eq!(z1, z2);
            prop_assert!(z1 >= a.min(b) - 1e-12 && z1 <= a.max(b) + 1e-12);
        }

        #[test]
        fn paired_duals_cancel(
            a in -5.0f64..5.0, b in -5.0f64..5.0, wa in 1e-3f64..1.0, wb in 1e-3f64..1.0,
            rho in 0.1f64..3.0,
        ) {
            let mut pi = vec![0.0];
            let mut pj = vec![0.0];
            ramen_dual(&mut pi, &[a], &[WeightedNeighbor { theta: &[b], w_local: &[wa], w_neighbor: &[wb] }], rho);
            ramen_dual(&mut pj, &[b], &[WeightedNeighbor { theta: &[a], w_local: &[wb], w_neighbor: &[wa] }], rho);
            prop_assert_eq!(pi[0] + pj[0], 0.0);
        }
    }
}
