//! Frequency-based epistemic uncertainty: per-parameter counts of nonzero
//! gradient updates, and their conversion into consensus weights.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neural_map::FeatureGrid;
use crate::objective::GradReport;

#[derive(Debug, Error, PartialEq)]
pub enum UncertaintyError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid weight bounds: {0}")]
    InvalidBounds(&'static str),
}

/// Diagonal of a consensus weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn uniform(n: usize, value: f64) -> Self {
        Self(vec![value; n])
    }
}

impl std::ops::Deref for WeightVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Per-parameter count of iterations with a nonzero objective gradient.
/// Higher counts mean more observations and lower uncertainty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UncertaintyCounter(pub Vec<u32>);

impl UncertaintyCounter {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn counts(&self) -> &[u32] {
        &self.0
    }

    /// Add one to every parameter set in `mask`.
    pub fn record_mask(&mut self, mask: &[bool]) -> Result<(), UncertaintyError> {
        if mask.len() != self.0.len() {
            return Err(UncertaintyError::LengthMismatch {
                left: self.0.len(),
                right: mask.len(),
            });
        }
        for (u, &m) in self.0.iter_mut().zip(mask) {
            *u += m as u32;
        }
        Ok(())
    }

    /// Add one wherever the report's gradient is nonzero.
    pub fn update(&mut self, report: &GradReport) -> Result<(), UncertaintyError> {
        self.record_mask(&report.touched)
    }
}

/// Functional form of [`UncertaintyCounter::update`].
pub fn update_counts(
    u: &UncertaintyCounter,
    report: &GradReport,
) -> Result<UncertaintyCounter, UncertaintyError> {
    let mut next = u.clone();
    next.update(report)?;
    Ok(next)
}

/// Bounds of the affine count-to-weight map plus a positivity floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightBounds {
    pub lower: f64,
    pub upper: f64,
    pub floor: f64,
}

impl Default for WeightBounds {
    fn default() -> Self {
        Self {
            lower: 0.2,
            upper: 1.0,
            floor: 1e-3,
        }
    }
}

impl WeightBounds {
    pub fn validate(&self) -> Result<(), UncertaintyError> {
        if !(self.lower > 0.0 && self.lower < self.upper) {
            return Err(UncertaintyError::InvalidBounds("need 0 < lower < upper"));
        }
        if !(self.floor > 0.0 && self.floor <= self.lower) {
            return Err(UncertaintyError::InvalidBounds("need 0 < floor <= lower"));
        }
        Ok(())
    }
}

/// Weights for one neighbour pair, with the shared scale and shift used.
#[derive(Debug, Clone, PartialEq)]
pub struct PairWeights {
    /// Weight on the local agent's parameters.
    pub local: WeightVector,
    /// Weight on the neighbour's parameters.
    pub neighbor: WeightVector,
    /// `None` when every summed count is equal.
    pub scale: Option<f64>,
    pub shift: f64,
}

/// Map two count vectors onto weights with one shared affine transform:
///
/// ```text
/// u_sum = u_i + u_j
/// ε = (β_u − β_l) / (max u_sum − min u_sum)
/// ζ = β_l − ε · min u_sum
/// w_ij = clamp(ε u_i + ζ, floor, β_u),  w_ji = clamp(ε u_j + ζ, floor, β_u)
/// ```
///
/// The shared `ε, ζ` keep the two agents' counts comparable. When all summed
/// counts are equal, both weights are `(β_l + β_u) / 2` everywhere.
pub fn compute_weights(
    u_i: &[u32],
    u_j: &[u32],
    bounds: &WeightBounds,
) -> Result<PairWeights, UncertaintyError> {
    if u_i.len() != u_j.len() {
        return Err(UncertaintyError::LengthMismatch {
            left: u_i.len(),
            right: u_j.len(),
        });
    }
    let sums = u_i.iter().zip(u_j).map(|(&a, &b)| a as f64 + b as f64);
    let (lo, hi) = sums.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
        (lo.min(s), hi.max(s))
    });
    if u_i.is_empty() || lo == hi {
        let mid = 0.5 * (bounds.lower + bounds.upper);
        return Ok(PairWeights {
            local: WeightVector::uniform(u_i.len(), mid),
            neighbor: WeightVector::uniform(u_i.len(), mid),
            scale: None,
            shift: mid,
        });
    }
    let scale = (bounds.upper - bounds.lower) / (hi - lo);
    let shift = bounds.lower - scale * lo;
    let map = |u: &[u32]| {
        WeightVector(
            u.iter()
                // equal to `scale * c + shift`, rounded once less
                .map(|&c| (bounds.lower + scale * (c as f64 - lo)).clamp(bounds.floor, bounds.upper))
                .collect(),
        )
    };
    Ok(PairWeights {
        local: map(u_i),
        neighbor: map(u_j),
        scale: Some(scale),
        shift,
    })
}

/// Per-vertex uncertainty summary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VertexUncertainty {
    pub level: usize,
    pub ix: usize,
    pub iy: usize,
    /// Sum over channels.
    pub count: u64,
    pub channel_counts: Vec<u32>,
}

/// Unflatten counts into one record per lattice vertex, level by level,
/// row-major within a level.
pub fn export_uncertainty(u: &UncertaintyCounter, grid: &FeatureGrid) -> Vec<VertexUncertainty> {
    assert_eq!(u.len(), grid.param_count(), "counter does not match grid");
    let f = grid.feature_dim();
    u.0.chunks_exact(f)
        .enumerate()
        .map(|(v, chunk)| {
            let at = grid.locate(v * f);
            VertexUncertainty {
                level: at.level,
                ix: at.ix,
                iy: at.iy,
                count: chunk.iter().map(|&c| c as u64).sum(),
                channel_counts: chunk.to_vec(),
            }
        })
        .collect()
}

/// Inverse of [`export_uncertainty`].
pub fn flatten_uncertainty(records: &[VertexUncertainty], grid: &FeatureGrid) -> UncertaintyCounter {
    let mut u = UncertaintyCounter::zeros(grid.param_count());
    for r in records {
        for (ch, &c) in r.channel_counts.iter().enumerate() {
            let k = grid.index(crate::neural_map::GridIndex {
                level: r.level,
                ix: r.ix,
                iy: r.iy,
                channel: ch,
            });
            u.0[k] = c;
        }
    }
    u
}

/// CSV with columns `level,ix,iy,count`.
pub fn uncertainty_csv(records: &[VertexUncertainty]) -> String {
    let mut out = String::from("level,ix,iy,count\n");
    for r in records {
        out.push_str(&format!("{},{},{},{}\n", r.level, r.ix, r.iy, r.count));
    }
    out
}
