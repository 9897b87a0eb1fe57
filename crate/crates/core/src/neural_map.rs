//! The implicit map: a dense multi-resolution 2D feature grid, a one-blob
//! positional encoding and a frozen decoder.
//!
//! Only the grid features are learnable. They are flattened into a single
//! parameter vector with a fixed layout:
//!
//! ```text
//! index(level, ix, iy, channel) = offset[level] + ((iy * (res + 1) + ix) * F + channel)
//! ```
//!
//! so `n = Σ_l (res_l + 1)² · F`. The decoder is affine in the features, which
//! makes the SDF linear in the parameters and the gradient of a query a
//! sparse vector with at most `4 · L · F` entries.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use thiserror::Error;

use crate::geometry::{Aabb, Vec2};
use crate::rng::{derive, Purpose};
use crate::scene2d::ObservedRay;

/// Floor applied to the weight sum when rendering depth.
pub const WEIGHT_SUM_FLOOR: f64 = 1e-8;

const SNAPSHOT_MAGIC: [u8; 4] = *b"NMAP";
pub const SNAPSHOT_HEADER_LEN: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum MapError {
    #[error("parameter vector has length {got}, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid grid config: {0}")]
    InvalidConfig(String),
    #[error("malformed snapshot: {0}")]
    BadSnapshot(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Cells per axis, coarse to fine.
    pub resolutions: Vec<usize>,
    pub feature_dim: usize,
    pub bounds: Aabb,
    /// Truncation distance `tr` in scene units.
    pub truncation: f64,
    pub samples_per_ray: usize,
    /// One-blob bins per axis.
    pub blob_bins: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![8, 32],
            feature_dim: 2,
            bounds: Aabb::UNIT,
            truncation: 0.05,
            samples_per_ray: 32,
            blob_bins: 8,
        }
    }
}

impl GridConfig {
    /// `levels` resolutions in geometric progression from `coarse` to `fine`.
    pub fn geometric(coarse: usize, fine: usize, levels: usize) -> Vec<usize> {
        if levels <= 1 {
            return vec![coarse];
        }
        let ratio = (fine as f64 / coarse as f64).powf(1.0 / (levels - 1) as f64);
        (0..levels)
            .map(|l| (coarse as f64 * ratio.powi(l as i32)).round() as usize)
            .collect()
    }

    pub fn validate(&self) -> Result<(), MapError> {
        let bad = |m: &str| Err(MapError::InvalidConfig(m.to_string()));
        if self.resolutions.is_empty() {
            return bad("at least one level is required");
        }
        if self.resolutions[0] == 0 {
            return bad("resolutions must be positive");
        }
        if self.resolutions.windows(2).any(|w| w[1] <= w[0]) {
            return bad("resolutions must be strictly increasing");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be at least 1");
        }
        if !self.bounds.is_valid() {
            return bad("bounds are empty");
        }
        if !(self.truncation > 0.0) {
            return bad("truncation must be positive");
        }
        if self.samples_per_ray < 2 {
            return bad("samples_per_ray must be at least 2");
        }
        if self.blob_bins < 2 {
            return bad("blob_bins must be at least 2");
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.resolutions.len()
    }
}

/// Location of one scalar parameter inside the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridIndex {
    pub level: usize,
    pub ix: usize,
    pub iy: usize,
    pub channel: usize,
}

/// The parameter layout of a dense multi-level grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    config: GridConfig,
    offsets: Vec<usize>,
    len: usize,
}

impl FeatureGrid {
    pub fn new(config: GridConfig) -> Result<Self, MapError> {
        config.validate()?;
        let mut offsets = Vec::with_capacity(config.levels());
        let mut len = 0;
        for &res in &config.resolutions {
            offsets.push(len);
            len += (res + 1) * (res + 1) * config.feature_dim;
        }
        Ok(Self {
            config,
            offsets,
            len,
        })
    }

    pub fn config(&self) -> &GridConfig {
        &self.config
    }

    /// Number of learnable parameters `n`.
    pub fn param_count(&self) -> usize {
        self.len
    }

    pub fn levels(&self) -> usize {
        self.config.levels()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn resolution(&self, level: usize) -> usize {
        self.config.resolutions[level]
    }

    pub fn level_offset(&self, level: usize) -> usize {
        self.offsets[level]
    }

    pub fn index(&self, at: GridIndex) -> usize {
        let res = self.config.resolutions[at.level];
        debug_assert!(at.ix <= res && at.iy <= res && at.channel < self.config.feature_dim);
        self.offsets[at.level] + (at.iy * (res + 1) + at.ix) * self.config.feature_dim + at.channel
    }

    /// Inverse of [`FeatureGrid::index`].
    pub fn locate(&self, k: usize) -> GridIndex {
        assert!(k < self.len, "parameter index {k} out of range");
        let level = self.offsets.partition_point(|&o| o <= k) - 1;
        let res = self.config.resolutions[level];
        let local = k - self.offsets[level];
        let f = self.config.feature_dim;
        let vertex = local / f;
        GridIndex {
            level,
            ix: vertex % (res + 1),
            iy: vertex / (res + 1),
            channel: local % f,
        }
    }

    /// World position of a lattice vertex.
    pub fn vertex_position(&self, level: usize, ix: usize, iy: usize) -> Vec2 {
        let res = self.config.resolutions[level] as f64;
        let b = self.config.bounds;
        let e = b.extent();
        Vec2::new(
            b.min.x + e.x * ix as f64 / res,
            b.min.y + e.y * iy as f64 / res,
        )
    }

    /// Cell `(ix, iy)` containing `p` at `level` (after clamping to bounds).
    pub fn cell_of(&self, level: usize, p: Vec2) -> (usize, usize) {
        let res = self.config.resolutions[level];
        let q = self.config.bounds.normalize(p);
        let cell = |u: f64| ((u * res as f64).floor() as usize).min(res - 1);
        (cell(q.x), cell(q.y))
    }

    /// Bilinear interpolation stencil at `p`: four corners per level.
    pub fn interpolate(&self, p: Vec2) -> Interpolation {
        let q = self.config.bounds.normalize(p);
        let f = self.config.feature_dim;
        let mut corners = SmallVec::new();
        for (level, &res) in self.config.resolutions.iter().enumerate() {
            let ux = q.x * res as f64;
            let uy = q.y * res as f64;
            let ix = (ux.floor() as usize).min(res - 1);
            let iy = (uy.floor() as usize).min(res - 1);
            let fx = ux - ix as f64;
            let fy = uy - iy as f64;
            let row = res + 1;
            let base = self.offsets[level];
            let at = |x: usize, y: usize| base + (y * row + x) * f;
            corners.push(Corner {
                base: at(ix, iy),
                weight: (1.0 - fx) * (1.0 - fy),
            });
            corners.push(Corner {
                base: at(ix + 1, iy),
                weight: fx * (1.0 - fy),
            });
            corners.push(Corner {
                base: at(ix, iy + 1),
                weight: (1.0 - fx) * fy,
            });
            corners.push(Corner {
                base: at(ix + 1, iy + 1),
                weight: fx * fy,
            });
        }
        Interpolation {
            corners,
            feature_dim: f,
        }
    }
}

/// One lattice vertex touched by an interpolation and its bilinear weight.
/// `base` indexes channel 0 of the vertex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    pub base: usize,
    pub weight: f64,
}

/// Four corners per level, coarse to fine.
#[derive(Debug, Clone, PartialEq)]
pub struct Interpolation {
    pub corners: SmallVec<[Corner; 16]>,
    feature_dim: usize,
}

impl Interpolation {
    pub fn levels(&self) -> usize {
        self.corners.len() / 4
    }

    pub fn level(&self, level: usize) -> &[Corner] {
        &self.corners[4 * level..4 * level + 4]
    }

    /// Interpolated feature vector, `F` entries per level concatenated.
    pub fn features(&self, theta: &[f64]) -> SmallVec<[f64; 8]> {
        let f = self.feature_dim;
        let mut out: SmallVec<[f64; 8]> = SmallVec::from_elem(0.0, self.levels() * f);
        for (l, chunk) in self.corners.chunks_exact(4).enumerate() {
            for c in chunk {
                for ch in 0..f {
                    out[l * f + ch] += c.weight * theta[c.base + ch];
                }
            }
        }
        out
    }
}

/// One-blob encoding of a normalized coordinate pair: per axis, Gaussian
/// bumps centred at `(k + 0.5) / bins` with width `1 / bins`.
pub fn one_blob_encode(unit: Vec2, bins: usize) -> SmallVec<[f64; 32]> {
    let sigma = 1.0 / bins as f64;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut out = SmallVec::with_capacity(2 * bins);
    for x in [unit.x.clamp(0.0, 1.0), unit.y.clamp(0.0, 1.0)] {
        for k in 0..bins {
            let c = (k as f64 + 0.5) / bins as f64;
            out.push((-(x - c) * (x - c) * inv).exp());
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderKind {
    IdentitySum,
    FixedAffine,
}

/// How to build the frozen decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSpec {
    pub kind: DecoderKind,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        Self {
            kind: DecoderKind::FixedAffine,
            seed: 0,
        }
    }
}

/// Frozen map from `[γ(p); features]` to a signed distance.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoder {
    /// `s = Σ_l` (channel 0 of level `l`).
    IdentitySum,
    /// `s = bias + a·γ(p) + c·features`.
    FixedAffine {
        blob_weights: Vec<f64>,
        feature_weights: Vec<f64>,
        bias: f64,
    },
}

impl Decoder {
    /// Deterministically generate the decoder described by `spec`.
    ///
    /// The affine decoder has a positive bias of `tr` and small encoding
    /// weights, so an untrained map reads as free space everywhere.
    pub fn build(spec: DecoderSpec, config: &GridConfig) -> Decoder {
        match spec.kind {
            DecoderKind::IdentitySum => Decoder::IdentitySum,
            DecoderKind::FixedAffine => {
                let mut rng = derive(spec.seed, &[Purpose::Decoder as u64]);
                let tr = config.truncation;
                let blob_weights = (0..2 * config.blob_bins)
                    .map(|_| rng.random_range(-0.1..0.1) * tr)
                    .collect();
                let feature_weights = (0..config.levels() * config.feature_dim)
                    .map(|_| rng.random_range(0.5..1.5))
                    .collect();
                Decoder::FixedAffine {
                    blob_weights,
                    feature_weights,
                    bias: tr,
                }
            }
        }
    }

    /// Weight of feature `channel` at `level` in the decoder output.
    #[inline]
    fn feature_weight(&self, level: usize, channel: usize, feature_dim: usize) -> f64 {
        match self {
            Decoder::IdentitySum => {
                if channel == 0 {
                    1.0
                } else {
                    0.0
                }
            }
            Decoder::FixedAffine {
                feature_weights, ..
            } => feature_weights[level * feature_dim + channel],
        }
    }

    fn position_term(&self, unit: Vec2) -> f64 {
        match self {
            Decoder::IdentitySum => 0.0,
            Decoder::FixedAffine {
                blob_weights, bias, ..
            } => {
                let bins = blob_weights.len() / 2;
                let enc = one_blob_encode(unit, bins);
                bias + enc.iter().zip(blob_weights).map(|(e, w)| e * w).sum::<f64>()
            }
        }
    }
}

/// Sparse gradient of one SDF query with respect to the parameters.
pub type SparseGrad = SmallVec<[(usize, f64); 32]>;

/// A grid layout paired with its frozen decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralMap {
    pub grid: FeatureGrid,
    pub decoder: Decoder,
}

impl NeuralMap {
    pub fn new(config: GridConfig, spec: DecoderSpec) -> Result<Self, MapError> {
        let decoder = Decoder::build(spec, &config);
        Ok(Self {
            grid: FeatureGrid::new(config)?,
            decoder,
        })
    }

    pub fn param_count(&self) -> usize {
        self.grid.param_count()
    }

    pub fn truncation(&self) -> f64 {
        self.grid.config().truncation
    }

    pub fn zeros(&self) -> Vec<f64> {
        vec![0.0; self.param_count()]
    }

    pub fn check_len(&self, theta: &[f64]) -> Result<(), MapError> {
        if theta.len() != self.param_count() {
            return Err(MapError::LengthMismatch {
                expected: self.param_count(),
                got: theta.len(),
            });
        }
        Ok(())
    }

    /// Signed distance at `p`, validating the parameter length.
    pub fn query_sdf(&self, theta: &[f64], p: Vec2) -> Result<f64, MapError> {
        self.check_len(theta)?;
        Ok(self.sdf(theta, p))
    }

    /// Signed distance at `p`. `theta` must have length `n`.
    pub fn sdf(&self, theta: &[f64], p: Vec2) -> f64 {
        let interp = self.grid.interpolate(p);
        self.decode(theta, p, &interp)
    }

    fn decode(&self, theta: &[f64], p: Vec2, interp: &Interpolation) -> f64 {
        let f = self.grid.feature_dim();
        let features = interp.features(theta);
        let mut s = self
            .decoder
            .position_term(self.grid.config().bounds.normalize(p));
        for l in 0..self.grid.levels() {
            for ch in 0..f {
                s += self.decoder.feature_weight(l, ch, f) * features[l * f + ch];
            }
        }
        s
    }

    /// Signed distance and its sparse gradient at `p`.
    pub fn sdf_and_grad(&self, theta: &[f64], p: Vec2) -> (f64, SparseGrad) {
        let interp = self.grid.interpolate(p);
        let s = self.decode(theta, p, &interp);
        (s, self.grad_from(&interp))
    }

    /// Sparse gradient of the SDF at `p`; nonzeros only on touched vertices.
    pub fn query_grad(&self, theta: &[f64], p: Vec2) -> Result<SparseGrad, MapError> {
        self.check_len(theta)?;
        Ok(self.grad_from(&self.grid.interpolate(p)))
    }

    fn grad_from(&self, interp: &Interpolation) -> SparseGrad {
        let f = self.grid.feature_dim();
        let mut g = SparseGrad::new();
        for (l, chunk) in interp.corners.chunks_exact(4).enumerate() {
            for c in chunk {
                if c.weight == 0.0 {
                    continue;
                }
                for ch in 0..f {
                    let dw = self.decoder.feature_weight(l, ch, f);
                    if dw != 0.0 {
                        g.push((c.base + ch, dw * c.weight));
                    }
                }
            }
        }
        g
    }

    /// Rendered depth along `ray` over its stored samples.
    pub fn render_depth(&self, theta: &[f64], ray: &ObservedRay) -> f64 {
        let tr = self.truncation();
        let mut num = 0.0;
        let mut den = 0.0;
        for s in &ray.samples {
            let w = ray_weight(self.sdf(theta, ray.point_at(s.distance)), tr);
            num += w * s.distance;
            den += w;
        }
        num / den.max(WEIGHT_SUM_FLOOR)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Bell-shaped rendering weight `σ(s/tr)·σ(−s/tr)`, peaking at the surface.
pub fn ray_weight(s: f64, tr: f64) -> f64 {
    let a = s / tr;
    sigmoid(a) * sigmoid(-a)
}

/// Derivative of [`ray_weight`] with respect to `s`.
pub fn ray_weight_derivative(s: f64, tr: f64) -> f64 {
    let a = s / tr;
    let (p, q) = (sigmoid(a), sigmoid(-a));
    p * q * (q - p) / tr
}

/// Header of a serialized parameter snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SnapshotHeader {
    pub len: u32,
    pub levels: u32,
    pub feature_dim: u32,
}

/// Size in bytes of an encoded snapshot of `n` parameters.
pub fn snapshot_len(n: usize) -> usize {
    SNAPSHOT_HEADER_LEN + 4 * n
}

/// Encode parameters as `magic | n | levels | F` (little-endian u32 each)
/// followed by `n` little-endian f32 values.
pub fn encode_snapshot(theta: &[f64], levels: u32, feature_dim: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(SNAPSHOT_HEADER_LEN + 4 * theta.len());
    out.extend_from_slice(&SNAPSHOT_MAGIC);
    out.extend_from_slice(&(theta.len() as u32).to_le_bytes());
    out.extend_from_slice(&levels.to_le_bytes());
    out.extend_from_slice(&feature_dim.to_le_bytes());
    for &v in theta {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Decode a snapshot, returning its header, the values, and the number of
/// bytes consumed.
pub fn decode_snapshot(bytes: &[u8]) -> Result<(SnapshotHeader, Vec<f32>, usize), MapError> {
    if bytes.len() < SNAPSHOT_HEADER_LEN {
        return Err(MapError::BadSnapshot("truncated header".into()));
    }
    if bytes[..4] != SNAPSHOT_MAGIC {
        return Err(MapError::BadSnapshot("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let header = SnapshotHeader {
        len: word(4),
        levels: word(8),
        feature_dim: word(12),
    };
    let end = SNAPSHOT_HEADER_LEN + 4 * header.len as usize;
    if bytes.len() < end {
        return Err(MapError::BadSnapshot(format!(
            "payload holds {} bytes, header promises {}",
            bytes.len() - SNAPSHOT_HEADER_LEN,
            4 * header.len
        )));
    }
    let values = bytes[SNAPSHOT_HEADER_LEN..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, values, end))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive;
    use crate::scene2d::{label_sample, ObservedRay};

    fn identity_map(resolutions: Vec<usize>, f: usize) -> NeuralMap {
        let config = GridConfig {
            resolutions,
            feature_dim: f,
            ..GridConfig::default()
        };
        NeuralMap::new(
            config,
            DecoderSpec {
                kind: DecoderKind::IdentitySum,
                seed: 0,
            },
        )
        .unwrap()
    }

    #[test]
    fn default_config_param_count() {
        let grid = FeatureGrid::new(GridConfig::default()).unwrap();
        assert_eq!(grid.param_count(), (9 * 9 + 33 * 33) * 2);
    }

    #[test]
    fn geometric_resolutions() {
        assert_eq!(GridConfig::geometric(8, 32, 3), vec![8, 16, 32]);
        assert_eq!(GridConfig::geometric(8, 32, 1), vec![8]);
    }

    #[test]
    fn config_validation() {
        let mut c = GridConfig::default();
        c.resolutions = vec![8, 8];
        assert!(FeatureGrid::new(c.clone()).is_err());
        c.resolutions = vec![];
        assert!(FeatureGrid::new(c.clone()).is_err());
        c.resolutions = vec![4];
        c.truncation = 0.0;
        assert!(FeatureGrid::new(c).is_err());
    }

    #[test]
    fn flattening_is_a_bijection() {
        let grid = FeatureGrid::new(GridConfig {
            resolutions: vec![3, 5],
            feature_dim: 3,
            ..GridConfig::default()
        })
        .unwrap();
        let mut seen = vec![false; grid.param_count()];
        for level in 0..2 {
            let res = grid.resolution(level);
            for iy in 0..=res {
                for ix in 0..=res {
                    for channel in 0..3 {
                        let at = GridIndex {
                            level,
                            ix,
                            iy,
                            channel,
                        };
                        let k = grid.index(at);
                        assert!(!seen[k]);
                        seen[k] = true;
                        assert_eq!(grid.locate(k), at);
                    }
                }
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn one_blob_peak_and_formula() {
        let enc = one_blob_encode(Vec2::new(2.5 / 4.0, 0.0), 4);
        assert!((enc[2] - 1.0).abs() < 1e-15);

        let enc = one_blob_encode(Vec2::new(0.5, 0.5), 4);
        // σ = 0.25, centres 0.125, 0.375, 0.625, 0.875
        let expected = [
            (-0.375f64.powi(2) / 0.125).exp(),
            (-0.125f64.powi(2) / 0.125).exp(),
            (-0.125f64.powi(2) / 0.125).exp(),
            (-0.375f64.powi(2) / 0.125).exp(),
        ];
        for k in 0..4 {
            assert!((enc[k] - expected[k]).abs() < 1e-15);
            assert!((enc[4 + k] - expected[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn one_blob_translation_symmetry() {
        let bins = 8;
        let x = 0.3;
        let a = one_blob_encode(Vec2::new(x, 0.5), bins);
        let b = one_blob_encode(Vec2::new(x + 1.0 / bins as f64, 0.5), bins);
        for k in 1..bins - 2 {
            assert!((a[k] - b[k + 1]).abs() < 1e-12, "bin {k}");
        }
    }

    #[test]
    fn interpolation_at_vertex_and_centre() {
        let map = identity_map(vec![4], 1);
        let at_vertex = map.grid.interpolate(Vec2::new(0.25, 0.5));
        let nonzero: Vec<_> = at_vertex.corners.iter().filter(|c| c.weight != 0.0).collect();
        assert_eq!(nonzero.len(), 1);
        assert_eq!(nonzero[0].weight, 1.0);
        assert_eq!(
            nonzero[0].base,
            map.grid.index(GridIndex {
                level: 0,
                ix: 1,
                iy: 2,
                channel: 0
            })
        );

        let centre = map.grid.interpolate(Vec2::new(0.125, 0.125));
        assert!(centre.corners.iter().all(|c| c.weight == 0.25));
    }

    #[test]
    fn partition_of_unity() {
        let map = identity_map(vec![8, 32], 2);
        let mut rng = derive(5, &[]);
        for _ in 0..1000 {
            let p = Vec2::new(rng.random(), rng.random());
            let interp = map.grid.interpolate(p);
            for l in 0..2 {
                let sum: f64 = interp.level(l).iter().map(|c| c.weight).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_params_give_zero_field() {
        let map = identity_map(vec![8, 32], 2);
        let theta = map.zeros();
        assert_eq!(map.query_sdf(&theta, Vec2::new(0.3, 0.7)).unwrap(), 0.0);
    }

    #[test]
    fn constant_cell_gives_constant_field() {
        let map = identity_map(vec![4], 1);
        let mut theta = map.zeros();
        for (ix, iy) in [(1, 1), (2, 1), (1, 2), (2, 2)] {
            theta[map.grid.index(GridIndex {
                level: 0,
                ix,
                iy,
                channel: 0,
            })] = 0.3;
        }
        let mut rng = derive(2, &[]);
        for _ in 0..50 {
            let p = Vec2::new(0.25 + 0.25 * rng.random::<f64>(), 0.25 + 0.25 * rng.random::<f64>());
            assert!((map.sdf(&theta, p) - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let map = identity_map(vec![4], 1);
        assert_eq!(
            map.query_sdf(&[0.0; 3], Vec2::ZERO),
            Err(MapError::LengthMismatch {
                expected: 25,
                got: 3
            })
        );
        assert!(map.query_grad(&[0.0; 3], Vec2::ZERO).is_err());
    }

    /// Reference evaluation of the affine decoder written out term by term.
    fn affine_reference(map: &NeuralMap, theta: &[f64], p: Vec2) -> f64 {
        let Decoder::FixedAffine {
            blob_weights,
            feature_weights,
            bias,
        } = &map.decoder
        else {
            unreachable!()
        };
        let cfg = map.grid.config();
        let bins = cfg.blob_bins;
        let u = (p.x - cfg.bounds.min.x) / cfg.bounds.extent().x;
        let v = (p.y - cfg.bounds.min.y) / cfg.bounds.extent().y;
        let mut s = *bias;
        for k in 0..bins {
            let c = (k as f64 + 0.5) / bins as f64;
            let sig = 1.0 / bins as f64;
            s += blob_weights[k] * (-(u - c).powi(2) / (2.0 * sig * sig)).exp();
            s += blob_weights[bins + k] * (-(v - c).powi(2) / (2.0 * sig * sig)).exp();
        }
        for (l, &res) in cfg.resolutions.iter().enumerate() {
            let gx = u * res as f64;
            let gy = v * res as f64;
            let x0 = (gx.floor() as usize).min(res - 1);
            let y0 = (gy.floor() as usize).min(res - 1);
            let (tx, ty) = (gx - x0 as f64, gy - y0 as f64);
            for ch in 0..cfg.feature_dim {
                let get = |x: usize, y: usize| {
                    theta[map.grid.index(GridIndex {
                        level: l,
                        ix: x,
                        iy: y,
                        channel: ch,
                    })]
                };
                let bottom = get(x0, y0) * (1.0 - tx) + get(x0 + 1, y0) * tx;
                let top = get(x0, y0 + 1) * (1.0 - tx) + get(x0 + 1, y0 + 1) * tx;
                let feat = bottom * (1.0 - ty) + top * ty;
                s += feature_weights[l * cfg.feature_dim + ch] * feat;
            }
        }
        s
    }

    #[test]
    fn affine_decoder_matches_reference() {
        let map = NeuralMap::new(GridConfig::default(), DecoderSpec::default()).unwrap();
        let mut rng = derive(9, &[]);
        for _ in 0..100 {
            let theta: Vec<f64> = (0..map.param_count())
                .map(|_| rng.random_range(-0.1..0.1))
                .collect();
            let p = Vec2::new(rng.random(), rng.random());
            let got = map.sdf(&theta, p);
            let want = affine_reference(&map, &theta, p);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn untrained_affine_map_reads_free_space() {
        let map = NeuralMap::new(GridConfig::default(), DecoderSpec::default()).unwrap();
        let theta = map.zeros();
        let mut rng = derive(10, &[]);
        for _ in 0..200 {
            let p = Vec2::new(rng.random(), rng.random());
            assert!(map.sdf(&theta, p) > 0.0);
        }
    }

    #[test]
    fn identity_gradient_at_vertex() {
        let map = identity_map(vec![4, 8], 2);
        let theta = map.zeros();
        let g = map.query_grad(&theta, Vec2::new(0.5, 0.25)).unwrap();
        let mut expected: Vec<(usize, f64)> = vec![
            (
                map.grid.index(GridIndex {
                    level: 0,
                    ix: 2,
                    iy: 1,
                    channel: 0,
                }),
                1.0,
            ),
            (
                map.grid.index(GridIndex {
                    level: 1,
                    ix: 4,
                    iy: 2,
                    channel: 0,
                }),
                1.0,
            ),
        ];
        let mut got: Vec<_> = g.into_iter().collect();
        got.sort_by_key(|e| e.0);
        expected.sort_by_key(|e| e.0);
        assert_eq!(got, expected);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let map = NeuralMap::new(GridConfig::default(), DecoderSpec::default()).unwrap();
        let mut rng = derive(11, &[]);
        let h = 1e-5;
        for _ in 0..100 {
            let mut theta: Vec<f64> = (0..map.param_count())
                .map(|_| rng.random_range(-0.1..0.1))
                .collect();
            let p = Vec2::new(rng.random(), rng.random());
            let sparse = map.query_grad(&theta, p).unwrap();
            assert!(sparse.len() <= 4 * 2 * 2);
            let mut dense = vec![0.0; theta.len()];
            for (k, v) in sparse {
                dense[k] += v;
            }
            for k in map.grid.interpolate(p).corners.iter().flat_map(|c| [c.base, c.base + 1]) {
                let orig = theta[k];
                theta[k] = orig + h;
                let up = map.sdf(&theta, p);
                theta[k] = orig - h;
                let down = map.sdf(&theta, p);
                theta[k] = orig;
                let fd = (up - down) / (2.0 * h);
                let err = (fd - dense[k]).abs();
                assert!(err <= 1e-4 * fd.abs().max(dense[k].abs()) || err <= 1e-8);
            }
        }
    }

    #[test]
    fn ray_weight_properties() {
        let tr = 0.05;
        assert_eq!(ray_weight(0.0, tr), 0.25);
        assert!(ray_weight(10.0 * tr, tr) < 1e-4);
        assert_eq!(ray_weight(0.5 * tr, tr), ray_weight(-0.5 * tr, tr));
        let h = 1e-7;
        for s in [-0.07, -0.01, 0.0, 0.02, 0.1] {
            let fd = (ray_weight(s + h, tr) - ray_weight(s - h, tr)) / (2.0 * h);
            assert!((fd - ray_weight_derivative(s, tr)).abs() < 1e-6);
        }
    }

    fn straight_ray(m: usize, far: f64) -> ObservedRay {
        ObservedRay {
            origin: Vec2::new(0.0, 0.5),
            direction: Vec2::new(1.0, 0.0),
            measured_depth: 0.5,
            hit: true,
            max_range: far,
            samples: (0..m)
                .map(|k| label_sample(far * (k as f64 + 1.0) / m as f64, 0.05, Some(0.5)))
                .collect(),
        }
    }

    #[test]
    fn zero_field_renders_mean_distance() {
        let map = identity_map(vec![8], 1);
        let theta = map.zeros();
        let ray = straight_ray(10, 1.0);
        let mean = ray.samples.iter().map(|s| s.distance).sum::<f64>() / 10.0;
        assert!((map.render_depth(&theta, &ray) - mean).abs() < 1e-12);
    }

    #[test]
    fn constant_free_space_field_renders_mean_distance() {
        let map = identity_map(vec![8], 1);
        let theta = vec![0.05; map.param_count()];
        let ray = straight_ray(16, 0.9);
        let mean = ray.samples.iter().map(|s| s.distance).sum::<f64>() / 16.0;
        assert!((map.render_depth(&theta, &ray) - mean).abs() < 1e-12);
    }

    /// Field `s = 0.5 - x` on a single-level grid; the rendered depth along
    /// the x axis should sit at the zero crossing, within one sample spacing.
    #[test]
    fn linear_field_renders_zero_crossing() {
        let map = identity_map(vec![8], 1);
        let mut theta = map.zeros();
        for iy in 0..=8 {
            for ix in 0..=8 {
                let k = map.grid.index(GridIndex {
                    level: 0,
                    ix,
                    iy,
                    channel: 0,
                });
                theta[k] = 0.5 - ix as f64 / 8.0;
            }
        }
        // dense oracle: M = 10⁴ samples along [0, 1]
        let dense = straight_ray(10_000, 1.0);
        let oracle = map.render_depth(&theta, &dense);
        assert!((oracle - 0.5).abs() < 1e-3, "oracle {oracle}");
        let m = 32;
        let coarse = straight_ray(m, 1.0);
        let got = map.render_depth(&theta, &coarse);
        assert!((got - oracle).abs() <= 1.0 / m as f64, "{got} vs {oracle}");
    }

    #[test]
    fn render_depth_invariant_to_weight_rescaling() {
        // s/tr is what enters the weights, so scaling θ and tr together
        // leaves every normalized weight unchanged
        let base = identity_map(vec![8], 1);
        let mut rng = derive(12, &[]);
        let theta: Vec<f64> = (0..base.param_count())
            .map(|_| rng.random_range(-0.05..0.05))
            .collect();
        let ray = straight_ray(24, 1.0);
        let d0 = base.render_depth(&theta, &ray);
        let mut cfg = base.grid.config().clone();
        cfg.truncation *= 3.0;
        let scaled_map = NeuralMap::new(
            cfg,
            DecoderSpec {
                kind: DecoderKind::IdentitySum,
                seed: 0,
            },
        )
        .unwrap();
        let scaled: Vec<f64> = theta.iter().map(|v| v * 3.0).collect();
        assert!((scaled_map.render_depth(&scaled, &ray) - d0).abs() < 1e-12);
    }

    #[test]
    fn snapshot_round_trip() {
        let map = NeuralMap::new(GridConfig::default(), DecoderSpec::default()).unwrap();
        let theta: Vec<f64> = (0..map.param_count()).map(|k| k as f64 * 0.25).collect();
        let bytes = encode_snapshot(&theta, 2, 2);
        assert_eq!(bytes.len(), 16 + 4 * theta.len());
        let (header, values, used) = decode_snapshot(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(header.len as usize, theta.len());
        assert_eq!(header.levels, 2);
        assert_eq!(header.feature_dim, 2);
        for (a, b) in theta.iter().zip(values) {
            assert_eq!(*a as f32, b);
        }
        assert!(decode_snapshot(&bytes[..10]).is_err());
        assert!(decode_snapshot(&bytes[..100]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_snapshot(&bad).is_err());
    }
}
