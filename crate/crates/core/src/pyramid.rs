//! Feature-pyramid data model and the sparsification math.
//!
//! A dense pyramid holds one feature grid per level, shallow to deep. Each
//! cell carries a descriptor of the level's dimension and a keypoint score
//! `p = sigmoid(omega . f)`. Masking a grid with a binary mask (sampled from
//! the scores during training, thresholded at inference) yields the sparse
//! pyramid, stored as a coordinate list.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One pyramid level: its index (1 = shallowest), grid stride in pixels
/// and descriptor dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub index: u8,
    pub stride: usize,
    pub dim: usize,
}

impl LevelSpec {
    /// Grid shape for an image of `rows x cols` pixels.
    pub fn grid_shape(&self, rows: usize, cols: usize) -> (usize, usize) {
        (rows.div_ceil(self.stride), cols.div_ceil(self.stride))
    }

    /// Descriptor length stored for this level in the given mode.
    pub fn stored_dim(&self, mode: DescriptorMode) -> usize {
        match mode {
            DescriptorMode::Full => self.dim,
            DescriptorMode::Short => self.dim / 2,
        }
    }
}

/// Full descriptors, or the half-length prefix of every per-level slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DescriptorMode {
    #[default]
    Full,
    Short,
}

impl std::str::FromStr for DescriptorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(DescriptorMode::Full),
            "short" => Ok(DescriptorMode::Short),
            other => Err(Error::InvalidInput(format!("unknown descriptor mode `{other}`"))),
        }
    }
}

/// Validated, ordered list of level specs (shallow to deep).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelPlan {
    levels: Vec<LevelSpec>,
}

impl Default for LevelPlan {
    fn default() -> Self {
        LevelPlan::from_dims(&[32, 64, 128]).expect("default plan is valid")
    }
}

impl LevelPlan {
    /// Builds a plan with stride `2^i` for level `i` and the given
    /// descriptor dimensions, shallow first.
    pub fn from_dims(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "a pyramid needs at least 2 levels, got {}",
                dims.len()
            )));
        }
        if dims.len() > 8 {
            return Err(Error::InvalidInput("at most 8 pyramid levels are supported".into()));
        }
        let levels = dims
            .iter()
            .enumerate()
            .map(|(i, &dim)| LevelSpec { index: (i + 1) as u8, stride: 1 << (i + 1), dim })
            .collect();
        let plan = LevelPlan { levels };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.levels.iter().enumerate() {
            if l.index as usize != i + 1 {
                return Err(Error::InvalidInput("level indices must be contiguous from 1".into()));
            }
            if l.dim == 0 || l.dim % 2 != 0 {
                return Err(Error::InvalidInput(format!(
                    "level {} descriptor dim {} must be positive and even",
                    l.index, l.dim
                )));
            }
            if l.dim > u16::MAX as usize {
                return Err(Error::InvalidInput("descriptor dim exceeds u16".into()));
            }
            if !l.stride.is_power_of_two() {
                return Err(Error::InvalidInput("strides must be powers of two".into()));
            }
            if i > 0 {
                let prev = self.levels[i - 1];
                if l.stride <= prev.stride || l.dim <= prev.dim {
                    return Err(Error::InvalidInput(
                        "strides and dims must strictly increase with level".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> &[LevelSpec] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.dim).collect()
    }

    /// Spec of level `index` (1-based).
    pub fn level(&self, index: u8) -> Option<LevelSpec> {
        self.levels.get((index as usize).checked_sub(1)?).copied()
    }

    pub fn deepest(&self) -> LevelSpec {
        *self.levels.last().expect("plan is nonempty")
    }
}

/// Per-cell keypoint probabilities of one level, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl ScoreMap {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "score map {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(ScoreMap { rows, cols, values })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        ScoreMap { rows, cols, values: vec![value; rows * cols] }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    fn check_probabilities(&self) -> Result<()> {
        match self.values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            Some(p) => Err(Error::InvalidInput(format!("score {p} outside [0, 1]"))),
            None => Ok(()),
        }
    }
}

/// Dense features `f_i` of one level (row-major, descriptor-contiguous) plus
/// their scores `p_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub spec: LevelSpec,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub scores: ScoreMap,
}

impl FeatureGrid {
    pub fn new(spec: LevelSpec, rows: usize, cols: usize, values: Vec<f64>, scores: ScoreMap) -> Result<Self> {
        if values.len() != rows * cols * spec.dim {
            return Err(Error::DimensionMismatch(format!(
                "level {} grid {rows}x{cols}x{} needs {} values, got {}",
                spec.index,
                spec.dim,
                rows * cols * spec.dim,
                values.len()
            )));
        }
        if scores.rows != rows || scores.cols != cols {
            return Err(Error::DimensionMismatch("score map shape differs from grid".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("feature values must be finite".into()));
        }
        scores.check_probabilities()?;
        Ok(FeatureGrid { spec, rows, cols, values, scores })
    }

    /// Builds a grid and attaches scores computed with `omega`.
    pub fn with_omega(spec: LevelSpec, rows: usize, cols: usize, values: Vec<f64>, omega: &[f64]) -> Result<Self> {
        let scores = score_grid(&values, (rows, cols), omega)?;
        FeatureGrid::new(spec, rows, cols, values, scores)
    }

    #[inline]
    pub fn descriptor(&self, row: usize, col: usize) -> &[f64] {
        let d = self.spec.dim;
        let start = (row * self.cols + col) * d;
        &self.values[start..start + d]
    }
}

/// All levels of one image, shallow to deep.
#[derive(Debug, Clone, PartialEq)]
pub struct DensePyramid {
    pub image_rows: usize,
    pub image_cols: usize,
    pub levels: Vec<FeatureGrid>,
}

impl DensePyramid {
    pub fn new(image_rows: usize, image_cols: usize, levels: Vec<FeatureGrid>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(Error::InvalidInput("a dense pyramid needs at least 2 levels".into()));
        }
        for (i, grid) in levels.iter().enumerate() {
            if grid.spec.index as usize != i + 1 {
                return Err(Error::InvalidInput("pyramid level indices must be contiguous".into()));
            }
            if grid.spec.grid_shape(image_rows, image_cols) != (grid.rows, grid.cols) {
                return Err(Error::DimensionMismatch(format!(
                    "level {} grid {}x{} inconsistent with image {image_rows}x{image_cols} at stride {}",
                    grid.spec.index, grid.rows, grid.cols, grid.spec.stride
                )));
            }
        }
        Ok(DensePyramid { image_rows, image_cols, levels })
    }

    pub fn level(&self, index: u8) -> Option<&FeatureGrid> {
        self.levels.iter().find(|g| g.spec.index == index)
    }

    pub fn deepest(&self) -> &FeatureGrid {
        self.levels.last().expect("pyramid is nonempty")
    }
}

/// Binary keep/drop decision per cell (`m_i`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub level: LevelSpec,
    pub rows: usize,
    pub cols: usize,
    pub bits: Vec<u8>,
}

impl BinaryMask {
    pub fn filled(level: LevelSpec, rows: usize, cols: usize, bit: bool) -> Self {
        BinaryMask { level, rows, cols, bits: vec![bit as u8; rows * cols] }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.cols + col] != 0
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    pub fn mean(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count_ones() as f64 / self.bits.len() as f64
        }
    }
}

/// A surviving cell of the sparse pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseEntry {
    pub row: usize,
    pub col: usize,
    pub score: f64,
    pub descriptor: Vec<f64>,
}

/// Coordinate-list storage of one masked level.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseLevel {
    pub spec: LevelSpec,
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<SparseEntry>,
}

impl SparseLevel {
    /// Dense row-major grid with zeros at absent cells, i.e. `m * f`.
    pub fn densify(&self) -> Vec<f64> {
        let d = self.spec.dim;
        let mut out = vec![0.0; self.rows * self.cols * d];
        for e in &self.entries {
            let start = (e.row * self.cols + e.col) * d;
            out[start..start + d].copy_from_slice(&e.descriptor);
        }
        out
    }

    /// Number of stored feature scalars.
    pub fn stored_scalars(&self) -> usize {
        self.entries.len() * self.spec.dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsePyramid {
    pub image_rows: usize,
    pub image_cols: usize,
    pub levels: Vec<SparseLevel>,
}

impl SparsePyramid {
    /// Sparsifies every level of `pyramid` with the matching mask.
    pub fn from_masks(pyramid: &DensePyramid, masks: &[BinaryMask]) -> Result<Self> {
        if masks.len() != pyramid.levels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} masks for {} levels",
                masks.len(),
                pyramid.levels.len()
            )));
        }
        let levels = pyramid
            .levels
            .iter()
            .zip(masks)
            .map(|(g, m)| sparsify(g, m))
            .collect::<Result<Vec<_>>>()?;
        Ok(SparsePyramid { image_rows: pyramid.image_rows, image_cols: pyramid.image_cols, levels })
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-cell keypoint probability `sigmoid(omega . f)` for a row-major grid
/// of `shape.0 x shape.1` cells with `omega.len()`-dimensional descriptors.
pub fn score_grid(values: &[f64], shape: (usize, usize), omega: &[f64]) -> Result<ScoreMap> {
    let (rows, cols) = shape;
    let d = omega.len();
    if d == 0 || values.len() != rows * cols * d {
        return Err(Error::DimensionMismatch(format!(
            "omega of length {d} does not fit {} feature values on a {rows}x{cols} grid",
            values.len()
        )));
    }
    if values.iter().chain(omega).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("features and omega must be finite".into()));
    }
    let scores = values
        .chunks_exact(d)
        .map(|f| sigmoid(f.iter().zip(omega).map(|(a, b)| a * b).sum()))
        .collect();
    Ok(ScoreMap { rows, cols, values: scores })
}

/// Independent Bernoulli draw per cell, reproducible from `rng_seed`.
pub fn sample_mask(scores: &ScoreMap, level: LevelSpec, rng_seed: u64) -> Result<BinaryMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_mask_with(scores, level, &mut rng)
}

/// As [`sample_mask`] but drawing from a caller-owned generator.
pub fn sample_mask_with<R: Rng + ?Sized>(scores: &ScoreMap, level: LevelSpec, rng: &mut R) -> Result<BinaryMask> {
    scores.check_probabilities()?;
    let bits = scores.values.iter().map(|&p| (rng.random::<f64>() < p) as u8).collect();
    Ok(BinaryMask { level, rows: scores.rows, cols: scores.cols, bits })
}

/// Deterministic mask: bit set iff `p >= tau`.
pub fn threshold_mask(scores: &ScoreMap, level: LevelSpec, tau: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidInput(format!("threshold {tau} outside [0, 1]")));
    }
    let bits = scores.values.iter().map(|&p| (p >= tau) as u8).collect();
    Ok(BinaryMask { level, rows: scores.rows, cols: scores.cols, bits })
}

/// Keeps the descriptors of cells whose mask bit is set.
pub fn sparsify(features: &FeatureGrid, mask: &BinaryMask) -> Result<SparseLevel> {
    if mask.rows != features.rows || mask.cols != features.cols || mask.bits.len() != features.rows * features.cols {
        return Err(Error::DimensionMismatch(format!(
            "mask {}x{} vs grid {}x{}",
            mask.rows, mask.cols, features.rows, features.cols
        )));
    }
    let mut entries = Vec::new();
    for row in 0..features.rows {
        for col in 0..features.cols {
            if mask.get(row, col) {
                entries.push(SparseEntry {
                    row,
                    col,
                    score: features.scores.get(row, col),
                    descriptor: features.descriptor(row, col).to_vec(),
                });
            }
        }
    }
    Ok(SparseLevel { spec: features.spec, rows: features.rows, cols: features.cols, entries })
}

/// Expected number of stored feature scalars, `sum_i sum_j p_ij * d_i`.
pub fn compression_cost(scores: &[&ScoreMap], dims: &[usize]) -> Result<f64> {
    if scores.len() != dims.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} score maps for {} level dims",
            scores.len(),
            dims.len()
        )));
    }
    Ok(scores
        .iter()
        .zip(dims)
        .map(|(s, &d)| s.values.iter().sum::<f64>() * d as f64)
        .sum())
}
