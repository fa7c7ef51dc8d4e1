//! Coarse-to-fine localization of one query against a landmark map.

use std::collections::BTreeSet;
use std::time::Instant;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::matching::{gated_match, global_descriptor, match_level, pool_keypoints, retrieve, MatchSet};
use super::pnp::{pnp_ransac, RansacConfig};
use crate::error::{Error, Result};
use crate::extract::{extract, shorten, ExtractConfig, Keypoint};
use crate::geometry::{Intrinsics, Pose};
use crate::map::LandmarkMap;
use crate::pyramid::{DensePyramid, DescriptorMode, LevelPlan};

/// Per-level vectors are indexed by `level - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizerConfig {
    pub top_k: usize,
    /// Levels to use, deepest first.
    pub levels: Vec<u8>,
    pub similarity_floor: Vec<f64>,
    /// Reprojection gate per level in pixels; infinite disables gating.
    pub gate_radius_px: Vec<f64>,
    pub inlier_threshold_px: Vec<f64>,
    pub max_iterations: usize,
    pub confidence: f64,
    pub refine_iterations: usize,
    /// Fewest inliers for a level to count as localized.
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        LocalizerConfig::for_plan(&LevelPlan::default())
    }
}

impl LocalizerConfig {
    /// Defaults for a plan: all levels deepest first, no gate at the
    /// deepest level, gate and inlier threshold `4 * 2^(i-1)` px at level `i`.
    pub fn for_plan(plan: &LevelPlan) -> Self {
        let n = plan.len();
        let scale = |i: usize| 4.0 * (1u64 << i) as f64;
        LocalizerConfig {
            top_k: 3,
            levels: (1..=n as u8).rev().collect(),
            similarity_floor: vec![0.5; n],
            gate_radius_px: (0..n).map(|i| if i + 1 == n { f64::INFINITY } else { scale(i) }).collect(),
            inlier_threshold_px: (0..n).map(scale).collect(),
            max_iterations: 1000,
            confidence: 0.999,
            refine_iterations: 20,
            min_inliers: 12,
            seed: 0,
        }
    }

    pub fn validate(&self, plan: &LevelPlan) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.top_k == 0 {
            return bad("top_k must be at least 1".into());
        }
        if self.levels.is_empty() || self.levels.windows(2).any(|w| w[0] <= w[1]) {
            return bad("levels must be nonempty and strictly decreasing".into());
        }
        let n = plan.len();
        for (name, v) in [("similarity_floor", &self.similarity_floor), ("gate_radius_px", &self.gate_radius_px), ("inlier_threshold_px", &self.inlier_threshold_px)] {
            if v.len() < n {
                return bad(format!("{name} needs one value per level ({n})"));
            }
        }
        for &l in &self.levels {
            if plan.level(l).is_none() {
                return bad(format!("level {l} is not in the map"));
            }
        }
        if self.inlier_threshold_px.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return bad("inlier thresholds must be positive".into());
        }
        if self.gate_radius_px.iter().any(|&r| !(r > 0.0)) {
            return bad("gating radii must be positive".into());
        }
        let radii: Vec<f64> = self.levels.iter().map(|&l| self.gate_radius_px[l as usize - 1]).collect();
        if radii.windows(2).any(|w| w[1] > w[0]) {
            return bad("gating radii must not grow from deep to shallow levels".into());
        }
        if self.min_inliers < 4 {
            return bad("min_inliers must be at least 4".into());
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return bad("confidence must lie in (0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryFrame {
    pub id: String,
    /// Keypoints of any levels, with full or map-mode descriptors.
    pub keypoints: Vec<Keypoint>,
    /// Retrieval descriptor; pooled from the deepest keypoints when absent.
    pub global: Option<Vec<f32>>,
    pub intrinsics: Intrinsics,
}

impl QueryFrame {
    /// Query from a dense pyramid: full-descriptor keypoints and the pooled
    /// deepest level as retrieval descriptor.
    pub fn from_pyramid(id: &str, pyramid: &DensePyramid, config: &ExtractConfig, intrinsics: Intrinsics) -> Result<Self> {
        let cfg = ExtractConfig { mode: DescriptorMode::Full, ..config.clone() };
        let keypoints = extract(pyramid, &cfg)?.into_iter().flatten().collect();
        Ok(QueryFrame { id: id.to_string(), keypoints, global: Some(global_descriptor(pyramid)), intrinsics })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub level: u8,
    pub pose: Pose,
    pub matches: usize,
    pub ransac_inliers: usize,
    pub inliers: usize,
    pub mean_reprojection_px: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub query: String,
    pub retrieved: Vec<u32>,
    /// Levels that produced a pose, deepest first.
    pub trace: Vec<TraceEntry>,
    /// Pose of the last trace entry.
    pub pose: Option<Pose>,
    /// The finest scheduled level localized with enough inliers.
    pub success: bool,
}

fn map_mode_keypoints(query: &[Keypoint], map: &LandmarkMap) -> Result<Vec<Keypoint>> {
    query
        .iter()
        .map(|k| {
            let spec = map.plan.level(k.level).ok_or_else(|| Error::InvalidInput(format!("query keypoint level {} not in the map", k.level)))?;
            let stored = spec.stored_dim(map.mode);
            if k.descriptor.len() == stored {
                Ok(k.clone())
            } else if k.descriptor.len() == spec.dim && map.mode == DescriptorMode::Short {
                Ok(Keypoint { descriptor: shorten(&k.descriptor), ..k.clone() })
            } else {
                Err(Error::DimensionMismatch(format!(
                    "level {} query descriptor has {} components, map stores {stored}",
                    k.level,
                    k.descriptor.len()
                )))
            }
        })
        .collect()
}

/// Retrieval, deepest-level matching and PnP, then gated matching, PnP and
/// refinement at each shallower level, each seeded by the previous pose.
pub fn localize(query: &QueryFrame, map: &LandmarkMap, config: &LocalizerConfig) -> Result<LocalizationResult> {
    if map.landmarks.is_empty() || map.frames.is_empty() {
        return Err(Error::EmptyMap("cannot localize against an empty map".into()));
    }
    config.validate(&map.plan)?;
    query.intrinsics.validate()?;
    let g = map.plan.deepest();
    let global = match &query.global {
        Some(v) => v.clone(),
        None => pool_keypoints(&query.keypoints, g.index, g.dim),
    };
    let retrieved: Vec<u32> = retrieve(&global, map, config.top_k)?.into_iter().map(|(id, _)| id).collect();
    let candidates: Vec<u32> = retrieved
        .iter()
        .flat_map(|&f| map.frames[f as usize].landmarks.iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let keypoints = map_mode_keypoints(&query.keypoints, map)?;
    let k = &query.intrinsics;

    let mut trace: Vec<TraceEntry> = Vec::new();
    let mut last_ok = false;
    for &level in &config.levels {
        let start = Instant::now();
        let li = level as usize - 1;
        let floor = config.similarity_floor[li];
        let radius = config.gate_radius_px[li];
        let set: MatchSet = match trace.last() {
            Some(prev) if radius.is_finite() => gated_match(&keypoints, map, &candidates, level, floor, &prev.pose, k, radius)?,
            _ => match_level(&keypoints, map, &candidates, level, floor)?,
        };
        let pixels: Vec<[f64; 2]> = set.matches.iter().map(|m| keypoints[m.query].pixel).collect();
        let points: Vec<Vector3<f64>> = set.matches.iter().map(|m| map.landmarks[m.landmark as usize].position_f64()).collect();
        let ransac = RansacConfig {
            max_iterations: config.max_iterations,
            threshold_px: config.inlier_threshold_px[li],
            confidence: config.confidence,
            min_inliers: config.min_inliers,
            refine_iterations: config.refine_iterations,
            seed: config.seed.wrapping_add(level as u64),
        };
        last_ok = false;
        match pnp_ransac(&pixels, &points, k, &ransac) {
            Ok(sol) => {
                last_ok = sol.inliers.len() >= config.min_inliers;
                if last_ok {
                    trace.push(TraceEntry {
                        level,
                        pose: sol.pose,
                        matches: set.matches.len(),
                        ransac_inliers: sol.ransac_inliers,
                        inliers: sol.inliers.len(),
                        mean_reprojection_px: sol.mean_reprojection_px,
                        seconds: start.elapsed().as_secs_f64(),
                    });
                }
            }
            Err(Error::NotEnoughMatches { .. } | Error::RansacFailed(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(LocalizationResult { query: query.id.clone(), retrieved, pose: trace.last().map(|t| t.pose), trace, success: last_ok })
}

/// One level of a localization report line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportLevel {
    pub level: u8,
    pub q_wxyz: [f64; 4],
    pub t: [f64; 3],
    pub matches: usize,
    pub ransac_inliers: usize,
    pub inliers: usize,
    pub mean_reprojection_px: f64,
    pub millis: f64,
}

/// One line of a localization report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub query: String,
    pub success: bool,
    pub retrieved: Vec<u32>,
    pub levels: Vec<ReportLevel>,
}

impl ReportRecord {
    pub fn from_result(r: &LocalizationResult) -> Self {
        ReportRecord {
            query: r.query.clone(),
            success: r.success,
            retrieved: r.retrieved.clone(),
            levels: r
                .trace
                .iter()
                .map(|t| ReportLevel {
                    level: t.level,
                    q_wxyz: t.pose.quaternion_wxyz(),
                    t: t.pose.translation.into(),
                    matches: t.matches,
                    ransac_inliers: t.ransac_inliers,
                    inliers: t.inliers,
                    mean_reprojection_px: t.mean_reprojection_px,
                    millis: t.seconds * 1e3,
                })
                .collect(),
        }
    }

    /// Pose of the last level, if any.
    pub fn final_pose(&self) -> Result<Option<Pose>> {
        self.levels.last().map(|l| Pose::from_quaternion_wxyz(l.q_wxyz, l.t)).transpose()
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("report records serialize")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Corrupt(format!("bad report line: {e}")))
    }
}
