//! Hierarchical localization: retrieval, level-wise matching, robust PnP
//! and refinement.

mod matching;
mod pipeline;
mod pnp;

pub use matching::{
    gate_candidates, gated_match, global_descriptor, match_level, mutual_nearest, pool_keypoints, retrieve, similarity,
    Match, MatchSet,
};
pub use pipeline::{localize, LocalizationResult, LocalizerConfig, QueryFrame, ReportLevel, ReportRecord, TraceEntry};
pub use pnp::{kabsch, p3p, pnp_ransac, real_roots, refine_pose, PnpSolution, RansacConfig, Refinement};
