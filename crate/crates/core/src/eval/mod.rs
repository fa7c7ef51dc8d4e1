//! Metrics, synthetic ground truth and dataset readers.

mod datasets;
mod metrics;
mod synth;

pub use datasets::{
    depth_from_millimeters, format_pose_matrix, parse_homography, parse_pose_matrix, scan_homography_sequence,
    scan_posed_frames, HomographyEntry, PosedFrameEntry,
};
pub use metrics::{
    default_thresholds, median, median_errors, mma, mma_curve_text, pair_accuracy, pose_error, results_table, transfer,
    Matcher, MmaPair, MutualNearestMatcher, PoseError, ResultRow,
};
pub use synth::{
    synth_homography_pairs, HomographyConfig, SynthConfig, SynthFrame, SynthLandmark, SynthObservation, SynthScene,
    OUTLIER_MIN_PX,
};
