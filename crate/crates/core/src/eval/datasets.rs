//! Readers for posed-image and homography-sequence directory layouts.
//!
//! Posed frames: `<stem>.pose.txt` (4x4 world-from-camera matrix, row
//! major), optional `<stem>.color.png` and `<stem>.depth.png` (16-bit,
//! millimeters, 0 or 65535 invalid). Homography sequences: images `1.*` to
//! `N.*` and `H_1_k` files holding the 3x3 matrix mapping image 1 to `k`.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix4};

use crate::error::{Error, Result};
use crate::geometry::Pose;

fn numbers(text: &str, n: usize, what: &str) -> Result<Vec<f64>> {
    let v = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| Error::InvalidInput(format!("{what}: `{t}` is not a number"))))
        .collect::<Result<Vec<_>>>()?;
    if v.len() != n || !v.iter().all(|x| x.is_finite()) {
        return Err(Error::InvalidInput(format!("{what}: expected {n} finite numbers, found {}", v.len())));
    }
    Ok(v)
}

/// Camera-from-world pose from a world-from-camera 4x4 text matrix.
pub fn parse_pose_matrix(text: &str) -> Result<Pose> {
    let v = numbers(text, 16, "pose matrix")?;
    Pose::from_camera_to_world(&Matrix4::from_row_slice(&v))
}

pub fn format_pose_matrix(pose: &Pose) -> String {
    let m = pose.camera_to_world();
    (0..4).map(|r| (0..4).map(|c| format!("{:.17e}", m[(r, c)])).collect::<Vec<_>>().join(" ") + "\n").collect()
}

pub fn parse_homography(text: &str) -> Result<Matrix3<f64>> {
    Ok(Matrix3::from_row_slice(&numbers(text, 9, "homography")?))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PosedFrameEntry {
    pub stem: String,
    pub pose: PathBuf,
    pub color: Option<PathBuf>,
    pub depth: Option<PathBuf>,
}

/// Frames of a posed-image directory, sorted by stem.
pub fn scan_posed_frames(dir: &Path) -> Result<Vec<PosedFrameEntry>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some(stem) = name.strip_suffix(".pose.txt") else { continue };
        let sibling = |suffix: &str| Some(dir.join(format!("{stem}{suffix}"))).filter(|p| p.is_file());
        out.push(PosedFrameEntry {
            stem: stem.to_string(),
            pose: path.clone(),
            color: sibling(".color.png"),
            depth: sibling(".depth.png"),
        });
    }
    out.sort_by(|a, b| a.stem.cmp(&b.stem));
    Ok(out)
}

/// Depth in meters from a 16-bit millimeter depth value.
pub fn depth_from_millimeters(raw: u16) -> Option<f64> {
    (raw != 0 && raw != u16::MAX).then(|| raw as f64 / 1000.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomographyEntry {
    pub reference: PathBuf,
    pub target: PathBuf,
    pub homography: Matrix3<f64>,
}

fn image_with_stem(dir: &Path, stem: &str) -> Result<Option<PathBuf>> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.file_stem().and_then(|s| s.to_str()) == Some(stem) && path.extension().is_some() {
            found.push(path);
        }
    }
    found.sort();
    Ok(found.into_iter().next())
}

/// `(image 1, image k, H_1_k)` for every `H_1_k` file in a sequence.
pub fn scan_homography_sequence(dir: &Path) -> Result<Vec<HomographyEntry>> {
    let mut ks = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if let Some(k) = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_prefix("H_1_")).and_then(|k| k.parse::<u32>().ok()) {
            ks.push((k, path));
        }
    }
    ks.sort();
    let reference = image_with_stem(dir, "1")?.ok_or_else(|| Error::InvalidInput(format!("{}: no reference image", dir.display())))?;
    ks.into_iter()
        .map(|(k, path)| {
            let target = image_with_stem(dir, &k.to_string())?
                .ok_or_else(|| Error::InvalidInput(format!("{}: no image {k}", dir.display())))?;
            Ok(HomographyEntry { reference: reference.clone(), target, homography: parse_homography(&std::fs::read_to_string(path)?)? })
        })
        .collect()
}
