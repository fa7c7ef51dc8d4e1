//! On-disk artifacts: keypoint files and their pose and depth sidecars,
//! intrinsics, images.

use std::path::{Path, PathBuf};

use sfp_core::eval::{format_pose_matrix, parse_pose_matrix};
use sfp_core::extract::Keypoint;
use sfp_core::geometry::{Intrinsics, Pose};
use sfp_core::keypoint_io::{decode_keypoints, encode_keypoints};
use sfp_core::net::Tensor;

use crate::Failure;

pub fn io_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, Failure> {
    std::fs::read(path).map_err(|e| io_err(path, e))
}

pub fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

pub fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn create_dir(path: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

pub fn require_dir(path: &Path) -> Result<(), Failure> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(io_err(path, "not a directory"))
    }
}

/// `(stem, path)` of every file in `dir` ending in `suffix`, sorted.
pub fn list_with_suffix(dir: &Path, suffix: &str) -> Result<Vec<(String, PathBuf)>, Failure> {
    require_dir(dir)?;
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(stem) = name.strip_suffix(suffix) {
            if path.is_file() && !stem.is_empty() {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_keypoints(path: &Path) -> Result<Vec<Keypoint>, Failure> {
    decode_keypoints(&read_bytes(path)?).map_err(|e| io_err(path, e))
}

pub fn write_keypoints(path: &Path, keypoints: &[Keypoint]) -> Result<(), Failure> {
    write(path, encode_keypoints(keypoints)?)
}

pub fn read_pose(path: &Path) -> Result<Pose, Failure> {
    parse_pose_matrix(&read_text(path)?).map_err(|e| io_err(path, e))
}

pub fn write_pose(path: &Path, pose: &Pose) -> Result<(), Failure> {
    write(path, format_pose_matrix(pose))
}

/// One camera-frame depth per keypoint; `nan` marks a missing value.
pub fn read_depths(path: &Path) -> Result<Vec<f64>, Failure> {
    read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse::<f64>().map_err(|_| io_err(path, format!("bad depth `{l}`"))))
        .collect()
}

pub fn write_depths(path: &Path, depths: &[f64]) -> Result<(), Failure> {
    write(path, depths.iter().map(|d| format!("{d:e}\n")).collect::<String>())
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics, Failure> {
    let k: Intrinsics = serde_json::from_str(&read_text(path)?).map_err(|e| io_err(path, e))?;
    k.validate().map_err(|e| io_err(path, e))?;
    Ok(k)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    write(path, serde_json::to_string_pretty(value).expect("serializable") + "\n")
}

/// Image scaled to `[0, 1]` with `channels` planes, cropped at the bottom
/// and right to a multiple of `divisor`.
pub fn read_image(path: &Path, channels: usize, divisor: usize) -> Result<Tensor, Failure> {
    let img = image::open(path).map_err(|e| io_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (cw, ch) = (w / divisor * divisor, h / divisor * divisor);
    if cw == 0 || ch == 0 {
        return Err(Failure::Pipeline(format!("{}: {w}x{h} image is smaller than {divisor} pixels", path.display())));
    }
    let planes: Vec<Vec<f32>> = match channels {
        1 => vec![img.to_luma32f().into_raw()],
        3 => {
            let rgb = img.to_rgb32f().into_raw();
            (0..3).map(|c| rgb.iter().skip(c).step_by(3).copied().collect()).collect()
        }
        n => return Err(Failure::Pipeline(format!("unsupported input channel count {n}"))),
    };
    let mut data = Vec::with_capacity(channels * cw * ch);
    for plane in &planes {
        for y in 0..ch {
            data.extend(plane[y * w..y * w + cw].iter().map(|&v| (v as f64).clamp(0.0, 1.0)));
        }
    }
    Ok(Tensor::from_vec(channels, ch, cw, data))
}

/// 16-bit millimeter depth image.
pub struct DepthImage {
    width: usize,
    height: usize,
    raw: Vec<u16>,
}

impl DepthImage {
    pub fn open(path: &Path) -> Result<Self, Failure> {
        let img = image::open(path).map_err(|e| io_err(path, e))?.to_luma16();
        Ok(DepthImage { width: img.width() as usize, height: img.height() as usize, raw: img.into_raw() })
    }

    /// Depth in meters at the pixel containing `p`, if valid.
    pub fn sample(&self, p: [f64; 2]) -> f64 {
        let (x, y) = (p[0].floor(), p[1].floor());
        if x < 0.0 || y < 0.0 || x as usize >= self.width || y as usize >= self.height {
            return f64::NAN;
        }
        sfp_core::eval::depth_from_millimeters(self.raw[y as usize * self.width + x as usize]).unwrap_or(f64::NAN)
    }
}
