//! Landmark maps: construction from posed keypoint frames, descriptor
//! shortening, size accounting and the `SFPM` binary format.
//!
//! `SFPM` layout (little-endian): magic, version `u16`, level count `u8`,
//! per-level dim `u16`, mode `u8` (0 full, 1 short), landmark count `u32`,
//! frame count `u32`; landmark records `position f32[3], level u8,
//! presence u8, descriptor f32[..]`; frame records `global f32[d_n],
//! id count u32, ids u32[..]`.

use std::collections::{BTreeSet, HashMap};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::extract::{shorten, to_unit_f32, Keypoint};
use crate::geometry::{backproject, triangulate, Intrinsics, Pose};
use crate::keypoint_io::ByteReader;
use crate::localize::{mutual_nearest, pool_keypoints};
use crate::pyramid::{DescriptorMode, LevelPlan};

pub const MAP_MAGIC: &[u8; 4] = b"SFPM";
pub const MAP_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Landmark {
    pub position: [f32; 3],
    /// Deepest level with a descriptor slice.
    pub level: u8,
    /// Bit `i - 1` set when level `i` has a slice.
    pub presence: u8,
    /// Present slices concatenated deep to shallow, each unit-norm.
    pub descriptor: Vec<f32>,
    /// Number of map frames referencing this landmark.
    pub observations: u32,
}

impl Landmark {
    pub fn has_level(&self, level: u8) -> bool {
        (1..=8).contains(&level) && self.presence & (1 << (level - 1)) != 0
    }

    pub fn position_f64(&self) -> Vector3<f64> {
        Vector3::new(self.position[0] as f64, self.position[1] as f64, self.position[2] as f64)
    }

    /// Descriptor slice of `level`, if present.
    pub fn slice(&self, level: u8, plan: &LevelPlan, mode: DescriptorMode) -> Option<&[f32]> {
        if !self.has_level(level) {
            return None;
        }
        let mut offset = 0;
        for spec in plan.levels().iter().rev() {
            if !self.has_level(spec.index) {
                continue;
            }
            let len = spec.stored_dim(mode);
            if spec.index == level {
                return self.descriptor.get(offset..offset + len);
            }
            offset += len;
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapFrame {
    /// Unit-norm retrieval descriptor of length `d_n`.
    pub global: Vec<f32>,
    /// Sorted ids of the landmarks this frame observed.
    pub landmarks: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkMap {
    pub plan: LevelPlan,
    pub mode: DescriptorMode,
    pub landmarks: Vec<Landmark>,
    pub frames: Vec<MapFrame>,
}

impl LandmarkMap {
    pub fn empty(plan: LevelPlan, mode: DescriptorMode) -> Self {
        LandmarkMap { plan, mode, landmarks: Vec::new(), frames: Vec::new() }
    }

    pub fn global_dim(&self) -> usize {
        self.plan.deepest().dim
    }

    /// Checks every structural invariant; loaded and built maps satisfy it.
    pub fn validate(&self) -> Result<()> {
        self.plan.validate()?;
        let n = self.plan.len();
        for (id, l) in self.landmarks.iter().enumerate() {
            if l.presence == 0 || (n < 8 && l.presence >> n != 0) {
                return Err(Error::InvalidInput(format!("landmark {id} has an invalid presence bitmap")));
            }
            if l.level != 8 - l.presence.leading_zeros() as u8 {
                return Err(Error::InvalidInput(format!("landmark {id} level disagrees with its bitmap")));
            }
            if l.descriptor.len() != self.descriptor_len(l.presence) {
                return Err(Error::DimensionMismatch(format!("landmark {id} descriptor length")));
            }
            if !l.position.iter().chain(&l.descriptor).all(|v| v.is_finite()) {
                return Err(Error::InvalidInput(format!("landmark {id} has non-finite values")));
            }
        }
        for (f, frame) in self.frames.iter().enumerate() {
            if frame.global.len() != self.global_dim() {
                return Err(Error::DimensionMismatch(format!("frame {f} global descriptor length")));
            }
            if frame.landmarks.iter().any(|&id| id as usize >= self.landmarks.len()) {
                return Err(Error::InvalidInput(format!("frame {f} references a missing landmark")));
            }
        }
        Ok(())
    }

    fn descriptor_len(&self, presence: u8) -> usize {
        self.plan.levels().iter().filter(|s| presence & (1 << (s.index - 1)) != 0).map(|s| s.stored_dim(self.mode)).sum()
    }

    /// Recomputes every landmark's observation count from the frame index.
    pub fn recount_observations(&mut self) {
        self.landmarks.iter_mut().for_each(|l| l.observations = 0);
        for frame in &self.frames {
            for &id in &frame.landmarks {
                self.landmarks[id as usize].observations += 1;
            }
        }
    }
}

/// A mapping frame: keypoints with full descriptors and a known pose.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedKeypoints {
    pub keypoints: Vec<Keypoint>,
    pub pose: Pose,
    /// Camera-frame depth per keypoint.
    pub depths: Option<Vec<f64>>,
    /// Retrieval descriptor; pooled from the deepest keypoints when absent.
    pub global: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapConfig {
    pub plan: LevelPlan,
    pub intrinsics: Intrinsics,
    /// Landmarks closer than this (meters) are merged.
    pub merge_radius: f64,
    /// Similarity floor for two-view matches on the triangulation path.
    pub min_similarity: f64,
    /// Largest accepted two-view reprojection error, pixels.
    pub max_reprojection_px: f64,
}

impl MapConfig {
    pub fn new(plan: LevelPlan, intrinsics: Intrinsics) -> Self {
        MapConfig { plan, intrinsics, merge_radius: 0.01, min_similarity: 0.5, max_reprojection_px: 4.0 }
    }
}

struct Cluster {
    anchor: Vector3<f64>,
    position_sum: Vector3<f64>,
    points: usize,
    slices: Vec<Option<Vec<f64>>>,
    frames: BTreeSet<u32>,
}

struct Merger {
    radius: f64,
    n_levels: usize,
    clusters: Vec<Cluster>,
    grid: HashMap<[i64; 3], Vec<usize>>,
}

impl Merger {
    fn cell(&self, p: &Vector3<f64>) -> [i64; 3] {
        let r = self.radius;
        [(p.x / r).floor() as i64, (p.y / r).floor() as i64, (p.z / r).floor() as i64]
    }

    /// Adds a point observation and returns its cluster.
    fn add(&mut self, p: Vector3<f64>, level: u8, descriptor: &[f32], frame: u32) -> usize {
        let mut best: Option<(f64, usize)> = None;
        if self.radius > 0.0 {
            let c = self.cell(&p);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        for &id in self.grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]).into_iter().flatten() {
                            let d = (self.clusters[id].anchor - p).norm();
                            if d <= self.radius && best.is_none_or(|(bd, bid)| d < bd || (d == bd && id < bid)) {
                                best = Some((d, id));
                            }
                        }
                    }
                }
            }
        }
        let id = match best {
            Some((_, id)) => id,
            None => {
                let id = self.clusters.len();
                self.clusters.push(Cluster {
                    anchor: p,
                    position_sum: Vector3::zeros(),
                    points: 0,
                    slices: vec![None; self.n_levels],
                    frames: BTreeSet::new(),
                });
                if self.radius > 0.0 {
                    let key = self.cell(&p);
                    self.grid.entry(key).or_default().push(id);
                }
                id
            }
        };
        let cl = &mut self.clusters[id];
        cl.position_sum += p;
        cl.points += 1;
        cl.frames.insert(frame);
        let slot = cl.slices[level as usize - 1].get_or_insert_with(|| vec![0.0; descriptor.len()]);
        slot.iter_mut().zip(descriptor).for_each(|(s, &d)| *s += d as f64);
        id
    }
}

fn check_keypoints(frame: usize, kps: &[Keypoint], plan: &LevelPlan) -> Result<()> {
    for k in kps {
        let spec = plan
            .level(k.level)
            .ok_or_else(|| Error::InvalidInput(format!("frame {frame}: keypoint level {} not in the plan", k.level)))?;
        if k.descriptor.len() != spec.dim {
            return Err(Error::DimensionMismatch(format!(
                "frame {frame}: level {} descriptor has {} components, expected {}",
                k.level,
                k.descriptor.len(),
                spec.dim
            )));
        }
    }
    Ok(())
}

/// Builds a full-mode map. Frames with depth are backprojected; frames
/// without depth contribute landmarks triangulated from mutual-nearest
/// matches against every other frame.
pub fn build_map(frames: &[PosedKeypoints], config: &MapConfig) -> Result<LandmarkMap> {
    config.plan.validate()?;
    config.intrinsics.validate()?;
    if frames.is_empty() {
        return Err(Error::InvalidInput("no mapping frames".into()));
    }
    let needs_triangulation = frames.iter().any(|f| f.depths.is_none());
    if needs_triangulation && frames.len() < 2 {
        return Err(Error::InvalidInput("a frame without depth needs at least one other frame".into()));
    }
    for (i, f) in frames.iter().enumerate() {
        check_keypoints(i, &f.keypoints, &config.plan)?;
        if let Some(d) = &f.depths {
            if d.len() != f.keypoints.len() {
                return Err(Error::DimensionMismatch(format!("frame {i}: {} depths for {} keypoints", d.len(), f.keypoints.len())));
            }
        }
    }

    let mut merger = Merger { radius: config.merge_radius, n_levels: config.plan.len(), clusters: Vec::new(), grid: HashMap::new() };
    let mut frame_sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); frames.len()];
    let k = &config.intrinsics;
    for (fi, f) in frames.iter().enumerate() {
        let Some(depths) = &f.depths else { continue };
        for (kp, &z) in f.keypoints.iter().zip(depths) {
            if !(z > 0.0 && z.is_finite()) {
                continue;
            }
            let p = backproject(kp.pixel, z, &f.pose, k)?;
            frame_sets[fi].insert(merger.add(p, kp.level, &kp.descriptor, fi as u32));
        }
    }
    if needs_triangulation {
        for i in 0..frames.len() {
            for j in i + 1..frames.len() {
                if frames[i].depths.is_some() && frames[j].depths.is_some() {
                    continue;
                }
                for spec in config.plan.levels() {
                    let a: Vec<&Keypoint> = frames[i].keypoints.iter().filter(|kp| kp.level == spec.index).collect();
                    let b: Vec<&Keypoint> = frames[j].keypoints.iter().filter(|kp| kp.level == spec.index).collect();
                    let da: Vec<&[f32]> = a.iter().map(|kp| kp.descriptor.as_slice()).collect();
                    let db: Vec<&[f32]> = b.iter().map(|kp| kp.descriptor.as_slice()).collect();
                    for (qa, qb, _) in mutual_nearest(&da, &db, config.min_similarity) {
                        let Ok(t) = triangulate(a[qa].pixel, b[qb].pixel, &frames[i].pose, &frames[j].pose, k) else {
                            continue;
                        };
                        if t.reprojection_error.iter().any(|&e| e > config.max_reprojection_px) {
                            continue;
                        }
                        frame_sets[i].insert(merger.add(t.point, spec.index, &a[qa].descriptor, i as u32));
                        frame_sets[j].insert(merger.add(t.point, spec.index, &b[qb].descriptor, j as u32));
                    }
                }
            }
        }
    }
    if merger.clusters.is_empty() {
        return Err(Error::EmptyMap("no keypoint produced a landmark".into()));
    }

    let landmarks = merger
        .clusters
        .iter()
        .map(|cl| {
            let mean = cl.position_sum / cl.points as f64;
            let mut presence = 0u8;
            let mut descriptor = Vec::new();
            for (li, slice) in cl.slices.iter().enumerate().rev() {
                if let Some(sum) = slice {
                    presence |= 1 << li;
                    descriptor.extend(to_unit_f32(sum));
                }
            }
            Landmark {
                position: [mean.x as f32, mean.y as f32, mean.z as f32],
                level: 8 - presence.leading_zeros() as u8,
                presence,
                descriptor,
                observations: cl.frames.len() as u32,
            }
        })
        .collect();
    let g = config.plan.deepest();
    let frames = frames
        .iter()
        .zip(frame_sets)
        .map(|(f, ids)| {
            let global = match &f.global {
                Some(v) if v.len() == g.dim => to_unit_f32(&v.iter().map(|&x| x as f64).collect::<Vec<_>>()),
                Some(v) => {
                    return Err(Error::DimensionMismatch(format!("global descriptor has {} components, expected {}", v.len(), g.dim)))
                }
                None => pool_keypoints(&f.keypoints, g.index, g.dim),
            };
            Ok(MapFrame { global, landmarks: ids.into_iter().map(|i| i as u32).collect() })
        })
        .collect::<Result<Vec<_>>>()?;
    let map = LandmarkMap { plan: config.plan.clone(), mode: DescriptorMode::Full, landmarks, frames };
    debug_assert!(map.validate().is_ok());
    Ok(map)
}

/// Short-mode copy of a full map: every slice keeps its first half,
/// renormalized.
pub fn shorten_descriptors(map: &LandmarkMap) -> Result<LandmarkMap> {
    if map.mode != DescriptorMode::Full {
        return Err(Error::InvalidInput("map is already in short mode".into()));
    }
    let mut out = map.clone();
    out.mode = DescriptorMode::Short;
    for (l, src) in out.landmarks.iter_mut().zip(&map.landmarks) {
        l.descriptor = map
            .plan
            .levels()
            .iter()
            .rev()
            .filter_map(|s| src.slice(s.index, &map.plan, DescriptorMode::Full))
            .flat_map(shorten)
            .collect();
    }
    Ok(out)
}

/// Exact byte accounting of a serialized map.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct SizeReport {
    pub mode: DescriptorMode,
    pub landmarks: u64,
    pub frames: u64,
    pub header_bytes: u64,
    pub position_bytes: u64,
    /// Level and presence bytes of every landmark record.
    pub landmark_meta_bytes: u64,
    /// Descriptor bytes in the map's own mode.
    pub descriptor_bytes: u64,
    /// `(level, bytes)` descriptor payload per level in the map's mode.
    pub descriptor_bytes_per_level: Vec<(u8, u64)>,
    pub full_descriptor_bytes: u64,
    pub short_descriptor_bytes: u64,
    /// Frame records: global descriptors and landmark id lists.
    pub index_bytes: u64,
    pub total_bytes: u64,
}

impl SizeReport {
    pub fn total_megabytes(&self) -> f64 {
        self.total_bytes as f64 / 1e6
    }
}

pub fn header_bytes(n_levels: usize) -> u64 {
    (4 + 2 + 1 + 2 * n_levels + 1 + 4 + 4) as u64
}

pub fn map_stats(map: &LandmarkMap) -> SizeReport {
    let mut per_level = Vec::new();
    let (mut full, mut short) = (0u64, 0u64);
    for spec in map.plan.levels().iter().rev() {
        let count = map.landmarks.iter().filter(|l| l.has_level(spec.index)).count() as u64;
        per_level.push((spec.index, count * spec.stored_dim(map.mode) as u64 * 4));
        full += count * spec.dim as u64 * 4;
        short += count * (spec.dim / 2) as u64 * 4;
    }
    let descriptor_bytes = per_level.iter().map(|&(_, b)| b).sum();
    let n = map.landmarks.len() as u64;
    let index_bytes = map.frames.iter().map(|f| 4 * f.global.len() as u64 + 4 + 4 * f.landmarks.len() as u64).sum();
    let header = header_bytes(map.plan.len());
    let position_bytes = 12 * n;
    let landmark_meta_bytes = 2 * n;
    SizeReport {
        mode: map.mode,
        landmarks: n,
        frames: map.frames.len() as u64,
        header_bytes: header,
        position_bytes,
        landmark_meta_bytes,
        descriptor_bytes,
        descriptor_bytes_per_level: per_level,
        full_descriptor_bytes: full,
        short_descriptor_bytes: short,
        index_bytes,
        total_bytes: header + position_bytes + landmark_meta_bytes + descriptor_bytes + index_bytes,
    }
}

pub fn serialize_map(map: &LandmarkMap) -> Result<Vec<u8>> {
    map.validate()?;
    let count = |n: usize, what: &str| u32::try_from(n).map_err(|_| Error::InvalidInput(format!("too many {what}")));
    let mut out = Vec::with_capacity(map_stats(map).total_bytes as usize);
    out.extend_from_slice(MAP_MAGIC);
    out.extend_from_slice(&MAP_VERSION.to_le_bytes());
    out.push(map.plan.len() as u8);
    for d in map.plan.dims() {
        out.extend_from_slice(&(d as u16).to_le_bytes());
    }
    out.push(match map.mode {
        DescriptorMode::Full => 0,
        DescriptorMode::Short => 1,
    });
    out.extend_from_slice(&count(map.landmarks.len(), "landmarks")?.to_le_bytes());
    out.extend_from_slice(&count(map.frames.len(), "frames")?.to_le_bytes());
    let put = |out: &mut Vec<u8>, vs: &[f32]| vs.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    for l in &map.landmarks {
        put(&mut out, &l.position);
        out.push(l.level);
        out.push(l.presence);
        put(&mut out, &l.descriptor);
    }
    for f in &map.frames {
        put(&mut out, &f.global);
        out.extend_from_slice(&count(f.landmarks.len(), "frame landmark ids")?.to_le_bytes());
        for id in &f.landmarks {
            out.extend_from_slice(&id.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn deserialize_map(bytes: &[u8]) -> Result<LandmarkMap> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != MAP_MAGIC {
        return Err(Error::Corrupt("bad map file magic".into()));
    }
    let version = r.u16()?;
    if version != MAP_VERSION {
        return Err(Error::Version { found: version, expected: MAP_VERSION });
    }
    let n_levels = r.u8()? as usize;
    let dims = (0..n_levels).map(|_| r.u16().map(usize::from)).collect::<Result<Vec<_>>>()?;
    let plan = LevelPlan::from_dims(&dims).map_err(|e| Error::Corrupt(format!("bad level table: {e}")))?;
    let mode = match r.u8()? {
        0 => DescriptorMode::Full,
        1 => DescriptorMode::Short,
        m => return Err(Error::Corrupt(format!("unknown descriptor mode byte {m}"))),
    };
    let n_landmarks = r.u32()? as usize;
    let n_frames = r.u32()? as usize;
    let mut map = LandmarkMap::empty(plan, mode);
    let floats = |r: &mut ByteReader, n: usize| (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>();
    // cap preallocation by what the buffer could possibly hold
    map.landmarks.reserve(n_landmarks.min(bytes.len() / 14));
    for _ in 0..n_landmarks {
        let position: [f32; 3] = floats(&mut r, 3)?.try_into().expect("3 floats");
        let level = r.u8()?;
        let presence = r.u8()?;
        if presence == 0 || (n_levels < 8 && presence >> n_levels != 0) {
            return Err(Error::Corrupt(format!("invalid presence bitmap {presence:#010b}")));
        }
        let descriptor = floats(&mut r, map.descriptor_len(presence))?;
        map.landmarks.push(Landmark { position, level, presence, descriptor, observations: 0 });
    }
    let g = map.global_dim();
    for _ in 0..n_frames {
        let global = floats(&mut r, g)?;
        let count = r.u32()? as usize;
        let landmarks = (0..count).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        map.frames.push(MapFrame { global, landmarks });
    }
    r.finish()?;
    map.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
    map.recount_observations();
    Ok(map)
}

pub fn save_map(map: &LandmarkMap, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, serialize_map(map)?)?;
    Ok(())
}

pub fn load_map(path: &std::path::Path) -> Result<LandmarkMap> {
    deserialize_map(&std::fs::read(path)?)
}
