//! Global retrieval descriptors and level-wise descriptor matching.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{to_unit_f32, Keypoint};
use crate::geometry::{project, Intrinsics, Pose};
use crate::map::LandmarkMap;
use crate::pyramid::DensePyramid;

/// Cosine similarity in `[-1, 1]`; zero when either vector is zero.
pub fn similarity(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

/// Mean of the deepest level's feature vectors, normalized.
pub fn global_descriptor(pyramid: &DensePyramid) -> Vec<f32> {
    let grid = pyramid.deepest();
    let d = grid.spec.dim;
    let mut acc = vec![0.0f64; d];
    for cell in grid.values.chunks_exact(d) {
        acc.iter_mut().zip(cell).for_each(|(a, &v)| *a += v);
    }
    to_unit_f32(&acc)
}

/// Mean of the descriptors of the keypoints at `level`, normalized; zeros
/// when there are none.
pub fn pool_keypoints(keypoints: &[Keypoint], level: u8, dim: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; dim];
    for k in keypoints.iter().filter(|k| k.level == level && k.descriptor.len() == dim) {
        acc.iter_mut().zip(&k.descriptor).for_each(|(a, &v)| *a += v as f64);
    }
    to_unit_f32(&acc)
}

/// Top `k` map frames by similarity to `query`, descending, ties by id.
pub fn retrieve(query: &[f32], map: &LandmarkMap, k: usize) -> Result<Vec<(u32, f64)>> {
    if k == 0 {
        return Err(Error::InvalidInput("retrieval needs k >= 1".into()));
    }
    if map.frames.is_empty() {
        return Err(Error::EmptyMap("map has no frames to retrieve".into()));
    }
    if query.len() != map.global_dim() {
        return Err(Error::DimensionMismatch(format!(
            "global descriptor has {} components, map uses {}",
            query.len(),
            map.global_dim()
        )));
    }
    let mut ranked: Vec<(u32, f64)> =
        map.frames.iter().enumerate().map(|(i, f)| (i as u32, similarity(query, &f.global))).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

/// Mutual nearest neighbours by similarity with `sim >= floor`, as
/// `(query index, reference index, similarity)` in query order. Ties go to
/// the lower index.
pub fn mutual_nearest(query: &[&[f32]], refs: &[&[f32]], floor: f64) -> Vec<(usize, usize, f64)> {
    if query.is_empty() || refs.is_empty() {
        return Vec::new();
    }
    let sims: Vec<f64> = query.iter().flat_map(|q| refs.iter().map(move |r| similarity(q, r))).collect();
    let n = refs.len();
    let mut best_query = vec![(f64::NEG_INFINITY, usize::MAX); n];
    let mut best_ref = vec![(f64::NEG_INFINITY, usize::MAX); query.len()];
    for (qi, row) in sims.chunks_exact(n).enumerate() {
        for (ri, &s) in row.iter().enumerate() {
            if s > best_ref[qi].0 {
                best_ref[qi] = (s, ri);
            }
            if s > best_query[ri].0 {
                best_query[ri] = (s, qi);
            }
        }
    }
    best_ref
        .iter()
        .enumerate()
        .filter(|&(qi, &(s, ri))| s >= floor && best_query[ri].1 == qi)
        .map(|(qi, &(s, ri))| (qi, ri, s))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    /// Index into the query keypoint list.
    pub query: usize,
    pub landmark: u32,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSet {
    pub level: u8,
    /// Reprojection gate in pixels, if one was applied.
    pub radius: Option<f64>,
    pub matches: Vec<Match>,
}

/// Query keypoint indices and descriptors, then landmark ids and descriptors.
type LevelDescriptors<'a> = (Vec<usize>, Vec<&'a [f32]>, Vec<u32>, Vec<&'a [f32]>);

fn level_descriptors<'a>(
    query: &'a [Keypoint],
    map: &'a LandmarkMap,
    candidates: &[u32],
    level: u8,
) -> Result<LevelDescriptors<'a>> {
    let spec = map.plan.level(level).ok_or_else(|| Error::InvalidInput(format!("map has no level {level}")))?;
    let dim = spec.stored_dim(map.mode);
    let mut qi = Vec::new();
    let mut qd = Vec::new();
    for (i, k) in query.iter().enumerate().filter(|(_, k)| k.level == level) {
        if k.descriptor.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "level {level} query descriptor has {} components, map stores {dim}",
                k.descriptor.len()
            )));
        }
        qi.push(i);
        qd.push(k.descriptor.as_slice());
    }
    let mut li = Vec::new();
    let mut ld = Vec::new();
    for &id in candidates {
        let lm = map.landmarks.get(id as usize).ok_or_else(|| Error::InvalidInput(format!("no landmark {id}")))?;
        if let Some(s) = lm.slice(level, &map.plan, map.mode) {
            li.push(id);
            ld.push(s);
        }
    }
    Ok((qi, qd, li, ld))
}

/// Mutual-nearest matching of the query keypoints at `level` against the
/// candidate landmarks carrying a slice of that level.
pub fn match_level(query: &[Keypoint], map: &LandmarkMap, candidates: &[u32], level: u8, floor: f64) -> Result<MatchSet> {
    let (qi, qd, li, ld) = level_descriptors(query, map, candidates, level)?;
    let matches = mutual_nearest(&qd, &ld, floor)
        .into_iter()
        .map(|(q, l, s)| Match { query: qi[q], landmark: li[l], similarity: s })
        .collect();
    Ok(MatchSet { level, radius: None, matches })
}

fn within(pose: &Pose, k: &Intrinsics, map: &LandmarkMap, id: u32, pixel: [f64; 2], radius: f64) -> bool {
    project(pose, k, &map.landmarks[id as usize].position_f64())
        .is_some_and(|p| ((p[0] - pixel[0]).powi(2) + (p[1] - pixel[1]).powi(2)).sqrt() <= radius)
}

/// For every query keypoint at `level`, the candidates with a slice of that
/// level that project within `radius` pixels of it under `prior`.
pub fn gate_candidates(
    query: &[Keypoint],
    map: &LandmarkMap,
    candidates: &[u32],
    level: u8,
    prior: &Pose,
    k: &Intrinsics,
    radius: f64,
) -> Vec<Vec<u32>> {
    query
        .iter()
        .map(|kp| {
            if kp.level != level {
                return Vec::new();
            }
            candidates
                .iter()
                .copied()
                .filter(|&id| {
                    map.landmarks.get(id as usize).is_some_and(|l| l.has_level(level))
                        && within(prior, k, map, id, kp.pixel, radius)
                })
                .collect()
        })
        .collect()
}

/// Level matches kept only where the landmark reprojects within `radius`
/// pixels of its keypoint under the prior pose.
#[allow(clippy::too_many_arguments)]
pub fn gated_match(
    query: &[Keypoint],
    map: &LandmarkMap,
    candidates: &[u32],
    level: u8,
    floor: f64,
    prior: &Pose,
    k: &Intrinsics,
    radius: f64,
) -> Result<MatchSet> {
    if !(radius >= 0.0) {
        return Err(Error::InvalidInput(format!("gating radius {radius} must be nonnegative")));
    }
    let mut set = match_level(query, map, candidates, level, floor)?;
    set.matches.retain(|m| within(prior, k, map, m.landmark, query[m.query].pixel, radius));
    set.radius = Some(radius);
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map::{Landmark, MapFrame};
    use crate::pyramid::{DescriptorMode, FeatureGrid, LevelPlan, LevelSpec, ScoreMap};
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
        to_unit_f32(&(0..d).map(|_| rng.random::<f64>() - 0.5).collect::<Vec<_>>())
    }

    fn k() -> Intrinsics {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    /// Landmarks on a grid in front of the identity camera, one level-1
    /// keypoint per landmark at its exact projection.
    fn scene(seed: u64, n: usize) -> (LandmarkMap, Vec<Keypoint>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = LevelPlan::from_dims(&[8, 16]).unwrap();
        let mut map = LandmarkMap::empty(plan, DescriptorMode::Full);
        let mut kps = Vec::new();
        for i in 0..n {
            let p = Vector3::new((i % 10) as f64 * 0.3 - 1.5, (i / 10) as f64 * 0.3 - 1.0, 5.0);
            let d = unit(&mut rng, 8);
            kps.push(Keypoint { level: 1, pixel: project(&Pose::identity(), &k(), &p).unwrap(), score: 1.0, descriptor: d.clone() });
            map.landmarks.push(Landmark {
                position: [p.x as f32, p.y as f32, p.z as f32],
                level: 1,
                presence: 1,
                descriptor: d,
                observations: 1,
            });
        }
        map.frames.push(MapFrame { global: vec![0.0; 16], landmarks: (0..n as u32).collect() });
        (map, kps)
    }

    #[test]
    fn self_similarity_is_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for d in [2, 16, 64, 128] {
            let v = unit(&mut rng, d);
            assert_eq!(similarity(&v, &v), 1.0);
        }
        assert_eq!(similarity(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn constant_features_pool_to_their_direction() {
        let spec = LevelSpec { index: 2, stride: 4, dim: 2 };
        let low = FeatureGrid::new(LevelSpec { index: 1, stride: 2, dim: 2 }, 4, 4, vec![0.1; 32], ScoreMap::filled(4, 4, 0.5)).unwrap();
        let values: Vec<f64> = (0..4).flat_map(|_| [3.0, 4.0]).collect();
        let deep = FeatureGrid::new(spec, 2, 2, values, ScoreMap::filled(2, 2, 0.5)).unwrap();
        let p = DensePyramid::new(8, 8, vec![low, deep]).unwrap();
        assert_eq!(global_descriptor(&p), vec![0.6, 0.8]);
    }

    #[test]
    fn retrieval_ranks_and_ties() {
        let (mut map, _) = scene(1, 5);
        map.frames = vec![
            MapFrame { global: to_unit_f32(&[1.0; 16]), landmarks: vec![] },
            MapFrame { global: to_unit_f32(&[-1.0; 16]), landmarks: vec![] },
            MapFrame { global: to_unit_f32(&[1.0; 16]), landmarks: vec![] },
        ];
        let q = map.frames[2].global.clone();
        assert_eq!(retrieve(&q, &map, 1).unwrap()[0].0, 0);
        assert_eq!(retrieve(&q, &map, 10).unwrap().iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 2, 1]);
        let mut orth = vec![0.0f32; 16];
        orth[0] = 1.0;
        orth[1] = -1.0;
        assert_eq!(retrieve(&orth, &map, 3).unwrap().iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(retrieve(&q, &map, 0).is_err());
        map.frames.clear();
        assert!(matches!(retrieve(&q, &map, 1), Err(Error::EmptyMap(_))));
    }

    #[test]
    fn noiseless_matching_recovers_correspondences() {
        let (map, kps) = scene(2, 40);
        let all: Vec<u32> = (0..40).collect();
        let set = match_level(&kps, &map, &all, 1, 0.0).unwrap();
        assert_eq!(set.matches.len(), 40);
        assert!(set.matches.iter().all(|m| m.query as u32 == m.landmark && m.similarity == 1.0));
        let exact = match_level(&kps, &map, &all, 1, 1.0).unwrap();
        assert_eq!(exact.matches.len(), 40);
        let mut perturbed = kps.clone();
        perturbed[3].descriptor[0] += 1e-3;
        perturbed[3].descriptor = to_unit_f32(&perturbed[3].descriptor.iter().map(|&v| v as f64).collect::<Vec<_>>());
        let exact = match_level(&perturbed, &map, &all, 1, 1.0).unwrap();
        assert!(exact.matches.iter().all(|m| m.query != 3));
        assert_eq!(exact.matches.len(), 39);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (map, mut kps) = scene(3, 5);
        kps[0].descriptor.push(0.0);
        assert!(matches!(match_level(&kps, &map, &[0, 1], 1, 0.0), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn tiny_gate_with_exact_prior_keeps_ground_truth() {
        let (map, kps) = scene(4, 30);
        let all: Vec<u32> = (0..30).collect();
        let set = gated_match(&kps, &map, &all, 1, 0.0, &Pose::identity(), &k(), 1e-3).unwrap();
        assert_eq!(set.matches.len(), 30);
        assert!(set.matches.iter().all(|m| m.query as u32 == m.landmark));
        assert_eq!(set.radius, Some(1e-3));
    }

    #[test]
    fn displaced_prior_empties_the_gate() {
        let (map, kps) = scene(5, 30);
        let all: Vec<u32> = (0..30).collect();
        let far = Pose::new(nalgebra::Matrix3::identity(), Vector3::new(10.0, 0.0, 0.0)).unwrap();
        assert!(gated_match(&kps, &map, &all, 1, 0.0, &far, &k(), 8.0).unwrap().matches.is_empty());
    }

    #[test]
    fn gate_grows_with_radius_and_is_a_subset() {
        let (map, kps) = scene(6, 50);
        let all: Vec<u32> = (0..50).collect();
        let prior = Pose::new(nalgebra::Matrix3::identity(), Vector3::new(0.05, -0.03, 0.1)).unwrap();
        let mut prev: Option<Vec<Vec<u32>>> = None;
        for r in [0.0, 2.0, 5.0, 10.0, 40.0, 1e9] {
            let g = gate_candidates(&kps, &map, &all, 1, &prior, &k(), r);
            if let Some(p) = &prev {
                for (a, b) in p.iter().zip(&g) {
                    assert!(a.iter().all(|id| b.contains(id)));
                }
            }
            let full = match_level(&kps, &map, &all, 1, 0.0).unwrap();
            let gated = gated_match(&kps, &map, &all, 1, 0.0, &prior, &k(), r).unwrap();
            assert!(gated.matches.iter().all(|m| full.matches.contains(m) && g[m.query].contains(&m.landmark)));
            prev = Some(g);
        }
    }
}
