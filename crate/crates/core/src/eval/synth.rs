//! Synthetic scenes with exact ground truth: posed frames observing
//! landmarks with per-level descriptors, and homography-related keypoint
//! pairs.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::metrics::{transfer, MmaPair};
use crate::error::{Error, Result};
use crate::extract::{to_unit_f32, Keypoint};
use crate::geometry::{project, Intrinsics, Pose};
use crate::localize::QueryFrame;
use crate::map::PosedKeypoints;
use crate::pyramid::LevelPlan;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_landmarks: usize,
    /// Mapping frames.
    pub n_frames: usize,
    /// Held-out query frames.
    pub n_queries: usize,
    /// Pixel noise sigma at level 1; level `i` uses `noise_px * 2^(i-1)`.
    pub noise_px: f64,
    /// Fraction of observations displaced by at least 30 px.
    pub outlier_rate: f64,
    /// Norm of the perturbation added to each observed descriptor.
    pub descriptor_noise: f64,
    pub dims: Vec<usize>,
    pub intrinsics: Intrinsics,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_landmarks: 200,
            n_frames: 8,
            n_queries: 4,
            noise_px: 0.0,
            outlier_rate: 0.0,
            descriptor_noise: 0.0,
            dims: vec![32, 64, 128],
            intrinsics: Intrinsics { fx: 500.0, fy: 500.0, cx: 320.0, cy: 240.0, width: 640, height: 480 },
        }
    }
}

pub const OUTLIER_MIN_PX: f64 = 30.0;
const OUTLIER_MAX_PX: f64 = 80.0;
/// Half extents of the landmark box, meters.
const BOX: [f64; 3] = [2.0, 1.0, 2.0];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthLandmark {
    pub position: Vector3<f64>,
    /// Deepest level; the landmark is observed at levels `1..=level`.
    pub level: u8,
    /// Unit descriptor per level `1..=level`, index `level - 1`.
    pub descriptors: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthObservation {
    pub landmark: usize,
    pub level: u8,
    pub pixel: [f64; 2],
    pub true_pixel: [f64; 2],
    /// Camera-frame depth of the landmark.
    pub depth: f64,
    pub descriptor: Vec<f32>,
    pub outlier: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthFrame {
    pub pose: Pose,
    pub observations: Vec<SynthObservation>,
}

impl SynthFrame {
    pub fn keypoints(&self) -> Vec<Keypoint> {
        self.observations
            .iter()
            .map(|o| Keypoint { level: o.level, pixel: o.pixel, score: 1.0, descriptor: o.descriptor.clone() })
            .collect()
    }

    pub fn depths(&self) -> Vec<f64> {
        self.observations.iter().map(|o| o.depth).collect()
    }

    pub fn posed_keypoints(&self, with_depth: bool) -> PosedKeypoints {
        PosedKeypoints { keypoints: self.keypoints(), pose: self.pose, depths: with_depth.then(|| self.depths()), global: None }
    }

    pub fn query(&self, id: &str, intrinsics: Intrinsics) -> QueryFrame {
        QueryFrame { id: id.to_string(), keypoints: self.keypoints(), global: None, intrinsics }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub config: SynthConfig,
    pub plan: LevelPlan,
    pub landmarks: Vec<SynthLandmark>,
    pub frames: Vec<SynthFrame>,
    pub queries: Vec<SynthFrame>,
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..d).map(|_| n.sample(rng)).collect();
        if v.iter().any(|&x| x != 0.0) {
            return to_unit_f32(&v);
        }
    }
}

fn perturb(rng: &mut ChaCha8Rng, d: &[f32], amount: f64) -> Vec<f32> {
    if amount == 0.0 {
        return d.to_vec();
    }
    let n = Normal::new(0.0, amount / (d.len() as f64).sqrt()).expect("finite sigma");
    to_unit_f32(&d.iter().map(|&x| x as f64 + n.sample(rng)).collect::<Vec<_>>())
}

/// Deepest level of landmark `i` of `n`: the first 20% reach the deepest
/// level, the next 30% one level less, the rest are spread over the others.
fn level_of(i: usize, n: usize, levels: usize) -> u8 {
    let f = i as f64 / n as f64;
    if f < 0.2 {
        levels as u8
    } else if f < 0.5 || levels == 2 {
        levels as u8 - 1
    } else {
        let rest = levels - 2;
        (1 + ((f - 0.5) / 0.5 * rest as f64).floor() as usize).min(rest) as u8
    }
}

/// A camera on a circle of radius `radius` around the origin at `angle_deg`,
/// looking at the origin from height `height` (y points down).
fn orbit_pose(angle_deg: f64, radius: f64, height: f64, target: Vector3<f64>) -> Pose {
    let a = angle_deg.to_radians();
    let center = target + Vector3::new(radius * a.sin(), height, -radius * a.cos());
    Pose::look_at(center, target, Vector3::new(0.0, -1.0, 0.0)).expect("orbit cameras are well posed")
}

struct Observer<'a> {
    config: &'a SynthConfig,
    noise: Normal<f64>,
}

impl Observer<'_> {
    fn observe(&self, rng: &mut ChaCha8Rng, pose: Pose, landmarks: &[SynthLandmark]) -> SynthFrame {
        let k = &self.config.intrinsics;
        let (w, h) = (k.width as f64, k.height as f64);
        let clamp = |p: [f64; 2]| [p[0].clamp(0.0, w - 1e-6), p[1].clamp(0.0, h - 1e-6)];
        let mut observations = Vec::new();
        for (id, l) in landmarks.iter().enumerate() {
            let cam = pose.transform(&l.position);
            let Some(px) = project(&pose, k, &l.position) else { continue };
            if cam.z < 0.1 || !k.contains(px) {
                continue;
            }
            for level in (1..=l.level).rev() {
                let sigma = self.config.noise_px * (1u64 << (level - 1)) as f64;
                let mut pixel = if sigma > 0.0 {
                    clamp([px[0] + sigma * self.noise.sample(rng), px[1] + sigma * self.noise.sample(rng)])
                } else {
                    px
                };
                let mut outlier = false;
                if self.config.outlier_rate > 0.0 && rng.random::<f64>() < self.config.outlier_rate {
                    for _ in 0..20 {
                        let a = rng.random_range(0.0..std::f64::consts::TAU);
                        let m = rng.random_range(OUTLIER_MIN_PX..OUTLIER_MAX_PX);
                        let cand = [px[0] + m * a.cos(), px[1] + m * a.sin()];
                        if k.contains(cand) {
                            pixel = cand;
                            outlier = true;
                            break;
                        }
                    }
                }
                observations.push(SynthObservation {
                    landmark: id,
                    level,
                    pixel,
                    true_pixel: px,
                    depth: cam.z,
                    descriptor: perturb(rng, &l.descriptors[level as usize - 1], self.config.descriptor_noise),
                    outlier,
                });
            }
        }
        SynthFrame { pose, observations }
    }
}

fn random_landmarks(rng: &mut ChaCha8Rng, n: usize, plan: &LevelPlan, center: Vector3<f64>) -> Vec<SynthLandmark> {
    (0..n)
        .map(|i| {
            let position = center
                + Vector3::new(
                    rng.random_range(-BOX[0]..BOX[0]),
                    rng.random_range(-BOX[1]..BOX[1]),
                    rng.random_range(-BOX[2]..BOX[2]),
                );
            let level = level_of(i, n, plan.len());
            let descriptors = plan.levels()[..level as usize].iter().map(|s| unit(rng, s.dim)).collect();
            SynthLandmark { position, level, descriptors }
        })
        .collect()
}

impl SynthScene {
    pub fn generate(config: &SynthConfig) -> Result<Self> {
        if config.n_landmarks < 10 || config.n_frames < 2 {
            return Err(Error::InvalidInput("need at least 10 landmarks and 2 frames".into()));
        }
        if !(config.noise_px >= 0.0) || !(0.0..=1.0).contains(&config.outlier_rate) || !(config.descriptor_noise >= 0.0) {
            return Err(Error::InvalidInput("noise levels must be nonnegative and the outlier rate in [0, 1]".into()));
        }
        config.intrinsics.validate()?;
        let plan = LevelPlan::from_dims(&config.dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let landmarks = random_landmarks(&mut rng, config.n_landmarks, &plan, Vector3::zeros());
        let observer = Observer { config, noise: Normal::new(0.0, 1.0).expect("unit normal") };
        let span = 40.0;
        let step = 2.0 * span / (config.n_frames - 1) as f64;
        let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-1.0..1.0);
        let frames = (0..config.n_frames)
            .map(|i| {
                let angle = -span + step * i as f64 + jitter(&mut rng);
                let pose = orbit_pose(angle, 6.0 + 0.2 * jitter(&mut rng), -1.0, Vector3::zeros());
                observer.observe(&mut rng, pose, &landmarks)
            })
            .collect();
        let queries = (0..config.n_queries)
            .map(|i| {
                let angle = -span + step * (0.5 + (i % (config.n_frames - 1)) as f64);
                let pose = orbit_pose(angle + 0.5 * jitter(&mut rng), 5.5, -0.6, Vector3::zeros());
                observer.observe(&mut rng, pose, &landmarks)
            })
            .collect();
        Ok(SynthScene { config: config.clone(), plan, landmarks, frames, queries })
    }

    /// A query frame observing fresh landmarks in a volume far from the
    /// mapped one. Drawn from a separate stream of the scene generator so
    /// its descriptors never repeat the scene's.
    pub fn disjoint_query(&self, seed: u64) -> SynthFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(seed.wrapping_add(1));
        let center = Vector3::new(60.0, 0.0, 0.0);
        let landmarks = random_landmarks(&mut rng, self.config.n_landmarks, &self.plan, center);
        let observer = Observer { config: &self.config, noise: Normal::new(0.0, 1.0).expect("unit normal") };
        observer.observe(&mut rng, orbit_pose(10.0, 6.0, -1.0, center), &landmarks)
    }

    /// Number of frames in which each landmark is visible.
    pub fn visibility_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.landmarks.len()];
        for f in &self.frames {
            let mut seen: Vec<usize> = f.observations.iter().map(|o| o.landmark).collect();
            seen.dedup();
            seen.into_iter().for_each(|id| counts[id] += 1);
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HomographyConfig {
    pub seed: u64,
    pub pairs: usize,
    pub points: usize,
    pub noise_px: f64,
    pub descriptor_noise: f64,
    pub dim: usize,
    pub width: u32,
    pub height: u32,
}

impl Default for HomographyConfig {
    fn default() -> Self {
        HomographyConfig { seed: 0, pairs: 10, points: 300, noise_px: 0.5, descriptor_noise: 0.0, dim: 128, width: 640, height: 480 }
    }
}

/// A mild random homography about the image center.
fn random_homography(rng: &mut ChaCha8Rng, w: f64, h: f64) -> Matrix3<f64> {
    let c = Matrix3::new(1.0, 0.0, -w / 2.0, 0.0, 1.0, -h / 2.0, 0.0, 0.0, 1.0);
    let ci = Matrix3::new(1.0, 0.0, w / 2.0, 0.0, 1.0, h / 2.0, 0.0, 0.0, 1.0);
    let r = Rotation3::from_axis_angle(&Vector3::z_axis(), rng.random_range(-10f64..10.0).to_radians()).into_inner();
    let s = rng.random_range(0.85..1.15);
    let mut a = r * s;
    a[(0, 2)] = rng.random_range(-20.0..20.0);
    a[(1, 2)] = rng.random_range(-20.0..20.0);
    a[(2, 0)] = rng.random_range(-2e-4..2e-4);
    a[(2, 1)] = rng.random_range(-2e-4..2e-4);
    a[(2, 2)] = 1.0;
    ci * a * c
}

/// Keypoint pairs related by random homographies; `b` holds the noisy
/// transfers of `a`'s points that stay inside the image, shuffled.
pub fn synth_homography_pairs(config: &HomographyConfig) -> Result<Vec<MmaPair>> {
    if config.dim == 0 || config.points == 0 || config.pairs == 0 || !(config.noise_px >= 0.0) {
        return Err(Error::InvalidInput("homography pairs need points, pairs, a descriptor dim and nonnegative noise".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (w, h) = (config.width as f64, config.height as f64);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let inside = |p: [f64; 2]| p[0] >= 0.0 && p[1] >= 0.0 && p[0] < w && p[1] < h;
    (0..config.pairs)
        .map(|_| {
            let hm = random_homography(&mut rng, w, h);
            let mut a = Vec::new();
            let mut b = Vec::new();
            for _ in 0..config.points {
                let p = [rng.random_range(0.0..w), rng.random_range(0.0..h)];
                let Some(q) = transfer(&hm, p) else { continue };
                let q = [q[0] + config.noise_px * noise.sample(&mut rng), q[1] + config.noise_px * noise.sample(&mut rng)];
                if !inside(q) {
                    continue;
                }
                let d = unit(&mut rng, config.dim);
                let db = perturb(&mut rng, &d, config.descriptor_noise);
                a.push(Keypoint { level: 1, pixel: p, score: 1.0, descriptor: d });
                b.push(Keypoint { level: 1, pixel: q, score: 1.0, descriptor: db });
            }
            b.shuffle(&mut rng);
            Ok(MmaPair { a, b, homography: hm })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let c = SynthConfig { noise_px: 1.0, outlier_rate: 0.1, descriptor_noise: 0.1, ..SynthConfig::default() };
        assert_eq!(SynthScene::generate(&c).unwrap(), SynthScene::generate(&c).unwrap());
        let other = SynthScene::generate(&SynthConfig { seed: 1, ..c.clone() }).unwrap();
        assert_ne!(other, SynthScene::generate(&c).unwrap());
    }

    #[test]
    fn noiseless_observations_reproject_exactly() {
        let s = SynthScene::generate(&SynthConfig::default()).unwrap();
        for f in s.frames.iter().chain(&s.queries) {
            for o in &f.observations {
                assert_eq!(o.pixel, o.true_pixel);
                assert!(!o.outlier);
                let p = project(&f.pose, &s.config.intrinsics, &s.landmarks[o.landmark].position).unwrap();
                assert_eq!(p, o.pixel);
            }
        }
    }

    #[test]
    fn default_scene_is_well_covered() {
        let s = SynthScene::generate(&SynthConfig::default()).unwrap();
        let per_frame: Vec<usize> = s
            .frames
            .iter()
            .map(|f| f.observations.iter().map(|o| o.landmark).collect::<std::collections::BTreeSet<_>>().len())
            .collect();
        let mean = per_frame.iter().sum::<usize>() as f64 / per_frame.len() as f64;
        assert!(mean >= 100.0, "{per_frame:?}");
        let twice = s.visibility_counts().iter().filter(|&&c| c >= 2).count();
        assert!(twice as f64 >= 0.9 * s.landmarks.len() as f64);
        let levels: Vec<usize> = (1..=3).map(|l| s.landmarks.iter().filter(|x| x.level == l).count()).collect();
        assert_eq!(levels, vec![100, 60, 40]);
    }

    #[test]
    fn outliers_are_far_and_tagged() {
        let c = SynthConfig { outlier_rate: 0.2, ..SynthConfig::default() };
        let s = SynthScene::generate(&c).unwrap();
        let obs: Vec<&SynthObservation> = s.frames.iter().flat_map(|f| &f.observations).collect();
        let out = obs.iter().filter(|o| o.outlier).count() as f64 / obs.len() as f64;
        assert!((0.15..0.25).contains(&out), "{out}");
        for o in obs.iter().filter(|o| o.outlier) {
            let d = ((o.pixel[0] - o.true_pixel[0]).powi(2) + (o.pixel[1] - o.true_pixel[1]).powi(2)).sqrt();
            assert!(d >= OUTLIER_MIN_PX);
        }
    }

    #[test]
    fn disjoint_query_sees_only_fresh_landmarks() {
        let s = SynthScene::generate(&SynthConfig::default()).unwrap();
        for seed in [0, 5] {
            let q = s.disjoint_query(seed);
            assert!(q.observations.len() >= 100);
            for o in &q.observations {
                assert!(s.landmarks.iter().all(|l| l.descriptors.get(o.level as usize - 1) != Some(&o.descriptor)), "seed {seed}");
            }
        }
    }

    #[test]
    fn homography_pairs_are_consistent() {
        let pairs = synth_homography_pairs(&HomographyConfig { noise_px: 0.0, pairs: 3, ..HomographyConfig::default() }).unwrap();
        for p in &pairs {
            assert!(p.a.len() > 200);
            for ka in &p.a {
                let kb = p.b.iter().find(|k| k.descriptor == ka.descriptor).unwrap();
                let t = transfer(&p.homography, ka.pixel).unwrap();
                assert!((t[0] - kb.pixel[0]).abs() < 1e-9 && (t[1] - kb.pixel[1]).abs() < 1e-9);
            }
        }
    }
}
