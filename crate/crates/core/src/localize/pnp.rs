//! Absolute pose from 2D-3D correspondences: a P3P minimal solver inside
//! RANSAC, and Gauss-Newton refinement of reprojection error.

use nalgebra::{DMatrix, Matrix3, Matrix6, Rotation3, Vector3, Vector6, SVD};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{orthonormalize, Intrinsics, Pose};

/// Real roots of `sum c[i] x^i` via companion-matrix eigenvalues, each
/// polished with Newton steps.
pub fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let mut deg = coeffs.len() - 1;
    while deg > 0 && coeffs[deg].abs() <= 1e-14 * scale {
        deg -= 1;
    }
    if deg == 0 {
        return Vec::new();
    }
    let lead = coeffs[deg];
    let mut comp = DMatrix::<f64>::zeros(deg, deg);
    for i in 1..deg {
        comp[(i, i - 1)] = 1.0;
    }
    for i in 0..deg {
        comp[(i, deg - 1)] = -coeffs[i] / lead;
    }
    let eval = |x: f64| {
        let (mut p, mut dp) = (0.0, 0.0);
        for &c in coeffs[..=deg].iter().rev() {
            dp = dp * x + p;
            p = p * x + c;
        }
        (p, dp)
    };
    comp.complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-6 * (1.0 + z.re.abs()))
        .map(|z| {
            let mut x = z.re;
            for _ in 0..8 {
                let (p, dp) = eval(x);
                if dp == 0.0 {
                    break;
                }
                let step = p / dp;
                x -= step;
                if step.abs() <= 1e-15 * (1.0 + x.abs()) {
                    break;
                }
            }
            x
        })
        .collect()
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add(a: &[f64], b: &[f64]) -> Vec<f64> {
    (0..a.len().max(b.len())).map(|i| a.get(i).unwrap_or(&0.0) + b.get(i).unwrap_or(&0.0)).collect()
}

fn poly_scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

fn eval_poly(c: &[f64], x: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &v| acc * x + v)
}

/// Least-squares rigid transform with `dst ≈ R * src + t`.
pub fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<Pose> {
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let h: Matrix3<f64> = src.iter().zip(dst).map(|(s, d)| (s - cs) * (d - cd).transpose()).sum();
    let svd = SVD::new(h, true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = vt.transpose() * d * u.transpose();
    Some(Pose { rotation: r, translation: cd - r * cs })
}

/// Camera poses consistent with three unit bearings observing three world
/// points. Up to four solutions.
///
/// With depths `s_i` along the bearings and `s2 = u s1`, `s3 = v s1`, the
/// three law-of-cosines constraints reduce to `u = N(v) / D(v)` and a
/// quartic in `v`.
pub fn p3p(bearings: &[Vector3<f64>; 3], points: &[Vector3<f64>; 3]) -> Vec<Pose> {
    let a2 = (points[1] - points[2]).norm_squared();
    let b2 = (points[0] - points[2]).norm_squared();
    let c2 = (points[0] - points[1]).norm_squared();
    if a2 < 1e-18 || b2 < 1e-18 || c2 < 1e-18 {
        return Vec::new();
    }
    let alpha = bearings[1].dot(&bearings[2]);
    let beta = bearings[0].dot(&bearings[2]);
    let gamma = bearings[0].dot(&bearings[1]);

    let q = [1.0, -2.0 * beta, 1.0];
    // N(v) = (a² - c²) Q(v) - b² v² + b²
    let n = poly_add(&poly_scale(&q, a2 - c2), &[b2, 0.0, -b2]);
    // D(v) = 2 b² (γ - α v)
    let d = [2.0 * b2 * gamma, -2.0 * b2 * alpha];
    // b² N² - 2 b² γ N D + (b² - c² Q) D² = 0
    let quartic = poly_add(
        &poly_add(&poly_scale(&poly_mul(&n, &n), b2), &poly_scale(&poly_mul(&n, &d), -2.0 * b2 * gamma)),
        &poly_mul(&poly_add(&[b2], &poly_scale(&q, -c2)), &poly_mul(&d, &d)),
    );

    let mut out = Vec::new();
    for v in real_roots(&quartic) {
        let dv = eval_poly(&d, v);
        let qv = eval_poly(&q, v);
        if dv.abs() < 1e-12 * b2 || qv <= 0.0 {
            continue;
        }
        let u = eval_poly(&n, v) / dv;
        let s1 = (b2 / qv).sqrt();
        let (s2, s3) = (u * s1, v * s1);
        if !(s1 > 0.0 && s2 > 0.0 && s3 > 0.0) {
            continue;
        }
        let cam = [bearings[0] * s1, bearings[1] * s2, bearings[2] * s3];
        if let Some(pose) = kabsch(points, &cam) {
            if pose.rotation.iter().all(|x| x.is_finite()) && pose.translation.iter().all(|x| x.is_finite()) {
                out.push(pose);
            }
        }
    }
    out
}

fn bearing(k: &Intrinsics, pixel: [f64; 2]) -> Vector3<f64> {
    let n = k.normalize(pixel);
    Vector3::new(n.x, n.y, 1.0).normalize()
}

/// Squared pixel reprojection error, `None` when behind the camera.
fn sq_error(pose: &Pose, k: &Intrinsics, x: &Vector3<f64>, pixel: [f64; 2]) -> Option<f64> {
    let c = pose.transform(x);
    if c.z <= 1e-12 {
        return None;
    }
    let p = k.pixel_of(&c);
    Some((p[0] - pixel[0]).powi(2) + (p[1] - pixel[1]).powi(2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RansacConfig {
    pub max_iterations: usize,
    pub threshold_px: f64,
    pub confidence: f64,
    /// Fewest inliers for an accepted pose (at least 4).
    pub min_inliers: usize,
    pub refine_iterations: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig { max_iterations: 1000, threshold_px: 4.0, confidence: 0.999, min_inliers: 4, refine_iterations: 20, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpSolution {
    pub pose: Pose,
    /// Indices of the inlier correspondences at the final pose.
    pub inliers: Vec<usize>,
    /// Inlier count of the best minimal hypothesis, before refinement.
    pub ransac_inliers: usize,
    pub mean_reprojection_px: f64,
    pub iterations: usize,
}

fn inliers_of(pose: &Pose, pixels: &[[f64; 2]], points: &[nalgebra::Vector3<f64>], k: &Intrinsics, thr2: f64) -> (Vec<usize>, f64) {
    let mut ids = Vec::new();
    let mut err = 0.0;
    for (i, (px, x)) in pixels.iter().zip(points).enumerate() {
        if let Some(e) = sq_error(pose, k, x, *px) {
            if e <= thr2 {
                ids.push(i);
                err += e;
            }
        }
    }
    (ids, err)
}

fn mean_error(pose: &Pose, pixels: &[[f64; 2]], points: &[Vector3<f64>], k: &Intrinsics, ids: &[usize]) -> f64 {
    if ids.is_empty() {
        return 0.0;
    }
    ids.iter().map(|&i| sq_error(pose, k, &points[i], pixels[i]).map_or(f64::INFINITY, f64::sqrt)).sum::<f64>() / ids.len() as f64
}

/// Robust pose from `pixels[i] <-> points[i]`. Deterministic for a seed.
pub fn pnp_ransac(pixels: &[[f64; 2]], points: &[Vector3<f64>], k: &Intrinsics, config: &RansacConfig) -> Result<PnpSolution> {
    if pixels.len() != points.len() {
        return Err(Error::DimensionMismatch(format!("{} pixels for {} points", pixels.len(), points.len())));
    }
    if pixels.len() < 4 {
        return Err(Error::NotEnoughMatches { needed: 4, got: pixels.len() });
    }
    if !(config.threshold_px > 0.0) || !(config.confidence > 0.0 && config.confidence < 1.0) {
        return Err(Error::InvalidInput("RANSAC threshold must be positive and confidence in (0, 1)".into()));
    }
    let min_inliers = config.min_inliers.max(4);
    let thr2 = config.threshold_px * config.threshold_px;
    let bearings: Vec<Vector3<f64>> = pixels.iter().map(|&p| bearing(k, p)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = pixels.len();

    let mut best: Option<(Pose, Vec<usize>, f64)> = None;
    let mut needed = config.max_iterations;
    let mut iterations = 0;
    while iterations < needed.min(config.max_iterations) {
        iterations += 1;
        let s = sample(&mut rng, n, 3);
        let (i, j, l) = (s.index(0), s.index(1), s.index(2));
        for pose in p3p(&[bearings[i], bearings[j], bearings[l]], &[points[i], points[j], points[l]]) {
            let (ids, err) = inliers_of(&pose, pixels, points, k, thr2);
            let better = match &best {
                None => true,
                Some((_, b, berr)) => ids.len() > b.len() || (ids.len() == b.len() && err < *berr),
            };
            if better {
                let w = ids.len() as f64 / n as f64;
                needed = if w >= 1.0 {
                    0
                } else {
                    let denom = (1.0 - w.powi(3)).ln();
                    if denom < 0.0 {
                        ((1.0 - config.confidence).ln() / denom).ceil().min(usize::MAX as f64) as usize
                    } else {
                        config.max_iterations
                    }
                };
                best = Some((pose, ids, err));
            }
        }
    }
    let (mut pose, mut inliers, _) = best.ok_or_else(|| Error::RansacFailed("no valid minimal hypothesis".into()))?;
    let ransac_inliers = inliers.len();
    if ransac_inliers < min_inliers {
        return Err(Error::RansacFailed(format!("best hypothesis has {ransac_inliers} inliers, need {min_inliers}")));
    }
    for _ in 0..3 {
        let px: Vec<[f64; 2]> = inliers.iter().map(|&i| pixels[i]).collect();
        let xs: Vec<Vector3<f64>> = inliers.iter().map(|&i| points[i]).collect();
        let refined = refine_pose(&pose, &px, &xs, k, config.refine_iterations)?;
        let (ids, _) = inliers_of(&refined.pose, pixels, points, k, thr2);
        if ids.len() < inliers.len() {
            break;
        }
        pose = refined.pose;
        let unchanged = ids == inliers;
        inliers = ids;
        if unchanged {
            break;
        }
    }
    let mean_reprojection_px = mean_error(&pose, pixels, points, k, &inliers);
    Ok(PnpSolution { pose, inliers, ransac_inliers, mean_reprojection_px, iterations })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub pose: Pose,
    /// Mean squared reprojection error before and after, pixels².
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Cost after every accepted step, starting with the initial cost.
    pub history: Vec<f64>,
    /// Normal equations were singular; `pose` is the last good iterate.
    pub singular: bool,
}

fn cost(pose: &Pose, pixels: &[[f64; 2]], points: &[Vector3<f64>], k: &Intrinsics) -> f64 {
    let mut total = 0.0;
    for (px, x) in pixels.iter().zip(points) {
        match sq_error(pose, k, x, *px) {
            Some(e) => total += e,
            None => return f64::INFINITY,
        }
    }
    total / pixels.len() as f64
}

/// Gauss-Newton on pixel reprojection residuals with the update
/// `R <- exp(w) R`, `t <- exp(w) t + dt`. Steps that do not lower the
/// cost are halved, then abandoned.
pub fn refine_pose(pose: &Pose, pixels: &[[f64; 2]], points: &[Vector3<f64>], k: &Intrinsics, iterations: usize) -> Result<Refinement> {
    if pixels.len() != points.len() {
        return Err(Error::DimensionMismatch(format!("{} pixels for {} points", pixels.len(), points.len())));
    }
    if pixels.len() < 4 {
        return Err(Error::NotEnoughMatches { needed: 4, got: pixels.len() });
    }
    let mut current = *pose;
    let initial_cost = cost(&current, pixels, points, k);
    let mut c = initial_cost;
    let mut history = vec![c];
    let mut singular = false;
    for _ in 0..iterations {
        let mut h = Matrix6::<f64>::zeros();
        let mut g = Vector6::<f64>::zeros();
        for (px, x) in pixels.iter().zip(points) {
            let cam = current.transform(x);
            if cam.z <= 1e-12 {
                continue;
            }
            let (iz, iz2) = (1.0 / cam.z, 1.0 / (cam.z * cam.z));
            let p = k.pixel_of(&cam);
            let r = [p[0] - px[0], p[1] - px[1]];
            let dproj = [[k.fx * iz, 0.0, -k.fx * cam.x * iz2], [0.0, k.fy * iz, -k.fy * cam.y * iz2]];
            // d cam / d w = -[cam]x, d cam / d dt = I
            let skew = [[0.0, cam.z, -cam.y], [-cam.z, 0.0, cam.x], [cam.y, -cam.x, 0.0]];
            for (row, ri) in dproj.iter().zip(r) {
                let mut j = [0.0; 6];
                for a in 0..3 {
                    j[a] = (0..3).map(|b| row[b] * skew[b][a]).sum();
                    j[3 + a] = row[a];
                }
                for a in 0..6 {
                    g[a] += j[a] * ri;
                    for b in 0..6 {
                        h[(a, b)] += j[a] * j[b];
                    }
                }
            }
        }
        let eig = h.symmetric_eigenvalues();
        if !(eig.min() > 1e-12 * eig.max()) {
            singular = true;
            break;
        }
        let Some(chol) = h.cholesky() else {
            singular = true;
            break;
        };
        let delta = chol.solve(&(-g));
        if !delta.iter().all(|v| v.is_finite()) {
            singular = true;
            break;
        }
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..10 {
            let d = delta * step;
            let rot = Rotation3::new(Vector3::new(d[0], d[1], d[2])).into_inner();
            let trial = Pose {
                rotation: orthonormalize(&(rot * current.rotation)),
                translation: rot * current.translation + Vector3::new(d[3], d[4], d[5]),
            };
            let tc = cost(&trial, pixels, points, k);
            if tc < c {
                current = trial;
                c = tc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        history.push(c);
        if delta.norm() < 1e-14 {
            break;
        }
    }
    Ok(Refinement { pose: current, initial_cost, final_cost: c, history, singular })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::project;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn k() -> Intrinsics {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let axis = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
        let r = Rotation3::new(axis).into_inner();
        Pose::new(r, Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5))).unwrap()
    }

    /// World points visible in `pose`, with their exact pixels.
    fn correspondences(rng: &mut ChaCha8Rng, pose: &Pose, n: usize) -> (Vec<[f64; 2]>, Vec<Vector3<f64>>) {
        let inv = pose.inverse();
        let mut px = Vec::new();
        let mut xs = Vec::new();
        while px.len() < n {
            let z = rng.random_range(3.0..8.0);
            let u = [rng.random_range(10.0..630.0), rng.random_range(10.0..470.0)];
            let nrm = k().normalize(u);
            let x = inv.transform(&Vector3::new(nrm.x * z, nrm.y * z, z));
            px.push(u);
            xs.push(x);
        }
        (px, xs)
    }

    fn errors(a: &Pose, b: &Pose) -> (f64, f64) {
        let r = a.rotation.transpose() * b.rotation;
        ((a.center() - b.center()).norm(), crate::geometry::rotation_angle_deg(&r))
    }

    #[test]
    fn polynomial_roots() {
        // (x - 1)(x + 2)(x - 3)(x^2 + 1)
        let p = poly_mul(&poly_mul(&poly_mul(&[-1.0, 1.0], &[2.0, 1.0]), &[-3.0, 1.0]), &[1.0, 0.0, 1.0]);
        let mut r = real_roots(&p);
        r.sort_by(f64::total_cmp);
        assert_eq!(r.len(), 3);
        for (got, want) in r.iter().zip([-2.0, 1.0, 3.0]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert!(real_roots(&[0.0, 0.0]).is_empty());
    }

    #[test]
    fn p3p_contains_the_true_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let pose = random_pose(&mut rng);
            let (px, xs) = correspondences(&mut rng, &pose, 3);
            let b = [bearing(&k(), px[0]), bearing(&k(), px[1]), bearing(&k(), px[2])];
            let sols = p3p(&b, &[xs[0], xs[1], xs[2]]);
            assert!(!sols.is_empty() && sols.len() <= 4);
            let best = sols.iter().map(|s| errors(s, &pose)).fold((f64::MAX, f64::MAX), |a, e| if e.0 < a.0 { e } else { a });
            assert!(best.0 < 1e-6 && best.1 < 1e-6, "{best:?}");
        }
    }

    #[test]
    fn noiseless_ransac_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pose = random_pose(&mut rng);
        let (px, xs) = correspondences(&mut rng, &pose, 100);
        let sol = pnp_ransac(&px, &xs, &k(), &RansacConfig::default()).unwrap();
        let (t, r) = errors(&sol.pose, &pose);
        assert!(t < 1e-6 && r < 1e-6, "{t} {r}");
        assert_eq!(sol.inliers.len(), 100);
    }

    #[test]
    fn planted_outliers_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let pose = random_pose(&mut rng);
        let (mut px, xs) = correspondences(&mut rng, &pose, 100);
        let noise = Normal::new(0.0, 1.0).unwrap();
        for (i, p) in px.iter_mut().enumerate() {
            if i % 5 == 0 {
                let a = rng.random_range(0.0..std::f64::consts::TAU);
                let m = rng.random_range(30.0..80.0);
                *p = [p[0] + m * a.cos(), p[1] + m * a.sin()];
            } else {
                *p = [p[0] + noise.sample(&mut rng), p[1] + noise.sample(&mut rng)];
            }
        }
        let sol = pnp_ransac(&px, &xs, &k(), &RansacConfig::default()).unwrap();
        assert!(sol.inliers.iter().all(|i| i % 5 != 0));
        assert!(sol.inliers.len() >= 70);
        assert!(errors(&sol.pose, &pose).0 < 0.05);
    }

    #[test]
    fn same_seed_same_answer_and_too_few_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let pose = random_pose(&mut rng);
        let (mut px, xs) = correspondences(&mut rng, &pose, 30);
        px[0][0] += 50.0;
        let cfg = RansacConfig { seed: 5, ..RansacConfig::default() };
        assert_eq!(pnp_ransac(&px, &xs, &k(), &cfg).unwrap(), pnp_ransac(&px, &xs, &k(), &cfg).unwrap());
        assert!(matches!(pnp_ransac(&px[..3], &xs[..3], &k(), &cfg), Err(Error::NotEnoughMatches { needed: 4, got: 3 })));
    }

    #[test]
    fn refinement_fixed_point_and_convergence() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let pose = random_pose(&mut rng);
        let (px, xs) = correspondences(&mut rng, &pose, 60);
        let same = refine_pose(&pose, &px, &xs, &k(), 10).unwrap();
        assert!((same.pose.rotation - pose.rotation).abs().max() < 1e-10);
        assert!((same.pose.translation - pose.translation).abs().max() < 1e-10);

        let bump = Rotation3::new(Vector3::new(0.0, 1f64.to_radians(), 0.0)).into_inner();
        let start = Pose { rotation: bump * pose.rotation, translation: pose.translation + Vector3::new(0.05, 0.0, 0.0) };
        let out = refine_pose(&start, &px, &xs, &k(), 30).unwrap();
        let (t, r) = errors(&out.pose, &pose);
        assert!(t < 1e-6 && r < 1e-6, "{t} {r}");
        assert!(!out.singular);
        assert!(out.history.windows(2).all(|w| w[1] <= w[0]));
        let o = out.pose.rotation.transpose() * out.pose.rotation - Matrix3::identity();
        assert!(o.abs().max() < 1e-9);
    }

    #[test]
    fn objective_never_increases_on_noisy_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let noise = Normal::new(0.0, 2.0).unwrap();
        for _ in 0..20 {
            let pose = random_pose(&mut rng);
            let (mut px, xs) = correspondences(&mut rng, &pose, 20);
            px.iter_mut().for_each(|p| *p = [p[0] + noise.sample(&mut rng), p[1] + noise.sample(&mut rng)]);
            let start = Pose { translation: pose.translation + Vector3::new(0.1, -0.05, 0.02), ..pose };
            let out = refine_pose(&start, &px, &xs, &k(), 15).unwrap();
            assert!(out.history.windows(2).all(|w| w[1] <= w[0]));
            assert!(out.final_cost <= out.initial_cost);
        }
    }

    #[test]
    fn coincident_points_are_singular() {
        let x = Vector3::new(0.0, 0.0, 5.0);
        let px = project(&Pose::identity(), &k(), &x).unwrap();
        let out = refine_pose(&Pose::identity(), &[px; 4], &[x; 4], &k(), 5).unwrap();
        assert!(out.singular);
        assert_eq!(out.pose, Pose::identity());
    }
}
