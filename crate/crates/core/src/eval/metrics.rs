//! Pose error, medians, matching accuracy and result tables.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::Keypoint;
use crate::geometry::{rotation_angle_deg, Pose};
use crate::localize::mutual_nearest;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    /// Distance between camera centers, meters.
    pub translation: f64,
    /// Angle of the relative rotation, degrees.
    pub rotation: f64,
}

pub fn pose_error(est: &Pose, gt: &Pose) -> PoseError {
    PoseError {
        translation: (est.center() - gt.center()).norm(),
        rotation: rotation_angle_deg(&(est.rotation.transpose() * gt.rotation)),
    }
}

/// Median; the mean of the central pair for even counts.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("median of an empty list".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Ok(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

/// Component-wise medians.
pub fn median_errors(errors: &[PoseError]) -> Result<PoseError> {
    Ok(PoseError {
        translation: median(&errors.iter().map(|e| e.translation).collect::<Vec<_>>())?,
        rotation: median(&errors.iter().map(|e| e.rotation).collect::<Vec<_>>())?,
    })
}

/// Produces `(index in a, index in b)` correspondences for an image pair.
pub trait Matcher {
    fn match_pair(&self, a: &[Keypoint], b: &[Keypoint]) -> Vec<(usize, usize)>;
}

/// Mutual nearest neighbours by descriptor similarity, per level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MutualNearestMatcher {
    pub floor: f64,
}

impl Matcher for MutualNearestMatcher {
    fn match_pair(&self, a: &[Keypoint], b: &[Keypoint]) -> Vec<(usize, usize)> {
        let mut levels: Vec<u8> = a.iter().map(|k| k.level).collect();
        levels.sort_unstable();
        levels.dedup();
        let mut out = Vec::new();
        for level in levels {
            let ia: Vec<usize> = (0..a.len()).filter(|&i| a[i].level == level).collect();
            let ib: Vec<usize> = (0..b.len()).filter(|&i| b[i].level == level).collect();
            let da: Vec<&[f32]> = ia.iter().map(|&i| a[i].descriptor.as_slice()).collect();
            let db: Vec<&[f32]> = ib.iter().map(|&i| b[i].descriptor.as_slice()).collect();
            out.extend(mutual_nearest(&da, &db, self.floor).into_iter().map(|(x, y, _)| (ia[x], ib[y])));
        }
        out
    }
}

/// Keypoints of two images related by `homography` (maps `a` to `b`).
#[derive(Debug, Clone, PartialEq)]
pub struct MmaPair {
    pub a: Vec<Keypoint>,
    pub b: Vec<Keypoint>,
    pub homography: Matrix3<f64>,
}

/// Image of `p` under `h`, `None` at or beyond the line at infinity.
pub fn transfer(h: &Matrix3<f64>, p: [f64; 2]) -> Option<[f64; 2]> {
    let q = h * Vector3::new(p[0], p[1], 1.0);
    (q.z.abs() > 1e-12).then(|| [q.x / q.z, q.y / q.z])
}

fn check_homography(h: &Matrix3<f64>) -> Result<()> {
    if !h.iter().all(|v| v.is_finite()) || h.determinant().abs() < 1e-12 {
        return Err(Error::InvalidInput("homography must be finite and invertible".into()));
    }
    Ok(())
}

/// Fraction of matches `(p in a, q in b)` with `|H p - q| <= tau`, per
/// threshold. Zero when there are no matches.
pub fn pair_accuracy(h: &Matrix3<f64>, matches: &[([f64; 2], [f64; 2])], thresholds: &[f64]) -> Result<Vec<f64>> {
    check_homography(h)?;
    let errors: Vec<f64> = matches
        .iter()
        .map(|(p, q)| transfer(h, *p).map_or(f64::INFINITY, |t| ((t[0] - q[0]).powi(2) + (t[1] - q[1]).powi(2)).sqrt()))
        .collect();
    Ok(thresholds
        .iter()
        .map(|&tau| if errors.is_empty() { 0.0 } else { errors.iter().filter(|&&e| e <= tau).count() as f64 / errors.len() as f64 })
        .collect())
}

pub fn default_thresholds() -> Vec<f64> {
    (1..=10).map(f64::from).collect()
}

/// Mean matching accuracy over pairs, as `(threshold, accuracy)`.
pub fn mma(pairs: &[MmaPair], matcher: &dyn Matcher, thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no image pairs".into()));
    }
    let mut sums = vec![0.0; thresholds.len()];
    for pair in pairs {
        let matches: Vec<([f64; 2], [f64; 2])> =
            matcher.match_pair(&pair.a, &pair.b).into_iter().map(|(i, j)| (pair.a[i].pixel, pair.b[j].pixel)).collect();
        for (s, acc) in sums.iter_mut().zip(pair_accuracy(&pair.homography, &matches, thresholds)?) {
            *s += acc;
        }
    }
    Ok(thresholds.iter().zip(sums).map(|(&t, s)| (t, s / pairs.len() as f64)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub map_mb: f64,
    pub median_cm: f64,
    pub median_deg: f64,
}

pub fn results_table(rows: &[ResultRow]) -> String {
    let width = rows.iter().map(|r| r.method.len()).chain([6]).max().unwrap_or(6);
    let mut out = format!("{:<width$}  {:>10}  {:>12}  {:>12}\n", "method", "map MB", "median cm", "median deg");
    for r in rows {
        out += &format!("{:<width$}  {:>10.2}  {:>12.4}  {:>12.4}\n", r.method, r.map_mb, r.median_cm, r.median_deg);
    }
    out
}

/// `threshold accuracy` lines.
pub fn mma_curve_text(curve: &[(f64, f64)]) -> String {
    curve.iter().map(|(t, a)| format!("{t} {a:.6}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use proptest::prelude::*;

    fn rot_z(deg: f64) -> Matrix3<f64> {
        Rotation3::from_axis_angle(&Vector3::z_axis(), deg.to_radians()).into_inner()
    }

    #[test]
    fn pose_error_examples() {
        let gt = Pose::identity();
        assert_eq!(pose_error(&gt, &gt), PoseError { translation: 0.0, rotation: 0.0 });
        let flip = Pose::new(rot_z(180.0), Vector3::zeros()).unwrap();
        let e = pose_error(&flip, &gt);
        assert!(e.translation == 0.0 && (e.rotation - 180.0).abs() < 1e-12);
        // center of est = -R^T t; choose t so the center is 5 cm away
        let r = rot_z(10.0);
        let est = Pose::new(r, -(r * Vector3::new(0.03, 0.04, 0.0))).unwrap();
        let e = pose_error(&est, &gt);
        assert!((e.translation - 0.05).abs() < 1e-12 && (e.rotation - 10.0).abs() < 1e-9);
    }

    #[test]
    fn medians() {
        let e = |t| PoseError { translation: t, rotation: 2.0 * t };
        assert_eq!(median_errors(&[e(1.5)]).unwrap(), e(1.5));
        assert_eq!(median_errors(&[e(3.0), e(1.0), e(2.0)]).unwrap().translation, 2.0);
        assert_eq!(median_errors(&[e(4.0), e(1.0), e(3.0), e(2.0)]).unwrap().translation, 2.5);
        assert!(median_errors(&[]).is_err());
    }

    #[test]
    fn accuracy_steps() {
        let pts: Vec<[f64; 2]> = (0..20).map(|i| [i as f64 * 7.0, 100.0 - i as f64]).collect();
        let same: Vec<_> = pts.iter().map(|&p| (p, p)).collect();
        assert!(pair_accuracy(&Matrix3::identity(), &same, &default_thresholds()).unwrap().iter().all(|&a| a == 1.0));
        let shifted: Vec<_> = pts.iter().map(|&p| (p, [p[0] + 2.0, p[1]])).collect();
        let acc = pair_accuracy(&Matrix3::identity(), &shifted, &default_thresholds()).unwrap();
        assert_eq!(acc[0], 0.0);
        assert!(acc[1..].iter().all(|&a| a == 1.0));
        assert_eq!(pair_accuracy(&Matrix3::identity(), &[], &[1.0]).unwrap(), vec![0.0]);
        assert!(pair_accuracy(&Matrix3::zeros(), &same, &[1.0]).is_err());
    }

    #[test]
    fn table_layout() {
        let t = results_table(&[ResultRow { method: "lvl2 full".into(), map_mb: 48.64, median_cm: 3.1, median_deg: 0.95 }]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("method") && lines[1].contains("48.64"));
        assert_eq!(mma_curve_text(&[(1.0, 0.5)]), "1 0.500000\n");
    }

    proptest! {
        #[test]
        fn rotation_error_symmetric_and_zero_iff_equal(
            a in proptest::array::uniform3(-2.0f64..2.0), b in proptest::array::uniform3(-2.0f64..2.0)
        ) {
            let pa = Pose::new(Rotation3::new(Vector3::from(a)).into_inner(), Vector3::zeros()).unwrap();
            let pb = Pose::new(Rotation3::new(Vector3::from(b)).into_inner(), Vector3::zeros()).unwrap();
            let (ab, ba) = (pose_error(&pa, &pb).rotation, pose_error(&pb, &pa).rotation);
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!((0.0..=180.0).contains(&ab));
            prop_assert!(pose_error(&pa, &pa).rotation < 1e-12);
        }

        #[test]
        fn accuracy_is_monotone(errs in proptest::collection::vec(0.0f64..15.0, 1..50)) {
            let m: Vec<_> = errs.iter().map(|&e| ([0.0, 0.0], [e, 0.0])).collect();
            let acc = pair_accuracy(&Matrix3::identity(), &m, &default_thresholds()).unwrap();
            prop_assert!(acc.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
