//! Rigid poses, pinhole intrinsics, projection, depth backprojection and
//! two-view triangulation.

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector2, Vector3, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Camera-from-world rigid transform: `x_cam = R * x_world + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Checked constructor: `R` must be a proper rotation.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(ortho < 1e-9) || rotation.determinant() <= 0.0 || !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("pose rotation is not a proper rotation matrix".into()));
        }
        Ok(Pose { rotation, translation })
    }

    /// Pose of a camera at `center` looking towards `target`, with image
    /// `y` pointing roughly along `-up`.
    pub fn look_at(center: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let z = (target - center).try_normalize(1e-12).ok_or_else(|| Error::InvalidInput("target equals center".into()))?;
        let x = z.cross(&up).try_normalize(1e-12).ok_or_else(|| Error::InvalidInput("up parallel to view direction".into()))?;
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Ok(Pose { rotation, translation: -(rotation * center) })
    }

    pub fn transform(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// World-from-camera transform.
    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Rotation as a unit quaternion `[w, x, y, z]`.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation));
        [q.w, q.i, q.j, q.k]
    }

    pub fn from_quaternion_wxyz(q: [f64; 4], translation: [f64; 3]) -> Result<Self> {
        let quat = nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
        if !(quat.norm() > 0.0) {
            return Err(Error::InvalidInput("zero quaternion".into()));
        }
        let r = UnitQuaternion::from_quaternion(quat).to_rotation_matrix().into_inner();
        Pose::new(r, Vector3::from(translation))
    }

    /// Camera-from-world pose from a 4x4 world-from-camera matrix (the
    /// convention of posed-image datasets).
    pub fn from_camera_to_world(m: &Matrix4<f64>) -> Result<Self> {
        let r = m.fixed_view::<3, 3>(0, 0).into_owned();
        let t = m.fixed_view::<3, 1>(0, 3).into_owned();
        // tolerate text-file rounding by snapping to the nearest rotation
        let svd = SVD::new(r, true, true);
        let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
        let mut snapped = u * vt;
        if snapped.determinant() < 0.0 {
            return Err(Error::InvalidInput("pose matrix has a reflection".into()));
        }
        if (snapped - r).abs().max() > 1e-3 {
            return Err(Error::InvalidInput("pose matrix rotation block is not orthonormal".into()));
        }
        snapped = orthonormalize(&snapped);
        Ok(Pose { rotation: snapped, translation: t }.inverse())
    }

    /// 4x4 world-from-camera matrix.
    pub fn camera_to_world(&self) -> Matrix4<f64> {
        let inv = self.inverse();
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&inv.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&inv.translation);
        m
    }
}

/// Nearest rotation matrix (polar factor).
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = SVD::new(*r, true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut out = u * vt;
    if out.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        out = u * vt;
    }
    out
}

/// Rotation angle of `r` in degrees, accurate near 0 and 180.
pub fn rotation_angle_deg(r: &Matrix3<f64>) -> f64 {
    let sin2 = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
    let cos2 = r.trace() - 1.0;
    sin2.atan2(cos2).to_degrees()
}

/// Pinhole intrinsics and image size in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Intrinsics { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidInput("focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cy >= 0.0 && self.cx <= self.width as f64 && self.cy <= self.height as f64) {
            return Err(Error::InvalidInput("principal point outside the image".into()));
        }
        Ok(())
    }

    /// Normalized image coordinates of a pixel.
    pub fn normalize(&self, pixel: [f64; 2]) -> Vector2<f64> {
        Vector2::new((pixel[0] - self.cx) / self.fx, (pixel[1] - self.cy) / self.fy)
    }

    pub fn contains(&self, pixel: [f64; 2]) -> bool {
        pixel[0] >= 0.0 && pixel[1] >= 0.0 && pixel[0] < self.width as f64 && pixel[1] < self.height as f64
    }

    pub fn pixel_of(&self, cam: &Vector3<f64>) -> [f64; 2] {
        [self.fx * cam.x / cam.z + self.cx, self.fy * cam.y / cam.z + self.cy]
    }
}

/// Pixel of a world point, or `None` when it is not in front of the camera.
pub fn project(pose: &Pose, k: &Intrinsics, world: &Vector3<f64>) -> Option<[f64; 2]> {
    let cam = pose.transform(world);
    (cam.z > 0.0).then(|| k.pixel_of(&cam))
}

/// World point seen at `pixel` with camera-frame depth `depth`.
pub fn backproject(pixel: [f64; 2], depth: f64, pose: &Pose, k: &Intrinsics) -> Result<Vector3<f64>> {
    if !(depth > 0.0 && depth.is_finite()) {
        return Err(Error::InvalidInput(format!("depth {depth} must be positive")));
    }
    let n = k.normalize(pixel);
    let cam = Vector3::new(n.x * depth, n.y * depth, depth);
    Ok(pose.rotation.transpose() * (cam - pose.translation))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangulation {
    pub point: Vector3<f64>,
    /// Reprojection error in pixels in each view.
    pub reprojection_error: [f64; 2],
}

/// Minimum angle between the two viewing rays.
pub const MIN_RAY_ANGLE_DEG: f64 = 0.1;

/// Linear (DLT) two-view triangulation in normalized coordinates.
pub fn triangulate(px1: [f64; 2], px2: [f64; 2], pose1: &Pose, pose2: &Pose, k: &Intrinsics) -> Result<Triangulation> {
    let baseline = (pose1.center() - pose2.center()).norm();
    if !(baseline > 1e-12) {
        return Err(Error::Degenerate("zero baseline".into()));
    }
    let (n1, n2) = (k.normalize(px1), k.normalize(px2));
    let ray = |p: &Pose, n: &Vector2<f64>| (p.rotation.transpose() * Vector3::new(n.x, n.y, 1.0)).normalize();
    let cos = ray(pose1, &n1).dot(&ray(pose2, &n2)).clamp(-1.0, 1.0);
    if cos.acos().to_degrees() < MIN_RAY_ANGLE_DEG {
        return Err(Error::Degenerate("viewing rays are nearly parallel".into()));
    }
    let mut a = Matrix4::zeros();
    for (row, (pose, n)) in [(pose1, n1), (pose2, n2)].into_iter().enumerate() {
        let r = &pose.rotation;
        let t = &pose.translation;
        for (j, coord) in [n.x, n.y].into_iter().enumerate() {
            for c in 0..3 {
                a[(2 * row + j, c)] = coord * r[(2, c)] - r[(j, c)];
            }
            a[(2 * row + j, 3)] = coord * t.z - t[j];
        }
    }
    let svd = SVD::new(a, false, true);
    let vt = svd.v_t.ok_or_else(|| Error::Degenerate("svd failed".into()))?;
    let (imin, _) = svd.singular_values.argmin();
    let h = vt.row(imin);
    if h[3].abs() < 1e-12 {
        return Err(Error::Degenerate("point at infinity".into()));
    }
    let point = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);
    let mut reprojection_error = [0.0; 2];
    for (i, (pose, px)) in [(pose1, px1), (pose2, px2)].into_iter().enumerate() {
        let cam = pose.transform(&point);
        if cam.z <= 0.0 {
            return Err(Error::Cheirality(i + 1));
        }
        let p = k.pixel_of(&cam);
        reprojection_error[i] = ((p[0] - px[0]).powi(2) + (p[1] - px[1]).powi(2)).sqrt();
    }
    Ok(Triangulation { point, reprojection_error })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k() -> Intrinsics {
        Intrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn pose_from(axis: [f64; 3], t: [f64; 3]) -> Pose {
        let r = Rotation3::from_scaled_axis(Vector3::from(axis)).into_inner();
        Pose::new(r, Vector3::from(t)).unwrap()
    }

    #[test]
    fn principal_point_backprojects_on_axis() {
        let p = backproject([320.0, 240.0], 2.5, &Pose::identity(), &k()).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 2.5));
        assert!(backproject([320.0, 240.0], 0.0, &Pose::identity(), &k()).is_err());
    }

    #[test]
    fn look_at_points_optical_axis_at_target() {
        let pose = Pose::look_at(Vector3::new(0.0, -1.0, -6.0), Vector3::zeros(), Vector3::new(0.0, -1.0, 0.0)).unwrap();
        let c = pose.transform(&Vector3::zeros());
        assert!(c.x.abs() < 1e-12 && c.y.abs() < 1e-12 && c.z > 0.0);
        assert!(Pose::new(pose.rotation, pose.translation).is_ok());
    }

    #[test]
    fn quaternion_and_matrix_roundtrip() {
        let p = pose_from([0.1, -0.4, 0.2], [1.0, 2.0, -3.0]);
        let q = p.quaternion_wxyz();
        let back = Pose::from_quaternion_wxyz(q, [1.0, 2.0, -3.0]).unwrap();
        assert!((back.rotation - p.rotation).abs().max() < 1e-12);
        let m = p.camera_to_world();
        let back = Pose::from_camera_to_world(&m).unwrap();
        assert!((back.rotation - p.rotation).abs().max() < 1e-12);
        assert!((back.translation - p.translation).abs().max() < 1e-12);
    }

    #[test]
    fn noiseless_triangulation() {
        let x = Vector3::new(0.3, -0.2, 5.0);
        let (p1, p2) = (Pose::identity(), pose_from([0.0, 0.05, 0.0], [-0.5, 0.0, 0.0]));
        let (u1, u2) = (project(&p1, &k(), &x).unwrap(), project(&p2, &k(), &x).unwrap());
        let t = triangulate(u1, u2, &p1, &p2, &k()).unwrap();
        assert!((t.point - x).norm() < 1e-6);
        assert!(t.reprojection_error.iter().all(|&e| e < 1e-6));
    }

    #[test]
    fn identical_poses_are_degenerate() {
        let p = pose_from([0.0, 0.1, 0.0], [0.0, 0.0, 1.0]);
        assert!(matches!(triangulate([100.0, 100.0], [100.0, 100.0], &p, &p, &k()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn point_behind_camera_is_flagged() {
        let x = Vector3::new(0.3, -0.2, 5.0);
        let p1 = Pose::identity();
        let p2 = pose_from([0.0, 0.0, 0.0], [-0.5, 0.0, 0.0]);
        // mirror both observations through the principal point: the rays now
        // meet behind the cameras
        let mirror = |u: [f64; 2]| [640.0 - u[0], 480.0 - u[1]];
        let (u1, u2) = (project(&p1, &k(), &x).unwrap(), project(&p2, &k(), &x).unwrap());
        assert!(matches!(triangulate(mirror(u1), mirror(u2), &p1, &p2, &k()), Err(Error::Cheirality(_))));
    }

    proptest! {
        #[test]
        fn projection_inverts_backprojection(
            ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0,
            tx in -2.0f64..2.0, ty in -2.0f64..2.0, tz in -2.0f64..2.0,
            u in 0.0f64..640.0, v in 0.0f64..480.0, depth in 0.1f64..50.0
        ) {
            let pose = pose_from([ax, ay, az], [tx, ty, tz]);
            let w = backproject([u, v], depth, &pose, &k()).unwrap();
            let px = project(&pose, &k(), &w).unwrap();
            prop_assert!((px[0] - u).abs() < 1e-9 && (px[1] - v).abs() < 1e-9);
        }
    }
}
