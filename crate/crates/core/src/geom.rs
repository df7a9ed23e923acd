//! Poses, pinhole intrinsics and frame conventions shared by every module.
//!
//! Conventions used throughout the crate:
//!
//! * World frame: x east, y north, z up. Yaw is counterclockwise-positive with
//!   0 pointing along +x (east).
//! * Body / grid frame: x forward, y left, z up, origin at the robot base.
//! * NED-style body frame (used for camera extrinsics in `calib`): x north
//!   (forward), y east (right), z down, heading-aligned with the body.
//! * Camera optical frame: x right, y down, z along the optical axis.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use std::f64::consts::{PI, TAU};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("invalid depth {0} (must be finite and positive)")]
    InvalidDepth(f64),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("pixel ({0}, {1}) outside image bounds")]
    PixelOutOfBounds(f64, f64),
    #[error("empty pose list")]
    EmptyInput,
    #[error("reference index {index} out of range for {len} poses")]
    BadReference { index: usize, len: usize },
}

/// Wrap an angle into (−π, π].
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a % TAU;
    if r <= -PI {
        r += TAU;
    } else if r > PI {
        r -= TAU;
    }
    r
}

/// Signed shortest angular difference `a − b`, wrapped into (−π, π].
pub fn angle_diff(a: f64, b: f64) -> f64 {
    normalize_angle(a - b)
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeomError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(GeomError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeomError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics for an image resized by `scale` (all four parameters scale linearly).
    pub fn scaled(&self, scale: f64) -> Self {
        Self {
            fx: self.fx * scale,
            fy: self.fy * scale,
            cx: self.cx * scale,
            cy: self.cy * scale,
            width: ((self.width as f64) * scale).round() as u32,
            height: ((self.height as f64) * scale).round() as u32,
        }
    }

    /// Intrinsics of a grid formed by sampling pixel `(stride*i + stride/2)` of
    /// every `stride × stride` block.
    pub fn strided(&self, stride: u32) -> Self {
        let s = stride as f64;
        let off = (stride / 2) as f64;
        Self {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: (self.cx - off) / s,
            cy: (self.cy - off) / s,
            width: self.width / stride,
            height: self.height / stride,
        }
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= -0.5 && v >= -0.5 && u < self.width as f64 - 0.5 && v < self.height as f64 - 0.5
    }

    /// Forward pinhole projection of a camera-frame point. `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Back-project pixel `(u, v)` at metric depth `depth` (distance along the optical axis).
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>, GeomError> {
        if !(depth.is_finite() && depth > 0.0) {
            return Err(GeomError::InvalidDepth(depth));
        }
        if !self.contains(u, v) {
            return Err(GeomError::PixelOutOfBounds(u, v));
        }
        Ok(Vector3::new(
            depth * (u - self.cx) / self.fx,
            depth * (v - self.cy) / self.fy,
            depth,
        ))
    }
}

/// Rigid 3D transform stored as a rotation matrix and a translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Z-Y-X Euler angles: `R = Rz(yaw) · Ry(pitch) · Rx(roll)`.
    pub fn from_ypr(translation: Vector3<f64>, yaw: f64, pitch: f64, roll: f64) -> Self {
        let r = Rotation3::from_euler_angles(roll, pitch, yaw);
        Self { rotation: *r.matrix(), translation }
    }

    /// Accepts a quaternion; rotation is stored as a matrix internally.
    pub fn from_quaternion(translation: Vector3<f64>, q: UnitQuaternion<f64>) -> Self {
        Self { rotation: *q.to_rotation_matrix().matrix(), translation }
    }

    /// `(yaw, pitch, roll)` of the rotation, inverse of [`PoseSE3::from_ypr`].
    pub fn ypr(&self) -> (f64, f64, f64) {
        let (roll, pitch, yaw) = Rotation3::from_matrix_unchecked(self.rotation).euler_angles();
        (yaw, pitch, roll)
    }

    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Planar projection: translation x, y and heading.
    pub fn to_se2(&self) -> PoseSE2 {
        PoseSE2::new(self.translation.x, self.translation.y, self.yaw())
    }

    /// Lift a planar pose to SE(3) at height `z`.
    pub fn from_se2(p: &PoseSE2, z: f64) -> PoseSE3 {
        Self::from_ypr(Vector3::new(p.x, p.y, z), p.yaw, 0.0, 0.0)
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let rtr = self.rotation.transpose() * self.rotation;
        (rtr - Matrix3::identity()).abs().max() < tol && (self.rotation.determinant() - 1.0).abs() < tol
    }
}

/// Planar pose; yaw is kept in (−π, π].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PoseSE2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl PoseSE2 {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self { x, y, yaw: normalize_angle(yaw) }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn translation(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn compose(&self, other: &PoseSE2) -> PoseSE2 {
        let (s, c) = self.yaw.sin_cos();
        PoseSE2::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
        )
    }

    pub fn inverse(&self) -> PoseSE2 {
        let (s, c) = self.yaw.sin_cos();
        PoseSE2::new(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.yaw)
    }

    /// `self⁻¹ ∘ other`: `other` expressed in the frame of `self`.
    pub fn between(&self, other: &PoseSE2) -> PoseSE2 {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: Vector2<f64>) -> Vector2<f64> {
        let (s, c) = self.yaw.sin_cos();
        Vector2::new(self.x + c * p.x - s * p.y, self.y + s * p.x + c * p.y)
    }

    /// 3×3 homogeneous matrix.
    pub fn to_matrix(&self) -> Matrix3<f64> {
        let (s, c) = self.yaw.sin_cos();
        Matrix3::new(c, -s, self.x, s, c, self.y, 0.0, 0.0, 1.0)
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> PoseSE2 {
        PoseSE2::new(m[(0, 2)], m[(1, 2)], m[(1, 0)].atan2(m[(0, 0)]))
    }

    /// Local coordinates `(x, y, yaw)` used as the error vector in the pose graph.
    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.yaw)
    }
}

/// Express every pose relative to `poses[ref_index]`: `out[k] = ref⁻¹ ∘ poses[k]`.
pub fn relative_chain(poses: &[PoseSE3], ref_index: usize) -> Result<Vec<PoseSE3>, GeomError> {
    if poses.is_empty() {
        return Err(GeomError::EmptyInput);
    }
    if ref_index >= poses.len() {
        return Err(GeomError::BadReference { index: ref_index, len: poses.len() });
    }
    let ref_inv = poses[ref_index].inverse();
    Ok(poses
        .iter()
        .enumerate()
        .map(|(k, p)| if k == ref_index { PoseSE3::identity() } else { ref_inv.compose(p) })
        .collect())
}

/// Fixed rotation from the NED-style body frame (x fwd, y right, z down) to the
/// grid frame (x fwd, y left, z up).
pub fn grid_from_ned() -> PoseSE3 {
    PoseSE3::new(Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)), Vector3::zeros())
}

/// Camera extrinsics in the NED-style body frame for a forward camera at
/// `height` meters above the base, pitched down by `pitch_down` radians.
pub fn forward_camera_ned(height: f64, pitch_down: f64) -> PoseSE3 {
    // optical x → right, optical y → down, optical z → forward
    let base = Matrix3::new(0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
    let pitch = *Rotation3::from_axis_angle(&Vector3::y_axis(), -pitch_down).matrix();
    PoseSE3::new(pitch * base, Vector3::new(0.0, 0.0, -height))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(60.0, 62.0, 47.5, 35.5, 96, 72).unwrap()
    }

    fn rand_se3(rng: &mut ChaCha8Rng) -> PoseSE3 {
        PoseSE3::from_ypr(
            Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)),
            rng.random_range(-3.0..3.0),
            rng.random_range(-1.4..1.4),
            rng.random_range(-3.0..3.0),
        )
    }

    fn rand_se2(rng: &mut ChaCha8Rng) -> PoseSE2 {
        PoseSE2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-PI..PI))
    }

    #[test]
    fn unproject_principal_point() {
        let k = k();
        let p = k.unproject(k.cx, k.cy, 5.0).unwrap();
        assert_eq!(p, Vector3::new(0.0, 0.0, 5.0));
        // (cx + fx, cy) lies outside the 96 px image, so use a wider one
        assert!(k.unproject(k.cx + k.fx, k.cy, 2.0).is_err());
        let wide = Intrinsics::new(10.0, 10.0, 20.0, 20.0, 64, 64).unwrap();
        assert_eq!(wide.unproject(30.0, 20.0, 2.0).unwrap(), Vector3::new(2.0, 0.0, 2.0));
    }

    #[test]
    fn unproject_rejects_bad_depth() {
        let k = k();
        assert_eq!(k.unproject(1.0, 1.0, 0.0), Err(GeomError::InvalidDepth(0.0)));
        assert!(k.unproject(1.0, 1.0, -2.0).is_err());
        assert!(k.unproject(1.0, 1.0, f64::NAN).is_err());
        assert!(k.unproject(1.0, 1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(Intrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(Intrinsics::new(1.0, 1.0, 0.0, 0.0, 4, 4).is_ok());
    }

    #[test]
    fn unproject_project_round_trip() {
        let k = k();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let u = rng.random_range(0.0..95.0);
            let v = rng.random_range(0.0..71.0);
            let d = rng.random_range(0.1..60.0);
            let p = k.unproject(u, v, d).unwrap();
            let (pu, pv) = k.project(&p).unwrap();
            assert!((pu - u).abs() < 1e-9 && (pv - v).abs() < 1e-9);
        }
    }

    #[test]
    fn scaled_halves_all_parameters() {
        let k = k().scaled(0.5);
        assert_eq!((k.fx, k.fy, k.cx, k.cy, k.width, k.height), (30.0, 31.0, 23.75, 17.75, 48, 36));
    }

    #[test]
    fn compose_identity_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let t = rand_se3(&mut rng);
            assert_eq!(t.compose(&PoseSE3::identity()), t);
            let e = t.compose(&t.inverse());
            assert!((e.rotation - Matrix3::identity()).abs().max() < 1e-9);
            assert!(e.translation.norm() < 1e-9);
            let p = rand_se2(&mut rng);
            let q = p.compose(&PoseSE2::identity());
            assert!((q.x - p.x).abs() < 1e-12 && (q.y - p.y).abs() < 1e-12 && angle_diff(q.yaw, p.yaw).abs() < 1e-12);
            let e = p.compose(&p.inverse());
            assert!(e.x.abs() < 1e-9 && e.y.abs() < 1e-9 && e.yaw.abs() < 1e-9);
        }
    }

    #[test]
    fn se2_chain_matches_homogeneous_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let poses: Vec<PoseSE2> = (0..4).map(|_| rand_se2(&mut rng)).collect();
            let chained = poses[1..].iter().fold(poses[0], |acc, p| acc.compose(p));
            let m = poses.iter().fold(Matrix3::identity(), |acc, p| {
                let (s, c) = p.yaw.sin_cos();
                acc * Matrix3::new(c, -s, p.x, s, c, p.y, 0.0, 0.0, 1.0)
            });
            assert!((chained.to_matrix() - m).abs().max() < 1e-9);
        }
    }

    #[test]
    fn relative_chain_examples() {
        let ids = vec![PoseSE3::identity(); 3];
        assert_eq!(relative_chain(&ids, 2).unwrap(), ids);
        let a = PoseSE3::identity();
        let b = PoseSE3::new(Matrix3::identity(), Vector3::new(3.0, 0.0, 0.0));
        let out = relative_chain(&[a, b], 1).unwrap();
        assert_eq!(out[1], PoseSE3::identity());
        assert!((out[0].translation - Vector3::new(-3.0, 0.0, 0.0)).norm() < 1e-12);
        assert_eq!(relative_chain(&[], 0), Err(GeomError::EmptyInput));
        assert!(relative_chain(&[a], 3).is_err());
    }

    #[test]
    fn relative_chain_closes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let poses: Vec<PoseSE3> = (0..5).map(|_| rand_se3(&mut rng)).collect();
        let r = 4;
        let out = relative_chain(&poses, r).unwrap();
        for (k, p) in poses.iter().enumerate() {
            // ref ∘ out[k] must reproduce the original pose
            let back = poses[r].compose(&out[k]);
            assert!((back.rotation - p.rotation).abs().max() < 1e-9);
            assert!((back.translation - p.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn ypr_round_trip_and_validity() {
        let t = PoseSE3::from_ypr(Vector3::new(1.0, 2.0, 3.0), 0.3, -0.2, 0.1);
        let (y, p, r) = t.ypr();
        assert!((y - 0.3).abs() < 1e-12 && (p + 0.2).abs() < 1e-12 && (r - 0.1).abs() < 1e-12);
        assert!(t.is_valid(1e-9));
        assert!((t.yaw() - 0.3).abs() < 1e-12);
        let q = UnitQuaternion::from_euler_angles(0.1, -0.2, 0.3);
        let tq = PoseSE3::from_quaternion(Vector3::new(1.0, 2.0, 3.0), q);
        assert!((tq.rotation - t.rotation).abs().max() < 1e-12);
    }

    #[test]
    fn angle_wraparound() {
        let d = angle_diff(179f64.to_radians(), (-179f64).to_radians());
        assert!((d.abs() - 2f64.to_radians()).abs() < 1e-12);
        assert_eq!(normalize_angle(PI), PI);
        assert!((normalize_angle(-PI) - PI).abs() < 1e-15);
    }

    #[test]
    fn forward_camera_axes() {
        let cam = grid_from_ned().compose(&forward_camera_ned(1.5, 0.0));
        // optical axis points forward in the grid frame, camera sits 1.5 m up
        let fwd = cam.rotation * Vector3::z();
        assert!((fwd - Vector3::x()).norm() < 1e-12);
        let right = cam.rotation * Vector3::x();
        assert!((right + Vector3::y()).norm() < 1e-12);
        assert!((cam.translation - Vector3::new(0.0, 0.0, 1.5)).norm() < 1e-12);
        let down = grid_from_ned().compose(&forward_camera_ned(1.5, 0.3)).rotation * Vector3::z();
        assert!(down.z < 0.0 && down.x > 0.0);
    }

    proptest! {
        #[test]
        fn yaw_normalization_is_periodic(theta in -10.0f64..10.0, n in -2i32..=2) {
            let a = normalize_angle(theta);
            let b = normalize_angle(theta + TAU * n as f64);
            prop_assert!(angle_diff(a, b).abs() < 1e-9);
            prop_assert!(a > -PI && a <= PI);
        }

        #[test]
        fn compose_is_associative(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b, c) = (rand_se3(&mut rng), rand_se3(&mut rng), rand_se3(&mut rng));
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!((l.rotation - r.rotation).abs().max() < 1e-9);
            prop_assert!((l.translation - r.translation).norm() < 1e-9);
            let (a, b, c) = (rand_se2(&mut rng), rand_se2(&mut rng), rand_se2(&mut rng));
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!((l.x - r.x).abs() < 1e-9 && (l.y - r.y).abs() < 1e-9 && angle_diff(l.yaw, r.yaw).abs() < 1e-9);
        }
    }
}
