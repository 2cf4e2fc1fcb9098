//! Rigid-body transform algebra in float64.
//!
//! Conventions: `T_{j<-i}` maps points expressed in frame `i` into frame `j`.
//! [`RigidTransform::compose`] is matrix multiplication, so `a.compose(&b)`
//! applies `b` first. Image points live on the plane `z = 0` of image space
//! and reach tool space through the calibration transform.

use nalgebra::{Matrix3, Matrix4, Point3, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Orthonormality drift above which a composed rotation is projected back
/// onto SO(3).
pub const REORTHONORMALIZE_THRESHOLD: f64 = 1e-10;

/// Tolerance used when validating rotations read from files or built by hand.
pub const VALIDATION_TOLERANCE: f64 = 1e-6;

/// Minimum distance of the pitch angle from +-pi/2 for Euler extraction.
pub const GIMBAL_MARGIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not orthonormal (max |R^T R - I| = {0:e})")]
    NotOrthonormal(f64),
    #[error("rotation has determinant {0}, expected +1")]
    Reflection(f64),
    #[error("homogeneous matrix bottom row must be (0, 0, 0, 1)")]
    BadBottomRow,
    #[error("non-finite value in transform")]
    NonFinite,
    #[error("pitch {0} rad is within the gimbal-lock margin of +-pi/2")]
    GimbalLock(f64),
    #[error("image must be at least 2x2 pixels, got {width}x{height}")]
    InvalidDimensions { width: usize, height: usize },
    #[error("pixel spacing must be positive and finite, got {0}")]
    InvalidSpacing(f64),
    #[error("expected {expected} bytes, got {actual}")]
    ByteLength { expected: usize, actual: usize },
}

/// A proper rigid transform: orthonormal rotation (det +1) and translation in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[[f64; 4]; 4]", try_from = "[[f64; 4]; 4]")]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, validating the rotation.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        validate_rotation(&rotation, VALIDATION_TOLERANCE)?;
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Builds a transform from parts the caller already knows to be valid.
    pub(crate) fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation by `angle` radians about the unit `axis` (Rodrigues).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let axis = axis.normalize();
        let k = axis.cross_matrix();
        let rotation = Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos());
        Self {
            rotation,
            translation,
        }
    }

    pub fn rotation_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), angle, Vector3::zeros())
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let rotation = self.rotation * other.rotation;
        let translation = self.rotation * other.translation + self.translation;
        let mut out = RigidTransform {
            rotation,
            translation,
        };
        if orthonormality_error(&out.rotation) > REORTHONORMALIZE_THRESHOLD {
            out.reorthonormalize();
        }
        out
    }

    pub fn inverse(&self) -> RigidTransform {
        let rotation = self.rotation.transpose();
        let translation = -(rotation * self.translation);
        RigidTransform {
            rotation,
            translation,
        }
    }

    pub fn apply_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn apply(&self, points: &PointSet) -> PointSet {
        PointSet {
            points: points.points.iter().map(|p| self.apply_point(p)).collect(),
        }
    }

    /// Projects the rotation onto SO(3) (polar decomposition via SVD).
    pub fn reorthonormalize(&mut self) {
        let svd = self.rotation.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            r = u * v_t;
        }
        self.rotation = r;
    }

    /// max |R^T R - I| over all entries.
    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(&self.rotation)
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self, GeometryError> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if m[(3, 0)] != 0.0 || m[(3, 1)] != 0.0 || m[(3, 2)] != 0.0 || m[(3, 3)] != 1.0 {
            return Err(GeometryError::BadBottomRow);
        }
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    /// 4x4 row-major nested arrays.
    pub fn to_rows(&self) -> [[f64; 4]; 4] {
        let m = self.to_matrix();
        std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
    }

    pub fn from_rows(rows: &[[f64; 4]; 4]) -> Result<Self, GeometryError> {
        Self::from_matrix(&Matrix4::from_fn(|r, c| rows[r][c]))
    }

    /// Raw encoding: 16 little-endian f64, row-major, bottom row included.
    pub fn to_le_bytes(&self) -> [u8; 128] {
        let mut out = [0u8; 128];
        for (k, v) in self.to_rows().iter().flatten().enumerate() {
            out[k * 8..k * 8 + 8].copy_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self, GeometryError> {
        if bytes.len() != 128 {
            return Err(GeometryError::ByteLength {
                expected: 128,
                actual: bytes.len(),
            });
        }
        let mut rows = [[0.0; 4]; 4];
        for (k, chunk) in bytes.chunks_exact(8).enumerate() {
            rows[k / 4][k % 4] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Self::from_rows(&rows)
    }

    /// Largest absolute elementwise difference of the homogeneous matrices.
    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        (self.to_matrix() - other.to_matrix()).amax()
    }
}

impl From<RigidTransform> for [[f64; 4]; 4] {
    fn from(t: RigidTransform) -> Self {
        t.to_rows()
    }
}

impl TryFrom<[[f64; 4]; 4]> for RigidTransform {
    type Error = GeometryError;

    fn try_from(rows: [[f64; 4]; 4]) -> Result<Self, Self::Error> {
        Self::from_rows(&rows)
    }
}

fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).amax()
}

fn validate_rotation(r: &Matrix3<f64>, tol: f64) -> Result<(), GeometryError> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let err = orthonormality_error(r);
    if err > tol {
        return Err(GeometryError::NotOrthonormal(err));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > tol {
        return Err(GeometryError::Reflection(det));
    }
    Ok(())
}

/// `T_{j<-i} = (T_{world<-j})^-1 * T_{world<-i}`.
pub fn ground_truth_relative(
    world_from_i: &RigidTransform,
    world_from_j: &RigidTransform,
) -> RigidTransform {
    world_from_j.inverse().compose(world_from_i)
}

/// Six-parameter pose: Euler angles `[x, y, z]` in radians with
/// `R = Rz(z) * Ry(y) * Rx(x)` (intrinsic Z, then Y, then X) and a
/// translation in mm.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose6DoF {
    pub euler: [f64; 3],
    pub translation: [f64; 3],
}

/// Rotation of a pose together with its partial derivatives with respect to
/// the three Euler angles. Used by the analytic loss gradients.
#[derive(Debug, Clone, Copy)]
pub struct RotationJet {
    pub rotation: Matrix3<f64>,
    pub partials: [Matrix3<f64>; 3],
}

fn rot_x(a: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let (s, c) = a.sin_cos();
    (
        Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
        Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s),
    )
}

fn rot_y(a: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let (s, c) = a.sin_cos();
    (
        Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
        Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s),
    )
}

fn rot_z(a: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let (s, c) = a.sin_cos();
    (
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
        Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0),
    )
}

impl Pose6DoF {
    pub fn new(euler: [f64; 3], translation: [f64; 3]) -> Self {
        Self { euler, translation }
    }

    /// Reads a pose from a 6-slice `[ex, ey, ez, tx, ty, tz]`.
    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            euler: [v[0], v[1], v[2]],
            translation: [v[3], v[4], v[5]],
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        let [a, b, c] = self.euler;
        let [x, y, z] = self.translation;
        [a, b, c, x, y, z]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let (rx, _) = rot_x(self.euler[0]);
        let (ry, _) = rot_y(self.euler[1]);
        let (rz, _) = rot_z(self.euler[2]);
        rz * ry * rx
    }

    pub fn rotation_jet(&self) -> RotationJet {
        let (rx, drx) = rot_x(self.euler[0]);
        let (ry, dry) = rot_y(self.euler[1]);
        let (rz, drz) = rot_z(self.euler[2]);
        RotationJet {
            rotation: rz * ry * rx,
            partials: [rz * ry * drx, rz * dry * rx, drz * ry * rx],
        }
    }

    pub fn to_transform(&self) -> RigidTransform {
        RigidTransform::from_parts(self.rotation_matrix(), Vector3::from(self.translation))
    }

    /// Inverse of [`Pose6DoF::to_transform`]; fails near gimbal lock.
    pub fn from_transform(t: &RigidTransform) -> Result<Self, GeometryError> {
        let r = t.rotation();
        let sin_pitch = (-r[(2, 0)]).clamp(-1.0, 1.0);
        let pitch = sin_pitch.asin();
        if (std::f64::consts::FRAC_PI_2 - pitch.abs()) < GIMBAL_MARGIN {
            return Err(GeometryError::GimbalLock(pitch));
        }
        let roll = r[(2, 1)].atan2(r[(2, 2)]);
        let yaw = r[(1, 0)].atan2(r[(0, 0)]);
        let tr = t.translation();
        Ok(Self {
            euler: [roll, pitch, yaw],
            translation: [tr.x, tr.y, tr.z],
        })
    }
}

/// A set of points in homogeneous coordinates (`w = 1` implicitly).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointSet {
    pub points: Vec<Point3<f64>>,
}

impl PointSet {
    pub fn new(points: Vec<Point3<f64>>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn homogeneous(&self) -> Vec<Vector4<f64>> {
        self.points.iter().map(|p| p.to_homogeneous()).collect()
    }
}

/// The four image-space corners of a `width x height` frame, in the order
/// (0,0), (W-1,0), (0,H-1), (W-1,H-1), scaled by `spacing` mm/px.
pub fn corner_points(width: usize, height: usize, spacing: f64) -> Result<PointSet, GeometryError> {
    if width < 2 || height < 2 {
        return Err(GeometryError::InvalidDimensions { width, height });
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(GeometryError::InvalidSpacing(spacing));
    }
    let x = (width - 1) as f64 * spacing;
    let y = (height - 1) as f64 * spacing;
    Ok(PointSet::new(vec![
        Point3::new(0.0, 0.0, 0.0),
        Point3::new(x, 0.0, 0.0),
        Point3::new(0.0, y, 0.0),
        Point3::new(x, y, 0.0),
    ]))
}


#[cfg(test)]
mod tests {
    use super::testutil::random_transform;
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn homogeneous_product(a: &RigidTransform, b: &RigidTransform) -> Matrix4<f64> {
        // Independent 4x4 loop multiply.
        let (ma, mb) = (a.to_rows(), b.to_rows());
        let mut out = Matrix4::zeros();
        for r in 0..4 {
            for c in 0..4 {
                out[(r, c)] = (0..4).map(|k| ma[r][k] * mb[k][c]).sum();
            }
        }
        out
    }

    #[test]
    fn compose_with_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_transform(&mut rng);
        assert_eq!(RigidTransform::identity().compose(&t), t);
        assert!(t.compose(&t.inverse()).max_abs_diff(&RigidTransform::identity()) < 1e-9);
    }

    #[test]
    fn compose_rz30_rz60() {
        let a = RigidTransform::from_axis_angle(&Vector3::z(), PI / 6.0, Vector3::new(1.0, 0.0, 0.0));
        let b = RigidTransform::from_axis_angle(&Vector3::z(), PI / 3.0, Vector3::new(0.0, 1.0, 0.0));
        let c = a.compose(&b);
        let oracle = homogeneous_product(&a, &b);
        assert!((c.to_matrix() - oracle).amax() < 1e-12);
        let rz90 = RigidTransform::rotation_z(FRAC_PI_2);
        assert!((c.rotation() - rz90.rotation()).amax() < 1e-12);
        let expected_t = Vector3::new(1.0 - 0.5, (PI / 6.0).cos(), 0.0);
        assert!((c.translation() - expected_t).amax() < 1e-12);
    }

    #[test]
    fn inverse_cases() {
        assert_eq!(RigidTransform::identity().inverse(), RigidTransform::identity());
        let t = RigidTransform::from_translation(Vector3::new(1.0, -2.0, 3.0));
        assert_eq!(*t.inverse().translation(), Vector3::new(-1.0, 2.0, -3.0));
        assert_eq!(*t.inverse().rotation(), Matrix3::identity());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let t = random_transform(&mut rng);
            assert!(t.compose(&t.inverse()).max_abs_diff(&RigidTransform::identity()) < 1e-9);
            assert!(t.inverse().compose(&t).max_abs_diff(&RigidTransform::identity()) < 1e-9);
        }
    }

    #[test]
    fn ground_truth_relative_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_transform(&mut rng);
        assert!(ground_truth_relative(&w, &w).max_abs_diff(&RigidTransform::identity()) < 1e-12);

        let wi = RigidTransform::identity();
        let wj = RigidTransform::from_translation(Vector3::new(0.0, 0.0, 5.0));
        let rel = ground_truth_relative(&wi, &wj);
        assert_eq!(rel, RigidTransform::from_translation(Vector3::new(0.0, 0.0, -5.0)));

        let (a, b, q) = (
            random_transform(&mut rng),
            random_transform(&mut rng),
            random_transform(&mut rng),
        );
        let plain = ground_truth_relative(&a, &b);
        let moved = ground_truth_relative(&q.compose(&a), &q.compose(&b));
        assert!(plain.max_abs_diff(&moved) < 1e-9);
    }

    #[test]
    fn apply_cases() {
        let pts = corner_points(5, 4, 0.7).unwrap();
        assert_eq!(RigidTransform::identity().apply(&pts), pts);
        let t = RigidTransform::from_translation(Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(t.apply_point(&Point3::origin()), Point3::new(1.0, 2.0, 3.0));
        let r = RigidTransform::rotation_z(FRAC_PI_2).apply_point(&Point3::new(1.0, 0.0, 0.0));
        assert!((r - Point3::new(0.0, 1.0, 0.0)).amax() < 1e-12);
        for h in t.apply(&pts).homogeneous() {
            assert_eq!(h.w, 1.0);
        }
    }

    #[test]
    fn corner_point_layout() {
        let c = corner_points(2, 2, 1.0).unwrap();
        let expect = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)];
        for (p, (x, y)) in c.points.iter().zip(expect) {
            assert_eq!(*p, Point3::new(x, y, 0.0));
        }
        let c = corner_points(80, 64, 0.5).unwrap();
        assert_eq!(c.points[3], Point3::new(39.5, 31.5, 0.0));
        let s = 0.1;
        let c = corner_points(640, 480, s).unwrap();
        assert!((c.points[3].x - 639.0 * s).abs() < 1e-12);
        assert!((c.points[3].y - 479.0 * s).abs() < 1e-12);

        assert!(matches!(corner_points(1, 4, 1.0), Err(GeometryError::InvalidDimensions { .. })));
        assert!(matches!(corner_points(4, 4, 0.0), Err(GeometryError::InvalidSpacing(_))));
        assert!(matches!(corner_points(4, 4, -1.0), Err(GeometryError::InvalidSpacing(_))));
    }

    #[test]
    fn pose_conversions() {
        assert_eq!(Pose6DoF::default().to_transform(), RigidTransform::identity());
        let p = Pose6DoF::new([0.0, 0.0, FRAC_PI_2], [0.0; 3]);
        let rz = RigidTransform::rotation_z(FRAC_PI_2);
        assert!(p.to_transform().max_abs_diff(&rz) < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let p = Pose6DoF::new(
                [
                    rng.random_range(-PI..PI),
                    rng.random_range(-1.5..1.5),
                    rng.random_range(-PI..PI),
                ],
                [
                    rng.random_range(-50.0..50.0),
                    rng.random_range(-50.0..50.0),
                    rng.random_range(-50.0..50.0),
                ],
            );
            let t = p.to_transform();
            let back = Pose6DoF::from_transform(&t).unwrap().to_transform();
            assert!(back.max_abs_diff(&t) < 1e-9);
        }
        let lock = Pose6DoF::new([0.1, FRAC_PI_2, 0.2], [0.0; 3]).to_transform();
        assert!(matches!(Pose6DoF::from_transform(&lock), Err(GeometryError::GimbalLock(_))));
    }

    #[test]
    fn rotation_jet_matches_finite_differences() {
        let p = Pose6DoF::new([0.3, -0.4, 1.1], [0.0; 3]);
        let jet = p.rotation_jet();
        let h = 1e-6;
        for k in 0..3 {
            let mut a = p;
            let mut b = p;
            a.euler[k] += h;
            b.euler[k] -= h;
            let fd = (a.rotation_matrix() - b.rotation_matrix()) / (2.0 * h);
            assert!((fd - jet.partials[k]).amax() < 1e-8);
        }
    }

    #[test]
    fn long_chains_stay_orthonormal() {
        let step = RigidTransform::from_axis_angle(
            &Vector3::new(0.3, 1.0, -0.2),
            0.0137,
            Vector3::new(1.0, 0.1, 0.0),
        );
        let mut acc = RigidTransform::identity();
        for _ in 0..5000 {
            acc = acc.compose(&step);
            assert!(acc.orthonormality_error() < 1e-9);
            assert!((acc.rotation().determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn serialization_formats() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_transform(&mut rng);
        let json = serde_json::to_string(&t).unwrap();
        let back: RigidTransform = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
        assert_eq!(RigidTransform::from_le_bytes(&t.to_le_bytes()).unwrap(), t);
        let bytes = t.to_le_bytes();
        assert_eq!(f64::from_le_bytes(bytes[120..128].try_into().unwrap()), 1.0);

        let bad = "[[2,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]";
        assert!(serde_json::from_str::<RigidTransform>(bad).is_err());
        let bad = "[[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,1,1]]";
        assert!(serde_json::from_str::<RigidTransform>(bad).is_err());
        let mirror = "[[-1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]";
        assert!(serde_json::from_str::<RigidTransform>(mirror).is_err());
    }

    proptest! {
        #[test]
        fn associativity_and_isometry(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b, c) = (random_transform(&mut rng), random_transform(&mut rng), random_transform(&mut rng));
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            prop_assert!(left.max_abs_diff(&right) < 1e-9);

            let p = Point3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), 0.0);
            let q = Point3::new(rng.random_range(-50.0..50.0), 3.0, rng.random_range(-50.0..50.0));
            let d0 = (p - q).norm();
            let d1 = (a.apply_point(&p) - a.apply_point(&q)).norm();
            prop_assert!((d0 - d1).abs() < 1e-9);
        }

        #[test]
        fn relative_chain_consistency(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (wi, wj, wk) = (random_transform(&mut rng), random_transform(&mut rng), random_transform(&mut rng));
            let ji = ground_truth_relative(&wi, &wj);
            let kj = ground_truth_relative(&wj, &wk);
            let ki = ground_truth_relative(&wi, &wk);
            prop_assert!(kj.compose(&ji).max_abs_diff(&ki) < 1e-9);
        }
    }
}
