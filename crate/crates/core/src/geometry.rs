//! Points, clouds, rigid transforms, and the axis conventions shared by every
//! pipeline stage.
//!
//! All geometry is metric (meters) and double precision. Angles are radians;
//! degrees appear only at the CLI and report boundaries.

use nalgebra::{Matrix3, Matrix4, Vector3};

/// A 3D point in meters.
pub type Point3 = nalgebra::Point3<f64>;

/// Coordinate frame a cloud is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    /// Sensor frame of the sweep identified by the cloud's `sweep_index`.
    Lidar,
    /// The fixed world frame anchored at the first sweep's pose.
    World,
}

/// An ordered point cloud tagged with its frame and source sweep.
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub frame: Frame,
    pub sweep_index: usize,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, frame: Frame, sweep_index: usize) -> Self {
        Self { points, frame, sweep_index }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One signed coordinate axis: `axis` indexes x/y/z, `sign` is +1 or -1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisDir {
    pub axis: usize,
    pub sign: f64,
}

impl AxisDir {
    pub const fn new(axis: usize, sign: f64) -> Self {
        Self { axis, sign }
    }

    /// The signed component of `p` along this axis.
    pub fn component(&self, p: &Point3) -> f64 {
        self.sign * p[self.axis]
    }

    pub fn unit(&self) -> Vector3<f64> {
        let mut v = Vector3::zeros();
        v[self.axis] = self.sign;
        v
    }
}

/// Maps the vehicle's forward/left/up directions onto coordinate slots.
///
/// Must be right-handed: `forward x left = up`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameConvention {
    pub forward: AxisDir,
    pub left: AxisDir,
    pub up: AxisDir,
}

impl FrameConvention {
    /// x forward, y left, z up. KITTI Velodyne scans use this layout.
    pub const FORWARD_LEFT_UP: Self = Self {
        forward: AxisDir::new(0, 1.0),
        left: AxisDir::new(1, 1.0),
        up: AxisDir::new(2, 1.0),
    };

    /// x left, y up, z forward.
    pub const LEFT_UP_FORWARD: Self = Self {
        forward: AxisDir::new(2, 1.0),
        left: AxisDir::new(0, 1.0),
        up: AxisDir::new(1, 1.0),
    };

    pub fn forward_of(&self, p: &Point3) -> f64 {
        self.forward.component(p)
    }

    pub fn left_of(&self, p: &Point3) -> f64 {
        self.left.component(p)
    }

    pub fn up_of(&self, p: &Point3) -> f64 {
        self.up.component(p)
    }

    pub fn forward_vector(&self) -> Vector3<f64> {
        self.forward.unit()
    }

    pub fn left_vector(&self) -> Vector3<f64> {
        self.left.unit()
    }

    pub fn up_vector(&self) -> Vector3<f64> {
        self.up.unit()
    }

    /// True when the three axes are distinct and form a right-handed basis.
    pub fn is_right_handed(&self) -> bool {
        let axes = [self.forward.axis, self.left.axis, self.up.axis];
        if axes[0] == axes[1] || axes[0] == axes[2] || axes[1] == axes[2] {
            return false;
        }
        let cross = self.forward_vector().cross(&self.left_vector());
        (cross - self.up_vector()).norm() < 1e-12
    }

    /// Rotation taking coordinates in `self` to coordinates in `to`.
    pub fn conversion_to(&self, to: &FrameConvention) -> Matrix3<f64> {
        let mut m = Matrix3::zeros();
        for (dst, src) in [
            (&to.forward, &self.forward),
            (&to.left, &self.left),
            (&to.up, &self.up),
        ] {
            m[(dst.axis, src.axis)] = dst.sign * src.sign;
        }
        m
    }
}

/// Re-expresses a cloud's coordinates in another axis convention.
///
/// The points themselves do not move; only the labeling of axes changes,
/// so converting there and back is exact.
pub fn convert_frame(cloud: &PointCloud, from: &FrameConvention, to: &FrameConvention) -> PointCloud {
    let m = from.conversion_to(to);
    let points = cloud.points.iter().map(|p| Point3::from(m * p.coords)).collect();
    PointCloud::new(points, cloud.frame, cloud.sweep_index)
}

/// A proper rigid transform: rotation (det +1, orthonormal) plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Rotation by `angle` radians about `axis` (right-handed), no translation.
    pub fn rotation_about(axis: &Vector3<f64>, angle: f64) -> Self {
        let axis = nalgebra::Unit::new_normalize(*axis);
        let rot = nalgebra::Rotation3::from_axis_angle(&axis, angle);
        Self { rotation: rot.into_inner(), translation: Vector3::zeros() }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation }
    }

    /// `self * other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rot_inv = self.rotation.transpose();
        Self { rotation: rot_inv, translation: -(rot_inv * self.translation) }
    }

    pub fn apply_point(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Magnitude of the rotation in radians.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// Projects the rotation back onto the nearest proper rotation matrix.
    ///
    /// Long chains of compositions accumulate round-off; the pipeline calls
    /// this every `ORTHONORMALIZE_EVERY` poses.
    pub fn orthonormalize(&mut self) {
        self.rotation = nearest_rotation(&self.rotation);
    }

    /// Max deviation of `R^T R` from identity plus `|det - 1|`.
    pub fn rotation_defect(&self) -> f64 {
        let gram = self.rotation.transpose() * self.rotation;
        let mut defect: f64 = (self.rotation.determinant() - 1.0).abs();
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                defect = defect.max((gram[(i, j)] - target).abs());
            }
        }
        defect
    }
}

/// Pose chains re-orthonormalize their rotation after this many compositions.
pub const ORTHONORMALIZE_EVERY: usize = 100;

/// Rotation angle in radians of an arbitrary rotation matrix.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let c = (r.trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos()
}

/// Nearest proper rotation in the Frobenius sense, via polar decomposition.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        let col = u.column_mut(2).map(|x| -x);
        u.set_column(2, &col);
        r = u * v_t;
    }
    r
}

/// Applies a rigid transform to every point; the caller declares the frame of
/// the result.
pub fn apply(t: &RigidTransform, cloud: &PointCloud, frame: Frame) -> PointCloud {
    let points = cloud.points.iter().map(|p| t.apply_point(p)).collect();
    PointCloud::new(points, frame, cloud.sweep_index)
}

/// Unit direction minimizing the quadratic form `v^T m v` of a symmetric
/// positive-semidefinite matrix, plus the form's value along each of the
/// three basis directions found, sorted ascending.
///
/// Eigen decompositions of matrices with (near-)repeated eigenvalues can
/// return eigenvalue labels that do not match their eigenvector columns, so
/// each column is scored by its Rayleigh quotient instead of trusting the
/// reported eigenvalues.
pub fn smallest_quadratic_direction(m: &Matrix3<f64>) -> (Vector3<f64>, [f64; 3]) {
    let eigen = nalgebra::SymmetricEigen::new(*m);
    let mut scored: Vec<(f64, Vector3<f64>)> = (0..3)
        .map(|i| {
            let v: Vector3<f64> = eigen.eigenvectors.column(i).into_owned();
            ((m * v).dot(&v), v)
        })
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut direction = scored[0].1;
    let norm = direction.norm();
    if norm > 0.0 {
        direction /= norm;
    }
    (direction, [scored[0].0, scored[1].0, scored[2].0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_rotation(rng: &mut StdRng) -> Matrix3<f64> {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let angle = rng.gen_range(-3.0..3.0);
        RigidTransform::rotation_about(&axis, angle).rotation
    }

    fn random_transform(rng: &mut StdRng) -> RigidTransform {
        RigidTransform {
            rotation: random_rotation(rng),
            translation: Vector3::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            ),
        }
    }

    #[test]
    fn identity_leaves_points_fixed() {
        let t = RigidTransform::identity();
        let p = Point3::new(1.0, -2.0, 3.5);
        assert_eq!(t.apply_point(&p), p);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..50 {
            let t = random_transform(&mut rng);
            let id = t.compose(&t.inverse());
            assert!(id.rotation_angle() < 1e-7, "rotation angle {}", id.rotation_angle());
            assert!(id.translation.norm() < 1e-9, "residual translation {}", id.translation.norm());
        }
    }

    #[test]
    fn rotations_about_same_axis_add() {
        let up = Vector3::z();
        let a = RigidTransform::rotation_about(&up, 30f64.to_radians());
        let b = RigidTransform::rotation_about(&up, 15f64.to_radians());
        let expect = RigidTransform::rotation_about(&up, 45f64.to_radians());
        let got = a.compose(&b);
        assert_relative_eq!(got.rotation, expect.rotation, epsilon = 1e-12);
    }

    #[test]
    fn quarter_turn_about_up_moves_forward_to_left() {
        let t = RigidTransform::rotation_about(&Vector3::z(), 90f64.to_radians());
        let p = t.apply_point(&Point3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(p, Point3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn compose_is_associative() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..50 {
            let (a, b, c) = (
                random_transform(&mut rng),
                random_transform(&mut rng),
                random_transform(&mut rng),
            );
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            assert_relative_eq!(left.rotation, right.rotation, epsilon = 1e-9);
            assert_relative_eq!(left.translation, right.translation, epsilon = 1e-9);
        }
    }

    #[test]
    fn transforms_preserve_pairwise_distance() {
        let mut rng = StdRng::seed_from_u64(13);
        for _ in 0..50 {
            let t = random_transform(&mut rng);
            let p = Point3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), 0.3);
            let q = Point3::new(0.1, rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
            let before = (p - q).norm();
            let after = (t.apply_point(&p) - t.apply_point(&q)).norm();
            assert_relative_eq!(before, after, epsilon = 1e-9);
        }
    }

    #[test]
    fn long_composition_chain_stays_orthonormal_with_periodic_cleanup() {
        let mut rng = StdRng::seed_from_u64(17);
        let mut pose = RigidTransform::identity();
        for i in 1..=10_000 {
            pose = pose.compose(&random_transform(&mut rng));
            if i % ORTHONORMALIZE_EVERY == 0 {
                pose.orthonormalize();
            }
        }
        assert!(
            pose.rotation_defect() < 1e-9,
            "rotation defect after 10k compositions: {}",
            pose.rotation_defect()
        );
    }

    #[test]
    fn orthonormalize_recovers_a_drifted_rotation() {
        let mut r = RigidTransform::rotation_about(&Vector3::new(1.0, 2.0, 0.5), 0.8);
        r.rotation[(0, 1)] += 1e-4;
        r.rotation[(2, 0)] -= 2e-4;
        r.orthonormalize();
        assert!(r.rotation_defect() < 1e-12, "defect {}", r.rotation_defect());
    }

    #[test]
    fn kitti_coords_relabel_into_left_up_forward() {
        let cloud = PointCloud::new(
            vec![Point3::new(1.0, 2.0, 3.0)],
            Frame::Lidar,
            0,
        );
        let converted = convert_frame(
            &cloud,
            &FrameConvention::FORWARD_LEFT_UP,
            &FrameConvention::LEFT_UP_FORWARD,
        );
        assert_eq!(converted.points[0], Point3::new(2.0, 3.0, 1.0));
    }

    #[test]
    fn frame_conversion_round_trips_exactly() {
        let mut rng = StdRng::seed_from_u64(23);
        let from = FrameConvention::FORWARD_LEFT_UP;
        let to = FrameConvention::LEFT_UP_FORWARD;
        for _ in 0..100 {
            let p = Point3::new(
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-50.0..50.0),
            );
            let cloud = PointCloud::new(vec![p], Frame::Lidar, 3);
            let back = convert_frame(&convert_frame(&cloud, &from, &to), &to, &from);
            assert_eq!(back.points[0], p);
            assert_eq!(back.sweep_index, 3);
        }
    }

    #[test]
    fn both_builtin_conventions_are_right_handed() {
        assert!(FrameConvention::FORWARD_LEFT_UP.is_right_handed());
        assert!(FrameConvention::LEFT_UP_FORWARD.is_right_handed());
    }

    #[test]
    fn conversion_matrix_is_a_proper_rotation() {
        let m = FrameConvention::FORWARD_LEFT_UP
            .conversion_to(&FrameConvention::LEFT_UP_FORWARD);
        assert_relative_eq!(m.determinant(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(m * m.transpose(), Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn smallest_direction_survives_repeated_eigenvalues() {
        // Scatter of a symmetric planar patch: equal spread in x and y and
        // a numerically tiny z column, the shape that scrambles eigenvalue
        // labels in off-the-shelf decompositions.
        let m = Matrix3::new(
            0.765, 0.0, 1.282e-30, //
            0.0, 0.765, -1.035e-30, //
            1.282e-30, -1.035e-30, 1.035e-30,
        );
        let (dir, values) = smallest_quadratic_direction(&m);
        assert!(dir.z.abs() > 0.999, "direction {dir:?} should be the z axis");
        assert!(values[0] < 1e-12 && values[1] > 0.7 && values[2] > 0.7);
        assert!(values[0] <= values[1] && values[1] <= values[2]);
    }

    #[test]
    fn smallest_direction_matches_a_plain_anisotropic_case() {
        let m = Matrix3::new(4.0, 0.0, 0.0, 0.0, 9.0, 0.0, 0.0, 0.0, 1.0);
        let (dir, values) = smallest_quadratic_direction(&m);
        assert!(dir.z.abs() > 0.999_999, "direction {dir:?}");
        assert_relative_eq!(values[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(values[1], 4.0, epsilon = 1e-12);
        assert_relative_eq!(values[2], 9.0, epsilon = 1e-12);
    }
}
