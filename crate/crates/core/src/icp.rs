//! Point-to-plane ICP refinement.
//!
//! The coarse planar estimate from phase correlation is refined to a full
//! 6-DOF transform by iteratively matching source points to target points
//! and minimizing the squared distances to the targets' local tangent
//! planes. Each Gauss-Newton step solves a 6x6 normal-equation system for a
//! twist increment that is composed onto the running transform.

use nalgebra::{Matrix6, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Point3, PointCloud, RigidTransform};
use crate::spatial::{voxel_downsample, KdTree};

/// Tuning knobs for normal estimation and the ICP loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpParams {
    pub max_iterations: usize,
    /// Pairs farther apart than this are not matched, meters.
    pub max_correspondence_distance: f64,
    /// Converged when the increment's translation drops below this, meters.
    pub translation_epsilon: f64,
    /// Converged when the increment's rotation drops below this, radians.
    pub rotation_epsilon: f64,
    /// Neighbourhood size for target normal estimation.
    pub normal_neighbors: usize,
    /// Source cloud is thinned to this voxel size before matching, meters.
    pub downsample_voxel: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            max_correspondence_distance: 1.0,
            translation_epsilon: 1e-4,
            rotation_epsilon: 1e-4,
            normal_neighbors: 20,
            downsample_voxel: 0.2,
        }
    }
}

#[derive(Debug, Error)]
pub enum IcpError {
    #[error("only {found} correspondences, at least {needed} required")]
    NoCorrespondences { found: usize, needed: usize },
    #[error("normal-equation system is singular (condition {condition:.3e})")]
    SingularSystem { condition: f64 },
}

/// Fewest matched pairs the solver will accept.
pub const MIN_CORRESPONDENCES: usize = 10;

/// Condition numbers above this mark the 6x6 system as unsolvable.
pub const MAX_CONDITION: f64 = 1e12;

/// At most this many times a rejected step is halved before giving up.
pub const MAX_STEP_HALVINGS: usize = 4;

/// A point cloud with per-point unit normals.
#[derive(Debug, Clone)]
pub struct NormalCloud {
    pub cloud: PointCloud,
    pub normals: Vec<Vector3<f64>>,
    /// Points whose neighbourhood did not support a stable plane fit.
    pub degenerate: Vec<bool>,
}

/// Estimates a unit normal per point from the scatter of its `k` nearest
/// neighbours (the point itself included), oriented toward the sensor
/// origin. Line-like or undersized neighbourhoods are flagged degenerate.
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> NormalCloud {
    let tree = KdTree::build(&cloud.points);
    let results: Vec<(Vector3<f64>, bool)> = cloud
        .points
        .par_iter()
        .map(|p| {
            let neighbors = tree.knn(p, k + 1);
            if neighbors.len() < 3 {
                return (Vector3::z(), true);
            }
            let mut centroid = Vector3::zeros();
            for &(idx, _) in &neighbors {
                centroid += cloud.points[idx].coords;
            }
            centroid /= neighbors.len() as f64;
            let mut scatter = nalgebra::Matrix3::zeros();
            for &(idx, _) in &neighbors {
                let d = cloud.points[idx].coords - centroid;
                scatter += d * d.transpose();
            }
            let (mut normal, spread) = crate::geometry::smallest_quadratic_direction(&scatter);
            // A surface patch has one small spread direction; a line or a
            // blob of coincident points has two, leaving the normal
            // unconstrained.
            let degenerate =
                spread[2] <= 0.0 || spread[1] <= 1e-9 * spread[2] || !spread[0].is_finite();
            if normal.dot(&p.coords) > 0.0 {
                normal = -normal;
            }
            (normal, degenerate)
        })
        .collect();
    let (normals, degenerate) = results.into_iter().unzip();
    NormalCloud {
        cloud: cloud.clone(),
        normals,
        degenerate,
    }
}

/// One matched pair: a transformed source point against a target point and
/// its plane normal.
#[derive(Debug, Clone, Copy)]
pub struct Correspondence {
    pub source: Point3,
    pub target: Point3,
    pub normal: Vector3<f64>,
}

impl Correspondence {
    fn residual(&self) -> f64 {
        self.normal.dot(&(self.source - self.target))
    }
}

/// Builds the Gauss-Newton normal equations for the point-to-plane
/// objective `F = sum((n . (s - q))^2)`. Returns `(H, g, F)` where
/// `H = sum(A A^T)` and `g = sum(A r)` for `A = [s x n; n]`; the gradient of
/// `F` with respect to the twist is `2 g`.
pub fn linearize(pairs: &[Correspondence]) -> (Matrix6<f64>, Vector6<f64>, f64) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    let mut objective = 0.0;
    for pair in pairs {
        let r = pair.residual();
        let cross = pair.source.coords.cross(&pair.normal);
        let mut a = Vector6::zeros();
        a.fixed_rows_mut::<3>(0).copy_from(&cross);
        a.fixed_rows_mut::<3>(3).copy_from(&pair.normal);
        h += a * a.transpose();
        g += a * r;
        objective += r * r;
    }
    (h, g, objective)
}

/// The rigid transform of a twist `[rotation vector; translation]`.
pub fn increment_transform(twist: &Vector6<f64>) -> RigidTransform {
    let omega = twist.fixed_rows::<3>(0).into_owned();
    let translation = twist.fixed_rows::<3>(3).into_owned();
    let angle = omega.norm();
    let rotation = if angle < 1e-15 {
        nalgebra::Matrix3::identity()
    } else {
        RigidTransform::rotation_about(&(omega / angle), angle).rotation
    };
    RigidTransform::from_parts(rotation, translation)
}

/// Point-to-plane objective over fixed pairs after moving the source points
/// by the full (non-linearized) transform of `twist`.
pub fn objective_at(pairs: &[Correspondence], twist: &Vector6<f64>) -> f64 {
    let t = increment_transform(twist);
    pairs
        .iter()
        .map(|pair| {
            let moved = t.apply_point(&pair.source);
            let r = pair.normal.dot(&(moved - pair.target));
            r * r
        })
        .sum()
}

/// Outcome of a converged or exhausted ICP run.
#[derive(Debug, Clone)]
pub struct IcpResult {
    /// Maps source-frame coordinates into the target frame, initial guess
    /// included.
    pub transform: RigidTransform,
    pub iterations_used: usize,
    /// RMS point-to-plane residual over the final correspondence set.
    pub final_rmse: f64,
    pub correspondence_count: usize,
    pub converged: bool,
    /// Objective value at the start of each iteration.
    pub objective_history: Vec<f64>,
}

/// Refines `init` so the transformed source cloud lands on the target
/// surface. The target must carry normals; degenerate ones are skipped.
pub fn point_to_plane_icp(
    source: &PointCloud,
    target: &NormalCloud,
    init: &RigidTransform,
    params: &IcpParams,
) -> Result<IcpResult, IcpError> {
    let mut usable_points = Vec::new();
    let mut usable_normals = Vec::new();
    for (i, p) in target.cloud.points.iter().enumerate() {
        if !target.degenerate[i] {
            usable_points.push(*p);
            usable_normals.push(target.normals[i]);
        }
    }
    let tree = KdTree::build(&usable_points);
    let source_points = voxel_downsample(&source.points, params.downsample_voxel);

    let mut transform = *init;
    let mut iterations_used = 0;
    let mut converged = false;
    let mut objective_history = Vec::new();
    let mut final_rmse = 0.0;
    let mut correspondence_count = 0;

    for _ in 0..params.max_iterations {
        iterations_used += 1;
        let pairs: Vec<Correspondence> = source_points
            .par_iter()
            .filter_map(|s| {
                let moved = transform.apply_point(s);
                let (idx, _) = tree.nearest_within(&moved, params.max_correspondence_distance)?;
                Some(Correspondence {
                    source: moved,
                    target: usable_points[idx],
                    normal: usable_normals[idx],
                })
            })
            .collect();
        if pairs.len() < MIN_CORRESPONDENCES {
            return Err(IcpError::NoCorrespondences {
                found: pairs.len(),
                needed: MIN_CORRESPONDENCES,
            });
        }
        correspondence_count = pairs.len();

        let (h, g, objective) = linearize(&pairs);
        objective_history.push(objective);
        final_rmse = (objective / pairs.len() as f64).sqrt();

        let eigen = h.symmetric_eigenvalues();
        let max_eig = eigen.iter().cloned().fold(f64::MIN, f64::max);
        let min_eig = eigen.iter().cloned().fold(f64::MAX, f64::min);
        if min_eig <= 0.0 || max_eig / min_eig > MAX_CONDITION {
            return Err(IcpError::SingularSystem {
                condition: if min_eig <= 0.0 { f64::INFINITY } else { max_eig / min_eig },
            });
        }
        let chol = h
            .cholesky()
            .ok_or(IcpError::SingularSystem { condition: max_eig / min_eig })?;
        let step = chol.solve(&(-g));

        let mut accepted = None;
        let mut scale = 1.0;
        for _ in 0..=MAX_STEP_HALVINGS {
            let trial = step * scale;
            if objective_at(&pairs, &trial) <= objective {
                accepted = Some(trial);
                break;
            }
            scale *= 0.5;
        }
        let Some(trial) = accepted else {
            break;
        };
        let increment = increment_transform(&trial);
        transform = increment.compose(&transform);

        let trans_norm = trial.fixed_rows::<3>(3).norm();
        let rot_norm = trial.fixed_rows::<3>(0).norm();
        if trans_norm < params.translation_epsilon && rot_norm < params.rotation_epsilon {
            converged = true;
            break;
        }
    }

    Ok(IcpResult {
        transform,
        iterations_used,
        final_rmse,
        correspondence_count,
        converged,
        objective_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Frame;

    /// Room-like scene: floor, two walls, and a box, densely sampled, all
    /// coordinates in a forward/left/up sensor frame.
    fn room_scene() -> Vec<Point3> {
        let mut points = Vec::new();
        let step = 0.15;
        let mut grid = |f: &mut dyn FnMut(f64, f64) -> Point3, a0: f64, a1: f64, b0: f64, b1: f64| {
            let na = ((a1 - a0) / step).round() as usize;
            let nb = ((b1 - b0) / step).round() as usize;
            for i in 0..=na {
                for j in 0..=nb {
                    points.push(f(a0 + i as f64 * step, b0 + j as f64 * step));
                }
            }
        };
        grid(&mut |x, y| Point3::new(x, y, -1.7), -10.0, 10.0, -8.0, 8.0);
        grid(&mut |y, z| Point3::new(8.0, y, z), -8.0, 8.0, -1.7, 2.0);
        grid(&mut |x, z| Point3::new(x, -6.0, z), -10.0, 8.0, -1.7, 2.0);
        grid(&mut |x, z| Point3::new(x, 4.0, z), 2.0, 5.0, -1.7, 0.5);
        points
    }

    fn cloud_of(points: Vec<Point3>, sweep: usize) -> PointCloud {
        PointCloud::new(points, Frame::Lidar, sweep)
    }

    fn true_transform(yaw_deg: f64, pitch_deg: f64, t: [f64; 3]) -> RigidTransform {
        let yaw = RigidTransform::rotation_about(&Vector3::z(), yaw_deg.to_radians());
        let pitch = RigidTransform::rotation_about(&Vector3::y(), pitch_deg.to_radians());
        let rot = yaw.compose(&pitch);
        RigidTransform::from_parts(rot.rotation, Vector3::new(t[0], t[1], t[2]))
    }

    #[test]
    fn floor_normals_point_up_toward_the_sensor() {
        let mut points = Vec::new();
        for i in 0..40 {
            for j in 0..40 {
                points.push(Point3::new(
                    -3.0 + i as f64 * 0.15,
                    -3.0 + j as f64 * 0.15,
                    -1.7,
                ));
            }
        }
        let normals = estimate_normals(&cloud_of(points, 0), 20);
        for (i, n) in normals.normals.iter().enumerate() {
            assert!(!normals.degenerate[i], "point {i} flagged degenerate");
            assert!(
                (n.z - 1.0).abs() < 1e-9,
                "normal {n:?} should be +z (toward the sensor above the floor)"
            );
        }
    }

    #[test]
    fn sphere_normals_face_the_center_viewpoint() {
        let mut points = Vec::new();
        let radius = 5.0;
        for i in 0..48 {
            for j in 1..24 {
                let az = std::f64::consts::TAU * i as f64 / 48.0;
                let el = std::f64::consts::PI * j as f64 / 24.0;
                points.push(Point3::new(
                    radius * el.sin() * az.cos(),
                    radius * el.sin() * az.sin(),
                    radius * el.cos(),
                ));
            }
        }
        let normals = estimate_normals(&cloud_of(points.clone(), 0), 8);
        for (p, n) in points.iter().zip(&normals.normals) {
            let inward = -p.coords / p.coords.norm();
            assert!(
                n.dot(&inward) > 0.9,
                "normal {n:?} at {p:?} should face the sensor at the center"
            );
        }
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let points: Vec<Point3> = (0..50)
            .map(|i| Point3::new(i as f64 * 0.1, 2.0, 0.0))
            .collect();
        let normals = estimate_normals(&cloud_of(points, 0), 10);
        assert!(normals.degenerate.iter().all(|&d| d), "a line constrains no normal");
    }

    #[test]
    fn linearize_gradient_matches_finite_differences() {
        let mut pairs = Vec::new();
        let mut seed = 42u64;
        let mut next = || {
            seed = crate::seeding::derive(seed, 1);
            (seed >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
        };
        for _ in 0..25 {
            let n = Vector3::new(next(), next(), next()).normalize();
            pairs.push(Correspondence {
                source: Point3::new(next() * 3.0, next() * 3.0, next() * 3.0),
                target: Point3::new(next() * 3.0, next() * 3.0, next() * 3.0),
                normal: n,
            });
        }
        let (_, g, f0) = linearize(&pairs);
        assert!((objective_at(&pairs, &Vector6::zeros()) - f0).abs() < 1e-12);
        let h = 1e-5;
        for i in 0..6 {
            let mut plus = Vector6::zeros();
            plus[i] = h;
            let mut minus = Vector6::zeros();
            minus[i] = -h;
            let fd = (objective_at(&pairs, &plus) - objective_at(&pairs, &minus)) / (2.0 * h);
            let analytic = 2.0 * g[i];
            let denom = analytic.abs().max(1.0);
            assert!(
                ((fd - analytic) / denom).abs() < 1e-4,
                "component {i}: finite difference {fd}, analytic {analytic}"
            );
        }
    }

    #[test]
    fn normal_equations_are_symmetric_positive_semidefinite() {
        let pairs: Vec<Correspondence> = (0..12)
            .map(|i| {
                let a = i as f64;
                Correspondence {
                    source: Point3::new(a.sin() * 4.0, a.cos() * 4.0, a * 0.1),
                    target: Point3::new(a.sin() * 4.0 + 0.1, a.cos() * 4.0, a * 0.1),
                    normal: Vector3::new(a.cos(), a.sin(), 0.3).normalize(),
                }
            })
            .collect();
        let (h, _, _) = linearize(&pairs);
        for r in 0..6 {
            for c in 0..6 {
                assert!((h[(r, c)] - h[(c, r)]).abs() < 1e-12);
            }
        }
        let eigen = h.symmetric_eigenvalues();
        assert!(eigen.iter().all(|&e| e > -1e-9), "eigenvalues {eigen:?}");
    }

    #[test]
    fn recovers_a_five_degree_one_meter_perturbation() {
        let scene = room_scene();
        let truth = true_transform(4.0, 2.0, [0.8, -0.5, 0.2]);
        let inv = truth.inverse();
        let source_pts: Vec<Point3> = scene.iter().map(|p| inv.apply_point(p)).collect();
        let target = estimate_normals(&cloud_of(scene, 0), 20);
        let source = cloud_of(source_pts, 1);
        let result =
            point_to_plane_icp(&source, &target, &RigidTransform::identity(), &IcpParams::default())
                .unwrap();
        let trans_err = (result.transform.translation - truth.translation).norm();
        let rot_err = truth
            .inverse()
            .compose(&result.transform)
            .rotation_angle()
            .to_degrees();
        assert!(trans_err < 1e-3, "translation error {trans_err} m");
        assert!(rot_err < 0.05, "rotation error {rot_err} deg");
        assert!(result.converged, "ran {} iterations", result.iterations_used);
    }

    #[test]
    fn objective_never_increases_across_iterations() {
        let scene = room_scene();
        let truth = true_transform(-3.0, 1.0, [-0.6, 0.7, -0.1]);
        let inv = truth.inverse();
        let source_pts: Vec<Point3> = scene.iter().map(|p| inv.apply_point(p)).collect();
        let target = estimate_normals(&cloud_of(scene, 0), 20);
        let source = cloud_of(source_pts, 1);
        let result =
            point_to_plane_icp(&source, &target, &RigidTransform::identity(), &IcpParams::default())
                .unwrap();
        for w in result.objective_history.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-9,
                "objective rose from {} to {}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn zero_perturbation_returns_identity_quickly() {
        let scene = room_scene();
        let target = estimate_normals(&cloud_of(scene.clone(), 0), 20);
        let source = cloud_of(scene, 1);
        let result =
            point_to_plane_icp(&source, &target, &RigidTransform::identity(), &IcpParams::default())
                .unwrap();
        assert!(result.transform.translation.norm() < 1e-6);
        assert!(result.transform.rotation_angle() < 1e-6);
        assert!(result.converged);
        assert!(result.iterations_used <= 2, "took {}", result.iterations_used);
        assert!(result.final_rmse < 1e-9);
    }

    #[test]
    fn exact_init_is_kept() {
        let scene = room_scene();
        let truth = true_transform(4.0, 0.0, [0.9, 0.3, 0.0]);
        let inv = truth.inverse();
        let source_pts: Vec<Point3> = scene.iter().map(|p| inv.apply_point(p)).collect();
        let target = estimate_normals(&cloud_of(scene, 0), 20);
        let source = cloud_of(source_pts, 1);
        let result = point_to_plane_icp(&source, &target, &truth, &IcpParams::default()).unwrap();
        let drift = (result.transform.translation - truth.translation).norm();
        assert!(drift < 1e-9, "perfect init drifted by {drift}");
        assert!(result.converged);
    }

    #[test]
    fn distant_source_has_no_correspondences() {
        let scene = room_scene();
        let target = estimate_normals(&cloud_of(scene.clone(), 0), 20);
        let far: Vec<Point3> = scene
            .iter()
            .map(|p| Point3::new(p.x + 500.0, p.y, p.z))
            .collect();
        let err = point_to_plane_icp(
            &cloud_of(far, 1),
            &target,
            &RigidTransform::identity(),
            &IcpParams::default(),
        )
        .unwrap_err();
        assert!(matches!(err, IcpError::NoCorrespondences { .. }), "{err}");
    }

    #[test]
    fn single_plane_is_reported_singular() {
        let mut points = Vec::new();
        for i in 0..60 {
            for j in 0..60 {
                points.push(Point3::new(
                    -4.0 + i as f64 * 0.15,
                    -4.0 + j as f64 * 0.15,
                    -1.7,
                ));
            }
        }
        let target = estimate_normals(&cloud_of(points.clone(), 0), 20);
        let err = point_to_plane_icp(
            &cloud_of(points, 1),
            &target,
            &RigidTransform::identity(),
            &IcpParams::default(),
        )
        .unwrap_err();
        assert!(matches!(err, IcpError::SingularSystem { .. }), "{err}");
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let scene = room_scene();
        let truth = true_transform(2.0, -1.0, [0.4, 0.2, -0.1]);
        let inv = truth.inverse();
        let source_pts: Vec<Point3> = scene.iter().map(|p| inv.apply_point(p)).collect();
        let target = estimate_normals(&cloud_of(scene, 0), 20);
        let source = cloud_of(source_pts, 1);
        let a = point_to_plane_icp(&source, &target, &RigidTransform::identity(), &IcpParams::default())
            .unwrap();
        let b = point_to_plane_icp(&source, &target, &RigidTransform::identity(), &IcpParams::default())
            .unwrap();
        assert_eq!(a.transform.rotation, b.transform.rotation);
        assert_eq!(a.transform.translation, b.transform.translation);
        assert_eq!(a.objective_history, b.objective_history);
    }
}
