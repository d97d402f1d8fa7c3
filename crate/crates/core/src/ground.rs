//! Ground plane estimation and removal.
//!
//! A seeded RANSAC draws sample triples from a height band below the sensor,
//! scores candidate planes by inlier count over the whole cloud, and refits
//! the winner by total least squares. The fitted plane supports splitting the
//! cloud into ground and non-ground points and rectifying the cloud so the
//! ground normal coincides with the up axis.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{apply, FrameConvention, Point3, PointCloud, RigidTransform};
use crate::seeding;

/// An oriented plane `normal . p + offset = 0` with fit statistics.
///
/// The normal is unit length with a non-negative up component.
/// `mean_inlier_distance` is the quadratic mean (RMS) of inlier distances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub inlier_count: usize,
    pub mean_inlier_distance: f64,
}

impl Plane {
    pub fn signed_distance(&self, p: &Point3) -> f64 {
        self.normal.dot(&p.coords) + self.offset
    }

    pub fn distance(&self, p: &Point3) -> f64 {
        self.signed_distance(p).abs()
    }
}

/// RANSAC controls for [`estimate_ground`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacParams {
    pub iterations: usize,
    pub sample_size: usize,
    /// Inlier distance to the candidate plane, meters.
    pub distance_threshold: f64,
    /// Half-width of the below-sensor band samples are drawn from, meters.
    pub candidate_height_band: f64,
    /// Height of the sensor origin above the nominal ground, meters.
    pub sensor_height: f64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iterations: 100,
            sample_size: 3,
            distance_threshold: 0.2,
            candidate_height_band: 0.5,
            sensor_height: 1.73,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GroundError {
    #[error("found {found} candidate points in the height band, need at least {needed}")]
    InsufficientCandidates { found: usize, needed: usize },
    #[error("every RANSAC sample was collinear")]
    DegenerateSamples,
    #[error("plane normal is anti-parallel to the up axis")]
    DegenerateNormal,
}

#[derive(Debug, Clone, Copy)]
struct CandidatePlane {
    normal: Vector3<f64>,
    offset: f64,
    inlier_count: usize,
    rms: f64,
}

fn plane_through(a: &Point3, b: &Point3, c: &Point3) -> Option<(Vector3<f64>, f64)> {
    let ab = b - a;
    let ac = c - a;
    let cross = ab.cross(&ac);
    let scale = ab.norm() * ac.norm();
    if scale <= 0.0 || cross.norm() < 1e-10 * scale {
        return None;
    }
    let normal = cross.normalize();
    Some((normal, -normal.dot(&a.coords)))
}

fn score_plane(points: &[Point3], normal: &Vector3<f64>, offset: f64, threshold: f64) -> (usize, f64) {
    let mut count = 0usize;
    let mut sq_sum = 0.0;
    for p in points {
        let d = normal.dot(&p.coords) + offset;
        if d.abs() <= threshold {
            count += 1;
            sq_sum += d * d;
        }
    }
    let rms = if count > 0 { (sq_sum / count as f64).sqrt() } else { f64::INFINITY };
    (count, rms)
}

/// Total-least-squares plane through `points`: centroid plus the smallest
/// eigenvector of the scatter matrix.
fn fit_plane_tls(points: &[Point3]) -> (Vector3<f64>, f64) {
    let n = points.len() as f64;
    let mut centroid = Vector3::zeros();
    for p in points {
        centroid += p.coords;
    }
    centroid /= n;
    let mut scatter = nalgebra::Matrix3::zeros();
    for p in points {
        let d = p.coords - centroid;
        scatter += d * d.transpose();
    }
    let (normal, _) = crate::geometry::smallest_quadratic_direction(&scatter);
    let offset = -normal.dot(&centroid);
    (normal, offset)
}

fn ransac_winner(
    points: &[Point3],
    candidates: &[u32],
    params: &RansacParams,
    seed: u64,
) -> Option<CandidatePlane> {
    let per_iteration: Vec<Option<CandidatePlane>> = (0..params.iterations)
        .into_par_iter()
        .map(|iter| {
            let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(seed, iter as u64));
            let picks =
                rand::seq::index::sample(&mut rng, candidates.len(), params.sample_size);
            let ids: Vec<usize> =
                picks.iter().map(|i| candidates[i] as usize).collect();
            let fitted = if ids.len() == 3 {
                plane_through(&points[ids[0]], &points[ids[1]], &points[ids[2]])
            } else {
                let sample: Vec<Point3> = ids.iter().map(|&i| points[i]).collect();
                let (normal, offset) = fit_plane_tls(&sample);
                Some((normal, offset))
            };
            fitted.map(|(normal, offset)| {
                let (inlier_count, rms) =
                    score_plane(points, &normal, offset, params.distance_threshold);
                CandidatePlane { normal, offset, inlier_count, rms }
            })
        })
        .collect();
    let mut best: Option<CandidatePlane> = None;
    for cand in per_iteration.into_iter().flatten() {
        let better = match &best {
            None => true,
            Some(b) => {
                cand.inlier_count > b.inlier_count
                    || (cand.inlier_count == b.inlier_count && cand.rms < b.rms)
            }
        };
        if better {
            best = Some(cand);
        }
    }
    best
}

/// Fits the ground plane of one sweep.
///
/// Sample points come from the band `sensor_height +- candidate_height_band`
/// below the origin along `conv.up`; inliers are counted over the full cloud.
/// The same `(cloud, params, seed)` always yields the same plane.
pub fn estimate_ground(
    cloud: &PointCloud,
    params: &RansacParams,
    conv: &FrameConvention,
    seed: u64,
) -> Result<Plane, GroundError> {
    let lo = -(params.sensor_height + params.candidate_height_band);
    let hi = -(params.sensor_height - params.candidate_height_band);
    let candidates: Vec<u32> = cloud
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let up = conv.up_of(p);
            up >= lo && up <= hi
        })
        .map(|(i, _)| i as u32)
        .collect();
    if candidates.len() < params.sample_size {
        return Err(GroundError::InsufficientCandidates {
            found: candidates.len(),
            needed: params.sample_size,
        });
    }
    let winner = ransac_winner(&cloud.points, &candidates, params, seed)
        .ok_or(GroundError::DegenerateSamples)?;

    let inliers: Vec<Point3> = cloud
        .points
        .iter()
        .filter(|p| {
            (winner.normal.dot(&p.coords) + winner.offset).abs() <= params.distance_threshold
        })
        .copied()
        .collect();
    let (mut normal, mut offset) = fit_plane_tls(&inliers);
    if normal.dot(&conv.up_vector()) < 0.0 {
        normal = -normal;
        offset = -offset;
    }
    let mut sq_sum = 0.0;
    for p in &inliers {
        let d = normal.dot(&p.coords) + offset;
        sq_sum += d * d;
    }
    Ok(Plane {
        normal,
        offset,
        inlier_count: inliers.len(),
        mean_inlier_distance: (sq_sum / inliers.len() as f64).sqrt(),
    })
}

/// Splits a cloud into (ground, non-ground) by distance to the plane.
/// Point order within each part follows the input order.
pub fn split_ground(cloud: &PointCloud, plane: &Plane, threshold: f64) -> (PointCloud, PointCloud) {
    let mut ground = Vec::new();
    let mut rest = Vec::new();
    for p in &cloud.points {
        if plane.distance(p) <= threshold {
            ground.push(*p);
        } else {
            rest.push(*p);
        }
    }
    (
        PointCloud::new(ground, cloud.frame, cloud.sweep_index),
        PointCloud::new(rest, cloud.frame, cloud.sweep_index),
    )
}

/// Rotates the cloud about the origin so the plane normal becomes `conv.up`.
///
/// Returns the rotated cloud and the rotation applied. Re-estimating the
/// ground on the result yields a normal within 1e-6 rad of up.
pub fn rectify(
    cloud: &PointCloud,
    plane: &Plane,
    conv: &FrameConvention,
) -> Result<(PointCloud, RigidTransform), GroundError> {
    let rectification = rectification_for(plane, conv)?;
    Ok((apply(&rectification, cloud, cloud.frame), rectification))
}

/// The shortest-arc rotation taking `plane.normal` onto `conv.up`.
pub fn rectification_for(
    plane: &Plane,
    conv: &FrameConvention,
) -> Result<RigidTransform, GroundError> {
    let up = conv.up_vector();
    let dot = plane.normal.dot(&up).clamp(-1.0, 1.0);
    if dot <= -1.0 + 1e-9 {
        return Err(GroundError::DegenerateNormal);
    }
    if 1.0 - dot < 1e-12 {
        return Ok(RigidTransform::identity());
    }
    let axis = plane.normal.cross(&up);
    Ok(RigidTransform::rotation_about(&axis, dot.acos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Frame;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    const CONV: FrameConvention = FrameConvention::FORWARD_LEFT_UP;

    /// Gaussian noise clipped to `+-4 sigma` via rejection so the scene has
    /// a hard bound between plane points and outliers.
    fn clipped_noise(rng: &mut StdRng, sigma: f64) -> f64 {
        loop {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let n = (-2.0 * u1.ln()).sqrt() * u2.cos() * sigma;
            if n.abs() <= 4.0 * sigma {
                return n;
            }
        }
    }

    /// Plane tilted by `tilt` radians about the left axis, sampled on a
    /// disk of radius 25 m, with a fraction of outliers strictly above it.
    fn plane_scene(
        rng: &mut StdRng,
        tilt: f64,
        sigma: f64,
        n_plane: usize,
        n_outliers: usize,
    ) -> (PointCloud, Vector3<f64>) {
        let rot = RigidTransform::rotation_about(&Vector3::y(), tilt);
        let normal = rot.rotation * Vector3::z();
        let mut points = Vec::new();
        for _ in 0..n_plane {
            let x = rng.gen_range(-25.0..25.0);
            let y = rng.gen_range(-25.0..25.0);
            let base = Point3::new(x, y, -1.73);
            let p = rot.apply_point(&base);
            points.push(Point3::from(p.coords + normal * clipped_noise(rng, sigma)));
        }
        for _ in 0..n_outliers {
            let x = rng.gen_range(-25.0..25.0);
            let y = rng.gen_range(-25.0..25.0);
            let lift = rng.gen_range(0.35..8.0);
            let base = Point3::new(x, y, -1.73);
            points.push(Point3::from(rot.apply_point(&base).coords + normal * lift));
        }
        (PointCloud::new(points, Frame::Lidar, 0), normal)
    }

    #[test]
    fn noiseless_level_plane_is_recovered_exactly() {
        let mut points = Vec::new();
        for i in 0..100 {
            for j in 0..100 {
                points.push(Point3::new(
                    -24.75 + 0.5 * i as f64,
                    -24.75 + 0.5 * j as f64,
                    -1.73,
                ));
            }
        }
        let cloud = PointCloud::new(points, Frame::Lidar, 0);
        let plane = estimate_ground(&cloud, &RansacParams::default(), &CONV, 1).unwrap();
        assert!((plane.normal - Vector3::z()).norm() < 1e-9, "normal {:?}", plane.normal);
        assert!((plane.offset - 1.73).abs() < 1e-9, "offset {}", plane.offset);
        assert_eq!(plane.inlier_count, 10_000);
        assert!(plane.mean_inlier_distance < 1e-9);
    }

    #[test]
    fn tilted_noisy_plane_with_outliers_is_recovered() {
        let mut rng = StdRng::seed_from_u64(100);
        let (cloud, truth_normal) = plane_scene(&mut rng, 3f64.to_radians(), 0.02, 8000, 2000);
        let plane = estimate_ground(&cloud, &RansacParams::default(), &CONV, 7).unwrap();
        let angle = plane.normal.dot(&truth_normal).clamp(-1.0, 1.0).acos();
        assert!(
            angle < 1f64.to_radians(),
            "normal off by {} deg",
            angle.to_degrees()
        );
        assert!(plane.inlier_count >= 7900, "only {} inliers", plane.inlier_count);
    }

    #[test]
    fn too_few_band_points_is_an_error() {
        let cloud = PointCloud::new(
            vec![Point3::new(0.0, 0.0, -1.7), Point3::new(1.0, 0.0, -1.7)],
            Frame::Lidar,
            0,
        );
        let err = estimate_ground(&cloud, &RansacParams::default(), &CONV, 0).unwrap_err();
        assert_eq!(err, GroundError::InsufficientCandidates { found: 2, needed: 3 });
    }

    #[test]
    fn points_outside_the_band_are_never_sampled() {
        let mut rng = StdRng::seed_from_u64(3);
        let mut points = Vec::new();
        for _ in 0..500 {
            points.push(Point3::new(
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-20.0..20.0),
                -1.73,
            ));
        }
        for _ in 0..2000 {
            points.push(Point3::new(
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-20.0..20.0),
                2.0,
            ));
        }
        let cloud = PointCloud::new(points, Frame::Lidar, 0);
        let plane = estimate_ground(&cloud, &RansacParams::default(), &CONV, 11).unwrap();
        assert!((plane.offset - 1.73).abs() < 1e-6, "fitted the ceiling: offset {}", plane.offset);
    }

    #[test]
    fn same_seed_reproduces_the_same_plane() {
        let mut rng = StdRng::seed_from_u64(200);
        let (cloud, _) = plane_scene(&mut rng, 2f64.to_radians(), 0.02, 3000, 600);
        let a = estimate_ground(&cloud, &RansacParams::default(), &CONV, 5).unwrap();
        let b = estimate_ground(&cloud, &RansacParams::default(), &CONV, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn refit_does_not_increase_rms_over_the_winning_set() {
        let mut rng = StdRng::seed_from_u64(300);
        for trial in 0..10 {
            let (cloud, _) = plane_scene(&mut rng, 1f64.to_radians(), 0.03, 2000, 400);
            let params = RansacParams::default();
            let lo = -(params.sensor_height + params.candidate_height_band);
            let hi = -(params.sensor_height - params.candidate_height_band);
            let candidates: Vec<u32> = cloud
                .points
                .iter()
                .enumerate()
                .filter(|(_, p)| CONV.up_of(p) >= lo && CONV.up_of(p) <= hi)
                .map(|(i, _)| i as u32)
                .collect();
            let winner = ransac_winner(&cloud.points, &candidates, &params, trial).unwrap();
            let inliers: Vec<Point3> = cloud
                .points
                .iter()
                .filter(|p| {
                    (winner.normal.dot(&p.coords) + winner.offset).abs()
                        <= params.distance_threshold
                })
                .copied()
                .collect();
            let (normal, offset) = fit_plane_tls(&inliers);
            let rms = |n: &Vector3<f64>, d: f64| {
                (inliers
                    .iter()
                    .map(|p| {
                        let r = n.dot(&p.coords) + d;
                        r * r
                    })
                    .sum::<f64>()
                    / inliers.len() as f64)
                    .sqrt()
            };
            let refit_rms = rms(&normal, offset);
            let sample_rms = rms(&winner.normal, winner.offset);
            assert!(
                refit_rms <= sample_rms + 1e-12,
                "trial {trial}: refit {refit_rms} > sample {sample_rms}"
            );
        }
    }

    #[test]
    fn split_partitions_by_distance() {
        let mut rng = StdRng::seed_from_u64(400);
        let (cloud, _) = plane_scene(&mut rng, 0.0, 0.02, 1000, 300);
        let plane = estimate_ground(&cloud, &RansacParams::default(), &CONV, 1).unwrap();
        let (ground, rest) = split_ground(&cloud, &plane, 0.2);
        assert_eq!(ground.len() + rest.len(), cloud.len());
        assert!(ground.points.iter().all(|p| plane.distance(p) <= 0.2));
        assert!(rest.points.iter().all(|p| plane.distance(p) > 0.2));
        assert!(ground.len() >= 1000 - 5, "ground kept {}", ground.len());
    }

    #[test]
    fn rectified_cloud_reestimates_to_up() {
        let mut rng = StdRng::seed_from_u64(500);
        let (cloud, _) = plane_scene(&mut rng, 5f64.to_radians(), 0.02, 6000, 1500);
        let plane = estimate_ground(&cloud, &RansacParams::default(), &CONV, 9).unwrap();
        let (rectified, rotation) = rectify(&cloud, &plane, &CONV).unwrap();
        assert!((rotation.rotation * plane.normal - Vector3::z()).norm() < 1e-9);
        let replane = estimate_ground(&rectified, &RansacParams::default(), &CONV, 9).unwrap();
        let angle = replane.normal.dot(&Vector3::z()).clamp(-1.0, 1.0).acos();
        assert!(angle < 1e-6, "re-estimated normal off by {angle} rad");
    }

    #[test]
    fn rectifying_a_level_plane_is_identity() {
        let plane = Plane {
            normal: Vector3::z(),
            offset: 1.73,
            inlier_count: 1,
            mean_inlier_distance: 0.0,
        };
        let t = rectification_for(&plane, &CONV).unwrap();
        assert_eq!(t, RigidTransform::identity());
    }

    #[test]
    fn antiparallel_normal_is_rejected() {
        let plane = Plane {
            normal: -Vector3::z(),
            offset: 0.0,
            inlier_count: 1,
            mean_inlier_distance: 0.0,
        };
        assert_eq!(rectification_for(&plane, &CONV).unwrap_err(), GroundError::DegenerateNormal);
    }
}
