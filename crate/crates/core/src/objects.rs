//! Removal of small isolated objects before scan matching.
//!
//! Non-ground points are clustered with DBSCAN; clusters whose axis-aligned
//! bounding box fits strictly inside a size threshold are discarded along
//! with noise points. Large structure (walls, buildings) survives and drives
//! the registration stages.

use thiserror::Error;

use crate::geometry::{FrameConvention, Point3, PointCloud};
use crate::ground::{split_ground, Plane};
use crate::spatial::VoxelGrid;

/// Cluster label for a noise point.
pub const NOISE: i32 = -1;

/// DBSCAN controls and the bounding-box size filter.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterParams {
    /// DBSCAN neighbourhood radius, meters.
    pub eps: f64,
    /// Minimum neighbours (counting the point itself) for a core point.
    pub min_pts: usize,
    /// Bounding-box extents (forward, left, up) in meters; a cluster is
    /// removed only when strictly smaller on all three axes.
    pub max_extent: [f64; 3],
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self { eps: 0.5, min_pts: 10, max_extent: [10.0, 10.0, 4.0] }
    }
}

/// Per-point cluster assignment: `labels[i]` is a cluster id or [`NOISE`];
/// `core[i]` is true when point `i` has at least `min_pts` neighbours
/// within `eps` (itself included).
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterLabeling {
    pub labels: Vec<i32>,
    pub core: Vec<bool>,
    pub cluster_count: usize,
}

#[derive(Debug, Error, PartialEq)]
pub enum ObjectError {
    #[error("object removal discarded every point")]
    EmptyResult,
}

/// Density-based clustering with deterministic ascending-index scan order.
///
/// Cluster ids are assigned in the order clusters are first seeded; border
/// points belong to the first cluster that reaches them.
pub fn dbscan(cloud: &PointCloud, eps: f64, min_pts: usize) -> ClusterLabeling {
    let points = &cloud.points;
    let n = points.len();
    let mut labels = vec![NOISE; n];
    if n == 0 {
        return ClusterLabeling { labels, core: Vec::new(), cluster_count: 0 };
    }
    let grid = VoxelGrid::build(points, eps);
    let neighbourhoods: Vec<Vec<u32>> = points
        .iter()
        .map(|p| grid.within(points, p, eps))
        .collect();
    let core: Vec<bool> = neighbourhoods.iter().map(|nb| nb.len() >= min_pts).collect();
    let mut visited = vec![false; n];
    let mut cluster = 0i32;
    for seed in 0..n {
        if visited[seed] {
            continue;
        }
        visited[seed] = true;
        if !core[seed] {
            continue;
        }
        labels[seed] = cluster;
        let mut queue: std::collections::VecDeque<u32> =
            neighbourhoods[seed].iter().copied().collect();
        while let Some(idx) = queue.pop_front() {
            let idx = idx as usize;
            if labels[idx] == NOISE {
                labels[idx] = cluster;
            }
            if visited[idx] {
                continue;
            }
            visited[idx] = true;
            if core[idx] {
                queue.extend(neighbourhoods[idx].iter().copied());
            }
        }
        cluster += 1;
    }
    ClusterLabeling { labels, core, cluster_count: cluster as usize }
}

/// Per-cluster flag: true when the cluster's bounding box fits strictly
/// inside `max_extent` on all of the (forward, left, up) axes.
fn removed_clusters(
    points: &[Point3],
    labeling: &ClusterLabeling,
    params: &ClusterParams,
    conv: &FrameConvention,
) -> Vec<bool> {
    let mut lo = vec![[f64::INFINITY; 3]; labeling.cluster_count];
    let mut hi = vec![[f64::NEG_INFINITY; 3]; labeling.cluster_count];
    for (p, &label) in points.iter().zip(&labeling.labels) {
        if label == NOISE {
            continue;
        }
        let c = label as usize;
        let coords = [conv.forward_of(p), conv.left_of(p), conv.up_of(p)];
        for a in 0..3 {
            lo[c][a] = lo[c][a].min(coords[a]);
            hi[c][a] = hi[c][a].max(coords[a]);
        }
    }
    (0..labeling.cluster_count)
        .map(|c| (0..3).all(|a| hi[c][a] - lo[c][a] < params.max_extent[a]))
        .collect()
}

/// Drops noise points and clusters strictly smaller than `max_extent` on all
/// of the (forward, left, up) axes. Surviving points keep their input order.
pub fn filter_small_clusters(
    cloud: &PointCloud,
    labeling: &ClusterLabeling,
    params: &ClusterParams,
    conv: &FrameConvention,
) -> PointCloud {
    assert_eq!(cloud.len(), labeling.labels.len(), "labeling does not match cloud");
    let removed = removed_clusters(&cloud.points, labeling, params, conv);
    let points: Vec<Point3> = cloud
        .points
        .iter()
        .zip(&labeling.labels)
        .filter(|(_, &label)| label != NOISE && !removed[label as usize])
        .map(|(p, _)| *p)
        .collect();
    PointCloud::new(points, cloud.frame, cloud.sweep_index)
}

/// Full object-removal pass: split off the ground, cluster the rest, drop
/// small clusters and noise, and return the kept points (ground included)
/// in their original order.
pub fn remove_small_objects(
    cloud: &PointCloud,
    plane: &Plane,
    params: &ClusterParams,
    ground_threshold: f64,
    conv: &FrameConvention,
) -> Result<PointCloud, ObjectError> {
    let keep = removal_mask(cloud, plane, params, ground_threshold, conv);
    let points: Vec<Point3> = cloud
        .points
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(p, _)| *p)
        .collect();
    if points.is_empty() {
        return Err(ObjectError::EmptyResult);
    }
    Ok(PointCloud::new(points, cloud.frame, cloud.sweep_index))
}

fn removal_mask(
    cloud: &PointCloud,
    plane: &Plane,
    params: &ClusterParams,
    ground_threshold: f64,
    conv: &FrameConvention,
) -> Vec<bool> {
    let (_, non_ground) = split_ground(cloud, plane, ground_threshold);
    let labeling = dbscan(&non_ground, params.eps, params.min_pts);
    let removed = removed_clusters(&non_ground.points, &labeling, params, conv);
    let kept_non_ground: Vec<bool> = labeling
        .labels
        .iter()
        .map(|&label| label != NOISE && !removed[label as usize])
        .collect();
    let mut keep = Vec::with_capacity(cloud.len());
    let mut non_ground_cursor = 0usize;
    for p in &cloud.points {
        if plane.distance(p) <= ground_threshold {
            keep.push(true);
        } else {
            keep.push(kept_non_ground[non_ground_cursor]);
            non_ground_cursor += 1;
        }
    }
    keep
}
