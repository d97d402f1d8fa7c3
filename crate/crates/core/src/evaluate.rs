//! Trajectory scoring: translational drift in percent per segment length,
//! measured against ground truth over fixed arc-length segments, plus run
//! timing summaries.

use thiserror::Error;

use crate::geometry::RigidTransform;

/// Segment lengths of the standard odometry evaluation protocol, meters.
pub const DEFAULT_SEGMENT_LENGTHS: [f64; 8] =
    [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

/// A segment whose translational error exceeds this percentage marks the
/// run as having lost tracking.
pub const LOST_TRACKING_PERCENT: f64 = 50.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("trajectory has {found} poses, need at least 2")]
    TooFewPoses { found: usize },
    #[error("truth covers {truth_len} sweeps but the estimate references sweep {sweep_index}")]
    MissingTruth { truth_len: usize, sweep_index: usize },
    #[error("truth arc length {available:.1} m is shorter than the smallest segment {needed:.1} m")]
    TooShort { available: f64, needed: f64 },
}

/// Error of one evaluated segment.
#[derive(Debug, Clone, Copy)]
pub struct SegmentError {
    /// Index into the trajectory where the segment starts.
    pub start_index: usize,
    /// Nominal segment length, meters.
    pub length_m: f64,
    /// Translational drift, percent of the segment length.
    pub translation_percent: f64,
    /// Rotational drift, degrees per 100 m.
    pub rotation_deg_per_100m: f64,
}

/// Drift metrics of a whole run; timing and degradation fields are filled
/// from the run report by the caller.
#[derive(Debug, Clone, Default)]
pub struct DriftReport {
    /// Mean translational drift over all segments, percent.
    pub percent_error_per_100m: f64,
    /// Mean rotational drift over all segments, degrees per 100 m.
    pub rotation_deg_per_100m: f64,
    pub segments: Vec<SegmentError>,
    pub mean_cycle_ms: f64,
    pub p95_cycle_ms: f64,
    pub degraded_sweep_count: usize,
    pub lost_tracking: bool,
}

/// Scores an estimated trajectory against ground-truth poses indexed by
/// sweep number. For every start pose and every segment length, the end
/// pose is the first one at least that far along the truth path; the error
/// compares relative translations between the two pose pairs.
pub fn evaluate(
    traj: &[(usize, RigidTransform)],
    truth: &[RigidTransform],
    segment_lengths: &[f64],
) -> Result<DriftReport, EvalError> {
    if traj.len() < 2 {
        return Err(EvalError::TooFewPoses { found: traj.len() });
    }
    for (sweep_index, _) in traj {
        if *sweep_index >= truth.len() {
            return Err(EvalError::MissingTruth {
                truth_len: truth.len(),
                sweep_index: *sweep_index,
            });
        }
    }
    let truth_at: Vec<&RigidTransform> =
        traj.iter().map(|(idx, _)| &truth[*idx]).collect();
    let mut arc = Vec::with_capacity(traj.len());
    arc.push(0.0);
    for w in truth_at.windows(2) {
        let step = (w[1].translation - w[0].translation).norm();
        arc.push(arc.last().unwrap() + step);
    }
    let total = *arc.last().unwrap();
    let needed = segment_lengths.iter().cloned().fold(f64::INFINITY, f64::min);
    if total < needed {
        return Err(EvalError::TooShort {
            available: total,
            needed,
        });
    }

    let mut segments = Vec::new();
    for start in 0..traj.len() {
        for &length in segment_lengths {
            let Some(end) = arc[start..]
                .iter()
                .position(|&s| s - arc[start] >= length)
                .map(|offset| start + offset)
            else {
                continue;
            };
            if end == start {
                continue;
            }
            let rel_est = traj[start].1.inverse().compose(&traj[end].1);
            let rel_truth = truth_at[start].inverse().compose(truth_at[end]);
            let translation_percent =
                (rel_est.translation - rel_truth.translation).norm() / length * 100.0;
            let rotation_deg_per_100m = rel_est
                .inverse()
                .compose(&rel_truth)
                .rotation_angle()
                .to_degrees()
                / length
                * 100.0;
            segments.push(SegmentError {
                start_index: start,
                length_m: length,
                translation_percent,
                rotation_deg_per_100m,
            });
        }
    }

    let count = segments.len().max(1) as f64;
    let percent_error_per_100m =
        segments.iter().map(|s| s.translation_percent).sum::<f64>() / count;
    let rotation_deg_per_100m =
        segments.iter().map(|s| s.rotation_deg_per_100m).sum::<f64>() / count;
    let lost_tracking = segments
        .iter()
        .any(|s| s.translation_percent > LOST_TRACKING_PERCENT);
    Ok(DriftReport {
        percent_error_per_100m,
        rotation_deg_per_100m,
        segments,
        mean_cycle_ms: 0.0,
        p95_cycle_ms: 0.0,
        degraded_sweep_count: 0,
        lost_tracking,
    })
}

/// Mean and 95th-percentile (nearest-rank) of per-sweep wall-clock times.
pub fn timing_summary(cycle_ms: &[f64]) -> (f64, f64) {
    assert!(!cycle_ms.is_empty(), "timing summary needs at least one row");
    let mean = cycle_ms.iter().sum::<f64>() / cycle_ms.len() as f64;
    let mut sorted = cycle_ms.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((0.95 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    (mean, sorted[rank - 1])
}
