//! Reading recorded sweep sequences and writing trajectories and maps.
//!
//! Scans use the KITTI odometry binary layout: consecutive little-endian
//! 32-bit float quadruples `(x, y, z, reflectance)`. Ground-truth poses are
//! text lines of twelve reals forming a row-major 3x4 `[R|t]`. Trajectories
//! can be written in the same twelve-real format or as timestamped
//! translation-plus-quaternion lines; maps as ASCII PCD or bare xyz rows.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geometry::{Frame, FrameConvention, Point3, PointCloud, RigidTransform};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: unreadable or bad framing: {reason}")]
    MalformedFile { path: PathBuf, reason: String },
    #[error("{path} line {line}: {reason}")]
    MalformedPose { path: PathBuf, line: usize, reason: String },
    #[error("map is empty, nothing to write")]
    EmptyMap,
    #[error("{path}: no .bin scans found")]
    NoScans { path: PathBuf },
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Rotation defects below this are silently repaired when reading poses;
/// anything larger is rejected.
pub const POSE_DEFECT_TOLERANCE: f64 = 1e-3;

/// Reads one binary scan. Returns the cloud (reflectance discarded) and the
/// number of non-finite points dropped.
pub fn read_kitti_scan(
    path: &Path,
    sweep_index: usize,
) -> Result<(PointCloud, usize), DatasetError> {
    let bytes = fs::read(path).map_err(|e| DatasetError::MalformedFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if bytes.len() % 16 != 0 {
        return Err(DatasetError::MalformedFile {
            path: path.to_path_buf(),
            reason: format!("length {} bytes is not a multiple of 16", bytes.len()),
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut dropped = 0usize;
    for record in bytes.chunks_exact(16) {
        let x = f32::from_le_bytes(record[0..4].try_into().unwrap()) as f64;
        let y = f32::from_le_bytes(record[4..8].try_into().unwrap()) as f64;
        let z = f32::from_le_bytes(record[8..12].try_into().unwrap()) as f64;
        if x.is_finite() && y.is_finite() && z.is_finite() {
            points.push(Point3::new(x, y, z));
        } else {
            dropped += 1;
        }
    }
    Ok((PointCloud::new(points, Frame::Lidar, sweep_index), dropped))
}

/// Writes a cloud in the binary scan layout with zero reflectance.
pub fn write_kitti_scan(path: &Path, cloud: &PointCloud) -> Result<(), DatasetError> {
    let mut bytes = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        bytes.extend_from_slice(&(p.x as f32).to_le_bytes());
        bytes.extend_from_slice(&(p.y as f32).to_le_bytes());
        bytes.extend_from_slice(&(p.z as f32).to_le_bytes());
        bytes.extend_from_slice(&0f32.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| DatasetError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Reads a pose file: one transform per nonempty line, twelve reals each.
/// Mildly non-orthonormal rotations are repaired; badly broken ones are
/// errors.
pub fn read_kitti_poses(path: &Path) -> Result<Vec<RigidTransform>, DatasetError> {
    let file = fs::File::open(path).map_err(|e| DatasetError::MalformedFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut poses = Vec::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DatasetError::MalformedFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split_whitespace()
            .map(|f| f.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| DatasetError::MalformedPose {
                path: path.to_path_buf(),
                line: line_no + 1,
                reason: e.to_string(),
            })?;
        if fields.len() != 12 {
            return Err(DatasetError::MalformedPose {
                path: path.to_path_buf(),
                line: line_no + 1,
                reason: format!("expected 12 fields, found {}", fields.len()),
            });
        }
        let rotation = nalgebra::Matrix3::new(
            fields[0], fields[1], fields[2], //
            fields[4], fields[5], fields[6], //
            fields[8], fields[9], fields[10],
        );
        let translation = nalgebra::Vector3::new(fields[3], fields[7], fields[11]);
        let mut pose = RigidTransform::from_parts(rotation, translation);
        let defect = pose.rotation_defect();
        if defect >= POSE_DEFECT_TOLERANCE {
            return Err(DatasetError::MalformedPose {
                path: path.to_path_buf(),
                line: line_no + 1,
                reason: format!("rotation defect {defect:.3e} exceeds {POSE_DEFECT_TOLERANCE}"),
            });
        }
        if defect > 0.0 {
            pose.orthonormalize();
        }
        poses.push(pose);
    }
    Ok(poses)
}

/// Trajectory file layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryFormat {
    /// Twelve reals per line, row-major 3x4 `[R|t]`.
    Kitti12,
    /// `timestamp tx ty tz qx qy qz qw` per line.
    Tum8,
}

/// Formats a pose as the twelve space-separated row-major values of its
/// 3x4 `[R|t]` matrix.
pub fn kitti_line(pose: &RigidTransform) -> String {
    let r = &pose.rotation;
    let t = &pose.translation;
    format!(
        "{} {} {} {} {} {} {} {} {} {} {} {}",
        r[(0, 0)],
        r[(0, 1)],
        r[(0, 2)],
        t.x,
        r[(1, 0)],
        r[(1, 1)],
        r[(1, 2)],
        t.y,
        r[(2, 0)],
        r[(2, 1)],
        r[(2, 2)],
        t.z
    )
}

/// Writes a trajectory; sweep indices become timestamps in the
/// timestamped format and are dropped in the twelve-real format.
pub fn write_trajectory(
    traj: &[(usize, RigidTransform)],
    path: &Path,
    format: TrajectoryFormat,
) -> Result<(), DatasetError> {
    let file = fs::File::create(path).map_err(|e| DatasetError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = BufWriter::new(file);
    let io_err = |e: std::io::Error| DatasetError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    for (index, pose) in traj {
        match format {
            TrajectoryFormat::Kitti12 => {
                writeln!(out, "{}", kitti_line(pose)).map_err(io_err)?;
            }
            TrajectoryFormat::Tum8 => {
                let t = &pose.translation;
                let q = nalgebra::UnitQuaternion::from_matrix(&pose.rotation);
                writeln!(
                    out,
                    "{} {} {} {} {} {} {} {}",
                    index, t.x, t.y, t.z, q.i, q.j, q.k, q.w
                )
                .map_err(io_err)?;
            }
        }
    }
    out.flush().map_err(io_err)
}

/// Map file layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapFormat {
    /// ASCII PCD with an x/y/z header.
    PcdAscii,
    /// Bare `x y z` rows.
    Xyz,
}

/// Writes an accumulated map. An empty map is an error rather than an
/// empty file.
pub fn write_map(points: &[Point3], path: &Path, format: MapFormat) -> Result<(), DatasetError> {
    if points.is_empty() {
        return Err(DatasetError::EmptyMap);
    }
    let file = fs::File::create(path).map_err(|e| DatasetError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = BufWriter::new(file);
    let io_err = |e: std::io::Error| DatasetError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    if format == MapFormat::PcdAscii {
        writeln!(out, "VERSION .7").map_err(io_err)?;
        writeln!(out, "FIELDS x y z").map_err(io_err)?;
        writeln!(out, "SIZE 4 4 4").map_err(io_err)?;
        writeln!(out, "TYPE F F F").map_err(io_err)?;
        writeln!(out, "COUNT 1 1 1").map_err(io_err)?;
        writeln!(out, "WIDTH {}", points.len()).map_err(io_err)?;
        writeln!(out, "HEIGHT 1").map_err(io_err)?;
        writeln!(out, "VIEWPOINT 0 0 0 1 0 0 0").map_err(io_err)?;
        writeln!(out, "POINTS {}", points.len()).map_err(io_err)?;
        writeln!(out, "DATA ascii").map_err(io_err)?;
    }
    for p in points {
        writeln!(out, "{} {} {}", p.x, p.y, p.z).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// An on-disk sweep sequence: scans under `root/velodyne/` (or `root/`
/// directly), optional `poses.txt` ground truth beside them.
#[derive(Debug, Clone)]
pub struct SweepSource {
    pub root: PathBuf,
    pub scan_paths: Vec<PathBuf>,
    pub poses: Option<Vec<RigidTransform>>,
    /// Axis convention of the scan coordinates.
    pub convention: FrameConvention,
    /// Sensor-to-ground-truth-body offset; identity when poses are already
    /// in the sensor frame.
    pub calibration: RigidTransform,
}

impl SweepSource {
    pub fn open(root: &Path) -> Result<Self, DatasetError> {
        let scan_dir = if root.join("velodyne").is_dir() {
            root.join("velodyne")
        } else {
            root.to_path_buf()
        };
        let mut scan_paths: Vec<PathBuf> = fs::read_dir(&scan_dir)
            .map_err(|e| DatasetError::MalformedFile {
                path: scan_dir.clone(),
                reason: e.to_string(),
            })?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "bin"))
            .collect();
        scan_paths.sort();
        if scan_paths.is_empty() {
            return Err(DatasetError::NoScans {
                path: scan_dir.clone(),
            });
        }
        let poses_path = root.join("poses.txt");
        let poses = if poses_path.is_file() {
            Some(read_kitti_poses(&poses_path)?)
        } else {
            None
        };
        Ok(Self {
            root: root.to_path_buf(),
            scan_paths,
            poses,
            convention: FrameConvention::FORWARD_LEFT_UP,
            calibration: RigidTransform::identity(),
        })
    }

    pub fn len(&self) -> usize {
        self.scan_paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scan_paths.is_empty()
    }

    /// Reads scan `index`; the cloud's sweep index is `index`.
    pub fn read(&self, index: usize) -> Result<(PointCloud, usize), DatasetError> {
        read_kitti_scan(&self.scan_paths[index], index)
    }
}
