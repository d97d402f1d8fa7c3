//! Per-sweep orchestration: ground removal, object filtering, grid
//! correlation, ICP refinement, pose accumulation, and map building, with
//! cross-sweep state and a per-sweep run report.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    FrameConvention, Point3, PointCloud, RigidTransform, ORTHONORMALIZE_EVERY,
};
use crate::grid::{rasterize, GridError, GridParams, OccupancyGrid};
use crate::ground::{
    estimate_ground, rectification_for, split_ground, GroundError, RansacParams,
};
use crate::icp::{estimate_normals, point_to_plane_icp, IcpParams, NormalCloud};
use crate::objects::{remove_small_objects, ClusterParams, ObjectError};
use crate::poc::estimate_coarse;
use crate::seeding;
use crate::spatial::VoxelSet;

/// Named frame conventions selectable from configuration files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConventionName {
    #[default]
    ForwardLeftUp,
    LeftUpForward,
}

impl ConventionName {
    pub fn convention(self) -> FrameConvention {
        match self {
            ConventionName::ForwardLeftUp => FrameConvention::FORWARD_LEFT_UP,
            ConventionName::LeftUpForward => FrameConvention::LEFT_UP_FORWARD,
        }
    }
}

/// Everything the per-sweep flow needs, grouped per stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub ransac: RansacParams,
    pub cluster: ClusterParams,
    pub grid: GridParams,
    pub icp: IcpParams,
    /// Process every `frame_skip`-th sweep (1 keeps them all).
    pub frame_skip: usize,
    /// Map deduplication voxel side, meters; 0 keeps every point.
    pub map_voxel: f64,
    pub enable_object_removal: bool,
    /// Band half-width around the ground plane treated as ground, meters.
    pub ground_threshold: f64,
    /// Largest believable sweep-to-sweep yaw, degrees. A coarse estimate
    /// beyond it (such as a mis-resolved half-turn in a near-symmetric
    /// scene) is distrusted like a low-confidence one.
    pub max_coarse_yaw_deg: f64,
    pub rng_seed: u64,
    pub frame_convention: ConventionName,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            ransac: RansacParams::default(),
            cluster: ClusterParams::default(),
            grid: GridParams::default(),
            icp: IcpParams::default(),
            frame_skip: 1,
            map_voxel: 0.2,
            enable_object_removal: true,
            ground_threshold: 0.2,
            max_coarse_yaw_deg: 90.0,
            rng_seed: 0,
            frame_convention: ConventionName::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {reason}")]
    InvalidConfig { reason: String },
    #[error("sweep {sweep_index} is empty")]
    EmptySweep { sweep_index: usize },
    #[error("sweep {sweep_index}: ground estimation failed: {source}")]
    Ground {
        sweep_index: usize,
        source: GroundError,
    },
    #[error("sweep {sweep_index}: object removal failed: {source}")]
    Objects {
        sweep_index: usize,
        source: ObjectError,
    },
    #[error("sweep {sweep_index}: rasterization failed: {source}")]
    Grid {
        sweep_index: usize,
        source: GridError,
    },
}

/// One processed sweep in the run report.
#[derive(Debug, Clone)]
pub struct RunRow {
    pub sweep_index: usize,
    /// Absolute pose of this sweep in the world frame.
    pub pose: RigidTransform,
    /// Relative motion composed onto the previous pose (identity for the
    /// first sweep).
    pub relative: RigidTransform,
    pub coarse_confidence: Option<f64>,
    pub coarse_low_confidence: bool,
    pub icp_rmse: Option<f64>,
    pub icp_iterations: Option<usize>,
    /// Coarse alignment was distrusted, so ICP started from identity.
    pub used_coarse_fallback: bool,
    /// ICP failed, so the coarse transform stood alone.
    pub used_icp_fallback: bool,
    /// Both stages failed; the last relative motion was replayed.
    pub used_constant_velocity: bool,
    pub degraded: bool,
    /// Non-finite points dropped while reading this sweep.
    pub dropped_points: usize,
    pub cycle_ms: f64,
    /// Per-sweep error that triggered a fallback, if any.
    pub error: Option<String>,
}

/// Accumulates world-frame points with first-wins voxel deduplication.
/// A non-positive voxel keeps every point.
#[derive(Debug)]
pub struct MapBuilder {
    seen: Option<VoxelSet>,
    points: Vec<Point3>,
}

impl MapBuilder {
    pub fn new(voxel: f64) -> Self {
        let seen = (voxel > 0.0).then(|| VoxelSet::new(voxel));
        Self { seen, points: Vec::new() }
    }

    pub fn insert(&mut self, cloud_world: impl IntoIterator<Item = Point3>) {
        match &mut self.seen {
            Some(seen) => {
                for p in cloud_world {
                    if seen.insert(&p) {
                        self.points.push(p);
                    }
                }
            }
            None => self.points.extend(cloud_world),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }
}

/// Everything retained from the last processed sweep for matching against
/// the next one.
struct PrevSweep {
    normals: NormalCloud,
    grid: OccupancyGrid,
    rectification: RigidTransform,
}

struct Prepared {
    filtered: PointCloud,
    normals: NormalCloud,
    grid: OccupancyGrid,
    rectification: RigidTransform,
}

/// Output of a whole run.
#[derive(Debug)]
pub struct RunOutput {
    pub trajectory: Vec<(usize, RigidTransform)>,
    pub map: Vec<Point3>,
    pub rows: Vec<RunRow>,
}

/// Sequential sweep processor owning all cross-sweep state.
pub struct Pipeline {
    config: PipelineConfig,
    conv: FrameConvention,
    prev: Option<PrevSweep>,
    pose: RigidTransform,
    compositions: usize,
    trajectory: Vec<(usize, RigidTransform)>,
    map: MapBuilder,
    last_rel: RigidTransform,
    rows: Vec<RunRow>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        if config.frame_skip < 1 {
            return Err(PipelineError::InvalidConfig {
                reason: "frame_skip must be at least 1".into(),
            });
        }
        if !(config.map_voxel >= 0.0) {
            return Err(PipelineError::InvalidConfig {
                reason: "map_voxel must be non-negative".into(),
            });
        }
        if !(config.max_coarse_yaw_deg > 0.0) {
            return Err(PipelineError::InvalidConfig {
                reason: "max_coarse_yaw_deg must be positive".into(),
            });
        }
        let conv = config.frame_convention.convention();
        let map = MapBuilder::new(config.map_voxel);
        Ok(Self {
            config,
            conv,
            prev: None,
            pose: RigidTransform::identity(),
            compositions: 0,
            trajectory: Vec::new(),
            map,
            last_rel: RigidTransform::identity(),
            rows: Vec::new(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn trajectory(&self) -> &[(usize, RigidTransform)] {
        &self.trajectory
    }

    pub fn rows(&self) -> &[RunRow] {
        &self.rows
    }

    pub fn map(&self) -> &MapBuilder {
        &self.map
    }

    pub fn pose(&self) -> RigidTransform {
        self.pose
    }

    /// Runs one sweep through ground fitting, object filtering,
    /// rectification, rasterization, and normal estimation.
    fn prepare(&self, cloud: &PointCloud, sweep_index: usize) -> Result<Prepared, PipelineError> {
        if cloud.points.is_empty() {
            return Err(PipelineError::EmptySweep { sweep_index });
        }
        let seed = seeding::derive(self.config.rng_seed, sweep_index as u64);
        let plane = estimate_ground(cloud, &self.config.ransac, &self.conv, seed)
            .map_err(|source| PipelineError::Ground { sweep_index, source })?;
        let filtered = if self.config.enable_object_removal {
            remove_small_objects(
                cloud,
                &plane,
                &self.config.cluster,
                self.config.ground_threshold,
                &self.conv,
            )
            .map_err(|source| PipelineError::Objects { sweep_index, source })?
        } else {
            cloud.clone()
        };
        let rectification = rectification_for(&plane, &self.conv)
            .map_err(|source| PipelineError::Ground { sweep_index, source })?;
        let raster_subset = if self.config.grid.include_ground {
            &filtered
        } else {
            &split_ground(&filtered, &plane, self.config.ground_threshold).1
        };
        let rectified = PointCloud::new(
            raster_subset
                .points
                .iter()
                .map(|p| rectification.apply_point(p))
                .collect(),
            raster_subset.frame,
            sweep_index,
        );
        let grid = rasterize(&rectified, &self.config.grid, &self.conv)
            .map_err(|source| PipelineError::Grid { sweep_index, source })?;
        let normals = estimate_normals(&filtered, self.config.icp.normal_neighbors);
        Ok(Prepared { filtered, normals, grid, rectification })
    }

    fn push_pose(&mut self, sweep_index: usize, relative: &RigidTransform) {
        self.pose = self.pose.compose(relative);
        self.compositions += 1;
        if self.compositions % ORTHONORMALIZE_EVERY == 0 {
            self.pose.orthonormalize();
        }
        self.trajectory.push((sweep_index, self.pose));
    }

    /// Processes one sweep and appends its report row. A failure on the
    /// first sweep is fatal because no cross-sweep state exists yet; later
    /// failures fall back to replaying the last relative motion and mark
    /// the row degraded without touching the matching state.
    pub fn process_sweep(
        &mut self,
        cloud: &PointCloud,
        sweep_index: usize,
        dropped_points: usize,
    ) -> Result<&RunRow, PipelineError> {
        let started = Instant::now();
        if self.prev.is_none() {
            let prepared = self.prepare(cloud, sweep_index)?;
            self.pose = RigidTransform::identity();
            self.trajectory.push((sweep_index, self.pose));
            self.map
                .insert(prepared.filtered.points.iter().cloned());
            self.prev = Some(PrevSweep {
                normals: prepared.normals,
                grid: prepared.grid,
                rectification: prepared.rectification,
            });
            self.rows.push(RunRow {
                sweep_index,
                pose: self.pose,
                relative: RigidTransform::identity(),
                coarse_confidence: None,
                coarse_low_confidence: false,
                icp_rmse: None,
                icp_iterations: None,
                used_coarse_fallback: false,
                used_icp_fallback: false,
                used_constant_velocity: false,
                degraded: false,
                dropped_points,
                cycle_ms: started.elapsed().as_secs_f64() * 1e3,
                error: None,
            });
            return Ok(self.rows.last().unwrap());
        }

        let prepared = match self.prepare(cloud, sweep_index) {
            Ok(prepared) => prepared,
            Err(err) => {
                let relative = self.last_rel;
                self.push_pose(sweep_index, &relative);
                self.rows.push(RunRow {
                    sweep_index,
                    pose: self.pose,
                    relative,
                    coarse_confidence: None,
                    coarse_low_confidence: false,
                    icp_rmse: None,
                    icp_iterations: None,
                    used_coarse_fallback: false,
                    used_icp_fallback: false,
                    used_constant_velocity: true,
                    degraded: true,
                    dropped_points,
                    cycle_ms: started.elapsed().as_secs_f64() * 1e3,
                    error: Some(err.to_string()),
                });
                return Ok(self.rows.last().unwrap());
            }
        };

        let prev = self.prev.as_ref().unwrap();
        let coarse = estimate_coarse(&prev.grid, &prepared.grid, &self.conv);
        let conjugated = prev
            .rectification
            .inverse()
            .compose(&coarse.transform)
            .compose(&prepared.rectification);
        let implausible_yaw =
            coarse.theta.to_degrees().abs() > self.config.max_coarse_yaw_deg;
        let used_coarse_fallback = coarse.low_confidence || implausible_yaw;
        let init = if used_coarse_fallback {
            RigidTransform::identity()
        } else {
            conjugated
        };
        let icp = point_to_plane_icp(&prepared.filtered, &prev.normals, &init, &self.config.icp);
        let (relative, icp_rmse, icp_iterations, used_icp_fallback, used_constant_velocity, error) =
            match icp {
                Ok(result) => (
                    result.transform,
                    Some(result.final_rmse),
                    Some(result.iterations_used),
                    false,
                    false,
                    None,
                ),
                Err(err) if used_coarse_fallback => {
                    (self.last_rel, None, None, true, true, Some(err.to_string()))
                }
                Err(err) => (conjugated, None, None, true, false, Some(err.to_string())),
            };
        let degraded = used_icp_fallback || used_constant_velocity;

        self.push_pose(sweep_index, &relative);
        let world: Vec<Point3> = prepared
            .filtered
            .points
            .iter()
            .map(|p| self.pose.apply_point(p))
            .collect();
        self.map.insert(world);
        self.last_rel = relative;
        self.prev = Some(PrevSweep {
            normals: prepared.normals,
            grid: prepared.grid,
            rectification: prepared.rectification,
        });
        self.rows.push(RunRow {
            sweep_index,
            pose: self.pose,
            relative,
            coarse_confidence: Some(coarse.confidence),
            coarse_low_confidence: coarse.low_confidence,
            icp_rmse,
            icp_iterations,
            used_coarse_fallback,
            used_icp_fallback,
            used_constant_velocity,
            degraded,
            dropped_points,
            cycle_ms: started.elapsed().as_secs_f64() * 1e3,
            error,
        });
        Ok(self.rows.last().unwrap())
    }

    pub fn finish(self) -> RunOutput {
        RunOutput {
            trajectory: self.trajectory,
            map: self.map.into_points(),
            rows: self.rows,
        }
    }
}

/// Folds [`Pipeline::process_sweep`] over a sweep sequence, retaining every
/// `frame_skip`-th sweep by enumeration index.
pub fn run_sequence(
    sweeps: impl IntoIterator<Item = PointCloud>,
    config: &PipelineConfig,
) -> Result<RunOutput, PipelineError> {
    let mut pipeline = Pipeline::new(config.clone())?;
    for (index, cloud) in sweeps.into_iter().enumerate() {
        if index % config.frame_skip != 0 {
            continue;
        }
        pipeline.process_sweep(&cloud, index, 0)?;
    }
    Ok(pipeline.finish())
}

fn csv_field_opt_f64(value: Option<f64>) -> String {
    value.map(|v| format!("{v}")).unwrap_or_default()
}

fn csv_field_error(error: &Option<String>) -> String {
    match error {
        Some(text) => format!("\"{}\"", text.replace('"', "\"\"")),
        None => String::new(),
    }
}

/// Writes the run report as CSV, preceded by the configuration echoed as
/// `# `-prefixed TOML lines. Poses are twelve row-major values of the 3x4
/// matrix.
pub fn write_report_csv(
    rows: &[RunRow],
    config: &PipelineConfig,
    path: &Path,
) -> std::io::Result<()> {
    let mut file = std::fs::File::create(path)?;
    let echo = toml::to_string(config)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    for line in echo.lines() {
        writeln!(file, "# {line}")?;
    }
    writeln!(
        file,
        "sweep_index,pose,coarse_confidence,coarse_low_confidence,icp_rmse,icp_iterations,\
         used_coarse_fallback,used_icp_fallback,used_constant_velocity,degraded,\
         dropped_points,cycle_ms,error"
    )?;
    for row in rows {
        let pose = crate::dataset::kitti_line(&row.pose).replace(' ', ";");
        writeln!(
            file,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            row.sweep_index,
            pose,
            csv_field_opt_f64(row.coarse_confidence),
            row.coarse_low_confidence,
            csv_field_opt_f64(row.icp_rmse),
            row.icp_iterations.map(|v| v.to_string()).unwrap_or_default(),
            row.used_coarse_fallback,
            row.used_icp_fallback,
            row.used_constant_velocity,
            row.degraded,
            row.dropped_points,
            row.cycle_ms,
            csv_field_error(&row.error),
        )?;
    }
    Ok(())
}
