//! Command-line front end: run odometry over a scan directory, evaluate a
//! trajectory against ground truth, register a single scan pair with debug
//! dumps, rasterize one scan, or synthesize a test sequence.
//!
//! Exit codes: 0 success, 1 data error, 2 usage error, 3 lost tracking.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lidar_odom::dataset::{
    kitti_line, read_kitti_poses, read_kitti_scan, write_kitti_scan, write_map,
    write_trajectory, MapFormat, SweepSource, TrajectoryFormat,
};
use lidar_odom::evaluate::{evaluate, timing_summary, DriftReport, DEFAULT_SEGMENT_LENGTHS};
use lidar_odom::geometry::{FrameConvention, PointCloud, RigidTransform};
use lidar_odom::grid::{rasterize, write_pgm, OccupancyGrid};
use lidar_odom::ground::{estimate_ground, rectification_for, split_ground, Plane};
use lidar_odom::icp::{estimate_normals, point_to_plane_icp, NormalCloud};
use lidar_odom::objects::remove_small_objects;
use lidar_odom::pipeline::{write_report_csv, Pipeline, PipelineConfig};
use lidar_odom::poc::{
    amplitude_spectrum, cross_power_surface, estimate_coarse, polar_map, rotate_image, window,
};
use lidar_odom::seeding;
use lidar_odom::synth::{
    bend_path, bend_world, corridor_path, corridor_world, simulate_sweep, BeamPattern,
    SimOptions,
};

/// Environment variable supplying the default `--data` directory.
const DATA_ROOT_ENV: &str = "LIDAR_ODOM_DATA_ROOT";

#[derive(Parser)]
#[command(
    name = "lidar-odom",
    version,
    about = "Two-stage LiDAR odometry: grid correlation refined by point-to-plane ICP"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run odometry over a directory of scans, writing trajectory, map, and
    /// a per-sweep report.
    Run(RunArgs),
    /// Score a trajectory against ground-truth poses.
    Eval(EvalArgs),
    /// Register one scan pair and dump correlation debug images.
    RegisterPair(RegisterPairArgs),
    /// Rasterize one scan into an occupancy-grid image.
    Rasterize(RasterizeArgs),
    /// Generate a synthetic scan sequence with ground-truth poses.
    Synth(SynthArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scan directory (KITTI layout: velodyne/*.bin or flat *.bin).
    /// Defaults to $LIDAR_ODOM_DATA_ROOT.
    #[arg(long)]
    data: Option<PathBuf>,
    /// TOML configuration file; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Process every s-th sweep.
    #[arg(long, value_name = "S")]
    skip: Option<usize>,
    /// Write the trajectory here (12 reals per line; .tum for timestamped).
    #[arg(long)]
    out_traj: Option<PathBuf>,
    /// Write the accumulated map here (.pcd or .xyz).
    #[arg(long)]
    out_map: Option<PathBuf>,
    /// Keep small isolated clusters instead of removing them.
    #[arg(long)]
    no_object_removal: bool,
    /// Seed for the per-sweep random streams.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the per-sweep report CSV here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Estimated trajectory (12 reals per line, or 8-field timestamped).
    #[arg(long)]
    traj: PathBuf,
    /// Ground-truth poses, one line per sweep index.
    #[arg(long)]
    truth: PathBuf,
    /// Segment lengths in meters: "100..800" (multiples of the start up to
    /// the end) or a comma list "100,200".
    #[arg(long)]
    segments: Option<String>,
    /// Sweep index stride of a 12-real trajectory (the run's --skip).
    #[arg(long, default_value_t = 1)]
    skip: usize,
    /// Write per-segment errors as CSV here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct RegisterPairArgs {
    /// Earlier scan; the printed transforms map scan B into its frame.
    #[arg(long)]
    a: PathBuf,
    /// Later scan.
    #[arg(long)]
    b: PathBuf,
    /// Directory for grid, spectrum, and correlation images.
    #[arg(long)]
    dump_dir: Option<PathBuf>,
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct RasterizeArgs {
    /// Scan to rasterize.
    #[arg(long)]
    scan: PathBuf,
    /// Output PGM image of cell occupancy probabilities.
    #[arg(long)]
    out: PathBuf,
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// World layout: "corridor" or "t-merge".
    #[arg(long)]
    world: String,
    /// Number of sweeps to generate.
    #[arg(long)]
    sweeps: usize,
    /// Forward motion per sweep, meters.
    #[arg(long, default_value_t = 0.5)]
    speed: f64,
    /// Output directory; scans land in velodyne/, truth in poses.txt.
    #[arg(long)]
    out: PathBuf,
    /// Beam pattern: 16 or 64.
    #[arg(long, default_value_t = 64)]
    beams: u32,
    /// Range noise standard deviation, meters.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Simulation seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// A failed invocation, carrying the process exit code.
enum Failure {
    Usage(String),
    Data(String),
    LostTracking,
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 1,
            Failure::LostTracking => 3,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Eval(args) => cmd_eval(args),
        Command::RegisterPair(args) => cmd_register_pair(args),
        Command::Rasterize(args) => cmd_rasterize(args),
        Command::Synth(args) => cmd_synth(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            match &failure {
                Failure::Usage(msg) => eprintln!("usage error: {msg}"),
                Failure::Data(msg) => eprintln!("error: {msg}"),
                Failure::LostTracking => eprintln!("lost tracking"),
            }
            ExitCode::from(failure.code())
        }
    }
}

fn data_err(err: impl std::fmt::Display) -> Failure {
    Failure::Data(err.to_string())
}

/// Loads the TOML config if given; malformed content is a usage error so
/// typos fail fast, an unreadable file is a data error.
fn load_config(path: &Option<PathBuf>) -> Result<PipelineConfig, Failure> {
    let Some(path) = path else {
        return Ok(PipelineConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Data(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text)
        .map_err(|e| Failure::Usage(format!("invalid config {}: {e}", path.display())))
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let data = args
        .data
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .ok_or_else(|| {
            Failure::Usage(format!("pass --data <dir> or set {DATA_ROOT_ENV}"))
        })?;
    let mut config = load_config(&args.config)?;
    if let Some(skip) = args.skip {
        config.frame_skip = skip;
    }
    if args.no_object_removal {
        config.enable_object_removal = false;
    }
    if let Some(seed) = args.seed {
        config.rng_seed = seed;
    }

    let source = SweepSource::open(&data).map_err(data_err)?;
    let skip = config.frame_skip;
    let mut pipeline = Pipeline::new(config).map_err(|e| Failure::Usage(e.to_string()))?;
    let total = source.len();
    eprintln!("run: {total} scans under {}", data.display());
    for index in 0..total {
        if index % skip != 0 {
            continue;
        }
        let (cloud, dropped) = source.read(index).map_err(data_err)?;
        let row = pipeline
            .process_sweep(&cloud, index, dropped)
            .map_err(data_err)?;
        if (index / skip) % 10 == 0 || index + skip >= total {
            let t = row.pose.translation;
            eprintln!(
                "sweep {index}/{total}: pose ({:.2}, {:.2}, {:.2}) m, {:.0} ms{}",
                t.x,
                t.y,
                t.z,
                row.cycle_ms,
                if row.degraded { " [degraded]" } else { "" }
            );
        }
    }

    let rows = pipeline.rows();
    let degraded = rows.iter().filter(|r| r.degraded).count();
    let cycles: Vec<f64> = rows.iter().map(|r| r.cycle_ms).collect();
    let (mean_ms, p95_ms) = timing_summary(&cycles);
    eprintln!(
        "processed {} sweeps ({degraded} degraded), cycle mean {mean_ms:.1} ms, p95 {p95_ms:.1} ms",
        rows.len()
    );

    if let Some(path) = &args.report {
        write_report_csv(rows, pipeline.config(), path).map_err(data_err)?;
        eprintln!("report: {}", path.display());
    }
    let output = pipeline.finish();
    if let Some(path) = &args.out_traj {
        let format = match path.extension().and_then(|e| e.to_str()) {
            Some("tum") => TrajectoryFormat::Tum8,
            _ => TrajectoryFormat::Kitti12,
        };
        write_trajectory(&output.trajectory, path, format).map_err(data_err)?;
        eprintln!("trajectory: {}", path.display());
    }
    if let Some(path) = &args.out_map {
        let format = match path.extension().and_then(|e| e.to_str()) {
            Some("xyz") => MapFormat::Xyz,
            _ => MapFormat::PcdAscii,
        };
        write_map(&output.map, path, format).map_err(data_err)?;
        eprintln!("map: {} ({} points)", path.display(), output.map.len());
    }
    Ok(())
}

/// Parses "100..800" (multiples of the start value up to the end,
/// inclusive) or a comma list "100,200,300".
fn parse_segments(text: &str) -> Result<Vec<f64>, Failure> {
    let bad = |reason: &str| {
        Failure::Usage(format!("invalid --segments \"{text}\": {reason}"))
    };
    if let Some((start, end)) = text.split_once("..") {
        let start: f64 = start.trim().parse().map_err(|_| bad("range start"))?;
        let end: f64 = end.trim().parse().map_err(|_| bad("range end"))?;
        if !(start > 0.0) || end < start {
            return Err(bad("range must satisfy 0 < start <= end"));
        }
        let mut lengths = Vec::new();
        let mut k = 1.0;
        while start * k <= end + 1e-9 {
            lengths.push(start * k);
            k += 1.0;
        }
        return Ok(lengths);
    }
    let lengths: Result<Vec<f64>, _> =
        text.split(',').map(|part| part.trim().parse::<f64>()).collect();
    let lengths = lengths.map_err(|_| bad("expected numbers"))?;
    if lengths.is_empty() || lengths.iter().any(|&l| !(l > 0.0)) {
        return Err(bad("lengths must be positive"));
    }
    Ok(lengths)
}

/// Reads an estimated trajectory. Twelve-field lines are poses indexed by
/// line number times `skip`; eight-field lines carry their sweep index in
/// the first column.
fn read_estimate(path: &Path, skip: usize) -> Result<Vec<(usize, RigidTransform)>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Data(format!("cannot read {}: {e}", path.display())))?;
    let first_fields = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().count())
        .ok_or_else(|| Failure::Data(format!("{} is empty", path.display())))?;
    match first_fields {
        12 => {
            let poses = read_kitti_poses(path).map_err(data_err)?;
            Ok(poses
                .into_iter()
                .enumerate()
                .map(|(line, pose)| (line * skip, pose))
                .collect())
        }
        8 => {
            let mut traj = Vec::new();
            for (number, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let fields: Vec<&str> = line.split_whitespace().collect();
                if fields.len() != 8 {
                    return Err(Failure::Data(format!(
                        "{} line {}: expected 8 fields, found {}",
                        path.display(),
                        number + 1,
                        fields.len()
                    )));
                }
                let parse = |s: &str| -> Result<f64, Failure> {
                    s.parse().map_err(|_| {
                        Failure::Data(format!(
                            "{} line {}: bad number {s:?}",
                            path.display(),
                            number + 1
                        ))
                    })
                };
                let index = parse(fields[0])? as usize;
                let t = nalgebra::Vector3::new(
                    parse(fields[1])?,
                    parse(fields[2])?,
                    parse(fields[3])?,
                );
                let q = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                    parse(fields[7])?,
                    parse(fields[4])?,
                    parse(fields[5])?,
                    parse(fields[6])?,
                ));
                traj.push((
                    index,
                    RigidTransform::from_parts(*q.to_rotation_matrix().matrix(), t),
                ));
            }
            Ok(traj)
        }
        other => Err(Failure::Data(format!(
            "{}: lines carry {other} fields, expected 12 or 8",
            path.display()
        ))),
    }
}

fn print_drift_summary(report: &DriftReport) {
    println!("segments evaluated: {}", report.segments.len());
    println!(
        "translational drift: {:.4} % per segment length",
        report.percent_error_per_100m
    );
    println!(
        "rotational drift:    {:.4} deg per 100 m",
        report.rotation_deg_per_100m
    );
    println!(
        "lost tracking:       {}",
        if report.lost_tracking { "yes" } else { "no" }
    );
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    if args.skip < 1 {
        return Err(Failure::Usage("--skip must be at least 1".into()));
    }
    let traj = read_estimate(&args.traj, args.skip)?;
    let truth = read_kitti_poses(&args.truth).map_err(data_err)?;
    let segments = match &args.segments {
        Some(text) => parse_segments(text)?,
        None => DEFAULT_SEGMENT_LENGTHS.to_vec(),
    };
    let report = evaluate(&traj, &truth, &segments).map_err(data_err)?;
    print_drift_summary(&report);
    if let Some(path) = &args.report {
        let mut csv = String::from("start_index,length_m,translation_percent,rotation_deg_per_100m\n");
        for seg in &report.segments {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                seg.start_index, seg.length_m, seg.translation_percent, seg.rotation_deg_per_100m
            ));
        }
        std::fs::write(path, csv).map_err(data_err)?;
        eprintln!("per-segment report: {}", path.display());
    }
    if report.lost_tracking {
        return Err(Failure::LostTracking);
    }
    Ok(())
}

/// Per-scan products of the matching front half of the pipeline.
struct PreparedScan {
    filtered: PointCloud,
    normals: NormalCloud,
    grid: OccupancyGrid,
    rectification: RigidTransform,
    plane: Plane,
}

fn prepare_scan(
    cloud: &PointCloud,
    sweep_index: usize,
    config: &PipelineConfig,
    conv: &FrameConvention,
) -> Result<PreparedScan, Failure> {
    let seed = seeding::derive(config.rng_seed, sweep_index as u64);
    let plane = estimate_ground(cloud, &config.ransac, conv, seed).map_err(data_err)?;
    let filtered = if config.enable_object_removal {
        remove_small_objects(cloud, &plane, &config.cluster, config.ground_threshold, conv)
            .map_err(data_err)?
    } else {
        cloud.clone()
    };
    let rectification = rectification_for(&plane, conv).map_err(data_err)?;
    let subset = if config.grid.include_ground {
        filtered.clone()
    } else {
        split_ground(&filtered, &plane, config.ground_threshold).1
    };
    let rectified = PointCloud::new(
        subset.points.iter().map(|p| rectification.apply_point(p)).collect(),
        subset.frame,
        sweep_index,
    );
    let grid = rasterize(&rectified, &config.grid, conv).map_err(data_err)?;
    let normals = estimate_normals(&filtered, config.icp.normal_neighbors);
    Ok(PreparedScan { filtered, normals, grid, rectification, plane })
}

/// Writes `values` as a PGM after scaling so the largest value is white.
fn dump_normalized(values: &[f64], n: usize, path: &Path) -> Result<(), Failure> {
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 1.0 };
    let scaled: Vec<f64> = values.iter().map(|v| v * scale).collect();
    write_pgm(&scaled, n, path).map_err(data_err)
}

fn cmd_register_pair(args: RegisterPairArgs) -> Result<(), Failure> {
    let config = load_config(&args.config)?;
    let conv = config.frame_convention.convention();
    let (cloud_a, _) = read_kitti_scan(&args.a, 0).map_err(data_err)?;
    let (cloud_b, _) = read_kitti_scan(&args.b, 1).map_err(data_err)?;
    let a = prepare_scan(&cloud_a, 0, &config, &conv)?;
    let b = prepare_scan(&cloud_b, 1, &config, &conv)?;
    eprintln!(
        "scan A: {} points ({} after filtering), ground normal {:?}",
        cloud_a.points.len(),
        a.filtered.points.len(),
        a.plane.normal.as_slice()
    );
    eprintln!(
        "scan B: {} points ({} after filtering), ground normal {:?}",
        cloud_b.points.len(),
        b.filtered.points.len(),
        b.plane.normal.as_slice()
    );

    let coarse = estimate_coarse(&a.grid, &b.grid, &conv);
    let conjugated = a
        .rectification
        .inverse()
        .compose(&coarse.transform)
        .compose(&b.rectification);
    println!(
        "coarse: yaw {:.3} deg, shift ({:.3}, {:.3}) px, confidence {:.3}{}",
        coarse.theta.to_degrees(),
        coarse.pixel_shift[0],
        coarse.pixel_shift[1],
        coarse.confidence,
        if coarse.low_confidence { " (low)" } else { "" }
    );
    println!("coarse transform:  {}", kitti_line(&conjugated));

    let implausible_yaw = coarse.theta.to_degrees().abs() > config.max_coarse_yaw_deg;
    let init = if coarse.low_confidence || implausible_yaw {
        RigidTransform::identity()
    } else {
        conjugated
    };
    if implausible_yaw {
        eprintln!(
            "coarse yaw exceeds the {} deg budget; ICP starts from identity",
            config.max_coarse_yaw_deg
        );
    }
    match point_to_plane_icp(&b.filtered, &a.normals, &init, &config.icp) {
        Ok(icp) => {
            println!("refined transform: {}", kitti_line(&icp.transform));
            println!(
                "icp: rmse {:.4} m over {} pairs, {} iterations{}",
                icp.final_rmse,
                icp.correspondence_count,
                icp.iterations_used,
                if icp.converged { "" } else { " (not converged)" }
            );
        }
        Err(err) => {
            println!("refined transform: unavailable ({err}); coarse stands alone");
        }
    }

    if let Some(dir) = &args.dump_dir {
        std::fs::create_dir_all(dir).map_err(data_err)?;
        let n = a.grid.params.n;
        let prob_a = a.grid.to_probability();
        let prob_b = b.grid.to_probability();
        write_pgm(&prob_a, n, &dir.join("grid_a.pgm")).map_err(data_err)?;
        write_pgm(&prob_b, n, &dir.join("grid_b.pgm")).map_err(data_err)?;
        let win_a = window(&prob_a, n);
        let win_b = window(&prob_b, n);
        let amp_a = amplitude_spectrum(&win_a, n);
        let amp_b = amplitude_spectrum(&win_b, n);
        let log_amp = |amp: &[f64]| -> Vec<f64> {
            amp.iter().map(|v| (1.0 + v).ln()).collect()
        };
        dump_normalized(&log_amp(&amp_a), n, &dir.join("amplitude_a.pgm"))?;
        dump_normalized(&log_amp(&amp_b), n, &dir.join("amplitude_b.pgm"))?;
        dump_normalized(&polar_map(&amp_a, n), n, &dir.join("polar_a.pgm"))?;
        dump_normalized(&polar_map(&amp_b, n), n, &dir.join("polar_b.pgm"))?;
        let derotated = rotate_image(&prob_b, n, -coarse.theta);
        let surface = cross_power_surface(&win_a, &window(&derotated, n), n);
        dump_normalized(&surface, n, &dir.join("correlation.pgm"))?;
        eprintln!("debug images in {}", dir.display());
    }
    Ok(())
}

fn cmd_rasterize(args: RasterizeArgs) -> Result<(), Failure> {
    let config = load_config(&args.config)?;
    let conv = config.frame_convention.convention();
    let (cloud, _) = read_kitti_scan(&args.scan, 0).map_err(data_err)?;
    let prepared = prepare_scan(&cloud, 0, &config, &conv)?;
    let n = prepared.grid.params.n;
    write_pgm(&prepared.grid.to_probability(), n, &args.out).map_err(data_err)?;
    eprintln!(
        "rasterized {} points into {n}x{n} cells: {}",
        cloud.points.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), Failure> {
    if args.sweeps == 0 {
        return Err(Failure::Usage("--sweeps must be positive".into()));
    }
    if !(args.speed > 0.0) {
        return Err(Failure::Usage("--speed must be positive".into()));
    }
    let (world, path) = match args.world.as_str() {
        "corridor" => (
            corridor_world(args.sweeps as f64 * args.speed),
            corridor_path(args.sweeps, args.speed),
        ),
        "t-merge" => (bend_world(), bend_path(args.sweeps, args.speed)),
        other => {
            return Err(Failure::Usage(format!(
                "unknown world {other:?}; expected corridor or t-merge"
            )))
        }
    };
    let pattern = match args.beams {
        16 => BeamPattern::beams16(),
        64 => BeamPattern::beams64(),
        other => {
            return Err(Failure::Usage(format!(
                "unsupported beam count {other}; expected 16 or 64"
            )))
        }
    };
    let opts = SimOptions {
        noise_sigma: args.noise,
        seed: args.seed,
        ..SimOptions::default()
    };

    let scan_dir = args.out.join("velodyne");
    std::fs::create_dir_all(&scan_dir).map_err(data_err)?;
    let mut poses = String::new();
    for (index, pose) in path.iter().enumerate() {
        let cloud = simulate_sweep(&world, pose, &pattern, &opts, index);
        let scan_path = scan_dir.join(format!("{index:06}.bin"));
        write_kitti_scan(&scan_path, &cloud).map_err(data_err)?;
        poses.push_str(&kitti_line(pose));
        poses.push('\n');
        if index % 20 == 0 || index + 1 == path.len() {
            eprintln!("sweep {index}: {} points", cloud.points.len());
        }
    }
    std::fs::write(args.out.join("poses.txt"), poses).map_err(data_err)?;
    eprintln!(
        "{} sweeps in {} (world {})",
        path.len(),
        args.out.display(),
        args.world
    );
    Ok(())
}
