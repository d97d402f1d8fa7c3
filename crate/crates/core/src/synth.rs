//! Synthetic LiDAR worlds with exact ground-truth trajectories.
//!
//! A [`World`] is a flat ground plane plus axis-aligned boxes. Sweeps are
//! produced by casting one ray per beam and azimuth step from a sensor pose
//! and keeping the nearest hit, which gives noise-free clouds (optionally
//! with seeded Gaussian range noise) whose true poses are known to machine
//! precision. Two stock scenes cover the common regression cases: a long
//! corridor with buttressed walls and a road that bends ninety degrees
//! between large buildings.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Frame, Point3, PointCloud, RigidTransform};
use crate::seeding;

/// Axis-aligned box, closed on all faces.
#[derive(Debug, Clone, Copy)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self {
            min: Point3::new(min[0], min[1], min[2]),
            max: Point3::new(max[0], max[1], max[2]),
        }
    }

    /// Horizontal footprint `(x span, y span)` in meters.
    pub fn footprint(&self) -> (f64, f64) {
        (self.max.x - self.min.x, self.max.y - self.min.y)
    }
}

/// Scene description: an infinite ground plane at `ground_z` plus boxes.
#[derive(Debug, Clone)]
pub struct World {
    pub ground_z: f64,
    pub boxes: Vec<Aabb>,
}

/// Elevation angles and azimuth sampling of a spinning scanner.
#[derive(Debug, Clone)]
pub struct BeamPattern {
    /// Elevation of each beam, radians, negative pointing down.
    pub elevations: Vec<f64>,
    /// Rays per revolution for every beam.
    pub azimuth_steps: usize,
}

impl BeamPattern {
    /// 64 beams spanning -24.9 to +2.0 degrees, automotive style.
    pub fn beams64() -> Self {
        let lo = (-24.9f64).to_radians();
        let hi = 2.0f64.to_radians();
        let elevations = (0..64)
            .map(|i| lo + (hi - lo) * i as f64 / 63.0)
            .collect();
        Self {
            elevations,
            azimuth_steps: 1000,
        }
    }

    /// 16 beams spanning -15 to +15 degrees, puck style.
    pub fn beams16() -> Self {
        let lo = (-15.0f64).to_radians();
        let hi = 15.0f64.to_radians();
        let elevations = (0..16)
            .map(|i| lo + (hi - lo) * i as f64 / 15.0)
            .collect();
        Self {
            elevations,
            azimuth_steps: 900,
        }
    }
}

/// Sweep synthesis options.
#[derive(Debug, Clone)]
pub struct SimOptions {
    /// Hits beyond this range are discarded, meters.
    pub max_range: f64,
    /// Standard deviation of additive range noise, meters; zero disables
    /// the noise path entirely.
    pub noise_sigma: f64,
    /// Base seed for the per-sweep noise streams.
    pub seed: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            max_range: 80.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

/// Height of the sensor above the ground in every stock scene, meters.
pub const SENSOR_HEIGHT: f64 = 1.73;

/// Smallest ray parameter accepted as a hit, filtering self-intersections.
const RAY_EPSILON: f64 = 1e-9;

fn ray_plane_z(origin: &Point3, dir: &nalgebra::Vector3<f64>, z: f64) -> Option<f64> {
    if dir.z.abs() < 1e-12 {
        return None;
    }
    let t = (z - origin.z) / dir.z;
    (t > RAY_EPSILON).then_some(t)
}

fn ray_aabb(origin: &Point3, dir: &nalgebra::Vector3<f64>, aabb: &Aabb) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for axis in 0..3 {
        let o = origin[axis];
        let d = dir[axis];
        let lo = aabb.min[axis];
        let hi = aabb.max[axis];
        if d.abs() < 1e-12 {
            if o < lo || o > hi {
                return None;
            }
            continue;
        }
        let mut ta = (lo - o) / d;
        let mut tb = (hi - o) / d;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    if t0 > RAY_EPSILON {
        Some(t0)
    } else if t1 > RAY_EPSILON {
        Some(t1)
    } else {
        None
    }
}

/// Casts one full revolution from `pose` (sensor frame: x forward, y left,
/// z up) and returns the hits in the sensor frame, beams outer, azimuth
/// inner, so the output order is reproducible.
pub fn simulate_sweep(
    world: &World,
    pose: &RigidTransform,
    pattern: &BeamPattern,
    opts: &SimOptions,
    sweep_index: usize,
) -> PointCloud {
    let mut rng = (opts.noise_sigma > 0.0)
        .then(|| ChaCha8Rng::seed_from_u64(seeding::derive(opts.seed, sweep_index as u64)));
    let origin = Point3::from(pose.translation);
    let inverse = pose.inverse();
    let mut points = Vec::new();
    for &el in &pattern.elevations {
        let (sin_el, cos_el) = el.sin_cos();
        for step in 0..pattern.azimuth_steps {
            let az = std::f64::consts::TAU * step as f64 / pattern.azimuth_steps as f64;
            let dir_sensor =
                nalgebra::Vector3::new(cos_el * az.cos(), cos_el * az.sin(), sin_el);
            let dir = pose.rotation * dir_sensor;
            let mut nearest = ray_plane_z(&origin, &dir, world.ground_z);
            for aabb in &world.boxes {
                if let Some(t) = ray_aabb(&origin, &dir, aabb) {
                    if nearest.is_none_or(|best| t < best) {
                        nearest = Some(t);
                    }
                }
            }
            let Some(mut range) = nearest else { continue };
            if let Some(rng) = rng.as_mut() {
                range += opts.noise_sigma * gaussian(rng);
            }
            if range <= 0.0 || range > opts.max_range {
                continue;
            }
            let hit = origin + dir * range;
            points.push(inverse.apply_point(&hit));
        }
    }
    PointCloud::new(points, Frame::Lidar, sweep_index)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller from two uniform draws.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn unit_interval(seed: u64, stream: u64) -> f64 {
    (seeding::derive(seed, stream) >> 11) as f64 / (1u64 << 53) as f64
}

/// Straight corridor along +x: walls at y = +/-8 capped at both ends, with
/// buttresses attached flush to alternating walls at irregular 4 to 10 m
/// intervals so the wall faces carry distinctive structure.
pub fn corridor_world(length: f64) -> World {
    let x0 = -10.0;
    let x1 = length + 10.0;
    let mut boxes = vec![
        Aabb::new([x0, 8.0, 0.0], [x1, 8.5, 4.0]),
        Aabb::new([x0, -8.5, 0.0], [x1, -8.0, 4.0]),
        Aabb::new([x1, -8.5, 0.0], [x1 + 0.5, 8.5, 4.0]),
        Aabb::new([x0 - 0.5, -8.5, 0.0], [x0, 8.5, 4.0]),
    ];
    let mut x = 2.0;
    let mut index = 0u64;
    while x + 2.0 < x1 - 2.0 {
        if index % 2 == 0 {
            boxes.push(Aabb::new([x, 7.0, 0.0], [x + 2.0, 8.0, 3.0]));
        } else {
            boxes.push(Aabb::new([x, -8.0, 0.0], [x + 2.0, -7.0, 3.0]));
        }
        x += 4.0 + 6.0 * unit_interval(0xC0881D08, index);
        index += 1;
    }
    World {
        ground_z: 0.0,
        boxes,
    }
}

/// Poses along the corridor axis: `step` meters forward per sweep, no yaw.
pub fn corridor_path(sweeps: usize, step: f64) -> Vec<RigidTransform> {
    (0..sweeps)
        .map(|i| {
            RigidTransform::from_translation(nalgebra::Vector3::new(
                i as f64 * step,
                0.0,
                SENSOR_HEIGHT,
            ))
        })
        .collect()
}

/// Radius of the quarter-turn connecting the two straights of the bend
/// scene, meters.
pub const BEND_RADIUS: f64 = 8.0;

/// Arc length along the bend path where the quarter turn begins.
pub const BEND_START: f64 = 30.0;

/// Road that runs 30 m along +x, turns left through a quarter circle of
/// radius [`BEND_RADIUS`], and continues along +y, flanked by buildings
/// whose footprints all exceed 10 m so the object filter keeps them.
///
/// The first leg's street walls carry buttresses like the corridor's: the
/// nearby building faces there run parallel to the road, and without relief
/// they leave both the correlation peak and the point-to-plane normals
/// blind along the travel direction.
pub fn bend_world() -> World {
    let mut boxes = vec![
        Aabb::new([-5.0, 6.0, 0.0], [15.0, 18.0, 7.0]),
        Aabb::new([-5.0, -18.0, 0.0], [20.0, -6.0, 6.0]),
        Aabb::new([12.0, 16.0, 0.0], [24.0, 30.0, 8.0]),
        Aabb::new([44.0, 10.0, 0.0], [58.0, 30.0, 7.0]),
        Aabb::new([34.0, -16.0, 0.0], [50.0, -4.0, 6.0]),
        Aabb::new([24.0, 34.0, 0.0], [38.0, 48.0, 7.0]),
        Aabb::new([52.0, -2.0, 0.0], [64.0, 8.0, 5.0]),
    ];
    let mut x = -2.0;
    let mut index = 0u64;
    while x + 2.0 < 15.0 {
        if index % 2 == 0 {
            boxes.push(Aabb::new([x, 5.0, 0.0], [x + 2.0, 6.0, 3.0]));
        } else {
            boxes.push(Aabb::new([x, -6.0, 0.0], [x + 2.0, -5.0, 3.0]));
        }
        x += 4.0 + 6.0 * unit_interval(0xBE4D1E55, index);
        index += 1;
    }
    World { ground_z: 0.0, boxes }
}

/// Poses along the bend path at `step` meters of arc length per sweep,
/// heading following the road tangent.
pub fn bend_path(sweeps: usize, step: f64) -> Vec<RigidTransform> {
    let arc = std::f64::consts::FRAC_PI_2 * BEND_RADIUS;
    let up = nalgebra::Vector3::z();
    (0..sweeps)
        .map(|i| {
            let s = i as f64 * step;
            let (x, y, yaw) = if s <= BEND_START {
                (s, 0.0, 0.0)
            } else if s <= BEND_START + arc {
                let phi = (s - BEND_START) / BEND_RADIUS;
                (
                    BEND_START + BEND_RADIUS * phi.sin(),
                    BEND_RADIUS * (1.0 - phi.cos()),
                    phi,
                )
            } else {
                (
                    BEND_START + BEND_RADIUS,
                    BEND_RADIUS + (s - BEND_START - arc),
                    std::f64::consts::FRAC_PI_2,
                )
            };
            RigidTransform::from_parts(
                RigidTransform::rotation_about(&up, yaw).rotation,
                nalgebra::Vector3::new(x, y, SENSOR_HEIGHT),
            )
        })
        .collect()
}
