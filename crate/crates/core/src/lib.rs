//! LiDAR odometry and mapping built from two registration stages: a coarse
//! planar alignment obtained by phase correlation of occupancy grids, refined
//! by point-to-plane ICP in the original sensor frame.
//!
//! The crate is organized along the processing path of a single sweep:
//! [`ground`] fits and removes the ground plane, [`objects`] discards small
//! isolated clusters, [`grid`] rasterizes the remainder into a log-odds
//! occupancy image, [`poc`] correlates consecutive images into a coarse yaw
//! and planar shift, and [`icp`] refines the full 6-DOF motion. [`pipeline`]
//! chains the stages over a sweep sequence and accumulates the trajectory and
//! map; [`dataset`] and [`evaluate`] handle on-disk formats and drift metrics.

pub mod dataset;
pub mod evaluate;
pub mod geometry;
pub mod grid;
pub mod ground;
pub mod icp;
pub mod objects;
pub mod pipeline;
pub mod poc;
pub mod seeding;
pub mod spatial;
pub mod synth;

pub use geometry::{Frame, FrameConvention, Point3, PointCloud, RigidTransform};
