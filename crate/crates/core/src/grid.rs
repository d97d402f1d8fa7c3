//! Log-odds occupancy grids over the horizontal plane of a rectified sweep.
//!
//! Each sweep rasterizes into an `n x n` image centered on the sensor: the
//! column axis follows the left direction, the row axis the forward
//! direction, and every in-footprint point adds `l_occupied` to its cell.
//! Probability images derived from the log odds feed the correlation stage.

use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::geometry::{FrameConvention, PointCloud};

/// Mapping from accumulated log odds `l` to occupancy probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbabilityModel {
    /// `p = 1 - exp(-l)`, clamped to `[0, 1)`. An empty cell maps to 0.
    ExpComplement,
    /// `p = 1 / (1 + exp(-l))`. An empty cell maps to 0.5.
    Logistic,
}

/// Rasterization controls.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridParams {
    /// Image side length in pixels.
    pub n: usize,
    /// Meters per pixel.
    pub resolution: f64,
    /// Log-odds increment per point hit.
    pub l_occupied: f64,
    /// Log odds of an untouched cell.
    pub l_prior: f64,
    /// Carried-over log odds from earlier sweeps; zero keeps grids per-sweep.
    pub l_past: f64,
    pub probability_model: ProbabilityModel,
    /// When false the pipeline rasterizes only non-ground points.
    pub include_ground: bool,
}

impl Default for GridParams {
    fn default() -> Self {
        Self {
            n: 512,
            resolution: 0.3,
            l_occupied: std::f64::consts::LN_2,
            l_prior: 0.0,
            l_past: 0.0,
            probability_model: ProbabilityModel::ExpComplement,
            include_ground: false,
        }
    }
}

impl GridParams {
    /// Center pixel index along either axis; the sensor origin maps here.
    pub fn center(&self) -> i64 {
        (self.n / 2) as i64
    }

    /// `(row, col)` cell for a point, or None when it falls off the image.
    pub fn pixel_of(&self, p: &crate::geometry::Point3, conv: &FrameConvention) -> Option<(usize, usize)> {
        let row = (conv.forward_of(p) / self.resolution).round() as i64 + self.center();
        let col = (conv.left_of(p) / self.resolution).round() as i64 + self.center();
        if row < 0 || col < 0 || row >= self.n as i64 || col >= self.n as i64 {
            return None;
        }
        Some((row as usize, col as usize))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("no point fell inside the {n}x{n} grid footprint")]
    EmptyGrid { n: usize },
}

/// A rasterized sweep: row-major log odds plus the parameters that built it.
#[derive(Debug, Clone)]
pub struct OccupancyGrid {
    pub log_odds: Vec<f64>,
    pub params: GridParams,
    pub sweep_index: usize,
    /// Points that landed inside the footprint.
    pub hit_count: usize,
}

impl OccupancyGrid {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.log_odds[row * self.params.n + col]
    }

    /// Occupancy probabilities in row-major order under the configured model.
    pub fn to_probability(&self) -> Vec<f64> {
        let model = self.params.probability_model;
        self.log_odds.iter().map(|&l| probability(model, l)).collect()
    }
}

/// Probability of occupancy for a single log-odds value.
pub fn probability(model: ProbabilityModel, l: f64) -> f64 {
    match model {
        ProbabilityModel::ExpComplement => (1.0 - (-l).exp()).clamp(0.0, 1.0),
        ProbabilityModel::Logistic => 1.0 / (1.0 + (-l).exp()),
    }
}

/// Rasterizes a cloud into a log-odds grid; points outside the footprint are
/// dropped. Errors when nothing lands inside.
pub fn rasterize(
    cloud: &PointCloud,
    params: &GridParams,
    conv: &FrameConvention,
) -> Result<OccupancyGrid, GridError> {
    let mut log_odds = vec![params.l_prior + params.l_past; params.n * params.n];
    let mut hit_count = 0usize;
    for p in &cloud.points {
        if let Some((row, col)) = params.pixel_of(p, conv) {
            log_odds[row * params.n + col] += params.l_occupied;
            hit_count += 1;
        }
    }
    if hit_count == 0 {
        return Err(GridError::EmptyGrid { n: params.n });
    }
    Ok(OccupancyGrid { log_odds, params: *params, sweep_index: cloud.sweep_index, hit_count })
}

/// Writes an `n x n` image of values in `[0, 1]` as a binary 8-bit PGM.
/// Row 0 is drawn at the bottom so the forward axis points up the page.
pub fn write_pgm(values: &[f64], n: usize, path: &Path) -> std::io::Result<()> {
    assert_eq!(values.len(), n * n, "value buffer does not match image size");
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "P5\n{n} {n}\n255\n")?;
    let mut bytes = Vec::with_capacity(n * n);
    for row in (0..n).rev() {
        for col in 0..n {
            let v = values[row * n + col].clamp(0.0, 1.0);
            bytes.push((v * 255.0).round() as u8);
        }
    }
    file.write_all(&bytes)
}
