//! Phase-only correlation of occupancy images.
//!
//! Rotation between two sweeps comes from the angular shift of their
//! polar-resampled amplitude spectra; translation comes from the correlation
//! peak after de-rotating the second image. Both stages share one primitive:
//! the normalized cross-power spectrum, whose inverse transform is a delta
//! at the relative shift.
//!
//! Image layout is row-major `n x n` with the column axis along the left
//! direction and the row axis along the forward direction of the grid.

use rustfft::num_complex::Complex;
use rustfft::num_traits::Zero;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::geometry::{FrameConvention, RigidTransform};
use crate::grid::OccupancyGrid;

/// Correlation peaks below this value mark an unreliable estimate.
pub const LOW_CONFIDENCE: f64 = 0.1;

/// Cross-power bins with magnitude below this floor are zeroed instead of
/// normalized.
pub const MAGNITUDE_FLOOR: f64 = 1e-12;

/// Polar resampling ignores radii below this many pixels, suppressing the
/// DC neighbourhood.
pub const POLAR_MIN_RADIUS: f64 = 5.0;

/// Half-width of the centroid window around the integer correlation peak.
///
/// A 3x3 window keeps the centroid exact on ideal correlation kernels: the
/// two taps adjacent to the peak carry the fractional offset, while wider
/// windows fold in sidelobe energy that biases half-pixel shifts by more
/// than a quarter pixel.
pub const COG_HALF_WIDTH: i64 = 1;

/// Square 2D FFT plans for one image size.
struct Fft2d {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Fft2d {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    fn run_2d(&self, data: &mut [Complex<f64>], plan: &Arc<dyn Fft<f64>>) {
        let n = self.n;
        let mut scratch = vec![Complex::zero(); plan.get_inplace_scratch_len()];
        for row in data.chunks_exact_mut(n) {
            plan.process_with_scratch(row, &mut scratch);
        }
        transpose_square(data, n);
        for row in data.chunks_exact_mut(n) {
            plan.process_with_scratch(row, &mut scratch);
        }
        transpose_square(data, n);
    }

    fn forward_real(&self, image: &[f64]) -> Vec<Complex<f64>> {
        let mut data: Vec<Complex<f64>> =
            image.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.run_2d(&mut data, &self.fwd);
        data
    }

    /// Inverse transform scaled by `1/n^2` so round trips are unit gain.
    fn inverse(&self, mut spec: Vec<Complex<f64>>) -> Vec<Complex<f64>> {
        self.run_2d(&mut spec, &self.inv);
        let scale = 1.0 / (self.n * self.n) as f64;
        for v in &mut spec {
            *v *= scale;
        }
        spec
    }
}

fn transpose_square(data: &mut [Complex<f64>], n: usize) {
    for r in 0..n {
        for c in (r + 1)..n {
            data.swap(r * n + c, c * n + r);
        }
    }
}

/// Multiplies the image by a separable Hann window.
pub fn window(image: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(image.len(), n * n);
    let w1d: Vec<f64> = (0..n)
        .map(|i| {
            0.5 * (1.0 - (std::f64::consts::TAU * i as f64 / (n - 1) as f64).cos())
        })
        .collect();
    let mut out = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            out.push(image[r * n + c] * w1d[r] * w1d[c]);
        }
    }
    out
}

/// Magnitude spectrum with DC moved to pixel `(n/2, n/2)`.
pub fn amplitude_spectrum(image: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(image.len(), n * n);
    let spec = Fft2d::new(n).forward_real(image);
    let mut out = vec![0.0; n * n];
    let half = n / 2;
    for r in 0..n {
        for c in 0..n {
            let dst_r = (r + half) % n;
            let dst_c = (c + half) % n;
            out[dst_r * n + dst_c] = spec[r * n + c].norm();
        }
    }
    out
}

/// Integer-pixel and centroid-refined location of a correlation peak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PocPeak {
    /// Fractional `(column, row)` shift of the second image relative to the
    /// first: `g(v) = f(v - shift)`.
    pub shift: [f64; 2],
    /// The shift at integer resolution.
    pub integer_shift: [i64; 2],
    /// Correlation peak height; 1.0 for identical images.
    pub peak_value: f64,
    pub low_confidence: bool,
}

/// The real part of the inverse transform of the normalized cross-power
/// spectrum, row-major, shift origin at `(0, 0)`.
pub fn cross_power_surface(f: &[f64], g: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(f.len(), n * n);
    assert_eq!(g.len(), n * n);
    let fft = Fft2d::new(n);
    let mut fs = fft.forward_real(f);
    let gs = fft.forward_real(g);
    for (a, b) in fs.iter_mut().zip(&gs) {
        let cross = *a * b.conj();
        let mag = cross.norm();
        *a = if mag < MAGNITUDE_FLOOR { Complex::zero() } else { cross / mag };
    }
    fft.inverse(fs).into_iter().map(|v| v.re).collect()
}

fn wrap_signed(idx: usize, n: usize) -> i64 {
    let idx = idx as i64;
    let n = n as i64;
    if idx > n / 2 {
        idx - n
    } else {
        idx
    }
}

/// Finds the correlation peak of a surface from [`cross_power_surface`] and
/// refines it with a clamped centre-of-gravity over its neighbourhood.
pub fn peak_from_surface(surface: &[f64], n: usize) -> PocPeak {
    assert_eq!(surface.len(), n * n);
    let mut peak_idx = 0usize;
    for (i, &v) in surface.iter().enumerate() {
        if v > surface[peak_idx] {
            peak_idx = i;
        }
    }
    let peak_row = peak_idx / n;
    let peak_col = peak_idx % n;
    let peak_value = surface[peak_idx];

    let mut w_sum = 0.0;
    let mut dr_sum = 0.0;
    let mut dc_sum = 0.0;
    for dr in -COG_HALF_WIDTH..=COG_HALF_WIDTH {
        for dc in -COG_HALF_WIDTH..=COG_HALF_WIDTH {
            let r = (peak_row as i64 + dr).rem_euclid(n as i64) as usize;
            let c = (peak_col as i64 + dc).rem_euclid(n as i64) as usize;
            let w = surface[r * n + c].max(0.0);
            w_sum += w;
            dr_sum += w * dr as f64;
            dc_sum += w * dc as f64;
        }
    }
    let (off_r, off_c) = if w_sum > 0.0 {
        (dr_sum / w_sum, dc_sum / w_sum)
    } else {
        (0.0, 0.0)
    };

    // The delta for shift s sits at position -s (mod n) on the surface.
    let pos_r = wrap_signed(peak_row, n);
    let pos_c = wrap_signed(peak_col, n);
    let integer_shift = [-pos_c, -pos_r];
    let shift = [-(pos_c as f64 + off_c), -(pos_r as f64 + off_r)];
    PocPeak {
        shift,
        integer_shift,
        peak_value,
        low_confidence: peak_value < LOW_CONFIDENCE,
    }
}

/// Phase-only correlation: the `(column, row)` shift of `g` relative to `f`.
pub fn cross_power_peak(f: &[f64], g: &[f64], n: usize) -> PocPeak {
    peak_from_surface(&cross_power_surface(f, g, n), n)
}

fn bilinear(image: &[f64], n: usize, x: f64, y: f64) -> f64 {
    if !(0.0..=(n - 1) as f64).contains(&x) || !(0.0..=(n - 1) as f64).contains(&y) {
        return 0.0;
    }
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(n - 1);
    let y1 = (y0 + 1).min(n - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let v00 = image[y0 * n + x0];
    let v01 = image[y0 * n + x1];
    let v10 = image[y1 * n + x0];
    let v11 = image[y1 * n + x1];
    v00 * (1.0 - fx) * (1.0 - fy)
        + v01 * fx * (1.0 - fy)
        + v10 * (1.0 - fx) * fy
        + v11 * fx * fy
}

/// Rotates image content by `angle` radians about the grid center pixel
/// `(n/2, n/2)`, bilinear, zero outside.
pub fn rotate_image(image: &[f64], n: usize, angle: f64) -> Vec<f64> {
    assert_eq!(image.len(), n * n);
    let c = (n / 2) as f64;
    let (sin, cos) = angle.sin_cos();
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        for col in 0..n {
            let x = col as f64 - c;
            let y = r as f64 - c;
            // Inverse rotation of the output coordinate.
            let sx = cos * x + sin * y + c;
            let sy = -sin * x + cos * y + c;
            out[r * n + col] = bilinear(image, n, sx, sy);
        }
    }
    out
}

/// Resamples a DC-centered spectrum onto polar axes: rows are angle bins
/// covering `[0, pi)`, columns are radius bins from [`POLAR_MIN_RADIUS`] to
/// `n/2`. Samples outside the image are zero.
pub fn polar_map(spectrum: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(spectrum.len(), n * n);
    let c = (n / 2) as f64;
    let r_max = c;
    let mut out = vec![0.0; n * n];
    for l2 in 0..n {
        let theta = std::f64::consts::PI * l2 as f64 / n as f64;
        let (sin, cos) = theta.sin_cos();
        for l1 in 0..n {
            let radius = POLAR_MIN_RADIUS + (r_max - POLAR_MIN_RADIUS) * l1 as f64 / n as f64;
            let x = c + radius * cos;
            let y = c + radius * sin;
            out[l2 * n + l1] = bilinear(spectrum, n, x, y);
        }
    }
    out
}

/// Yaw angle represented by an angular-axis shift of `bins` at size `n`.
pub fn theta_from_bins(bins: f64, n: usize) -> f64 {
    std::f64::consts::PI * bins / n as f64
}

/// Rotation between two windowed images from the angular shift of their
/// polar-resampled amplitude spectra. Returns the angle in `(-pi/2, pi/2]`
/// and the correlation peak behind it.
pub fn estimate_rotation(f_windowed: &[f64], g_windowed: &[f64], n: usize) -> (f64, PocPeak) {
    let amp_f = amplitude_spectrum(f_windowed, n);
    let amp_g = amplitude_spectrum(g_windowed, n);
    let polar_f = window(&polar_map(&amp_f, n), n);
    let polar_g = window(&polar_map(&amp_g, n), n);
    let peak = cross_power_peak(&polar_f, &polar_g, n);
    // Rows of the polar map are angle bins, so the yaw lives in the row
    // component of the shift.
    let theta = theta_from_bins(peak.shift[1], n);
    (theta, peak)
}

/// Coarse planar motion between two occupancy grids.
#[derive(Debug, Clone, Copy)]
pub struct CoarseTransform {
    /// Yaw of the relative motion about the up axis, radians, in `(-pi, pi]`.
    pub theta: f64,
    /// `(column, row)` image shift chosen by the translation stage, pixels.
    pub pixel_shift: [f64; 2],
    /// Maps coordinates of the second sweep into the first sweep's frame
    /// (both rectified).
    pub transform: RigidTransform,
    /// Smaller of the rotation-stage and translation-stage peak values.
    pub confidence: f64,
    pub low_confidence: bool,
}

/// Estimates yaw and planar translation taking grid `g`'s sweep into grid
/// `f`'s sweep. Both grids must share size and resolution.
///
/// The rotation stage is ambiguous by half a turn, so both candidates are
/// de-rotated and the one with the stronger translation peak wins.
pub fn estimate_coarse(
    f: &OccupancyGrid,
    g: &OccupancyGrid,
    conv: &FrameConvention,
) -> CoarseTransform {
    assert_eq!(f.params.n, g.params.n, "grid sizes differ");
    assert!(
        (f.params.resolution - g.params.resolution).abs() < 1e-12,
        "grid resolutions differ"
    );
    let n = f.params.n;
    let prob_f = f.to_probability();
    let prob_g = g.to_probability();
    let win_f = window(&prob_f, n);
    let win_g = window(&prob_g, n);
    let (theta_raw, rot_peak) = estimate_rotation(&win_f, &win_g, n);

    let mut best: Option<(f64, PocPeak)> = None;
    for candidate in [theta_raw, theta_raw + std::f64::consts::PI] {
        let derotated = rotate_image(&prob_g, n, -candidate);
        let rewindowed = window(&derotated, n);
        let peak = cross_power_peak(&win_f, &rewindowed, n);
        let better = match &best {
            None => true,
            Some((_, b)) => peak.peak_value > b.peak_value,
        };
        if better {
            best = Some((candidate, peak));
        }
    }
    let (theta, trans_peak) = best.expect("two candidates were evaluated");

    let resolution = f.params.resolution;
    let t_left = -trans_peak.shift[0] * resolution;
    let t_forward = -trans_peak.shift[1] * resolution;
    let theta = normalize_angle(theta);
    let rotation = RigidTransform::rotation_about(&conv.up_vector(), theta);
    let translation = conv.forward_vector() * t_forward + conv.left_vector() * t_left;
    let confidence = rot_peak.peak_value.min(trans_peak.peak_value);
    CoarseTransform {
        theta,
        pixel_shift: trans_peak.shift,
        transform: RigidTransform::from_parts(rotation.rotation, translation),
        confidence,
        low_confidence: confidence < LOW_CONFIDENCE,
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(theta: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let mut a = theta % tau;
    if a <= -std::f64::consts::PI {
        a += tau;
    } else if a > std::f64::consts::PI {
        a -= tau;
    }
    a
}
