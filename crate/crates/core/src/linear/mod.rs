//! Per-pixel convex blending of preset renders.
//!
//! A linear fusion method can only output, at each pixel, a convex
//! combination of the five preset values. [`oracle_blend`] finds the best
//! such combination given the ground truth, which bounds every method of
//! that family from below; [`analyze_hull`] measures how far ground-truth
//! pixels sit outside the preset polytope.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{save_gray_png, ImageRgb, Preset, PresetStack};

/// Default out-of-hull tolerance in encoded sRGB units (about a quarter of
/// an 8-bit code value).
pub const DEFAULT_HULL_TOL: f64 = 1e-3;

const MAX_ITERS: usize = 10_000;
const STOP_DELTA: f64 = 1e-9;

/// Euclidean projection onto the probability simplex (sort and threshold).
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    let mut scratch = v.to_vec();
    project_in_place(&mut out, &mut scratch);
    out
}

fn project_in_place(v: &mut [f64], scratch: &mut [f64]) {
    if v.is_empty() {
        return;
    }
    scratch.copy_from_slice(v);
    scratch.sort_unstable_by(|a, b| b.total_cmp(a));
    let (mut cum, mut theta) = (0.0, 0.0);
    for (j, &uj) in scratch.iter().enumerate() {
        cum += uj;
        let t = (cum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.iter_mut().for_each(|x| *x = (*x - theta).max(0.0));
}

/// Best convex weights for one pixel and the distance they leave.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelFit {
    pub weights: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

fn combine(presets: &[[f64; 3]], w: &[f64]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (p, &wp) in presets.iter().zip(w) {
        for c in 0..3 {
            out[c] += wp * p[c];
        }
    }
    out
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Largest eigenvalue of the symmetric 3x3 matrix `P^T P`.
fn gram_spectral_radius(presets: &[[f64; 3]]) -> f64 {
    let mut m = [[0.0; 3]; 3];
    for p in presets {
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += p[i] * p[j];
            }
        }
    }
    // Power iteration from the all-ones vector; P^T P is positive
    // semidefinite, and the preset colors are near-gray, so this converges
    // in a handful of steps.
    let mut x = [1.0f64; 3];
    let mut lambda = 0.0;
    for _ in 0..100 {
        let y = [0, 1, 2].map(|i| m[i][0] * x[0] + m[i][1] * x[1] + m[i][2] * x[2]);
        let n = (y[0] * y[0] + y[1] * y[1] + y[2] * y[2]).sqrt();
        if n == 0.0 {
            return 0.0;
        }
        let next = n / (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
        x = y.map(|v| v / n);
        let done = (next - lambda).abs() <= 1e-14 * next;
        lambda = next;
        if done {
            break;
        }
    }
    lambda
}

/// Minimizes `|sum_p w_p P_p - target|` over the simplex by projected
/// gradient descent with step `1 / L`, `L = 2 sigma_max(P^T P)`, starting
/// from uniform weights. Stops once no weight moves by `1e-9` or after
/// 10,000 iterations.
///
/// Preset renders of one pixel are nearly collinear, which makes the plain
/// iteration crawl, so the gradient is taken at a Nesterov extrapolation of
/// the last two iterates, with the momentum reset whenever it points uphill.
pub fn fit_pixel_weights(presets: &[[f64; 3]], target: [f64; 3]) -> PixelFit {
    let n = presets.len();
    let mut w = vec![1.0 / n as f64; n];
    let lip = 2.0 * gram_spectral_radius(presets);
    let mut iterations = 0;
    if lip > 1e-300 {
        let step = 1.0 / lip;
        let mut y = w.clone();
        let mut t = 1.0f64;
        let mut next = vec![0.0; n];
        let mut scratch = vec![0.0; n];
        while iterations < MAX_ITERS {
            iterations += 1;
            let r = combine(presets, &y);
            let r = [r[0] - target[0], r[1] - target[1], r[2] - target[2]];
            for ((np, &yp), p) in next.iter_mut().zip(&y).zip(presets) {
                let g = 2.0 * (p[0] * r[0] + p[1] * r[1] + p[2] * r[2]);
                *np = yp - step * g;
            }
            project_in_place(&mut next, &mut scratch);
            let moved = next.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            // Restart when the extrapolated point and the step disagree.
            let uphill: f64 = y.iter().zip(&next).zip(&w).map(|((yp, np), wp)| (yp - np) * (np - wp)).sum();
            if uphill > 0.0 {
                t = 1.0;
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let beta = (t - 1.0) / t_next;
            for ((yp, &np), &wp) in y.iter_mut().zip(&next).zip(&w) {
                *yp = np + beta * (np - wp);
            }
            t = t_next;
            std::mem::swap(&mut w, &mut next);
            if moved < STOP_DELTA {
                break;
            }
        }
    }
    let residual = dist(combine(presets, &w), target);
    PixelFit {
        weights: w,
        residual,
        iterations,
    }
}

/// Per-pixel simplex weights over the presets in [`Preset::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl FusionWeights {
    pub const PRESETS: usize = Preset::ALL.len();

    /// Validates that every row lies on the simplex within `1e-6`.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * Self::PRESETS {
            return Err(Error::invalid(format!(
                "{width}x{height} weight map needs {} entries, got {}",
                width * height * Self::PRESETS,
                data.len()
            )));
        }
        for (i, row) in data.chunks_exact(Self::PRESETS).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&v| v < -1e-12 || !v.is_finite()) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("weights at pixel {i} are not convex: {row:?}")));
            }
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * Self::PRESETS..(i + 1) * Self::PRESETS]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(Self::PRESETS)
    }
}

fn pixel_presets(stack: &PresetStack, i: usize) -> [[f64; 3]; 5] {
    Preset::ALL.map(|p| stack.get(p).pixel(i).map(f64::from))
}

/// Applies a weight map to a preset stack.
pub fn blend(stack: &PresetStack, weights: &FusionWeights) -> Result<ImageRgb> {
    if weights.width != stack.width() || weights.height != stack.height() {
        return Err(Error::invalid(format!(
            "weight map is {}x{} but the stack is {}x{}",
            weights.width,
            weights.height,
            stack.width(),
            stack.height()
        )));
    }
    let data = (0..weights.width * weights.height)
        .flat_map(|i| combine(&pixel_presets(stack, i), weights.pixel(i)).map(|v| v as f32))
        .collect();
    ImageRgb::new(stack.width(), stack.height(), data)
}

fn fit_all(stack: &PresetStack, gt: &ImageRgb) -> Result<Vec<PixelFit>> {
    if !gt.same_size(stack.get(Preset::Tungsten)) {
        return Err(Error::invalid(format!(
            "ground truth is {}x{} but the stack is {}x{}",
            gt.width(),
            gt.height(),
            stack.width(),
            stack.height()
        )));
    }
    Ok((0..gt.pixel_count())
        .map(|i| fit_pixel_weights(&pixel_presets(stack, i), gt.pixel(i).map(f64::from)))
        .collect())
}

/// Best per-pixel convex blend of the presets towards `gt`.
pub fn oracle_blend(stack: &PresetStack, gt: &ImageRgb) -> Result<(ImageRgb, FusionWeights)> {
    let fits = fit_all(stack, gt)?;
    let weights = FusionWeights::new(
        stack.width(),
        stack.height(),
        fits.into_iter().flat_map(|f| f.weights).collect(),
    )?;
    Ok((blend(stack, &weights)?, weights))
}

/// Distances from ground-truth pixels to their preset hull.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HullReport {
    pub width: usize,
    pub height: usize,
    pub tol: f64,
    pub out_of_hull_fraction: f64,
    pub mean_distance: f64,
    pub max_distance: f64,
    #[serde(skip)]
    pub distances: Vec<f64>,
}

impl HullReport {
    pub fn from_distances(width: usize, height: usize, distances: Vec<f64>, tol: f64) -> Self {
        let n = distances.len().max(1) as f64;
        Self {
            width,
            height,
            tol,
            out_of_hull_fraction: Self::fraction(&distances, tol),
            mean_distance: distances.iter().sum::<f64>() / n,
            max_distance: distances.iter().copied().fold(0.0, f64::max),
            distances,
        }
    }

    fn fraction(distances: &[f64], tol: f64) -> f64 {
        distances.iter().filter(|&&d| d > tol).count() as f64 / distances.len().max(1) as f64
    }

    /// Out-of-hull fraction at another tolerance.
    pub fn fraction_at(&self, tol: f64) -> f64 {
        Self::fraction(&self.distances, tol)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Grayscale map of the distances, scaled so the largest is white
    /// (a map that is entirely inside the tolerance is black).
    pub fn save_distance_map(&self, path: impl AsRef<Path>) -> Result<()> {
        let scale = self.max_distance.max(self.tol);
        let values: Vec<f32> = self.distances.iter().map(|&d| (d / scale) as f32).collect();
        save_gray_png(path, self.width, self.height, &values)
    }
}

/// Hull distances of every ground-truth pixel, in encoded sRGB.
pub fn analyze_hull(stack: &PresetStack, gt: &ImageRgb, tol: f64) -> Result<HullReport> {
    if !(tol >= 0.0) {
        return Err(Error::invalid(format!("hull tolerance must be non-negative, got {tol}")));
    }
    let distances = fit_all(stack, gt)?.into_iter().map(|f| f.residual).collect();
    Ok(HullReport::from_distances(gt.width(), gt.height(), distances, tol))
}
