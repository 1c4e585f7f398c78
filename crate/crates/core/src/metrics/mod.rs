//! Image-quality metrics and their mean / median / trimean summaries.
//!
//! All sums are accumulated in `f64` whatever the image precision.

mod color;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use color::{delta_e_2000, linear_to_srgb, srgb_to_linear, LabColor};

use crate::error::{Error, Result};
use crate::imaging::ImageRgb;

/// Pixels whose RGB norm falls below this are left out of the angular error.
pub const ANGULAR_MIN_NORM: f64 = 1e-6;

fn check_sizes(img: &ImageRgb, gt: &ImageRgb) -> Result<()> {
    if img.same_size(gt) {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "image is {}x{} but reference is {}x{}",
            img.width(),
            img.height(),
            gt.width(),
            gt.height()
        )))
    }
}

/// Per-pixel CIEDE2000 between two sRGB images.
pub fn delta_e_map(img: &ImageRgb, gt: &ImageRgb) -> Result<Vec<f64>> {
    check_sizes(img, gt)?;
    Ok(img
        .pixels()
        .zip(gt.pixels())
        .map(|(a, b)| delta_e_2000(LabColor::from_srgb(a), LabColor::from_srgb(b)))
        .collect())
}

/// Mean per-pixel CIEDE2000.
pub fn delta_e_image(img: &ImageRgb, gt: &ImageRgb) -> Result<f64> {
    let map = delta_e_map(img, gt)?;
    Ok(map.iter().sum::<f64>() / map.len().max(1) as f64)
}

/// Mean squared error on the 0-255 scale.
pub fn mse(img: &ImageRgb, gt: &ImageRgb) -> Result<f64> {
    check_sizes(img, gt)?;
    let n = img.data().len().max(1) as f64;
    let sum: f64 = img
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| {
            let d = (a as f64 - b as f64) * 255.0;
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// Angle in degrees between two RGB vectors, `None` if either is (near) zero.
///
/// Uses `atan2(|a x b|, a . b)`: exact zero for parallel vectors and well
/// conditioned at small angles, where `acos` of the cosine is not.
pub fn angular_error(a: [f32; 3], b: [f32; 3]) -> Option<f64> {
    let a = a.map(f64::from);
    let b = b.map(f64::from);
    let norm = |v: [f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if norm(a) < ANGULAR_MIN_NORM || norm(b) < ANGULAR_MIN_NORM {
        return None;
    }
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    Some(norm(cross).atan2(dot).to_degrees())
}

/// Mean angular error in degrees over pixels where both vectors are
/// non-degenerate; 0 if there are none. Computed on encoded values.
pub fn mae_angular(img: &ImageRgb, gt: &ImageRgb) -> Result<f64> {
    check_sizes(img, gt)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for e in img.pixels().zip(gt.pixels()).filter_map(|(a, b)| angular_error(a, b)) {
        sum += e;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Location statistics of a list of per-image values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub trimean: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

/// Inclusive-method quantile (linear interpolation between order
/// statistics) of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean, median and trimean `(Q1 + 2 Q2 + Q3) / 4`.
pub fn aggregate(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty list"));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("cannot aggregate non-finite value {v}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (q1, median, q3) = (quantile(&sorted, 0.25), quantile(&sorted, 0.5), quantile(&sorted, 0.75));
    Ok(Summary {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        median,
        trimean: (q1 + 2.0 * median + q3) / 4.0,
        q1,
        q3,
        min: sorted[0],
        max: sorted[sorted.len() - 1],
    })
}

/// Metrics of one image against its reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub delta_e: f64,
    pub mse: f64,
    pub mae: f64,
}

impl ImageMetrics {
    pub fn compute(id: impl Into<String>, img: &ImageRgb, gt: &ImageRgb) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            delta_e: delta_e_image(img, gt)?,
            mse: mse(img, gt)?,
            mae: mae_angular(img, gt)?,
        })
    }
}

/// Per-image records plus summaries over a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub image_count: usize,
    pub delta_e: Summary,
    pub mse: Summary,
    pub mae: Summary,
    pub images: Vec<ImageMetrics>,
}

impl MetricsReport {
    pub fn new(split: impl Into<String>, images: Vec<ImageMetrics>) -> Result<Self> {
        let col = |f: fn(&ImageMetrics) -> f64| aggregate(&images.iter().map(f).collect::<Vec<_>>());
        Ok(Self {
            split: split.into(),
            image_count: images.len(),
            delta_e: col(|m| m.delta_e)?,
            mse: col(|m| m.mse)?,
            mae: col(|m| m.mae)?,
            images,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table: one row per image, then the summaries.
    pub fn to_table(&self) -> String {
        let id_w = self.images.iter().map(|m| m.id.len()).chain([7]).max().unwrap_or(7);
        let mut s = String::new();
        let _ = writeln!(s, "{:<id_w$}  {:>10}  {:>10}  {:>10}", "image", "dE2000", "MSE", "MAE");
        for m in &self.images {
            let _ = writeln!(s, "{:<id_w$}  {:>10.4}  {:>10.4}  {:>10.4}", m.id, m.delta_e, m.mse, m.mae);
        }
        let _ = writeln!(s, "{}", "-".repeat(id_w + 36));
        let rows: [(&str, fn(&Summary) -> f64); 3] =
            [("mean", |x| x.mean), ("median", |x| x.median), ("trimean", |x| x.trimean)];
        for (name, f) in rows {
            let _ = writeln!(
                s,
                "{:<id_w$}  {:>10.4}  {:>10.4}  {:>10.4}",
                name,
                f(&self.delta_e),
                f(&self.mse),
                f(&self.mae)
            );
        }
        let _ = writeln!(s, "{} images, split {}", self.image_count, self.split);
        s
    }

    /// Writes `<stem>.json` and `<stem>.txt` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (ext, body) in [("json", self.to_json()), ("txt", self.to_table())] {
            let path = dir.join(format!("{stem}.{ext}"));
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
