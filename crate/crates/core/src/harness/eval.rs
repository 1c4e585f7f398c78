use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::par_map;
use crate::error::{Error, Result};
use crate::imaging::{ImageRgb, Preset, PresetStack};
use crate::linear::{analyze_hull, oracle_blend, HullReport};
use crate::metrics::{delta_e_image, ImageMetrics, MetricsReport};
use crate::model::{checkpoint, forward, Mode, ModelConfig, ModelParams};
use crate::synth::SceneData;

/// Mean CIEDE2000 of the clamped model output over `scenes`.
pub fn mean_delta_e(params: &ModelParams<f32>, cfg: &ModelConfig, scenes: &[SceneData]) -> Result<f64> {
    let mut sum = 0.0;
    for s in scenes {
        sum += delta_e_image(&forward(&s.stack, params, cfg, Mode::Inference)?, &s.gt)?;
    }
    Ok(sum / scenes.len().max(1) as f64)
}

/// What to score against the ground truth.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction<'a> {
    Model(&'a ModelParams<f32>, &'a ModelConfig),
    Preset(Preset),
    Awb,
    GroundTruth,
    /// Best per-pixel convex blend of the presets.
    Oracle,
}

/// Non-model predictions selectable from the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Baseline {
    Preset(Preset),
    Awb,
    Gt,
    Oracle,
}

impl FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "awb" => Ok(Baseline::Awb),
            "gt" => Ok(Baseline::Gt),
            "oracle" => Ok(Baseline::Oracle),
            other => other
                .parse::<Preset>()
                .map(Baseline::Preset)
                .map_err(|_| Error::invalid(format!("unknown baseline {s:?} (a preset name, awb, gt or oracle)"))),
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Baseline::Preset(p) => write!(f, "{p}"),
            Baseline::Awb => f.write_str("awb"),
            Baseline::Gt => f.write_str("gt"),
            Baseline::Oracle => f.write_str("oracle"),
        }
    }
}

impl Baseline {
    pub fn prediction(self) -> Prediction<'static> {
        match self {
            Baseline::Preset(p) => Prediction::Preset(p),
            Baseline::Awb => Prediction::Awb,
            Baseline::Gt => Prediction::GroundTruth,
            Baseline::Oracle => Prediction::Oracle,
        }
    }
}

pub fn predict(pred: &Prediction<'_>, scene: &SceneData) -> Result<ImageRgb> {
    Ok(match pred {
        Prediction::Model(p, cfg) => forward(&scene.stack, p, cfg, Mode::Inference)?,
        Prediction::Preset(p) => scene.stack.get(*p).clone(),
        Prediction::Awb => scene.awb.clone(),
        Prediction::GroundTruth => scene.gt.clone(),
        Prediction::Oracle => oracle_blend(&scene.stack, &scene.gt)?.0,
    })
}

/// All three metrics for every scene, in input order.
pub fn evaluate(pred: &Prediction<'_>, scenes: &[SceneData], split: &str, threads: usize) -> Result<MetricsReport> {
    let images = par_map(scenes, threads, |s| ImageMetrics::compute(&s.id, &predict(pred, s)?, &s.gt))?;
    MetricsReport::new(split, images)
}

/// Loads a checkpoint, fuses five preset PNGs (tungsten, fluorescent,
/// daylight, cloudy, shade) and writes the clamped result.
pub fn fuse_files<P: AsRef<Path>>(checkpoint_path: impl AsRef<Path>, presets: &[P], out: impl AsRef<Path>) -> Result<ImageRgb> {
    let (cfg, params) = checkpoint::load(checkpoint_path)?;
    let stack = PresetStack::load_pngs(presets)?;
    let img = forward(&stack, &params, &cfg, Mode::Inference)?;
    img.save_png(out)?;
    Ok(img)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneHull {
    pub id: String,
    #[serde(flatten)]
    pub report: HullReport,
}

/// Hull statistics of a whole split; the fraction and mean are over all
/// pixels of all scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HullSummary {
    pub split: String,
    pub tol: f64,
    pub pixel_count: usize,
    pub out_of_hull_fraction: f64,
    pub mean_distance: f64,
    pub max_distance: f64,
    pub scenes: Vec<SceneHull>,
}

impl HullSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    /// Pooled fraction at another tolerance.
    pub fn fraction_at(&self, tol: f64) -> f64 {
        let out: f64 = self.scenes.iter().map(|s| s.report.fraction_at(tol) * s.report.distances.len() as f64).sum();
        out / self.pixel_count.max(1) as f64
    }
}

pub fn hull_scenes(scenes: &[SceneData], split: &str, tol: f64, threads: usize) -> Result<HullSummary> {
    let reports = par_map(scenes, threads, |s| {
        Ok(SceneHull {
            id: s.id.clone(),
            report: analyze_hull(&s.stack, &s.gt, tol)?,
        })
    })?;
    let pixel_count: usize = reports.iter().map(|r| r.report.distances.len()).sum();
    let n = pixel_count.max(1) as f64;
    let out: usize = reports
        .iter()
        .map(|r| r.report.distances.iter().filter(|&&d| d > tol).count())
        .sum();
    let dist_sum: f64 = reports.iter().flat_map(|r| &r.report.distances).sum();
    Ok(HullSummary {
        split: split.to_string(),
        tol,
        pixel_count,
        out_of_hull_fraction: out as f64 / n,
        mean_distance: dist_sum / n,
        max_distance: reports.iter().map(|r| r.report.max_distance).fold(0.0, f64::max),
        scenes: reports,
    })
}
