//! Synthetic multi-illuminant scenes.
//!
//! A scene is a smooth reflectance field lit by a spatial mix of two (or
//! three) illuminants. From its linear "RAW" image we render the five camera
//! presets, a gray-world AWB image, and a ground truth that is perfectly
//! white balanced per pixel and then rescaled to the AWB image's per-pixel
//! brightness.

mod dataset;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{
    build_dataset, generate_split, split_counts, Dataset, DatasetConfig, Manifest, SceneData, SceneMeta, Split,
};

use crate::error::{Error, Result};
use crate::imaging::{ImageRgb, Preset, PresetStack};
use crate::metrics::{linear_to_srgb, srgb_to_linear};

pub const MIN_SIDE: usize = 8;
pub const REFLECTANCE_MIN: f64 = 0.05;
pub const REFLECTANCE_MAX: f64 = 0.95;
pub const BRIGHTNESS_EPS: f64 = 1e-6;

/// Linear-RGB illuminant color with green normalized to one.
pub type Illuminant = [f64; 3];

/// Correlated color temperature of each preset, kelvin.
pub fn preset_temperature(p: Preset) -> f64 {
    match p {
        Preset::Tungsten => 2850.0,
        Preset::Fluorescent => 3800.0,
        Preset::Daylight => 5500.0,
        Preset::Cloudy => 6500.0,
        Preset::Shade => 7500.0,
    }
}

/// Chromaticity of the Planckian locus (Kim et al. cubic spline fit,
/// valid for 1667 K to 25000 K).
fn planckian_xy(t: f64) -> (f64, f64) {
    let (t2, t3) = (t * t, t * t * t);
    let x = if t <= 4000.0 {
        -0.2661239e9 / t3 - 0.2343589e6 / t2 + 0.8776956e3 / t + 0.179910
    } else {
        -3.0258469e9 / t3 + 2.1070379e6 / t2 + 0.2226347e3 / t + 0.240390
    };
    let (x2, x3) = (x * x, x * x * x);
    let y = if t <= 2222.0 {
        -1.1063814 * x3 - 1.34811020 * x2 + 2.18555832 * x - 0.20219683
    } else if t <= 4000.0 {
        -0.9549476 * x3 - 1.37418593 * x2 + 2.09137015 * x - 0.16748867
    } else {
        3.0817580 * x3 - 5.87338670 * x2 + 3.75112997 * x - 0.37001483
    };
    (x, y)
}

/// Linear-sRGB color of a blackbody at `kelvin`, green-normalized.
pub fn blackbody_rgb(kelvin: f64) -> Illuminant {
    let (x, y) = planckian_xy(kelvin.clamp(1667.0, 25000.0));
    let (cx, cy, cz) = (x / y, 1.0, (1.0 - x - y) / y);
    let r = 3.2404542 * cx - 1.5371385 * cy - 0.4985314 * cz;
    let g = -0.9692660 * cx + 1.8760108 * cy + 0.0415560 * cz;
    let b = 0.0556434 * cx - 0.2040259 * cy + 1.0572252 * cz;
    [r / g, 1.0, b / g]
}

/// White-balance gains assumed by each camera preset.
pub fn preset_illuminant(p: Preset) -> Illuminant {
    blackbody_rgb(preset_temperature(p))
}

/// The five preset illuminants in [`Preset::ALL`] order.
pub fn preset_table() -> [Illuminant; 5] {
    Preset::ALL.map(preset_illuminant)
}

/// Per-pixel brightness estimator in linear RGB.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Brightness {
    /// Unweighted channel mean.
    #[default]
    Mean,
    /// Rec. 709 luma weights.
    Luma,
}

impl Brightness {
    pub fn of(self, [r, g, b]: [f64; 3]) -> f64 {
        match self {
            Brightness::Mean => (r + g + b) / 3.0,
            Brightness::Luma => 0.2126 * r + 0.7152 * g + 0.0722 * b,
        }
    }
}

/// Knobs of the scene generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneOptions {
    /// 2, or 3 for a second mixing field and a third light.
    pub illuminants: usize,
    /// Relative jitter applied to the red and blue gains of each light.
    pub chroma_jitter: f64,
    pub brightness: Brightness,
}

impl Default for SceneOptions {
    fn default() -> Self {
        Self {
            illuminants: 2,
            chroma_jitter: 0.15,
            brightness: Brightness::Mean,
        }
    }
}

impl SceneOptions {
    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.illuminants) {
            return Err(Error::Config(format!("scenes have 2 or 3 illuminants, got {}", self.illuminants)));
        }
        if !(0.0..1.0).contains(&self.chroma_jitter) {
            return Err(Error::Config(format!("chroma jitter must lie in [0, 1), got {}", self.chroma_jitter)));
        }
        Ok(())
    }
}

/// Everything needed to render one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// `H x W x 3`, within `[0.05, 0.95]`.
    pub reflectance: Vec<f64>,
    pub illuminant_a: Illuminant,
    pub illuminant_b: Illuminant,
    /// `H x W` weight of `illuminant_a`, in `[0, 1]`.
    pub mixing: Vec<f64>,
    /// Third light and its weight against the a/b mix, if any.
    pub illuminant_c: Option<Illuminant>,
    pub mixing_c: Option<Vec<f64>>,
    pub exposure: f64,
}

fn draw_light(rng: &mut ChaCha8Rng, t_lo: f64, t_hi: f64, jitter: f64) -> Illuminant {
    let base = blackbody_rgb(rng.gen_range(t_lo..t_hi));
    let mut j = |v: f64| v * (1.0 + rng.gen_range(-jitter..=jitter));
    [j(base[0]), 1.0, j(base[2])]
}

/// Smooth ramp `sigmoid(n . (p - c) / s)` in normalized coordinates.
fn sigmoid_ramp(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let angle = rng.gen_range(0.0..2.0 * PI);
    let (nx, ny) = (angle.cos(), angle.sin());
    let (cx, cy) = (rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7));
    let width = rng.gen_range(0.05..0.25);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
            let z = (nx * (u - cx) + ny * (v - cy)) / width;
            out.push(1.0 / (1.0 + (-z).exp()));
        }
    }
    out
}

/// Near-gray base plus a handful of random cosine bumps, clamped. Bumps
/// mostly change lightness with a smaller per-channel chroma term, so a
/// scene averages out close to gray.
fn reflectance_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    struct Bump {
        fx: f64,
        fy: f64,
        phase: f64,
        amp: [f64; 3],
    }
    let g: f64 = rng.gen_range(0.3..0.6);
    let base: [f64; 3] = [(); 3].map(|_| g + rng.gen_range(-0.03..0.03));
    let bumps: Vec<Bump> = (0..rng.gen_range(3..=8))
        .map(|_| Bump {
            fx: rng.gen_range(-4.0..4.0),
            fy: rng.gen_range(-4.0..4.0),
            phase: rng.gen_range(0.0..2.0 * PI),
            amp: {
                let l = rng.gen_range(-0.2..0.2);
                [(); 3].map(|_| l + rng.gen_range(-0.08..0.08))
            },
        })
        .collect();
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            let mut px = base;
            for b in &bumps {
                let s = (2.0 * PI * (b.fx * u + b.fy * v) + b.phase).cos();
                for c in 0..3 {
                    px[c] += b.amp[c] * s;
                }
            }
            out.extend(px.map(|v| v.clamp(REFLECTANCE_MIN, REFLECTANCE_MAX)));
        }
    }
    out
}

/// Deterministic random scene. One light is warm (2850-4500 K), the other
/// cool (5000-7500 K), in random order.
pub fn generate_scene(seed: u64, height: usize, width: usize, opts: &SceneOptions) -> Result<SceneSpec> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(Error::invalid(format!(
            "scenes must be at least {MIN_SIDE}x{MIN_SIDE}, got {width}x{height}"
        )));
    }
    opts.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = opts.chroma_jitter;
    let warm = draw_light(&mut rng, 2850.0, 4500.0, j);
    let cool = draw_light(&mut rng, 5000.0, 7500.0, j);
    let (illuminant_a, illuminant_b) = if rng.gen_bool(0.5) { (warm, cool) } else { (cool, warm) };
    let exposure = rng.gen_range(0.6..1.0);
    let reflectance = reflectance_field(&mut rng, height, width);
    let mixing = sigmoid_ramp(&mut rng, height, width);
    let (illuminant_c, mixing_c) = if opts.illuminants == 3 {
        let c = draw_light(&mut rng, 2850.0, 7500.0, j);
        (Some(c), Some(sigmoid_ramp(&mut rng, height, width)))
    } else {
        (None, None)
    };
    Ok(SceneSpec {
        seed,
        height,
        width,
        reflectance,
        illuminant_a,
        illuminant_b,
        mixing,
        illuminant_c,
        mixing_c,
        exposure,
    })
}

impl SceneSpec {
    /// Scene lit by a single illuminant everywhere.
    pub fn single_illuminant(mut self, light: Illuminant) -> Self {
        self.illuminant_a = light;
        self.illuminant_b = light;
        self.illuminant_c = None;
        self.mixing_c = None;
        self
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    /// Illuminant color at pixel `i`. Written as `b + m (a - b)` so equal
    /// lights give exactly that light.
    pub fn light(&self, i: usize) -> Illuminant {
        let m = self.mixing[i];
        let mut l = [0, 1, 2].map(|c| self.illuminant_b[c] + m * (self.illuminant_a[c] - self.illuminant_b[c]));
        if let (Some(lc), Some(mc)) = (self.illuminant_c, &self.mixing_c) {
            let k = mc[i];
            l = [0, 1, 2].map(|c| l[c] + k * (lc[c] - l[c]));
        }
        l
    }

    fn reflectance_at(&self, i: usize) -> [f64; 3] {
        [0, 1, 2].map(|c| self.reflectance[i * 3 + c])
    }
}

/// Linear RAW image as `H x W x 3` `f64`: `exposure * reflectance * light`.
pub fn render_raw(scene: &SceneSpec) -> Vec<f64> {
    let mut out = Vec::with_capacity(scene.pixel_count() * 3);
    for i in 0..scene.pixel_count() {
        let (r, l) = (scene.reflectance_at(i), scene.light(i));
        out.extend([0, 1, 2].map(|c| scene.exposure * r[c] * l[c]));
    }
    out
}

fn encode(width: usize, height: usize, linear: impl Iterator<Item = f64>) -> ImageRgb {
    let data = linear.map(|v| linear_to_srgb(v.clamp(0.0, 1.0)) as f32).collect();
    ImageRgb::new(width, height, data).expect("pixel count fixed by the scene")
}

/// Von Kries correction by fixed `gains`, clip, sRGB encode.
pub fn render_preset(scene: &SceneSpec, gains: Illuminant) -> ImageRgb {
    let raw = render_raw(scene);
    encode(
        scene.width,
        scene.height,
        raw.chunks_exact(3).flat_map(|p| [0, 1, 2].map(|c| p[c] / gains[c])),
    )
}

pub fn render_preset_stack(scene: &SceneSpec) -> PresetStack {
    PresetStack::new(preset_table().iter().map(|&g| render_preset(scene, g)).collect()).expect("five same-size renders")
}

/// Per-pixel division by the true light, before brightness matching.
pub fn render_ground_truth(scene: &SceneSpec) -> ImageRgb {
    let raw = render_raw(scene);
    encode(
        scene.width,
        scene.height,
        raw.chunks_exact(3).enumerate().flat_map(|(i, p)| {
            let l = scene.light(i);
            [0, 1, 2].map(|c| p[c] / l[c])
        }),
    )
}

/// Gray-world illuminant estimate of a RAW image, green-normalized.
pub fn gray_world(raw: &[f64]) -> Illuminant {
    let mut sum = [0.0f64; 3];
    for p in raw.chunks_exact(3) {
        for c in 0..3 {
            sum[c] += p[c];
        }
    }
    if sum[1] <= 0.0 {
        return [1.0; 3];
    }
    [sum[0] / sum[1], 1.0, sum[2] / sum[1]]
}

/// One global gray-world correction.
pub fn render_awb(scene: &SceneSpec) -> ImageRgb {
    let raw = render_raw(scene);
    let est = gray_world(&raw);
    encode(
        scene.width,
        scene.height,
        raw.chunks_exact(3).flat_map(|p| [0, 1, 2].map(|c| p[c] / est[c])),
    )
}

/// Result of matching the ground truth's brightness to the AWB render.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjustedGt {
    pub image: ImageRgb,
    /// Pixels where scaling pushed a channel above one.
    pub clipped: usize,
}

/// Rescales each ground-truth pixel, in linear light, so its brightness
/// matches the AWB render: `gt * (b(awb) + eps) / (b(gt) + eps)`.
pub fn adjust_brightness(gt: &ImageRgb, awb: &ImageRgb, brightness: Brightness) -> Result<AdjustedGt> {
    if !gt.same_size(awb) {
        return Err(Error::invalid(format!(
            "ground truth is {}x{} but the AWB render is {}x{}",
            gt.width(),
            gt.height(),
            awb.width(),
            awb.height()
        )));
    }
    let mut clipped = 0;
    let mut data = Vec::with_capacity(gt.data().len());
    for (g, a) in gt.pixels().zip(awb.pixels()) {
        let g = g.map(|v| srgb_to_linear(v as f64));
        let a = a.map(|v| srgb_to_linear(v as f64));
        let k = (brightness.of(a) + BRIGHTNESS_EPS) / (brightness.of(g) + BRIGHTNESS_EPS);
        let out = g.map(|v| v * k);
        if out.iter().any(|&v| v > 1.0) {
            clipped += 1;
        }
        data.extend(out.map(|v| linear_to_srgb(v.clamp(0.0, 1.0)) as f32));
    }
    Ok(AdjustedGt {
        image: ImageRgb::new(gt.width(), gt.height(), data)?,
        clipped,
    })
}

/// All images of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedScene {
    pub stack: PresetStack,
    /// Brightness-adjusted ground truth.
    pub gt: ImageRgb,
    pub awb: ImageRgb,
    pub clipped: usize,
}

pub fn render_scene(scene: &SceneSpec, brightness: Brightness) -> Result<RenderedScene> {
    let awb = render_awb(scene);
    let adjusted = adjust_brightness(&render_ground_truth(scene), &awb, brightness)?;
    Ok(RenderedScene {
        stack: render_preset_stack(scene),
        gt: adjusted.image,
        awb,
        clipped: adjusted.clipped,
    })
}
