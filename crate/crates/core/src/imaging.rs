//! RGB images, white-balance presets and PNG I/O.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::{Element, Tensor};
use crate::error::{Error, Result};

/// Camera white-balance presets, in order of increasing color temperature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tungsten,
    Fluorescent,
    Daylight,
    Cloudy,
    Shade,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::Tungsten,
        Preset::Fluorescent,
        Preset::Daylight,
        Preset::Cloudy,
        Preset::Shade,
    ];

    /// Priority used to pick a subset when a model consumes fewer than five
    /// presets: one preset is daylight, three are daylight/shade/tungsten.
    const PRIORITY: [Preset; 5] = [
        Preset::Daylight,
        Preset::Shade,
        Preset::Tungsten,
        Preset::Cloudy,
        Preset::Fluorescent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Tungsten => "tungsten",
            Preset::Fluorescent => "fluorescent",
            Preset::Daylight => "daylight",
            Preset::Cloudy => "cloudy",
            Preset::Shade => "shade",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// The presets a `count`-input model reads, in canonical order.
    pub fn selection(count: usize) -> Result<Vec<Preset>> {
        if !(1..=5).contains(&count) {
            return Err(Error::invalid(format!("preset count must be 1..=5, got {count}")));
        }
        let mut chosen = Self::PRIORITY[..count].to_vec();
        chosen.sort();
        Ok(chosen)
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown preset {s:?}")))
    }
}

/// Row-major `height x width x 3` image with `f32` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRgb {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "{width}x{height} RGB image needs {} samples, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, i: usize) -> [f32; 3] {
        let p = &self.data[i * 3..i * 3 + 3];
        [p[0], p[1], p[2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub fn same_size(&self, other: &ImageRgb) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn map(&self, mut f: impl FnMut([f32; 3]) -> [f32; 3]) -> ImageRgb {
        let mut data = Vec::with_capacity(self.data.len());
        for p in self.pixels() {
            data.extend_from_slice(&f(p));
        }
        ImageRgb {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn clamped(mut self) -> ImageRgb {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Rounds every sample to the nearest 8-bit code value.
    pub fn quantized(&self) -> ImageRgb {
        self.map(|p| p.map(|v| to_u8(v) as f32 / 255.0))
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height, self.width, 3], |i| T::from_f64(self.data[i] as f64))
    }

    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Result<Self> {
        match t.shape() {
            &[h, w, 3] => Self::new(w, h, t.data().iter().map(|v| v.as_f64() as f32).collect()),
            other => Err(Error::invalid(format!("expected an [H, W, 3] tensor, got {other:?}"))),
        }
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Self::new(w as usize, h as usize, data)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        image::save_buffer(
            path,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

pub(crate) fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Saves a single-channel `[0, 1]` map as an 8-bit grayscale PNG.
pub fn save_gray_png(path: impl AsRef<Path>, width: usize, height: usize, values: &[f32]) -> Result<()> {
    let path = path.as_ref();
    if values.len() != width * height {
        return Err(Error::invalid(format!(
            "gray map of {width}x{height} needs {} values, got {}",
            width * height,
            values.len()
        )));
    }
    let bytes: Vec<u8> = values.iter().map(|&v| to_u8(v)).collect();
    image::save_buffer(path, &bytes, width as u32, height as u32, image::ExtendedColorType::L8).map_err(|source| {
        Error::Image {
            path: path.to_path_buf(),
            source,
        }
    })
}

/// The five preset renders of one scene, ordered as [`Preset::ALL`].
#[derive(Clone, Debug, PartialEq)]
pub struct PresetStack {
    presets: Vec<ImageRgb>,
}

impl PresetStack {
    pub fn new(presets: Vec<ImageRgb>) -> Result<Self> {
        if presets.len() != Preset::ALL.len() {
            return Err(Error::invalid(format!(
                "a preset stack holds exactly 5 renders, got {}",
                presets.len()
            )));
        }
        for (img, p) in presets.iter().zip(Preset::ALL) {
            if !img.same_size(&presets[0]) {
                return Err(Error::invalid(format!(
                    "{p} render is {}x{} but tungsten is {}x{}",
                    img.width(),
                    img.height(),
                    presets[0].width(),
                    presets[0].height()
                )));
            }
            if !img.in_unit_range() {
                return Err(Error::invalid(format!("{p} render has values outside [0, 1]")));
            }
        }
        Ok(Self { presets })
    }

    pub fn width(&self) -> usize {
        self.presets[0].width()
    }

    pub fn height(&self) -> usize {
        self.presets[0].height()
    }

    pub fn get(&self, preset: Preset) -> &ImageRgb {
        &self.presets[preset.index()]
    }

    pub fn images(&self) -> &[ImageRgb] {
        &self.presets
    }

    /// Channel-wise concatenation `[H, W, 3 * selection.len()]`.
    pub fn concat<T: Element>(&self, selection: &[Preset]) -> Tensor<T> {
        let (w, h) = (self.width(), self.height());
        let c = 3 * selection.len();
        let mut data = Vec::with_capacity(w * h * c);
        for px in 0..w * h {
            for &p in selection {
                let img = self.get(p);
                data.extend(img.data()[px * 3..px * 3 + 3].iter().map(|&v| T::from_f64(v as f64)));
            }
        }
        Tensor::new(vec![h, w, c], data).expect("sizes computed above")
    }

    /// Loads the five presets, reporting the first file whose size differs
    /// from the tungsten render.
    pub fn load_pngs<P: AsRef<Path>>(paths: &[P]) -> Result<Self> {
        if paths.len() != 5 {
            return Err(Error::invalid(format!("expected 5 preset images, got {}", paths.len())));
        }
        let mut images = Vec::with_capacity(5);
        for path in paths {
            let img = ImageRgb::load_png(path)?;
            if let Some(first) = images.first() {
                if !img.same_size(first) {
                    let first: &ImageRgb = first;
                    return Err(Error::invalid(format!(
                        "{}: size {}x{} differs from {} ({}x{})",
                        path.as_ref().display(),
                        img.width(),
                        img.height(),
                        paths[0].as_ref().display(),
                        first.width(),
                        first.height()
                    )));
                }
            }
            images.push(img);
        }
        Self::new(images)
    }
}
