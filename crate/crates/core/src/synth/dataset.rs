//! Scene-disjoint train/val/test sets, in memory or on disk.
//!
//! Layout of a built dataset:
//!
//! ```text
//! <root>/manifest.json
//! <root>/scene_0000/{tungsten,fluorescent,daylight,cloudy,shade,gt,awb}.png
//! <root>/scene_0000/meta.json
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{generate_scene, render_scene, Illuminant, SceneOptions};
use crate::error::{Error, Result};
use crate::imaging::{ImageRgb, Preset, PresetStack};

pub const MANIFEST: &str = "manifest.json";
const META: &str = "meta.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split {s:?} (train, val, test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub n_scenes: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Train / val / test fractions.
    pub split_ratios: [f64; 3],
    /// Exact train / val / test sizes; overrides the ratios when set.
    pub split_sizes: Option<[usize; 3]>,
    pub scene: SceneOptions,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_scenes: 20,
            height: 64,
            width: 64,
            seed: 0,
            split_ratios: [0.65, 0.15, 0.20],
            split_sizes: None,
            scene: SceneOptions::default(),
        }
    }
}

/// Val and test get `floor(n * ratio)`; train takes the rest.
pub fn split_counts(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if n == 0 {
        return Err(Error::invalid("a dataset needs at least one scene"));
    }
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
    }
    let val = (n as f64 * ratios[1]).floor() as usize;
    let test = (n as f64 * ratios[2]).floor() as usize;
    Ok([n - val - test, val, test])
}

impl DatasetConfig {
    pub fn counts(&self) -> Result<[usize; 3]> {
        match self.split_sizes {
            Some(sizes) if sizes.iter().sum::<usize>() != self.n_scenes => Err(Error::Config(format!(
                "split sizes {sizes:?} do not add up to {} scenes",
                self.n_scenes
            ))),
            Some(_) if self.n_scenes == 0 => Err(Error::invalid("a dataset needs at least one scene")),
            Some(sizes) => Ok(sizes),
            None => split_counts(self.n_scenes, self.split_ratios),
        }
    }

    /// Per-scene seeds and split assignment, in scene-index order.
    fn plan(&self) -> Result<Vec<(u64, Split)>> {
        let counts = self.counts()?;
        self.scene.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let seeds: Vec<u64> = (0..self.n_scenes).map(|_| rng.gen()).collect();
        let mut order: Vec<usize> = (0..self.n_scenes).collect();
        order.shuffle(&mut rng);
        let mut splits = vec![Split::Train; self.n_scenes];
        let mut pos = 0;
        for (split, n) in Split::ALL.into_iter().zip(counts) {
            for &i in &order[pos..pos + n] {
                splits[i] = split;
            }
            pos += n;
        }
        Ok(seeds.into_iter().zip(splits).collect())
    }
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:04}")
}

/// Sidecar record written next to each scene's images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub id: String,
    pub seed: u64,
    pub split: Split,
    pub illuminant_a: Illuminant,
    pub illuminant_b: Illuminant,
    pub illuminant_c: Option<Illuminant>,
    pub exposure: f64,
    pub clipped_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Manifest {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// One scene as stored: 8-bit presets, ground truth and AWB render.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneData {
    pub id: String,
    pub stack: PresetStack,
    pub gt: ImageRgb,
    pub awb: ImageRgb,
}

fn render(cfg: &DatasetConfig, index: usize, seed: u64, split: Split) -> Result<(SceneMeta, SceneData)> {
    let spec = generate_scene(seed, cfg.height, cfg.width, &cfg.scene)?;
    let r = render_scene(&spec, cfg.scene.brightness)?;
    let id = scene_id(index);
    let meta = SceneMeta {
        id: id.clone(),
        seed,
        split,
        illuminant_a: spec.illuminant_a,
        illuminant_b: spec.illuminant_b,
        illuminant_c: spec.illuminant_c,
        exposure: spec.exposure,
        clipped_pixels: r.clipped,
    };
    let stack = PresetStack::new(r.stack.images().iter().map(ImageRgb::quantized).collect())?;
    let data = SceneData {
        id,
        stack,
        gt: r.gt.quantized(),
        awb: r.awb.quantized(),
    };
    Ok((meta, data))
}

/// The three splits in memory, with the same 8-bit images
/// [`build_dataset`] would write.
pub fn generate_split(cfg: &DatasetConfig) -> Result<[Vec<SceneData>; 3]> {
    let mut out: [Vec<SceneData>; 3] = Default::default();
    for (i, (seed, split)) in cfg.plan()?.into_iter().enumerate() {
        let (_, data) = render(cfg, i, seed, split)?;
        out[split as usize].push(data);
    }
    Ok(out)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let body = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&body).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Generates and writes every scene, then the manifest.
pub fn build_dataset(root: impl AsRef<Path>, cfg: &DatasetConfig) -> Result<Manifest> {
    let root = root.as_ref();
    let plan = cfg.plan()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (i, (seed, split)) in plan.into_iter().enumerate() {
        let (meta, data) = render(cfg, i, seed, split)?;
        let dir = root.join(&meta.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (p, img) in Preset::ALL.iter().zip(data.stack.images()) {
            img.save_png(dir.join(format!("{p}.png")))?;
        }
        data.gt.save_png(dir.join("gt.png"))?;
        data.awb.save_png(dir.join("awb.png"))?;
        write_json(&dir.join(META), &meta)?;
        match split {
            Split::Train => manifest.train.push(meta.id),
            Split::Val => manifest.val.push(meta.id),
            Split::Test => manifest.test.push(meta.id),
        }
    }
    write_json(&root.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// A dataset directory opened for reading.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest: Manifest = read_json(&root.join(MANIFEST))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format {
                what: "dataset manifest",
                reason: format!("format version {} (expected {FORMAT_VERSION})", manifest.format_version),
            });
        }
        Ok(Self { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ids(&self, split: Split) -> &[String] {
        self.manifest.ids(split)
    }

    pub fn scene_dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn meta(&self, id: &str) -> Result<SceneMeta> {
        read_json(&self.scene_dir(id).join(META))
    }

    pub fn load(&self, id: &str) -> Result<SceneData> {
        let dir = self.scene_dir(id);
        let paths: Vec<PathBuf> = Preset::ALL.iter().map(|p| dir.join(format!("{p}.png"))).collect();
        let stack = PresetStack::load_pngs(&paths)?;
        let gt = ImageRgb::load_png(dir.join("gt.png"))?;
        let awb = ImageRgb::load_png(dir.join("awb.png"))?;
        for (name, img) in [("gt", &gt), ("awb", &awb)] {
            if img.width() != stack.width() || img.height() != stack.height() {
                return Err(Error::invalid(format!(
                    "{}: {name}.png is {}x{} but the presets are {}x{}",
                    dir.display(),
                    img.width(),
                    img.height(),
                    stack.width(),
                    stack.height()
                )));
            }
        }
        Ok(SceneData {
            id: id.to_string(),
            stack,
            gt,
            awb,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<SceneData>> {
        self.ids(split).iter().map(|id| self.load(id)).collect()
    }
}
