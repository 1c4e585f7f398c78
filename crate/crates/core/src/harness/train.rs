//! Adam + cosine training with best-validation checkpoint selection.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::mean_delta_e;
use crate::engine::{adam_step, AdamState, CosineSchedule, Tensor};
use crate::error::{Error, Result};
use crate::model::{checkpoint, loss_and_gradient, param_count, ModelConfig, ModelParams};
use crate::synth::{DatasetConfig, SceneData};

/// Hyperparameters of one run. Paths live in [`TrainConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub model: ModelConfig,
    pub total_steps: usize,
    /// Whole images per step.
    pub batch_size: usize,
    pub seed: u64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub val_interval: usize,
    /// Side of a random square crop per sample; `None` trains on whole images.
    pub crop: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            total_steps: 5000,
            batch_size: 1,
            seed: 0,
            lr_start: 1e-3,
            lr_end: 1e-5,
            val_interval: 100,
            crop: None,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.total_steps == 0 {
            return bad("total_steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.val_interval == 0 {
            return bad("val_interval must be at least 1".into());
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_start.is_finite() && self.lr_end.is_finite()) {
            return bad(format!("learning rates must be positive, got {} -> {}", self.lr_start, self.lr_end));
        }
        if self.crop == Some(0) {
            return bad("crop size must be positive".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            total_steps: self.total_steps,
        }
    }
}

/// A training run read from disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    #[serde(flatten)]
    pub options: TrainOptions,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub step: usize,
    pub mean_delta_e: f64,
}

/// What a run did and which checkpoint it kept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub options: TrainOptions,
    /// Generator settings of the dataset, when trained from disk.
    pub dataset: Option<DatasetConfig>,
    pub param_count: usize,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub validations: Vec<Validation>,
    pub selected_step: usize,
    pub selected_val_delta_e: f64,
}

impl RunManifest {
    /// Checks that the selected step has the lowest recorded validation error.
    pub fn selection_is_argmin(&self) -> bool {
        let best = self.validations.iter().map(|v| v.mean_delta_e).fold(f64::INFINITY, f64::min);
        self.validations
            .iter()
            .any(|v| v.step == self.selected_step && v.mean_delta_e == best && best == self.selected_val_delta_e)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the selected (best validation) step.
    pub best: ModelParams<f32>,
    pub last: ModelParams<f32>,
    /// Mean batch loss before each update; `losses[s]` belongs to step `s`.
    pub losses: Vec<f64>,
    pub manifest: RunManifest,
}

struct Sample {
    input: Tensor<f32>,
    target: Tensor<f32>,
}

fn crop(t: &Tensor<f32>, y0: usize, x0: usize, size: usize) -> Tensor<f32> {
    let (_, w, c) = match t.shape() {
        &[h, w, c] => (h, w, c),
        _ => unreachable!("samples are [H, W, C]"),
    };
    let mut data = Vec::with_capacity(size * size * c);
    for y in y0..y0 + size {
        data.extend_from_slice(&t.data()[(y * w + x0) * c..(y * w + x0 + size) * c]);
    }
    Tensor::new(vec![size, size, c], data).expect("crop inside the image")
}

/// Trains on in-memory scenes. Every `val_interval` steps (and after the
/// last one) the mean validation CIEDE2000 of the clamped output is
/// recorded, and the best parameters so far are kept.
pub fn train(train_set: &[SceneData], val_set: &[SceneData], opts: &TrainOptions) -> Result<TrainOutcome> {
    train_with_dataset(train_set, val_set, opts, None)
}

fn train_with_dataset(
    train_set: &[SceneData],
    val_set: &[SceneData],
    opts: &TrainOptions,
    dataset: Option<DatasetConfig>,
) -> Result<TrainOutcome> {
    opts.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("the training split is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Config("the validation split is empty".into()));
    }
    let cfg = &opts.model;
    let presets = cfg.presets()?;
    let samples: Vec<Sample> = train_set
        .iter()
        .map(|s| Sample {
            input: s.stack.concat(&presets),
            target: s.gt.to_tensor(),
        })
        .collect();
    if let Some(c) = opts.crop {
        if let Some(s) = train_set.iter().find(|s| s.stack.width() < c || s.stack.height() < c) {
            return Err(Error::Config(format!(
                "crop {c} is larger than scene {} ({}x{})",
                s.id,
                s.stack.width(),
                s.stack.height()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut params = ModelParams::<f32>::init(cfg, rng.gen())?;
    let mut flat = params.flatten();
    let mut adam = AdamState::<f32>::new(flat.len());
    let schedule = opts.schedule();

    let mut losses = Vec::with_capacity(opts.total_steps);
    let mut validations = Vec::new();
    let mut best: Option<(f64, usize, ModelParams<f32>)> = None;
    let mut grad = vec![0.0f32; flat.len()];
    for step in 0..opts.total_steps {
        let lr = schedule.lr(step);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for _ in 0..opts.batch_size {
            let s = &samples[rng.gen_range(0..samples.len())];
            let (l, g) = match opts.crop {
                Some(c) => {
                    let (h, w) = (s.input.shape()[0], s.input.shape()[1]);
                    let (y0, x0) = (rng.gen_range(0..=h - c), rng.gen_range(0..=w - c));
                    loss_and_gradient(&crop(&s.input, y0, x0, c), &crop(&s.target, y0, x0, c), &params, cfg)?
                }
                None => loss_and_gradient(&s.input, &s.target, &params, cfg)?,
            };
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        loss /= opts.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, lr, loss });
        }
        losses.push(loss);
        let scale = 1.0 / opts.batch_size as f32;
        grad.iter_mut().for_each(|g| *g *= scale);
        adam_step(&mut flat, &grad, &mut adam, lr)?;
        params = ModelParams::unflatten(cfg, &flat)?;

        let done = step + 1;
        if done % opts.val_interval == 0 || done == opts.total_steps {
            let de = mean_delta_e(&params, cfg, val_set)?;
            validations.push(Validation {
                step: done,
                mean_delta_e: de,
            });
            if best.as_ref().is_none_or(|(b, _, _)| de < *b) {
                best = Some((de, done, params.clone()));
            }
        }
    }
    let (best_de, best_step, best_params) = best.expect("the last step always validates");
    let manifest = RunManifest {
        code_version: format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
        options: opts.clone(),
        dataset,
        param_count: param_count(cfg),
        train_scenes: train_set.len(),
        val_scenes: val_set.len(),
        validations,
        selected_step: best_step,
        selected_val_delta_e: best_de,
    };
    Ok(TrainOutcome {
        best: best_params,
        last: params,
        losses,
        manifest,
    })
}

/// Path of the run manifest written next to `checkpoint`.
pub fn manifest_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    checkpoint.with_file_name(name)
}

/// Trains from a dataset directory and writes the selected checkpoint and
/// its run manifest.
pub fn train_from_disk(cfg: &TrainConfig) -> Result<RunManifest> {
    use crate::synth::{Dataset, Split};
    cfg.options.validate()?;
    let ds = Dataset::open(&cfg.dataset)?;
    if ds.ids(Split::Val).is_empty() {
        return Err(Error::Config(format!("{}: the validation split is empty", cfg.dataset.display())));
    }
    if ds.ids(Split::Train).is_empty() {
        return Err(Error::Config(format!("{}: the training split is empty", cfg.dataset.display())));
    }
    let train_set = ds.load_split(Split::Train)?;
    let val_set = ds.load_split(Split::Val)?;
    let out = train_with_dataset(&train_set, &val_set, &cfg.options, Some(ds.manifest.config.clone()))?;
    if let Some(dir) = cfg.checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    checkpoint::save(&cfg.checkpoint, &cfg.options.model, &out.best)?;
    let mpath = manifest_path(&cfg.checkpoint);
    std::fs::write(&mpath, out.manifest.to_json() + "\n").map_err(|e| Error::io(&mpath, e))?;
    Ok(out.manifest)
}
