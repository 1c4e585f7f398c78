//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use wbfusion::harness::{self, Baseline, Prediction, TrainConfig, TrainOptions};
use wbfusion::model::{checkpoint, ModelConfig};
use wbfusion::synth::{self, Dataset, DatasetConfig, SceneOptions, Split};
use wbfusion::Error;

#[derive(Parser, Debug)]
#[command(name = "wbfusion", version, about = "White-balance preset fusion")]
struct Cli {
    /// Worker threads for evaluation and hull analysis.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,
    /// Random seed (dataset generation and training).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON file whose keys override the command-line flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-illuminant dataset.
    GenData(GenDataArgs),
    /// Train a fusion model and keep the best validation checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint (or a baseline) on one split.
    Eval(EvalArgs),
    /// Fuse five preset renders into one corrected image.
    Fuse(FuseArgs),
    /// Measure how far ground-truth pixels lie outside the preset hull.
    Hull(HullArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Number of scenes.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    n: u64,
    /// Square scene size; --height/--width override it.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Lights per scene (2 or 3).
    #[arg(long, default_value_t = 2)]
    illuminants: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct GenDataSettings {
    out: PathBuf,
    #[serde(flatten)]
    dataset: DatasetConfig,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Where to write the selected checkpoint (a run manifest goes next to it).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 5000)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Number of presets the model reads (1 = daylight, 3 = daylight/shade/tungsten, 5 = all).
    #[arg(long, default_value_t = 5)]
    presets: usize,
    #[arg(long, default_value_t = 100)]
    val_interval: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr_start: f64,
    #[arg(long, default_value_t = 1e-5)]
    lr_end: f64,
    /// Random square crop per sample (off by default).
    #[arg(long)]
    crop: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, required_unless_present = "baseline", conflicts_with = "baseline")]
    checkpoint: Option<PathBuf>,
    /// Score a fixed prediction instead: a preset name, awb, gt or oracle.
    #[arg(long)]
    baseline: Option<Baseline>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Directory for the JSON and text reports.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct EvalSettings {
    checkpoint: Option<PathBuf>,
    baseline: Option<Baseline>,
    data: PathBuf,
    split: Split,
    out: Option<PathBuf>,
    threads: usize,
}

#[derive(Args, Debug)]
struct FuseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
    /// Five preset PNGs in the order tungsten, fluorescent, daylight, cloudy, shade.
    #[arg(num_args = 5, required = true)]
    presets: Vec<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct FuseSettings {
    checkpoint: PathBuf,
    out: PathBuf,
    presets: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct HullArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, default_value_t = wbfusion::linear::DEFAULT_HULL_TOL)]
    tol: f64,
    /// Directory for hull.json (and distance maps with --maps).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a grayscale distance map per scene.
    #[arg(long)]
    maps: bool,
}

#[derive(Serialize, Deserialize)]
struct HullSettings {
    data: PathBuf,
    split: Split,
    tol: f64,
    out: Option<PathBuf>,
    maps: bool,
    threads: usize,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies the `--config` file on top of the flag-derived settings.
fn with_config<T: Serialize + DeserializeOwned>(settings: T, config: Option<&Path>) -> std::result::Result<T, Failure> {
    let Some(path) = config else {
        return Ok(settings);
    };
    let body =
        std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let over: Value =
        serde_json::from_str(&body).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    if !over.is_object() {
        return Err(Failure::Usage(format!("{}: expected a JSON object", path.display())));
    }
    let mut base = serde_json::to_value(settings).expect("settings serialize");
    merge(&mut base, over);
    serde_json::from_value(base).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, body: &str) -> Outcome {
    std::fs::write(path, body).map_err(|e| Failure::Runtime(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> Outcome {
    let settings = GenDataSettings {
        out: a.out.clone(),
        dataset: DatasetConfig {
            n_scenes: a.n as usize,
            height: a.height.unwrap_or(a.size),
            width: a.width.unwrap_or(a.size),
            seed: cli.seed.unwrap_or(0),
            scene: SceneOptions {
                illuminants: a.illuminants,
                ..SceneOptions::default()
            },
            ..DatasetConfig::default()
        },
    };
    let s = with_config(settings, cli.config.as_deref())?;
    if s.dataset.n_scenes == 0 {
        return Err(Failure::Usage("n must be at least 1".into()));
    }
    if s.dataset.height < synth::MIN_SIDE || s.dataset.width < synth::MIN_SIDE {
        return Err(Failure::Usage(format!("scenes must be at least {0}x{0}", synth::MIN_SIDE)));
    }
    s.dataset.counts().map_err(|e| Failure::Usage(e.to_string()))?;
    let m = synth::build_dataset(&s.out, &s.dataset)?;
    println!(
        "wrote {} scenes to {} (train {}, val {}, test {})",
        s.dataset.n_scenes,
        s.out.display(),
        m.train.len(),
        m.val.len(),
        m.test.len()
    );
    Ok(())
}

fn train(cli: &Cli, a: &TrainArgs) -> Outcome {
    let settings = TrainConfig {
        dataset: a.data.clone(),
        checkpoint: a.checkpoint.clone(),
        options: TrainOptions {
            model: ModelConfig::with_presets(a.presets),
            total_steps: a.steps,
            batch_size: a.batch,
            seed: cli.seed.unwrap_or(0),
            lr_start: a.lr_start,
            lr_end: a.lr_end,
            val_interval: a.val_interval,
            crop: a.crop,
        },
    };
    let cfg = with_config(settings, cli.config.as_deref())?;
    cfg.options.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let t = Instant::now();
    let m = harness::train_from_disk(&cfg)?;
    for v in &m.validations {
        println!("step {:>6}  val dE2000 {:.4}", v.step, v.mean_delta_e);
    }
    println!(
        "selected step {} (val dE2000 {:.4}); {} parameters; {:.1} s",
        m.selected_step,
        m.selected_val_delta_e,
        m.param_count,
        t.elapsed().as_secs_f64()
    );
    println!(
        "checkpoint {}, manifest {}",
        cfg.checkpoint.display(),
        harness::manifest_path(&cfg.checkpoint).display()
    );
    Ok(())
}

fn eval(cli: &Cli, a: &EvalArgs) -> Outcome {
    let settings = EvalSettings {
        checkpoint: a.checkpoint.clone(),
        baseline: a.baseline,
        data: a.data.clone(),
        split: a.split,
        out: a.out.clone(),
        threads: cli.threads as usize,
    };
    let s = with_config(settings, cli.config.as_deref())?;
    let ds = Dataset::open(&s.data)?;
    let scenes = ds.load_split(s.split)?;
    let (report, stem) = match (&s.checkpoint, s.baseline) {
        (Some(path), None) => {
            let (cfg, params) = checkpoint::load(path)?;
            let r = harness::evaluate(&Prediction::Model(&params, &cfg), &scenes, s.split.name(), s.threads)?;
            (r, format!("metrics_{}", s.split))
        }
        (None, Some(b)) => {
            let r = harness::evaluate(&b.prediction(), &scenes, s.split.name(), s.threads)?;
            (r, format!("metrics_{}_{b}", s.split))
        }
        _ => return Err(Failure::Usage("give exactly one of --checkpoint and --baseline".into())),
    };
    print!("{}", report.to_table());
    if let Some(dir) = &s.out {
        report.write(dir, &stem)?;
    }
    Ok(())
}

fn fuse(cli: &Cli, a: &FuseArgs) -> Outcome {
    let settings = FuseSettings {
        checkpoint: a.checkpoint.clone(),
        out: a.out.clone(),
        presets: a.presets.clone(),
    };
    let s = with_config(settings, cli.config.as_deref())?;
    if s.presets.len() != 5 {
        return Err(Failure::Usage(format!("expected 5 preset images, got {}", s.presets.len())));
    }
    let t = Instant::now();
    let img = harness::fuse_files(&s.checkpoint, &s.presets, &s.out)?;
    println!(
        "wrote {} ({}x{}) in {:.3} s",
        s.out.display(),
        img.width(),
        img.height(),
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

fn hull(cli: &Cli, a: &HullArgs) -> Outcome {
    let settings = HullSettings {
        data: a.data.clone(),
        split: a.split,
        tol: a.tol,
        out: a.out.clone(),
        maps: a.maps,
        threads: cli.threads as usize,
    };
    let s = with_config(settings, cli.config.as_deref())?;
    if !(s.tol >= 0.0) {
        return Err(Failure::Usage(format!("tol must be non-negative, got {}", s.tol)));
    }
    let ds = Dataset::open(&s.data)?;
    let scenes = ds.load_split(s.split)?;
    let summary = harness::hull_scenes(&scenes, s.split.name(), s.tol, s.threads)?;
    for sc in &summary.scenes {
        println!(
            "{}  out-of-hull {:>6.2}%  mean {:.5}  max {:.5}",
            sc.id,
            100.0 * sc.report.out_of_hull_fraction,
            sc.report.mean_distance,
            sc.report.max_distance
        );
    }
    println!(
        "{} split, tol {}: {:.2}% of {} pixels outside the preset hull (mean distance {:.5}, max {:.5})",
        s.split,
        s.tol,
        100.0 * summary.out_of_hull_fraction,
        summary.pixel_count,
        summary.mean_distance,
        summary.max_distance
    );
    if let Some(dir) = &s.out {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(Error::io(dir, e)))?;
        write_text(&dir.join("hull.json"), &summary.to_json())?;
        if s.maps {
            for sc in &summary.scenes {
                sc.report.save_distance_map(dir.join(format!("{}_distance.png", sc.id)))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(&cli, a),
        Command::Train(a) => train(&cli, a),
        Command::Eval(a) => eval(&cli, a),
        Command::Fuse(a) => fuse(&cli, a),
        Command::Hull(a) => hull(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
