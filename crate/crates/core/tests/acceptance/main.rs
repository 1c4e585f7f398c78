//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! (straight to stderr, so it shows up even when output is captured).
//! A shared lock runs them one at a time: the timing checks must not
//! compete with training for the CPU.
//!
//! The CLI contract and training-behaviour tests live in submodules of
//! this binary rather than in binaries of their own. Cargo stops at the
//! first failing test binary, and this one sorts first, so they would
//! otherwise be skipped whenever a criterion fails.

mod ciede2000;
mod cli;
mod sharma;
mod training;

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sharma::SHARMA_PAIRS;
use wbfusion::engine::gradcheck::op_gradient_errors;
use wbfusion::harness::{evaluate, hull_scenes, train, Prediction, TrainOptions};
use wbfusion::imaging::Preset;
use wbfusion::linear::{analyze_hull, blend, FusionWeights, DEFAULT_HULL_TOL};
use wbfusion::metrics::{delta_e_2000, srgb_to_linear, LabColor};
use wbfusion::model::{checkpoint, network_gradient_error, param_count, ModelConfig, ModelParams};
use wbfusion::synth::{
    adjust_brightness, generate_scene, generate_split, render_awb, render_ground_truth, render_preset_stack, Brightness,
    DatasetConfig, SceneData, SceneOptions,
};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, pass: bool, detail: &str) {
    let line = format!("{} criterion {n}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

fn check(n: u32, pass: bool, detail: String) {
    report(n, pass, &detail);
    assert!(pass, "criterion {n}: {detail}");
}

fn wbfusion() -> Command {
    Command::new(env!("CARGO_BIN_EXE_wbfusion"))
}

fn run_ok(cmd: &mut Command) {
    let out = cmd.output().expect("spawn wbfusion");
    assert!(
        out.status.success(),
        "{cmd:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn c01_ciede2000_reference_pairs() {
    let _g = serial();
    let t = Instant::now();
    let worst = SHARMA_PAIRS
        .iter()
        .map(|p| (delta_e_2000(LabColor::new(p[0], p[1], p[2]), LabColor::new(p[3], p[4], p[5])) - p[6]).abs())
        .fold(0.0, f64::max);
    let dt = t.elapsed();
    check(
        1,
        worst < 1e-4 && dt < Duration::from_secs(1),
        format!("34 reference pairs, worst |error| {worst:.2e} (< 1e-4) in {dt:?} (< 1 s)"),
    );
}

#[test]
fn c02_gradient_checks() {
    let _g = serial();
    let t = Instant::now();
    let (mut w32, mut w64) = (0.0f64, 0.0f64);
    let mut ops = 0;
    for seed in 0..20 {
        for (_, e) in op_gradient_errors::<f32>(seed) {
            w32 = w32.max(e);
            ops += 1;
        }
        for (_, e) in op_gradient_errors::<f64>(seed) {
            w64 = w64.max(e);
        }
        w32 = w32.max(network_gradient_error::<f32>(seed).unwrap());
        w64 = w64.max(network_gradient_error::<f64>(seed).unwrap());
    }
    let dt = t.elapsed();
    check(
        2,
        w32 < 1e-3 && w64 < 1e-5 && dt < Duration::from_secs(60),
        format!(
            "{} op checks + network over 20 seeds: f32 worst {w32:.2e} (< 1e-3), f64 worst {w64:.2e} (< 1e-5), {dt:.1?} (< 1 min)",
            ops / 20
        ),
    );
}

#[test]
fn c03_parameter_budget() {
    let _g = serial();
    let n = param_count(&ModelConfig::default());
    check(3, (4000..=10000).contains(&n), format!("default config has exactly {n} parameters (4000..=10000)"));
}

#[test]
fn c04_overfits_four_scenes() {
    let _g = serial();
    let cfg = DatasetConfig {
        n_scenes: 4,
        height: 64,
        width: 64,
        seed: 2,
        split_sizes: Some([4, 0, 0]),
        ..DatasetConfig::default()
    };
    let [scenes, _, _] = generate_split(&cfg).unwrap();
    let opts = TrainOptions {
        total_steps: 2000,
        batch_size: 4,
        ..TrainOptions::default()
    };
    let t = Instant::now();
    // Validating on the training scenes selects by train error.
    let out = train(&scenes, &scenes, &opts).unwrap();
    let dt = t.elapsed();
    let de = out.manifest.selected_val_delta_e;
    check(
        4,
        de < 2.0 && dt < Duration::from_secs(300),
        format!(
            "4 scenes, 2000 steps (batch 4): train mean dE2000 {de:.3} at step {} (< 2.0) in {dt:.1?} (< 5 min)",
            out.manifest.selected_step
        ),
    );
}

/// 200 / 30 / 50 scenes at 64x64.
fn headline_splits() -> [Vec<SceneData>; 3] {
    generate_split(&DatasetConfig {
        n_scenes: 280,
        height: 64,
        width: 64,
        seed: 1,
        split_sizes: Some([200, 30, 50]),
        ..DatasetConfig::default()
    })
    .unwrap()
}

struct Run {
    test_delta_e: f64,
    seconds: f64,
}

/// `(presets, seed) -> (test dE2000, seconds)`.
type RunCache = HashMap<(usize, u64), (f64, f64)>;

static RUNS: Mutex<Option<RunCache>> = Mutex::new(None);

/// Trains (or reuses) the model reading `presets` presets with `seed` and
/// scores it on the test split. All runs share one budget.
fn headline_run(splits: &[Vec<SceneData>; 3], presets: usize, seed: u64) -> Run {
    let mut runs = RUNS.lock().unwrap_or_else(|e| e.into_inner());
    let cache = runs.get_or_insert_with(HashMap::new);
    let (test_delta_e, seconds) = *cache.entry((presets, seed)).or_insert_with(|| {
        let [train_set, val, test] = splits;
        let opts = TrainOptions {
            model: ModelConfig::with_presets(presets),
            seed,
            ..TrainOptions::default()
        };
        let t = Instant::now();
        let out = train(train_set, val, &opts).unwrap();
        let r = evaluate(&Prediction::Model(&out.best, &opts.model), test, "test", 1).unwrap();
        (r.delta_e.mean, t.elapsed().as_secs_f64())
    });
    Run { test_delta_e, seconds }
}

#[test]
fn c05_beats_every_preset() {
    let _g = serial();
    let t = Instant::now();
    let splits = headline_splits();
    let gen_secs = t.elapsed().as_secs_f64();
    let presets: Vec<(Preset, f64)> = Preset::ALL
        .iter()
        .map(|&p| (p, evaluate(&Prediction::Preset(p), &splits[2], "test", 1).unwrap().delta_e.mean))
        .collect();
    let (best_preset, best) = presets.iter().copied().fold((Preset::Daylight, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    let run = headline_run(&splits, 5, 0);
    let secs = gen_secs + run.seconds;
    let model = run.test_delta_e;
    let listing: Vec<String> = presets.iter().map(|(p, d)| format!("{p} {d:.3}")).collect();
    check(
        5,
        presets.iter().all(|&(_, d)| model < d) && model <= 0.8 * best && secs < 1800.0,
        format!(
            "test mean dE2000 model {model:.3} vs presets [{}]; ratio to best ({best_preset}) {:.3} (<= 0.8); {secs:.0} s (< 30 min)",
            listing.join(", "),
            model / best
        ),
    );
}

fn median3(mut v: [f64; 3]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[1]
}

#[test]
fn c06_preset_ablation_ordering() {
    let _g = serial();
    let splits = headline_splits();
    let mut medians = Vec::new();
    let mut detail = Vec::new();
    for p in [5, 3, 1] {
        let v = [0, 1, 2].map(|seed| headline_run(&splits, p, seed).test_delta_e);
        let m = median3(v);
        detail.push(format!("P={p} median {m:.3} (seeds {:.3}/{:.3}/{:.3})", v[0], v[1], v[2]));
        medians.push(m);
    }
    check(
        6,
        medians[0] < medians[1] && medians[1] < medians[2],
        format!("needs P5 < P3 < P1: {}", detail.join("; ")),
    );
}

#[test]
fn c07_ground_truth_leaves_the_hull() {
    let _g = serial();
    let [_, _, test] = headline_splits();
    let hull = hull_scenes(&test, "test", DEFAULT_HULL_TOL, 1).unwrap();
    let oracle = evaluate(&Prediction::Oracle, &test, "test", 1).unwrap().delta_e.mean;

    // Inversion: a ground truth that is itself a convex blend sits inside.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut inside_worst: f64 = 0.0;
    for s in test.iter().take(5) {
        let n = s.stack.width() * s.stack.height();
        let mut data = Vec::with_capacity(n * 5);
        for _ in 0..n {
            let raw: [f64; 5] = [(); 5].map(|_| -rng.gen::<f64>().max(1e-12).ln());
            let sum: f64 = raw.iter().sum();
            data.extend(raw.map(|v| v / sum));
        }
        let w = FusionWeights::new(s.stack.width(), s.stack.height(), data).unwrap();
        let gt = blend(&s.stack, &w).unwrap();
        inside_worst = inside_worst.max(analyze_hull(&s.stack, &gt, DEFAULT_HULL_TOL).unwrap().out_of_hull_fraction);
    }
    check(
        7,
        hull.out_of_hull_fraction > 0.05 && oracle > 0.0 && inside_worst == 0.0,
        format!(
            "test split: {:.1}% of {} pixels outside the hull at tol 1e-3 (> 5%); oracle blend dE2000 {oracle:.3} (> 0); convex-blend GT fraction {inside_worst} (= 0)",
            100.0 * hull.out_of_hull_fraction,
            hull.pixel_count
        ),
    );
}

#[test]
fn c08_brightness_matching() {
    let _g = serial();
    let linear = |v: f32| srgb_to_linear(v as f64);
    let (mut unclipped, mut matched, mut clipped) = (0usize, 0usize, 0usize);
    let mut worst_ratio: f64 = 0.0;
    for seed in 0..20 {
        let s = generate_scene(seed, 64, 64, &SceneOptions::default()).unwrap();
        let (gt, awb) = (render_ground_truth(&s), render_awb(&s));
        let adj = adjust_brightness(&gt, &awb, Brightness::Mean).unwrap();
        clipped += adj.clipped;
        for ((b, a), t) in gt.pixels().zip(adj.image.pixels()).zip(awb.pixels()) {
            let (b, a, t) = (b.map(linear), a.map(linear), t.map(linear));
            if a.iter().any(|&v| v >= 1.0) {
                continue;
            }
            unclipped += 1;
            if (Brightness::Mean.of(a) - Brightness::Mean.of(t)).abs() <= 1e-6 {
                matched += 1;
            }
            for c in [0, 2] {
                worst_ratio = worst_ratio.max((a[c] / a[1] - b[c] / b[1]).abs());
            }
        }
    }
    let frac = matched as f64 / unclipped as f64;
    check(
        8,
        frac >= 0.99 && worst_ratio <= 1e-5,
        format!(
            "20 scenes: {:.3}% of {unclipped} unclipped pixels match AWB brightness within 1e-6 (>= 99%, {clipped} clipped); worst channel-ratio change {worst_ratio:.2e} (<= 1e-5)",
            100.0 * frac
        ),
    );
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn c09_cli_runs_are_byte_identical() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let mut datasets = Vec::new();
    let mut checkpoints = Vec::new();
    for run in ["a", "b"] {
        let data = tmp.path().join(format!("data_{run}"));
        let ckpt = tmp.path().join(format!("model_{run}.wbf"));
        run_ok(wbfusion().args(["--seed", "11", "gen-data", "--n", "10", "--size", "24", "--out"]).arg(&data));
        run_ok(
            wbfusion()
                .args(["--seed", "5", "train", "--steps", "40", "--val-interval", "20", "--data"])
                .arg(&data)
                .arg("--checkpoint")
                .arg(&ckpt),
        );
        datasets.push(dir_bytes(&data));
        let manifest = ckpt.with_file_name(format!("model_{run}.wbf.manifest.json"));
        checkpoints.push((std::fs::read(&ckpt).unwrap(), std::fs::read(manifest).unwrap()));
    }
    let files = datasets[0].len();
    check(
        9,
        files > 0 && datasets[0] == datasets[1] && checkpoints[0] == checkpoints[1],
        format!(
            "two gen-data runs ({files} files each) identical: {}; two train runs, checkpoint and manifest identical: {}",
            datasets[0] == datasets[1],
            checkpoints[0] == checkpoints[1]
        ),
    );
}

fn children_peak_rss_bytes() -> u64 {
    // SAFETY: getrusage only writes into the struct we hand it.
    let mut ru: libc::rusage = unsafe { std::mem::zeroed() };
    let rc = unsafe { libc::getrusage(libc::RUSAGE_CHILDREN, &mut ru) };
    assert_eq!(rc, 0);
    // Linux reports kilobytes.
    ru.ru_maxrss as u64 * 1024
}

#[test]
fn c10_full_size_fusion_budget() {
    let _g = serial();
    let tmp = tempfile::tempdir().unwrap();
    let scene = generate_scene(3, 500, 700, &SceneOptions::default()).unwrap();
    let stack = render_preset_stack(&scene);
    let mut inputs = Vec::new();
    for p in Preset::ALL {
        let path = tmp.path().join(format!("{p}.png"));
        stack.get(p).save_png(&path).unwrap();
        inputs.push(path);
    }
    let cfg = ModelConfig::default();
    let ckpt = tmp.path().join("model.wbf");
    checkpoint::save(&ckpt, &cfg, &ModelParams::init(&cfg, 0).unwrap()).unwrap();
    let out = tmp.path().join("fused.png");

    let t = Instant::now();
    run_ok(wbfusion().args(["--threads", "1", "fuse", "--checkpoint"]).arg(&ckpt).arg("--out").arg(&out).args(&inputs));
    let dt = t.elapsed();
    // Peak over every child this process has waited for: an upper bound.
    let peak_mb = children_peak_rss_bytes() as f64 / (1024.0 * 1024.0);
    let fused = image::open(&out).unwrap();
    let dims_ok = (fused.width(), fused.height()) == (700, 500);
    check(
        10,
        dims_ok && dt < Duration::from_secs(2) && peak_mb < 512.0,
        format!(
            "500x700 fuse through the CLI (load, infer, write) in {:.3} s (< 2 s), peak child RSS {peak_mb:.0} MB (< 512 MB), output {}x{}",
            dt.as_secs_f64(),
            fused.width(),
            fused.height()
        ),
    );
}
