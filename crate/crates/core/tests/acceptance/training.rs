//! Training behaviour on the default synthetic set.

use wbfusion::harness::{train, TrainOptions};
use wbfusion::imaging::PresetStack;
use wbfusion::model::{forward, Mode, ModelConfig};
use wbfusion::synth::{generate_split, DatasetConfig};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn loss_falls_and_trained_model_depends_on_preset_order() {
    let _serial = crate::serial();
    let [train_set, val, test] = generate_split(&DatasetConfig::default()).unwrap();
    let mut first = Vec::new();
    let mut at_200 = Vec::new();
    let mut model = None;
    for seed in 0..5 {
        let opts = TrainOptions {
            total_steps: 201,
            val_interval: 201,
            seed,
            ..TrainOptions::default()
        };
        let out = train(&train_set, &val, &opts).unwrap();
        first.push(out.losses[0]);
        at_200.push(out.losses[200]);
        model.get_or_insert(out.best);
    }
    let (l0, l200) = (median(first), median(at_200));
    assert!(l200 < l0, "median loss at step 200 {l200} vs step 0 {l0}");

    // Swapping presets (tungsten <-> shade, daylight <-> cloudy) changes the output.
    let params = model.unwrap();
    let cfg = ModelConfig::default();
    let stack = &test[0].stack;
    let imgs = stack.images();
    let swapped = PresetStack::new(vec![imgs[4].clone(), imgs[1].clone(), imgs[3].clone(), imgs[2].clone(), imgs[0].clone()]).unwrap();
    let a = forward(stack, &params, &cfg, Mode::Inference).unwrap();
    let b = forward(&swapped, &params, &cfg, Mode::Inference).unwrap();
    let diff = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(diff > 1e-3, "permuted output differs by only {diff}");
}
