use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::engine::gradcheck::tolerance;

fn random_stack(seed: u64, w: usize, h: usize) -> PresetStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..5)
        .map(|_| ImageRgb::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()]))
        .collect();
    PresetStack::new(images).unwrap()
}

fn randomized(cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat: Vec<f64> = (0..param_count(cfg)).map(|_| rng.gen_range(-0.5..0.5)).collect();
    ModelParams::unflatten(cfg, &flat).unwrap()
}

#[test]
fn output_is_hw3_and_finite() {
    let cfg = ModelConfig::default();
    let params = ModelParams::<f32>::init(&cfg, 1).unwrap();
    let out = forward(&random_stack(2, 8, 8), &params, &cfg, Mode::Inference).unwrap();
    assert_eq!((out.width(), out.height()), (8, 8));
    assert!(out.data().iter().all(|v| v.is_finite()));
    assert!(out.in_unit_range());

    let raw = forward(&random_stack(2, 8, 8), &params, &cfg, Mode::Training).unwrap();
    assert!(raw.data().iter().all(|v| v.is_finite()));
}

#[test]
fn forward_is_deterministic() {
    let cfg = ModelConfig::default();
    let params = ModelParams::<f32>::init(&cfg, 3).unwrap();
    let stack = random_stack(4, 9, 7);
    let a = forward(&stack, &params, &cfg, Mode::Inference).unwrap();
    let b = forward(&stack.clone(), &params, &cfg, Mode::Inference).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn mismatched_params_are_rejected() {
    let params = ModelParams::<f32>::init(&ModelConfig::default(), 0).unwrap();
    let err = forward(&random_stack(0, 8, 8), &params, &ModelConfig::with_presets(3), Mode::Inference).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(ref m) if m.contains("conv_in_weight")), "{err}");
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        ModelConfig::with_presets(0),
        ModelConfig::with_presets(6),
        ModelConfig {
            attention_heads: 4,
            ..ModelConfig::default()
        },
        ModelConfig {
            ffn_expansion: 0.0,
            ..ModelConfig::default()
        },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
}

#[test]
fn attention_map_is_channel_by_channel() {
    let cfg = ModelConfig::default();
    let params = ModelParams::<f32>::init(&cfg, 5).unwrap();
    for (small, large) in [(8, 32), (16, 64)] {
        let a = attention_state(&random_stack(1, small, small), &params, &cfg).unwrap();
        let b = attention_state(&random_stack(1, large, large), &params, &cfg).unwrap();
        assert_eq!(a.attention.len(), cfg.attention_heads);
        for (x, y) in a.attention.iter().zip(&b.attention) {
            assert_eq!(x.shape(), &[cfg.head_dim(), cfg.head_dim()]);
            assert_eq!(x.shape(), y.shape());
        }
        assert_eq!(a.q[0].shape(), &[small, small, cfg.head_dim()]);
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let cfg = ModelConfig::default();
    let mut params = ModelParams::<f32>::init(&cfg, 6).unwrap();
    params.temperature = Tensor::new(vec![3], vec![0.5, 4.0, 20.0]).unwrap();
    let st = attention_state(&random_stack(7, 12, 10), &params, &cfg).unwrap();
    for a in &st.attention {
        let d = a.shape()[0];
        for row in a.data().chunks(d) {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-5, "row sum {s}");
            assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}

// --- transposed attention against plain matrix arithmetic ------------------

type Mat = Vec<Vec<f64>>;

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    (0..n)
        .map(|i| (0..m).map(|j| (0..k).map(|t| a[i][t] * b[t][j]).sum()).collect())
        .collect()
}

fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

#[test]
fn attention_matches_matrix_oracle() {
    // 2x2 image, 2 channels, 1 head, identity depthwise stage.
    let cfg = ModelConfig {
        preset_count: 1,
        feature_channels: 2,
        attention_heads: 1,
        ffn_expansion: 2.0,
    };
    let mut p = ModelParams::<f64>::init(&cfg, 0).unwrap();
    let wq = [[0.9, -0.3], [0.2, 0.7]];
    let wk = [[-0.4, 0.8], [0.6, 0.1]];
    let wv = [[0.5, 0.25], [-1.0, 0.75]];
    let wp = [[1.1, -0.2], [0.3, 0.6]];
    let bp = [0.05, -0.1];
    let tau = 1.7;
    // qkv kernel is [1, 1, Cin=2, Cout=6]: q | k | v blocks of the output.
    let mut qkv = vec![0.0; 12];
    for ci in 0..2 {
        for co in 0..2 {
            qkv[ci * 6 + co] = wq[ci][co];
            qkv[ci * 6 + 2 + co] = wk[ci][co];
            qkv[ci * 6 + 4 + co] = wv[ci][co];
        }
    }
    p.qkv_weight = Tensor::new(vec![1, 1, 2, 6], qkv).unwrap();
    p.qkv_dw_weight = Tensor::from_fn(&[3, 3, 6], |i| if i / 6 == 4 { 1.0 } else { 0.0 });
    p.temperature = Tensor::new(vec![1], vec![tau]).unwrap();
    p.attn_proj_weight = Tensor::new(vec![1, 1, 2, 2], wp.iter().flatten().copied().collect()).unwrap();
    p.attn_proj_bias = Tensor::new(vec![2], bp.to_vec()).unwrap();

    let xs = [[0.3, -0.8], [1.2, 0.4], [-0.5, 0.9], [0.7, 0.1]];
    let x = Tensor::new(vec![2, 2, 2], xs.iter().flatten().copied().collect()).unwrap();
    let got = transposed_attention(&mut Eager, &x, &p, 1).unwrap();

    // Rows of X are pixels. Channels of Q and K are normalized over pixels.
    let xm: Mat = xs.iter().map(|r| r.to_vec()).collect();
    let to_mat = |w: &[[f64; 2]; 2]| -> Mat { w.iter().map(|r| r.to_vec()).collect() };
    let normalize_cols = |m: Mat| -> Mat {
        let norms: Vec<f64> = (0..2).map(|j| m.iter().map(|r| r[j] * r[j]).sum::<f64>().sqrt()).collect();
        m.iter().map(|r| (0..2).map(|j| r[j] / norms[j]).collect()).collect()
    };
    let q = normalize_cols(matmul(&xm, &to_mat(&wq)));
    let k = normalize_cols(matmul(&xm, &to_mat(&wk)));
    let v = matmul(&xm, &to_mat(&wv));
    // Channel-major: Kc = K^T (C x HW), Qc = Q^T; logits = Kc Qc^T.
    let logits = matmul(&transpose(&k), &q);
    let attn: Mat = logits
        .iter()
        .map(|r| {
            let e: Vec<f64> = r.iter().map(|z| (tau * z).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|z| z / s).collect()
        })
        .collect();
    // Output channel-major = A Vc, back to pixel rows = V A^T.
    let out = matmul(&v, &transpose(&attn));
    let proj = matmul(&out, &to_mat(&wp));
    for (pix, row) in proj.iter().enumerate() {
        for c in 0..2 {
            let want = row[c] + bp[c];
            let have = got.data()[pix * 2 + c];
            assert!((want - have).abs() < 1e-6, "pixel {pix} ch {c}: {have} vs {want}");
        }
    }
}

// --- gated feed-forward -------------------------------------------------------

fn ffn_config(c: usize) -> ModelConfig {
    ModelConfig {
        preset_count: 1,
        feature_channels: c,
        attention_heads: 1,
        ffn_expansion: 2.0,
    }
}

#[test]
fn ffn_of_zero_is_zero() {
    let cfg = ffn_config(4);
    let mut p = randomized(&cfg, 11);
    p.ffn_in_bias = Tensor::zeros(&[2 * cfg.ffn_hidden()]);
    p.ffn_dw_bias = Tensor::zeros(&[2 * cfg.ffn_hidden()]);
    p.ffn_out_bias = Tensor::zeros(&[4]);
    let y = gated_ffn(&mut Eager, &Tensor::zeros(&[5, 3, 4]), &p).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn ffn_preserves_shape() {
    let cfg = ffn_config(6);
    let p = randomized(&cfg, 12);
    for (h, w) in [(1, 1), (2, 7), (9, 4)] {
        let y = gated_ffn(&mut Eager, &Tensor::full(&[h, w, 6], 0.3), &p).unwrap();
        assert_eq!(y.shape(), &[h, w, 6]);
    }
}

#[test]
fn ffn_matches_step_by_step_oracle() {
    let (hh, ww, c) = (3usize, 3usize, 4usize);
    let cfg = ffn_config(c);
    let hidden = cfg.ffn_hidden();
    assert_eq!(hidden, 8);
    let p = randomized(&cfg, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x: Vec<f64> = (0..hh * ww * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let got = gated_ffn(&mut Eager, &Tensor::new(vec![hh, ww, c], x.clone()).unwrap(), &p).unwrap();

    let win = p.ffn_in_weight.data();
    let bin = p.ffn_in_bias.data();
    let wdw = p.ffn_dw_weight.data();
    let bdw = p.ffn_dw_bias.data();
    let wout = p.ffn_out_weight.data();
    let bout = p.ffn_out_bias.data();
    let e = 2 * hidden;
    // 1x1 expansion.
    let mut y1 = vec![0.0; hh * ww * e];
    for px in 0..hh * ww {
        for o in 0..e {
            y1[px * e + o] = bin[o] + (0..c).map(|i| x[px * c + i] * win[i * e + o]).sum::<f64>();
        }
    }
    // Depthwise 3x3 with zero padding.
    let mut y2 = vec![0.0; hh * ww * e];
    for r in 0..hh as isize {
        for s in 0..ww as isize {
            for ch in 0..e {
                let mut acc = bdw[ch];
                for dr in -1..=1isize {
                    for ds in -1..=1isize {
                        let (rr, ss) = (r + dr, s + ds);
                        if rr < 0 || ss < 0 || rr >= hh as isize || ss >= ww as isize {
                            continue;
                        }
                        let tap = ((dr + 1) * 3 + (ds + 1)) as usize;
                        acc += wdw[tap * e + ch] * y1[(rr as usize * ww + ss as usize) * e + ch];
                    }
                }
                y2[(r as usize * ww + s as usize) * e + ch] = acc;
            }
        }
    }
    // Gate and project.
    let gelu = |z: f64| 0.5 * z * (1.0 + libm::erf(z / std::f64::consts::SQRT_2));
    for px in 0..hh * ww {
        let z: Vec<f64> = (0..hidden)
            .map(|j| gelu(y2[px * e + j]) * y2[px * e + hidden + j])
            .collect();
        for o in 0..c {
            let want = bout[o] + (0..hidden).map(|j| z[j] * wout[j * c + o]).sum::<f64>();
            let have = got.data()[px * c + o];
            assert!((want - have).abs() < 1e-6, "pixel {px} ch {o}: {have} vs {want}");
        }
    }
}

// --- parameters -----------------------------------------------------------------

#[test]
fn default_parameter_count() {
    let cfg = ModelConfig::default();
    let n = param_count(&cfg);
    assert_eq!(n, 5946);
    assert!((4000..=10_000).contains(&n));
    assert_eq!(ModelParams::<f32>::init(&cfg, 0).unwrap().len(), n);
}

#[test]
fn parameter_count_trends() {
    let base = ModelConfig::default();
    assert!(param_count(&ModelConfig::with_presets(1)) < param_count(&base));
    let wider = ModelConfig {
        ffn_expansion: 4.0,
        ..base.clone()
    };
    assert!(param_count(&wider) > param_count(&base));
}

#[test]
fn flatten_round_trips_bit_exactly() {
    let cfg = ModelConfig::default();
    let p = ModelParams::<f32>::init(&cfg, 9).unwrap();
    let back = ModelParams::unflatten(&cfg, &p.flatten()).unwrap();
    assert_eq!(p, back);
    assert!(ModelParams::<f32>::unflatten(&cfg, &[0.0; 3]).is_err());
}

#[test]
fn checkpoint_round_trips_bit_exactly() {
    let cfg = ModelConfig::with_presets(3);
    let p = randomized(&cfg, 2).cast::<f32>();
    let bytes = checkpoint::encode(&cfg, &p).unwrap();
    assert_eq!(&bytes[..4], b"WBF1");
    let (cfg2, p2) = checkpoint::decode(&bytes).unwrap();
    assert_eq!(cfg, cfg2);
    let bits = |p: &ModelParams<f32>| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&p), bits(&p2));
    assert_eq!(checkpoint::encode(&cfg2, &p2).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.wbf");
    checkpoint::save(&path, &cfg, &p).unwrap();
    assert_eq!(checkpoint::load(&path).unwrap().1, p);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let cfg = ModelConfig::default();
    let p = ModelParams::<f32>::init(&cfg, 0).unwrap();
    let bytes = checkpoint::encode(&cfg, &p).unwrap();

    let mut magic = bytes.clone();
    magic[0] = b'X';
    let mut long = bytes.clone();
    long.push(0);
    let mut heads = bytes.clone();
    heads[12..16].copy_from_slice(&4u32.to_le_bytes());
    for bad in [magic, bytes[..bytes.len() - 1].to_vec(), long, heads] {
        assert!(matches!(checkpoint::decode(&bad), Err(Error::Format { .. })));
    }
}

// --- end-to-end gradients ---------------------------------------------------------

#[test]
fn network_gradient_check_f64() {
    let (_, tol) = tolerance::<f64>();
    for seed in 0..20 {
        let err = network_gradient_error::<f64>(seed).unwrap();
        assert!(err < tol, "seed {seed}: {err:e}");
    }
}

#[test]
fn network_gradient_check_f32() {
    let (_, tol) = tolerance::<f32>();
    for seed in 0..20 {
        let err = network_gradient_error::<f32>(seed).unwrap();
        assert!(err < tol, "seed {seed}: {err:e}");
    }
}

proptest! {
    #[test]
    fn param_count_is_sum_of_tensor_sizes(
        presets in 1usize..=5,
        heads in 1usize..=4,
        per_head in 1usize..=6,
        expansion in 0.5f32..4.0,
    ) {
        let cfg = ModelConfig {
            preset_count: presets,
            feature_channels: heads * per_head,
            attention_heads: heads,
            ffn_expansion: expansion,
        };
        prop_assume!(cfg.validate().is_ok());
        let p = ModelParams::<f32>::init(&cfg, 0).unwrap();
        prop_assert_eq!(p.len(), param_count(&cfg));
        prop_assert_eq!(ModelParams::unflatten(&cfg, &p.flatten()).unwrap(), p);
    }
}

#[test]
fn strips_match_whole_image_graph() {
    for (seed, heads, (h, w)) in [(1u64, 3usize, (37usize, 23usize)), (2, 1, (5, 9)), (3, 5, (1, 4)), (4, 3, (64, 3))] {
        let cfg = ModelConfig {
            attention_heads: heads,
            ..ModelConfig::default()
        };
        let p = randomized(&cfg, seed);
        let stack = random_stack(seed, w, h);
        let input: Tensor<f64> = stack.concat(&cfg.presets().unwrap());
        let whole = forward_graph(&mut Eager, &input, &p, &cfg).unwrap();
        for strip in [1, 2, 3, 8, 32, 100] {
            let tiled = forward_strips(&input, &p, &cfg, strip).unwrap();
            assert_eq!(tiled.shape(), whole.shape());
            let err = tiled.data().iter().zip(whole.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "seed {seed} strip {strip}: {err:e}");
        }
    }
}

#[test]
fn strips_match_whole_image_graph_f32() {
    let cfg = ModelConfig::default();
    let p = ModelParams::<f32>::init(&cfg, 8).unwrap();
    let input: Tensor<f32> = random_stack(8, 40, 70).concat(&cfg.presets().unwrap());
    let whole = forward_graph(&mut Eager, &input, &p, &cfg).unwrap();
    let tiled = forward_strips(&input, &p, &cfg, DEFAULT_STRIP_ROWS).unwrap();
    let err = tiled.data().iter().zip(whole.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
    // The graph path sums the Gram matrix in f32; strips sum it in f64.
    assert!(err < 1e-4, "{err:e}");
}
