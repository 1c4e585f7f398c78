//! Strip-wise inference.
//!
//! The network is evaluated on horizontal strips with a two-row halo so the
//! working set stays cache-sized on large images. Attention needs whole-image
//! statistics (channel norms and the K^T Q Gram matrix), so a first sweep
//! accumulates those and keeps the conv_in features and V; a second sweep
//! finishes each strip. Every per-pixel value is produced by the same kernels
//! as the whole-image graph; only the attention sums are accumulated in
//! strip order (and in f64), so results agree to rounding.

use super::{gated_ffn, ModelConfig, ModelParams};
use crate::engine::{kernels, Eager, Element, Tensor};
use crate::error::Result;

/// Output rows computed per strip.
pub const DEFAULT_STRIP_ROWS: usize = 32;

/// Two stacked 3x3 convolutions per sweep.
const HALO: usize = 2;

fn rows<T: Element>(data: &[T], w: usize, c: usize, start: usize, end: usize) -> Tensor<T> {
    let row = w * c;
    Tensor::new(vec![end - start, w, c], data[start * row..end * row].to_vec()).expect("row range in bounds")
}

/// Unclamped `[H, W, 3]` output for a `[H, W, 3P]` input.
pub fn forward_strips<T: Element>(
    input: &Tensor<T>,
    p: &ModelParams<T>,
    cfg: &ModelConfig,
    strip_rows: usize,
) -> Result<Tensor<T>> {
    let (h, w, cin) = input.hwc("network input")?;
    if cin != 3 * cfg.preset_count {
        return Err(crate::Error::invalid(format!(
            "network input has {cin} channels, config expects 3 x {} = {}",
            cfg.preset_count,
            3 * cfg.preset_count
        )));
    }
    let strip = strip_rows.max(1);
    let c = cfg.feature_channels;
    let heads = cfg.attention_heads;
    let d = c / heads;
    let row = w * c;

    // Sweep 1: features, V, and attention statistics.
    let mut feat_all = vec![T::zero(); h * row];
    let mut v_all = vec![T::zero(); h * row];
    let mut sq_q = vec![0.0f64; c];
    let mut sq_k = vec![0.0f64; c];
    let mut gram = vec![0.0f64; heads * d * d];
    for r0 in (0..h).step_by(strip) {
        let r1 = (r0 + strip).min(h);
        let (w0, w1) = (r0.saturating_sub(HALO), (r1 + HALO).min(h));
        let x = rows(input.data(), w, cin, w0, w1);
        let feat = kernels::conv2d(&x, &p.conv_in_weight, &p.conv_in_bias)?;
        let (n, _) = kernels::layer_norm(&feat, &p.norm1_gamma, &p.norm1_beta)?;
        let qkv = kernels::conv2d(&n, &p.qkv_weight, &p.qkv_bias)?;
        let qkv = kernels::depthwise_conv3x3(&qkv, &p.qkv_dw_weight, &p.qkv_dw_bias)?;
        let skip = (r0 - w0) * w;
        let valid = (r1 - r0) * w;
        feat_all[r0 * row..r1 * row].copy_from_slice(&feat.data()[skip * c..(skip + valid) * c]);
        for (i, px) in qkv.data().chunks_exact(3 * c).skip(skip).take(valid).enumerate() {
            let (q, rest) = px.split_at(c);
            let (k, v) = rest.split_at(c);
            v_all[(r0 * w + i) * c..][..c].copy_from_slice(v);
            for ch in 0..c {
                let (qv, kv) = (q[ch].as_f64(), k[ch].as_f64());
                sq_q[ch] += qv * qv;
                sq_k[ch] += kv * kv;
            }
            for hd in 0..heads {
                let g = &mut gram[hd * d * d..][..d * d];
                for i in 0..d {
                    let kv = k[hd * d + i].as_f64();
                    for j in 0..d {
                        g[i * d + j] += kv * q[hd * d + j].as_f64();
                    }
                }
            }
        }
    }

    let eps = kernels::L2_NORM_EPS;
    let attn: Vec<Tensor<T>> = (0..heads)
        .map(|hd| {
            let tau = p.temperature.data()[hd].as_f64();
            let mut a = vec![T::zero(); d * d];
            for i in 0..d {
                let nk = sq_k[hd * d + i].sqrt().max(eps);
                let logits: Vec<f64> = (0..d)
                    .map(|j| tau * gram[(hd * d + i) * d + j] / (nk * sq_q[hd * d + j].sqrt().max(eps)))
                    .collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
                let s: f64 = e.iter().sum();
                for j in 0..d {
                    a[i * d + j] = T::from_f64(e[j] / s);
                }
            }
            Tensor::new(vec![d, d], a).expect("d x d")
        })
        .collect();

    // Sweep 2: attention output, FFN, conv_out.
    let mut out = vec![T::zero(); h * w * 3];
    for r0 in (0..h).step_by(strip) {
        let r1 = (r0 + strip).min(h);
        let (w0, w1) = (r0.saturating_sub(HALO), (r1 + HALO).min(h));
        let feat = rows(&feat_all, w, c, w0, w1);
        let v = rows(&v_all, w, c, w0, w1);
        let heads_out = (0..heads)
            .map(|hd| kernels::attend(&attn[hd], &kernels::channel_slice(&v, hd * d, d)?))
            .collect::<Result<Vec<_>>>()?;
        let merged = kernels::concat_channels(&heads_out.iter().collect::<Vec<_>>())?;
        let att = kernels::conv2d(&merged, &p.attn_proj_weight, &p.attn_proj_bias)?;
        let x1 = kernels::add(&feat, &att)?;
        let (n, _) = kernels::layer_norm(&x1, &p.norm2_gamma, &p.norm2_beta)?;
        let ff = gated_ffn(&mut Eager, &n, p)?;
        let x2 = kernels::add(&x1, &ff)?;
        let y = kernels::conv2d(&x2, &p.conv_out_weight, &p.conv_out_bias)?;
        let skip = (r0 - w0) * w * 3;
        out[r0 * w * 3..r1 * w * 3].copy_from_slice(&y.data()[skip..skip + (r1 - r0) * w * 3]);
    }
    Tensor::new(vec![h, w, 3], out)
}
