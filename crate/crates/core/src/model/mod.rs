//! The preset-fusion network.
//!
//! ```text
//! concat(presets) -> conv3x3 -> [LN -> transposed attention -> +]
//!                            -> [LN -> gated FFN -> +] -> conv3x3 -> RGB
//! ```
//!
//! Attention runs across channels, so its map is `C/heads x C/heads` no
//! matter how large the image is.

pub mod checkpoint;
mod params;
mod tiled;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{gradcheck, kernels, Eager, Element, Graph, Tape, Tensor};
use crate::error::{Error, Result};
use crate::imaging::{ImageRgb, Preset, PresetStack};

pub use params::{param_count, ModelParams, ParamSet};
pub use tiled::{forward_strips, DEFAULT_STRIP_ROWS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preset_count: usize,
    pub feature_channels: usize,
    pub attention_heads: usize,
    pub ffn_expansion: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            preset_count: 5,
            feature_channels: 15,
            attention_heads: 3,
            ffn_expansion: 2.0,
        }
    }
}

impl ModelConfig {
    pub fn with_presets(preset_count: usize) -> Self {
        Self {
            preset_count,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.preset_count) {
            return Err(Error::invalid(format!(
                "preset_count must be in 1..=5, got {}",
                self.preset_count
            )));
        }
        if self.feature_channels == 0 || self.attention_heads == 0 {
            return Err(Error::invalid("feature_channels and attention_heads must be positive"));
        }
        if !self.feature_channels.is_multiple_of(self.attention_heads) {
            return Err(Error::invalid(format!(
                "feature_channels ({}) must be divisible by attention_heads ({})",
                self.feature_channels, self.attention_heads
            )));
        }
        if !(self.ffn_expansion.is_finite() && self.ffn_hidden() >= 1) {
            return Err(Error::invalid(format!(
                "ffn_expansion {} leaves no hidden channels",
                self.ffn_expansion
            )));
        }
        Ok(())
    }

    /// Width of each of the two gated feed-forward paths.
    pub fn ffn_hidden(&self) -> usize {
        (self.ffn_expansion as f64 * self.feature_channels as f64).floor().max(0.0) as usize
    }

    pub fn head_dim(&self) -> usize {
        self.feature_channels / self.attention_heads
    }

    pub fn presets(&self) -> Result<Vec<Preset>> {
        Preset::selection(self.preset_count)
    }
}

/// Multi-head transposed attention on `[H, W, C]` features.
///
/// Per head, Q and K are L2-normalized along the pixel axis, and
/// `A = softmax(temperature * K^T Q)` is a channel-by-channel map whose rows
/// sum to one. The head output is `A` applied to V.
pub fn transposed_attention<T: Element, G: Graph<T>>(
    g: &mut G,
    x: &G::Value,
    p: &ParamSet<G::Value>,
    heads: usize,
) -> Result<G::Value> {
    let c = g.value(x).hwc("attention input")?.2;
    if heads == 0 || c % heads != 0 {
        return Err(Error::invalid(format!("{c} channels cannot split into {heads} heads")));
    }
    let d = c / heads;
    let (q, k, v) = {
        let qkv = g.conv2d(x, &p.qkv_weight, &p.qkv_bias)?;
        let qkv = g.depthwise_conv3x3(&qkv, &p.qkv_dw_weight, &p.qkv_dw_bias)?;
        (
            g.channel_slice(&qkv, 0, c)?,
            g.channel_slice(&qkv, c, c)?,
            g.channel_slice(&qkv, 2 * c, c)?,
        )
    };
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.channel_slice(&q, h * d, d)?;
        let kh = g.channel_slice(&k, h * d, d)?;
        let qn = g.l2_normalize_channels(&qh)?;
        let kn = g.l2_normalize_channels(&kh)?;
        let logits = g.channel_gram(&kn, &qn)?;
        let logits = g.scale_by_element(&logits, &p.temperature, h)?;
        let attn = g.softmax(&logits, 1)?;
        let vh = g.channel_slice(&v, h * d, d)?;
        outs.push(g.attend(&attn, &vh)?);
    }
    let merged = if heads == 1 {
        outs.pop().expect("one head")
    } else {
        let refs: Vec<&G::Value> = outs.iter().collect();
        g.concat_channels(&refs)?
    };
    g.conv2d(&merged, &p.attn_proj_weight, &p.attn_proj_bias)
}

/// Gated feed-forward: expand, depthwise 3x3, then `GELU(a) * b` projected
/// back to the input width.
pub fn gated_ffn<T: Element, G: Graph<T>>(g: &mut G, x: &G::Value, p: &ParamSet<G::Value>) -> Result<G::Value> {
    let (a, b) = {
        let y = g.conv2d(x, &p.ffn_in_weight, &p.ffn_in_bias)?;
        let y = g.depthwise_conv3x3(&y, &p.ffn_dw_weight, &p.ffn_dw_bias)?;
        let hidden = g.value(&y).hwc("ffn hidden")?.2 / 2;
        (g.channel_slice(&y, 0, hidden)?, g.channel_slice(&y, hidden, hidden)?)
    };
    let gate = g.gelu(&a)?;
    drop(a);
    let z = g.mul(&gate, &b)?;
    drop((gate, b));
    g.conv2d(&z, &p.ffn_out_weight, &p.ffn_out_bias)
}

/// Full network on a `[H, W, 3P]` input; output is `[H, W, 3]`, unclamped.
pub fn forward_graph<T: Element, G: Graph<T>>(
    g: &mut G,
    input: &G::Value,
    p: &ParamSet<G::Value>,
    cfg: &ModelConfig,
) -> Result<G::Value> {
    let expect = 3 * cfg.preset_count;
    let got = g.value(input).hwc("network input")?.2;
    if got != expect {
        return Err(Error::invalid(format!(
            "network input has {got} channels, config expects 3 x {} = {expect}",
            cfg.preset_count
        )));
    }
    let feat = g.conv2d(input, &p.conv_in_weight, &p.conv_in_bias)?;
    let x1 = {
        let n = g.layer_norm(&feat, &p.norm1_gamma, &p.norm1_beta)?;
        let att = transposed_attention(g, &n, p, cfg.attention_heads)?;
        drop(n);
        g.add(&feat, &att)?
    };
    drop(feat);
    let x2 = {
        let n = g.layer_norm(&x1, &p.norm2_gamma, &p.norm2_beta)?;
        let ff = gated_ffn(g, &n, p)?;
        drop(n);
        g.add(&x1, &ff)?
    };
    drop(x1);
    g.conv2d(&x2, &p.conv_out_weight, &p.conv_out_bias)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Output clamped to `[0, 1]`.
    Inference,
    /// Raw network output, so gradients are not cut by the clamp.
    Training,
}

/// Fuses the presets selected by `cfg` into one corrected sRGB image.
///
/// Evaluated strip by strip (see [`forward_strips`]); matches
/// [`forward_graph`] up to floating-point rounding.
pub fn forward<T: Element>(
    stack: &PresetStack,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<ImageRgb> {
    cfg.validate()?;
    params.validate(cfg)?;
    let input: Tensor<T> = stack.concat(&cfg.presets()?);
    let out = forward_strips(&input, params, cfg, DEFAULT_STRIP_ROWS)?;
    let img = ImageRgb::from_tensor(&out)?;
    Ok(match mode {
        Mode::Inference => img.clamped(),
        Mode::Training => img,
    })
}

/// Intermediate values of one transposed-attention pass, per head.
#[derive(Clone, Debug)]
pub struct AttentionState<T = f32> {
    /// Each `[H, W, C/heads]`, i.e. a `C/heads x HW` matrix stored pixel-major.
    pub q: Vec<Tensor<T>>,
    pub k: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Each `[C/heads, C/heads]`; rows sum to one.
    pub attention: Vec<Tensor<T>>,
}

/// Runs the network up to the attention block and returns its internals.
pub fn attention_state<T: Element>(
    stack: &PresetStack,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<AttentionState<T>> {
    cfg.validate()?;
    params.validate(cfg)?;
    let input: Tensor<T> = stack.concat(&cfg.presets()?);
    let feat = kernels::conv2d(&input, &params.conv_in_weight, &params.conv_in_bias)?;
    let (n, _) = kernels::layer_norm(&feat, &params.norm1_gamma, &params.norm1_beta)?;
    attention_state_of(&n, params, cfg.attention_heads)
}

pub(crate) fn attention_state_of<T: Element>(
    x: &Tensor<T>,
    p: &ModelParams<T>,
    heads: usize,
) -> Result<AttentionState<T>> {
    let c = x.hwc("attention input")?.2;
    let d = c / heads;
    let qkv = kernels::conv2d(x, &p.qkv_weight, &p.qkv_bias)?;
    let qkv = kernels::depthwise_conv3x3(&qkv, &p.qkv_dw_weight, &p.qkv_dw_bias)?;
    let mut st = AttentionState {
        q: Vec::new(),
        k: Vec::new(),
        v: Vec::new(),
        attention: Vec::new(),
    };
    for h in 0..heads {
        let q = kernels::channel_slice(&qkv, h * d, d)?;
        let k = kernels::channel_slice(&qkv, c + h * d, d)?;
        let v = kernels::channel_slice(&qkv, 2 * c + h * d, d)?;
        let (qn, _) = kernels::l2_normalize_channels(&q)?;
        let (kn, _) = kernels::l2_normalize_channels(&k)?;
        let logits = kernels::channel_gram(&kn, &qn)?;
        let logits = kernels::scale_by_element(&logits, &p.temperature, h)?;
        st.attention.push(kernels::softmax(&logits, 1)?);
        st.q.push(q);
        st.k.push(k);
        st.v.push(v);
    }
    Ok(st)
}

/// L2 training loss of the unclamped output against `target` and its
/// gradient with respect to every parameter, flattened in checkpoint order.
pub fn loss_and_gradient<T: Element>(
    input: &Tensor<T>,
    target: &Tensor<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<(f64, Vec<T>)> {
    let mut tape = Tape::new();
    let vars = params.map(|t| tape.param(t.clone()));
    let x = tape.constant(input.clone());
    let out = forward_graph(&mut tape, &x, &vars, cfg)?;
    let loss = tape.mse(out, target.clone())?;
    let value = tape.get(loss).data()[0].as_f64();
    let grads = tape.backward(loss)?;
    let mut flat = Vec::with_capacity(params.len());
    for (v, t) in vars.iter().zip(params.iter()) {
        match grads.get(*v) {
            Some(g) => flat.extend_from_slice(g.data()),
            None => flat.extend(std::iter::repeat_n(T::zero(), t.numel())),
        }
    }
    Ok((value, flat))
}

/// Compares [`loss_and_gradient`] with central differences on ten random
/// parameters of a default-config network over a random 4x4 stack.
///
/// Returns the worst probed error divided by the largest gradient entry of
/// the whole network; compare against [`gradcheck::tolerance`].
pub fn network_gradient_error<T: Element>(seed: u64) -> Result<f64> {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::<T>::init(&cfg, seed)?;
    // Nonzero biases and off-unit norms so that every path carries gradient.
    let flat: Vec<T> = params
        .flatten()
        .into_iter()
        .map(|v| v + T::from_f64(rng.gen_range(-0.1..0.1)))
        .collect();
    params = ModelParams::unflatten(&cfg, &flat)?;
    let input = gradcheck::random::<T>(&mut rng, &[4, 4, 3 * cfg.preset_count]).map(|v| (v + T::one()) * T::from_f64(0.5));
    let target = gradcheck::random::<T>(&mut rng, &[4, 4, 3]).map(|v| (v + T::one()) * T::from_f64(0.5));

    let (_, analytic) = loss_and_gradient(&input, &target, &params, &cfg)?;
    let coords: Vec<usize> = (0..10).map(|_| rng.gen_range(0..flat.len())).collect();
    let (h, _) = gradcheck::tolerance::<T>();
    let mut failure = None;
    let numeric = gradcheck::central_differences(&flat, &coords, h, |p| {
        let eval = || -> Result<f64> {
            let params = ModelParams::unflatten(&cfg, p)?;
            let out = forward_graph(&mut Eager, &input, &params, &cfg)?;
            Ok(kernels::mse(&out, &target)?.data()[0].as_f64())
        };
        eval().unwrap_or_else(|e| {
            failure.get_or_insert(e);
            f64::NAN
        })
    });
    if let Some(e) = failure {
        return Err(e);
    }
    // Scale by the whole gradient vector, as the per-op checks scale by the
    // whole gradient tensor; ten probes alone may all be near zero.
    let scale = analytic.iter().fold(1e-2, |m: f64, v| m.max(v.as_f64().abs()));
    let probed: Vec<f64> = coords.iter().map(|&i| analytic[i].as_f64()).collect();
    Ok(gradcheck::max_scaled_error(&probed, &numeric, scale))
}

#[cfg(test)]
mod tests;
