use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::engine::{Element, Tensor};
use crate::error::{Error, Result};

macro_rules! param_set {
    ($($field:ident),+ $(,)?) => {
        /// One slot per trainable tensor of the fusion network.
        ///
        /// The same layout carries tensors ([`ModelParams`]), tape handles
        /// during training, or shapes. Field order is the checkpoint order.
        #[derive(Clone, Debug, PartialEq)]
        pub struct ParamSet<S> {
            $(pub $field: S,)+
        }

        impl<S> ParamSet<S> {
            pub const NAMES: &'static [&'static str] = &[$(stringify!($field)),+];

            pub fn iter(&self) -> impl Iterator<Item = &S> {
                [$(&self.$field),+].into_iter()
            }

            pub fn map<U>(&self, mut f: impl FnMut(&S) -> U) -> ParamSet<U> {
                ParamSet { $($field: f(&self.$field),)+ }
            }

            /// Builds a set from exactly `NAMES.len()` items in order.
            pub fn try_from_iter(items: impl IntoIterator<Item = S>) -> Option<Self> {
                let mut it = items.into_iter();
                let set = ParamSet { $($field: it.next()?,)+ };
                it.next().is_none().then_some(set)
            }
        }
    };
}

param_set!(
    conv_in_weight,
    conv_in_bias,
    norm1_gamma,
    norm1_beta,
    qkv_weight,
    qkv_bias,
    qkv_dw_weight,
    qkv_dw_bias,
    temperature,
    attn_proj_weight,
    attn_proj_bias,
    norm2_gamma,
    norm2_beta,
    ffn_in_weight,
    ffn_in_bias,
    ffn_dw_weight,
    ffn_dw_bias,
    ffn_out_weight,
    ffn_out_bias,
    conv_out_weight,
    conv_out_bias,
);

/// Every trainable weight of the fusion network.
pub type ModelParams<T = f32> = ParamSet<Tensor<T>>;

impl ParamSet<Vec<usize>> {
    pub fn for_config(cfg: &ModelConfig) -> Self {
        let inputs = 3 * cfg.preset_count;
        let c = cfg.feature_channels;
        let hidden = cfg.ffn_hidden();
        ParamSet {
            conv_in_weight: vec![3, 3, inputs, c],
            conv_in_bias: vec![c],
            norm1_gamma: vec![c],
            norm1_beta: vec![c],
            qkv_weight: vec![1, 1, c, 3 * c],
            qkv_bias: vec![3 * c],
            qkv_dw_weight: vec![3, 3, 3 * c],
            qkv_dw_bias: vec![3 * c],
            temperature: vec![cfg.attention_heads],
            attn_proj_weight: vec![1, 1, c, c],
            attn_proj_bias: vec![c],
            norm2_gamma: vec![c],
            norm2_beta: vec![c],
            ffn_in_weight: vec![1, 1, c, 2 * hidden],
            ffn_in_bias: vec![2 * hidden],
            ffn_dw_weight: vec![3, 3, 2 * hidden],
            ffn_dw_bias: vec![2 * hidden],
            ffn_out_weight: vec![1, 1, hidden, c],
            ffn_out_bias: vec![c],
            conv_out_weight: vec![3, 3, c, 3],
            conv_out_bias: vec![3],
        }
    }
}

/// Total number of trainable scalars for `cfg`.
pub fn param_count(cfg: &ModelConfig) -> usize {
    ParamSet::for_config(cfg).iter().map(|s| s.iter().product::<usize>()).sum()
}

impl<T: Element> ModelParams<T> {
    /// Uniform `±1/sqrt(fan_in)` kernels, zero biases, unit layer-norm scale
    /// and attention temperature. The output projections of the attention
    /// and feed-forward branches start at zero, so both residual blocks
    /// begin as identities.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = ParamSet::for_config(cfg);
        let mut kernel = |shape: &Vec<usize>| {
            // Kernels are [k, k, Cin, Cout] or depthwise [k, k, C].
            let fan_in: usize = if shape.len() == 4 {
                shape[..3].iter().product()
            } else {
                shape[..2].iter().product()
            };
            let bound = (1.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
        };
        let zeros = |shape: &Vec<usize>| Tensor::zeros(shape);
        let ones = |shape: &Vec<usize>| Tensor::full(shape, T::one());
        Ok(ParamSet {
            conv_in_weight: kernel(&shapes.conv_in_weight),
            conv_in_bias: zeros(&shapes.conv_in_bias),
            norm1_gamma: ones(&shapes.norm1_gamma),
            norm1_beta: zeros(&shapes.norm1_beta),
            qkv_weight: kernel(&shapes.qkv_weight),
            qkv_bias: zeros(&shapes.qkv_bias),
            qkv_dw_weight: kernel(&shapes.qkv_dw_weight),
            qkv_dw_bias: zeros(&shapes.qkv_dw_bias),
            temperature: ones(&shapes.temperature),
            attn_proj_weight: zeros(&shapes.attn_proj_weight),
            attn_proj_bias: zeros(&shapes.attn_proj_bias),
            norm2_gamma: ones(&shapes.norm2_gamma),
            norm2_beta: zeros(&shapes.norm2_beta),
            ffn_in_weight: kernel(&shapes.ffn_in_weight),
            ffn_in_bias: zeros(&shapes.ffn_in_bias),
            ffn_dw_weight: kernel(&shapes.ffn_dw_weight),
            ffn_dw_bias: zeros(&shapes.ffn_dw_bias),
            ffn_out_weight: zeros(&shapes.ffn_out_weight),
            ffn_out_bias: zeros(&shapes.ffn_out_bias),
            conv_out_weight: kernel(&shapes.conv_out_weight),
            conv_out_bias: zeros(&shapes.conv_out_bias),
        })
    }

    /// Checks every tensor against the shapes `cfg` implies.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let shapes = ParamSet::for_config(cfg);
        for ((t, want), name) in self.iter().zip(shapes.iter()).zip(Self::NAMES) {
            if t.shape() != want.as_slice() {
                return Err(Error::invalid(format!(
                    "parameter {name} has shape {:?} but the config needs {want:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.iter().map(Tensor::numel).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.len());
        for t in self.iter() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn unflatten(cfg: &ModelConfig, flat: &[T]) -> Result<Self> {
        let shapes = ParamSet::for_config(cfg);
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if flat.len() != total {
            return Err(Error::invalid(format!(
                "flat parameter vector has {} entries, config needs {total}",
                flat.len()
            )));
        }
        let mut off = 0;
        let tensors = shapes.iter().map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::new(s.clone(), flat[off..off + n].to_vec()).expect("length checked");
            off += n;
            t
        });
        Ok(ParamSet::try_from_iter(tensors.collect::<Vec<_>>()).expect("one tensor per slot"))
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        self.map(Tensor::cast)
    }
}
