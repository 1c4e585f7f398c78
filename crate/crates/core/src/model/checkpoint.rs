//! Binary weight files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! b"WBF1"  u32 preset_count  u32 feature_channels  u32 attention_heads  f32 ffn_expansion
//! per tensor, in ParamSet order: u32 ndim, ndim x u32 dims, numel x f32
//! ```

use std::fs;
use std::path::Path;

use super::{ModelConfig, ModelParams, ParamSet};
use crate::engine::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"WBF1";

pub fn encode(cfg: &ModelConfig, params: &ModelParams<f32>) -> Result<Vec<u8>> {
    cfg.validate()?;
    params.validate(cfg)?;
    let mut out = Vec::with_capacity(32 + 4 * params.len() + 16 * ParamSet::<()>::NAMES.len());
    out.extend_from_slice(MAGIC);
    for v in [cfg.preset_count, cfg.feature_channels, cfg.attention_heads] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&cfg.ffn_expansion.to_le_bytes());
    for t in params.iter() {
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(bad("file is truncated"));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        reason: reason.into(),
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ModelConfig, ModelParams<f32>)> {
    let mut r = Reader { buf: bytes };
    if r.take(4)? != MAGIC {
        return Err(bad("missing WBF1 magic"));
    }
    let cfg = ModelConfig {
        preset_count: r.u32()? as usize,
        feature_channels: r.u32()? as usize,
        attention_heads: r.u32()? as usize,
        ffn_expansion: r.f32()?,
    };
    cfg.validate().map_err(|e| bad(format!("bad header: {e}")))?;
    let shapes = ParamSet::for_config(&cfg);
    let mut tensors = Vec::with_capacity(ParamSet::<()>::NAMES.len());
    for (want, name) in shapes.iter().zip(ParamSet::<()>::NAMES) {
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(bad(format!("{name}: implausible rank {ndim}")));
        }
        let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if &dims != want {
            return Err(bad(format!("{name}: stored shape {dims:?}, header implies {want:?}")));
        }
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        tensors.push(Tensor::new(dims, data)?);
    }
    if !r.buf.is_empty() {
        return Err(bad(format!("{} trailing bytes", r.buf.len())));
    }
    let params = ParamSet::try_from_iter(tensors).expect("one tensor per slot");
    Ok((cfg, params))
}

pub fn save(path: impl AsRef<Path>, cfg: &ModelConfig, params: &ModelParams<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(cfg, params)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelParams<f32>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format { what, reason } => Error::Format {
            what,
            reason: format!("{}: {reason}", path.display()),
        },
        other => other,
    })
}
