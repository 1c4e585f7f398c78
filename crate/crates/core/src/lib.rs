//! White-balance preset fusion: a small channel-attention network that maps
//! five preset renders of one RAW image to a corrected sRGB image, together
//! with the linear-blend baseline, color-difference metrics and a synthetic
//! multi-illuminant scene generator to train and evaluate on.

pub mod engine;
mod error;
pub mod harness;
pub mod imaging;
pub mod linear;
pub mod metrics;
pub mod model;
pub mod synth;

pub use error::{Error, Result};
