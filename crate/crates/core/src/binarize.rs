//! Sign binarization and the straight-through estimator.
//!
//! `sign(0)` is taken as `+1` so that binarized values are always in
//! `{-1, +1}`; the flip rules compare signs and have no notion of a zero
//! weight.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Clip threshold for the straight-through estimator.
///
/// The gradient passes through wherever `|x| <= t_clip` and is zeroed
/// elsewhere. `1.0` is the usual choice; values in `1.25..=1.5` have been
/// reported to work better for some architectures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteConfig {
    pub t_clip: f64,
}

impl SteConfig {
    pub fn new(t_clip: f64) -> Result<Self> {
        if !(t_clip > 0.0 && t_clip.is_finite()) {
            return Err(Error::Config(vec![format!(
                "t_clip must be a positive finite number, got {t_clip}"
            )]));
        }
        Ok(Self { t_clip })
    }
}

impl Default for SteConfig {
    fn default() -> Self {
        Self { t_clip: 1.0 }
    }
}

#[inline]
pub fn sign(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

pub fn sign_binarize(x: &Tensor) -> Tensor {
    x.map(sign)
}

#[inline]
pub fn ste_mask(pre_binarization: f64, cfg: SteConfig) -> bool {
    pre_binarization.abs() <= cfg.t_clip
}

pub fn ste_backward(upstream: &Tensor, pre_binarization: &Tensor, cfg: SteConfig) -> Result<Tensor> {
    upstream.zip_map(pre_binarization, |u, w| if ste_mask(w, cfg) { u } else { 0.0 })
}
