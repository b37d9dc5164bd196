//! High-pass residual preprocessing.
//!
//! Each channel is filtered along the horizontal axis with the third-order
//! finite-difference kernel `[1, -3, 3, -1]`. Output column `i` is computed
//! from input columns `i..=i + 3`, with the rightmost column replicated past
//! the border, so the residual has the same size as the image.

use serde::{Deserialize, Serialize};

use crate::error::{contract, config, Result};
use crate::tensor::Tensor;

/// Third-order difference weights, applied as a convolution:
/// `out[i] = sum_k KERNEL[k] * f[i + 3 - k]`.
pub const KERNEL: [f64; 4] = [1.0, -3.0, 3.0, -1.0];

/// Largest possible filter response on `[0, 1]` inputs is `|1| + |3| = 4`
/// on either sign, so dividing by 4 keeps residuals inside `[-1, 1]`.
pub const DEFAULT_SCALE: f32 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResidualConfig {
    /// `false` selects the passthrough `2x - 1` used by the no-residual ablation.
    pub enabled: bool,
    pub scale: f32,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            scale: DEFAULT_SCALE,
        }
    }
}

impl ResidualConfig {
    pub fn passthrough() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(config(format!(
                "residual scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

/// Unnormalised third-order horizontal difference of every row of a tensor
/// whose last axis is the image width. No range checks are applied.
pub fn high_pass(image: &Tensor) -> Tensor {
    let w = *image.shape().last().expect("tensor has at least one axis");
    let mut out = Vec::with_capacity(image.numel());
    for row in image.data().chunks_exact(w) {
        for i in 0..w {
            let at = |k: usize| row[(i + k).min(w - 1)] as f64;
            let v = KERNEL[0] * at(3) + KERNEL[1] * at(2) + KERNEL[2] * at(1) + KERNEL[3] * at(0);
            out.push(v as f32);
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

fn check_image(shape: &[usize], data: &[f32]) -> Result<()> {
    let n = shape.len();
    let (c, h, w) = (shape[n - 3], shape[n - 2], shape[n - 1]);
    if !(c == 1 || c == 3) {
        return Err(contract(format!("image must have 1 or 3 channels, got {c}")));
    }
    if h < 4 || w < 4 {
        return Err(contract(format!("image must be at least 4x4, got {h}x{w}")));
    }
    if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(contract(format!("pixel value {v} outside [0, 1]")));
    }
    Ok(())
}

fn apply(image: &Tensor, cfg: &ResidualConfig) -> Result<Tensor> {
    cfg.validate()?;
    check_image(image.shape(), image.data())?;
    if cfg.enabled {
        let s = cfg.scale;
        Ok(high_pass(image).map(|v| v / s))
    } else {
        Ok(image.map(|v| 2.0 * v - 1.0))
    }
}

/// Residual of a single `[C, H, W]` image with values in `[0, 1]`.
pub fn residual(image: &Tensor, cfg: &ResidualConfig) -> Result<Tensor> {
    if image.shape().len() != 3 {
        return Err(contract(format!(
            "residual expects [C, H, W], got {:?}",
            image.shape()
        )));
    }
    apply(image, cfg)
}

/// Residual of every image in a `[N, C, H, W]` batch.
pub fn residual_batch(images: &Tensor, cfg: &ResidualConfig) -> Result<Tensor> {
    if images.shape().len() != 4 {
        return Err(contract(format!(
            "residual_batch expects [N, C, H, W], got {:?}",
            images.shape()
        )));
    }
    apply(images, cfg)
}
