//! The two segmentation networks and the layers they share.

mod box2mask;
mod layers;
mod propmask;

use pam_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Image2D, Mask2D};

pub use box2mask::{box2mask_loss, Box2Mask};
pub use layers::{cross_attend, ConvNorm, Encoder, Head, Stage, UpStage};
pub use propmask::{propmask_loss, propmask_task_loss, PropMask};

/// Added to dice denominators to keep the division finite on empty maps.
pub const DICE_EPS: f64 = 1e-6;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub resolution: usize,
    pub channels: Vec<usize>,
    /// PropMask applies cross-attention at this many of the coarsest levels.
    pub attention_stages: usize,
    pub leaky_slope: f64,
}

impl NetConfig {
    pub fn paper() -> Self {
        Self { resolution: 224, channels: vec![32, 64, 128, 256, 512, 512], attention_stages: 4, leaky_slope: 0.01 }
    }

    pub fn desk() -> Self {
        Self { resolution: 64, channels: vec![8, 16, 32, 64, 64, 64], attention_stages: 4, leaky_slope: 0.01 }
    }

    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    /// Spatial size of level `s` (0 = full resolution).
    pub fn level_size(&self, s: usize) -> usize {
        self.resolution >> s
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        if s < 2 {
            return Err(Error::Config("at least two stages are required".into()));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.resolution == 0 || !self.resolution.is_multiple_of(1 << (s - 1)) {
            return Err(Error::Config(format!(
                "resolution {} is not divisible by 2^{} for {s} stages",
                self.resolution,
                s - 1
            )));
        }
        if self.attention_stages == 0 || self.attention_stages >= s {
            return Err(Error::Config(format!("attention stages must lie in 1..{s}")));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config("leaky slope must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Stacks planes into `[N, channels, H, W]`, repeating each plane across channels.
pub fn planes_to_tensor<T: Scalar>(planes: &[&Image2D], channels: usize) -> Result<Tensor<T>> {
    let (w, h) = match planes.first() {
        Some(p) => (p.width, p.height),
        None => return Err(Error::Config("empty batch".into())),
    };
    let mut data = Vec::with_capacity(planes.len() * channels * w * h);
    for p in planes {
        if (p.width, p.height) != (w, h) {
            return Err(Error::Config("batch planes differ in size".into()));
        }
        for _ in 0..channels {
            data.extend(p.data.iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
    }
    Ok(Tensor::new([planes.len(), channels, h, w], data)?)
}

pub fn masks_to_tensor<T: Scalar>(masks: &[&Mask2D]) -> Result<Tensor<T>> {
    let planes: Vec<Image2D> = masks
        .iter()
        .map(|m| Image2D { width: m.width, height: m.height, data: m.data.iter().map(|&v| f32::from(v.min(1))).collect() })
        .collect();
    planes_to_tensor(&planes.iter().collect::<Vec<_>>(), 1)
}

/// Splits `[N, 1, H, W]` back into planes.
pub fn tensor_to_planes<T: Scalar>(t: &Tensor<T>) -> Result<Vec<Image2D>> {
    let (n, c, h, w) = t.dims4("tensor_to_planes")?;
    if c != 1 {
        return Err(Error::Config(format!("expected one channel, got {c}")));
    }
    Ok((0..n)
        .map(|i| Image2D {
            width: w,
            height: h,
            data: t.data()[i * h * w..(i + 1) * h * w].iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
        })
        .collect())
}
