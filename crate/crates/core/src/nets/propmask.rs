use pam_tensor::{Bound, Graph, ParamStore, Scalar, Var};
use rand::Rng;

use super::box2mask::IMAGE_CHANNELS;
use super::layers::{cross_attend, Encoder, Head, UpStage};
use super::{NetConfig, DICE_EPS};
use crate::error::{Error, Result};

/// Propagation network: a shared image encoder for guide and adjacent slices,
/// a mask encoder for the guide's mask, cross-attention at the coarsest
/// levels and a decoder that reads the adjacent slice's features.
#[derive(Clone, Debug)]
pub struct PropMask {
    pub config: NetConfig,
    pub image_encoder: Encoder,
    pub mask_encoder: Encoder,
    /// `decoder[l]` produces level `l`, for `l` in `0..S-1`.
    pub decoder: Vec<UpStage>,
    pub head: Head,
}

/// Encoded guide pair, reusable across any number of adjacent slices.
#[derive(Clone, Debug)]
pub struct GuideFeatures {
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

impl PropMask {
    pub fn new<T: Scalar, R: Rng + ?Sized>(config: &NetConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let ch = &config.channels;
        let s = ch.len();
        let image_encoder = Encoder::new(store, "img", IMAGE_CHANNELS, ch, rng);
        let mask_encoder = Encoder::new(store, "mask", 1, ch, rng);
        let decoder = (0..s - 1)
            .map(|l| UpStage::new(store, &format!("dec.s{l}"), ch[l + 1], ch[l], ch[l], rng))
            .collect();
        let head = Head::new(store, "head", ch[0], rng);
        Ok(Self { config: config.clone(), image_encoder, mask_encoder, decoder, head })
    }

    /// First level that carries cross-attention.
    pub fn first_attention_level(&self) -> usize {
        self.config.stages() - self.config.attention_stages
    }

    fn check_input<T: Scalar>(&self, g: &Graph<T>, x: Var, channels: usize, what: &str) -> Result<()> {
        let shape = g.shape(x);
        let r = self.config.resolution;
        if shape.len() != 4 || shape[1] != channels || shape[2] != r || shape[3] != r {
            return Err(Error::Config(format!("{what} must be [N, {channels}, {r}, {r}], got {shape:?}")));
        }
        Ok(())
    }

    /// Keys from the guide image `[1, 3, R, R]`, values from its mask `[1, 1, R, R]`.
    pub fn encode_guide<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, image: Var, mask: Var) -> Result<GuideFeatures> {
        self.check_input(g, image, IMAGE_CHANNELS, "guide image")?;
        self.check_input(g, mask, 1, "guide mask")?;
        if g.shape(image)[0] != 1 || g.shape(mask)[0] != 1 {
            return Err(Error::Config("one guide per forward pass".into()));
        }
        let slope = T::from_f64_lossy(self.config.leaky_slope);
        let keys = self.image_encoder.forward(g, p, image, slope)?;
        let values = self.mask_encoder.forward(g, p, mask, slope)?;
        Ok(GuideFeatures { keys, values })
    }

    /// Probability maps `[B, 1, R, R]` for adjacent images `[B, 3, R, R]`.
    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, guide: &GuideFeatures, adjacent: Var) -> Result<Var> {
        self.check_input(g, adjacent, IMAGE_CHANNELS, "adjacent images")?;
        let slope = T::from_f64_lossy(self.config.leaky_slope);
        let queries = self.image_encoder.forward(g, p, adjacent, slope)?;
        let s = queries.len();
        let first_attn = self.first_attention_level();
        let mut skips = queries.clone();
        for l in first_attn..s {
            skips[l] = cross_attend(g, queries[l], guide.keys[l], guide.values[l])?;
        }
        let mut cur = skips[s - 1];
        for l in (0..s - 1).rev() {
            cur = self.decoder[l].forward(g, p, cur, skips[l], slope)?;
        }
        self.head.forward(g, p, cur)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, image: Var, mask: Var, adjacent: Var) -> Result<Var> {
        let guide = self.encode_guide(g, p, image, mask)?;
        self.decode(g, p, &guide, adjacent)
    }
}

/// Final-output soft dice, averaged over the batch.
pub fn propmask_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    Ok(g.soft_dice(pred, target, T::from_f64_lossy(DICE_EPS))?)
}

/// Soft dice with the sums pooled over every adjacent slice of one task.
///
/// Per-slice dice is constant on a slice whose target is empty, so nothing
/// would teach the network to predict background once the object ends.
/// Pooled, false positives there still grow the denominator. For a single
/// slice this is [`propmask_loss`].
pub fn propmask_task_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::Config(format!("task predictions must be [B, 1, H, W], got {shape:?}")));
    }
    let pooled = [1, shape[0], shape[2], shape[3]];
    let p = g.reshape(pred, pooled)?;
    let m = g.reshape(target, pooled)?;
    propmask_loss(g, p, m)
}
