use pam_tensor::{Bound, Graph, ParamStore, Scalar, Var};
use rand::Rng;

use super::layers::{Encoder, Head, UpStage};
use super::{NetConfig, DICE_EPS};
use crate::error::{Error, Result};

/// Six-stage (by default) UNet with a sigmoid head at every decoder resolution.
#[derive(Clone, Debug)]
pub struct Box2Mask {
    pub config: NetConfig,
    pub encoder: Encoder,
    /// `decoder[s]` produces level `s`, for `s` in `0..S-1`.
    pub decoder: Vec<UpStage>,
    /// `heads[s]` reads level `s`; the last head reads the bottleneck.
    pub heads: Vec<Head>,
}

pub const IMAGE_CHANNELS: usize = 3;

impl Box2Mask {
    pub fn new<T: Scalar, R: Rng + ?Sized>(config: &NetConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let ch = &config.channels;
        let s = ch.len();
        let encoder = Encoder::new(store, "enc", IMAGE_CHANNELS, ch, rng);
        let decoder = (0..s - 1)
            .map(|l| UpStage::new(store, &format!("dec.s{l}"), ch[l + 1], ch[l], ch[l], rng))
            .collect();
        let heads = (0..s).map(|l| Head::new(store, &format!("head.s{l}"), ch[l], rng)).collect();
        Ok(Self { config: config.clone(), encoder, decoder, heads })
    }

    /// Probability maps `[N, 1, R/2^s, R/2^s]` for every level `s`, finest first.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let shape = g.shape(x).to_vec();
        let r = self.config.resolution;
        if shape.len() != 4 || shape[1] != IMAGE_CHANNELS || shape[2] != r || shape[3] != r {
            return Err(Error::Config(format!("box2mask expects [N, 3, {r}, {r}], got {shape:?}")));
        }
        let slope = T::from_f64_lossy(self.config.leaky_slope);
        let skips = self.encoder.forward(g, p, x, slope)?;
        let s = skips.len();
        let mut outs = vec![None; s];
        let mut cur = skips[s - 1];
        outs[s - 1] = Some(self.heads[s - 1].forward(g, p, cur)?);
        for l in (0..s - 1).rev() {
            cur = self.decoder[l].forward(g, p, cur, skips[l], slope)?;
            outs[l] = Some(self.heads[l].forward(g, p, cur)?);
        }
        Ok(outs.into_iter().map(|o| o.expect("every level has a head")).collect())
    }
}

/// Deep-supervision dice: mean over heads of the soft dice against the target
/// `[N, 1, R, R]` nearest-downscaled to each head's size.
pub fn box2mask_loss<T: Scalar>(g: &mut Graph<T>, outs: &[Var], target: Var) -> Result<Var> {
    let mut terms = Vec::with_capacity(outs.len());
    for &o in outs {
        let (_, _, h, w) = g.value(o).dims4("box2mask_loss")?;
        let m = if g.shape(target)[2..] == [h, w] { target } else { g.resize_nearest(target, h, w)? };
        terms.push(g.soft_dice(o, m, T::from_f64_lossy(DICE_EPS))?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(g.scale(total, T::from_f64_lossy(1.0 / terms.len() as f64))?)
}
