//! Networks bundled with their parameters, checkpoint conversion and
//! gradient-free prediction.

use pam_tensor::{Graph, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::nets::{masks_to_tensor, planes_to_tensor, tensor_to_planes, Box2Mask, NetConfig, PropMask};
use crate::volume::{Image2D, Mask2D};

pub trait Network: Sized + Clone + Send + Sync {
    const KIND: ModelKind;
    fn build(config: &NetConfig, store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) -> Result<Self>;
    fn config(&self) -> &NetConfig;
}

impl Network for Box2Mask {
    const KIND: ModelKind = ModelKind::Box2Mask;

    fn build(config: &NetConfig, store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) -> Result<Self> {
        Box2Mask::new(config, store, rng)
    }

    fn config(&self) -> &NetConfig {
        &self.config
    }
}

impl Network for PropMask {
    const KIND: ModelKind = ModelKind::PropMask;

    fn build(config: &NetConfig, store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) -> Result<Self> {
        PropMask::new(config, store, rng)
    }

    fn config(&self) -> &NetConfig {
        &self.config
    }
}

#[derive(Clone, Debug)]
pub struct Model<N> {
    pub net: N,
    pub params: ParamStore<f32>,
    /// Epochs trained so far; carried into checkpoints.
    pub epochs: usize,
    pub finetuned_from: Option<String>,
}

pub type Box2MaskModel = Model<Box2Mask>;
pub type PropMaskModel = Model<PropMask>;

impl<N: Network> Model<N> {
    /// Freshly initialized weights, deterministic in `seed`.
    pub fn new(config: &NetConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = N::build(config, &mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Self { net, params: store, epochs: 0, finetuned_from: None })
    }

    pub fn config(&self) -> &NetConfig {
        self.net.config()
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.manifest.model != N::KIND {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds a {} model, expected {}",
                ckpt.manifest.model.as_str(),
                N::KIND.as_str()
            )));
        }
        let mut model = Self::new(&ckpt.manifest.config, 0)?;
        ckpt.load_into(&mut model.params)?;
        model.epochs = ckpt.manifest.epochs;
        model.finetuned_from = ckpt.manifest.finetuned_from.clone();
        Ok(model)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(N::KIND, self.config().clone(), self.params.clone());
        ckpt.manifest.epochs = self.epochs;
        ckpt.manifest.finetuned_from = self.finetuned_from.clone();
        ckpt
    }
}

impl Model<Box2Mask> {
    /// Full-resolution foreground probabilities for normalized `R x R` crops.
    pub fn predict(&self, images: &[&Image2D]) -> Result<Vec<Image2D>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.input(planes_to_tensor::<f32>(images, 3)?);
        let outs = self.net.forward(&mut g, &p, x)?;
        tensor_to_planes(g.value(outs[0]))
    }
}

impl Model<PropMask> {
    /// Probabilities for each adjacent crop, all guided by one guide crop and mask.
    pub fn predict(&self, guide: &Image2D, guide_mask: &Mask2D, adjacent: &[&Image2D]) -> Result<Vec<Image2D>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let gi = g.input(planes_to_tensor::<f32>(&[guide], 3)?);
        let gm = g.input(masks_to_tensor::<f32>(&[guide_mask])?);
        let adj = g.input(planes_to_tensor::<f32>(adjacent, 3)?);
        let out = self.net.forward(&mut g, &p, gi, gm, adj)?;
        tensor_to_planes(g.value(out))
    }
}
