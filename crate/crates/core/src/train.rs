//! AdamW with a cosine schedule, epoch sampling, evaluation and fine-tuning
//! for both networks.

use std::io::Write;
use std::time::Instant;

use pam_tensor::{Bound, Graph, ParamStore, Scalar, Tensor, TensorError, Var};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::infer::threshold;
use crate::metrics::dsc;
use crate::model::{Model, Network};
use crate::nets::{box2mask_loss, masks_to_tensor, planes_to_tensor, propmask_task_loss, Box2Mask, PropMask};
use crate::phantom::Phantom;
use crate::preprocess::{augment_pair, build_box_sample, build_roi_task, AugmentPolicy, NormParams, PropagationTask, RoiSample};
use crate::volume::{Axis, Image2D, Mask2D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub eta_min: f64,
    pub weight_decay: f64,
    /// Cosine period in epochs; the rate stays at `eta_min` afterwards.
    pub t_max: f64,
    pub epochs: usize,
    /// Draws with replacement from the pool per epoch.
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    /// Evaluate every this many epochs, and always after the last one.
    pub eval_interval: usize,
    pub seed: u64,
    pub augment: AugmentPolicy,
    /// Box2Mask only: chance that a draw is renormalized by random crop
    /// percentiles (5-40 / 90-95) instead of its mask-region percentiles.
    pub crop_norm_prob: f64,
    /// Also keep the checkpoint with the best validation DSC.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::box2mask()
    }
}

impl TrainConfig {
    pub fn box2mask() -> Self {
        Self {
            lr0: 1e-3,
            eta_min: 1e-5,
            weight_decay: 1e-4,
            t_max: 100.0,
            epochs: 60,
            samples_per_epoch: 400,
            batch_size: 16,
            eval_interval: 20,
            seed: 7,
            augment: AugmentPolicy::box2mask(),
            crop_norm_prob: 0.5,
            keep_best: false,
        }
    }

    pub fn propmask() -> Self {
        Self { lr0: 5e-4, samples_per_epoch: 200, batch_size: 4, augment: AugmentPolicy::propmask(), crop_norm_prob: 0.0, ..Self::box2mask() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > self.eta_min && self.eta_min > 0.0) {
            return Err(Error::Config(format!("need lr0 > eta_min > 0, got {} and {}", self.lr0, self.eta_min)));
        }
        if !(self.t_max > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("t_max must be positive and weight decay non-negative".into()));
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::Config("batch size and eval interval must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.crop_norm_prob) {
            return Err(Error::Config("crop_norm_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Cosine annealing from `lr0` at epoch 0 to `eta_min` at `t_max`.
pub fn cosine_lr(epoch: f64, cfg: &TrainConfig) -> f64 {
    let t = epoch.clamp(0.0, cfg.t_max);
    cfg.eta_min + (cfg.lr0 - cfg.eta_min) * (1.0 + (std::f64::consts::PI * t / cfg.t_max).cos()) / 2.0
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![T::zero(); t.numel()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    /// One update. `grads[i]` belongs to the i-th parameter in store order;
    /// `None` counts as a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64, weight_decay: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Config(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for ((name, _), g) in params.iter().zip(grads) {
            if g.as_ref().is_some_and(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!("non-finite gradient for {name} at step {}", self.step + 1)));
            }
        }
        self.step += 1;
        let c = |v: f64| T::from_f64_lossy(v);
        let (b1, b2) = (c(self.beta1), c(self.beta2));
        let bc1 = c(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = c(1.0 - self.beta2.powi(self.step as i32));
        let (lr_t, decay, eps) = (c(lr), c(1.0 - lr * weight_decay), c(self.eps));
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i].as_ref().map(|g| g.data());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w = *w * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub dsc: Option<f64>,
    pub lr: f64,
    pub wallclock: f64,
}

pub fn write_jsonl<W: Write>(mut out: W, entries: &[LogEntry]) -> Result<()> {
    for e in entries {
        writeln!(out, "{}", serde_json::to_string(e)?)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<LogEntry>,
    /// Best validation checkpoint, when `keep_best` is set.
    pub best: Option<(f64, Checkpoint)>,
}

/// A model that knows how to turn drawn items into a loss and how to score
/// itself on held-out items.
pub trait Trainable {
    type Item: Clone;

    fn params(&self) -> &ParamStore<f32>;
    fn params_mut(&mut self) -> &mut ParamStore<f32>;
    /// Training-time view of a pool item: augmentation and any renormalization.
    fn prepare<R: Rng + ?Sized>(&self, item: &Self::Item, cfg: &TrainConfig, rng: &mut R) -> Self::Item;
    fn batch_loss(&self, g: &mut Graph<f32>, p: &Bound, items: &[Self::Item]) -> Result<Var>;
    /// Mean loss and mean 2D DSC of thresholded predictions.
    fn evaluate(&self, items: &[Self::Item]) -> Result<(f64, f64)>;
    fn checkpoint(&self) -> Checkpoint;
    /// Epochs trained so far, as recorded in checkpoints.
    fn epochs_mut(&mut self) -> &mut usize;
}

fn diverged(e: Error) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::Diverged(format!("non-finite values in {op}")),
        e => e,
    }
}

/// Mean dice over pairs of thresholded probability maps and targets.
/// DSC of a task's slices taken together, as a volume would score them.
fn pooled_dsc(probs: &[Image2D], targets: &[Mask2D]) -> f64 {
    let (mut inter, mut total) = (0usize, 0usize);
    for (p, t) in probs.iter().zip(targets) {
        let m = threshold(p, crate::infer::THRESHOLD);
        inter += m.data.iter().zip(&t.data).filter(|(&a, &b)| a != 0 && b != 0).count();
        total += m.area() + t.area();
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

fn mean_dsc(probs: &[Image2D], targets: &[&Mask2D]) -> Result<f64> {
    let mut total = 0.0;
    for (p, t) in probs.iter().zip(targets) {
        total += dsc(&threshold(p, crate::infer::THRESHOLD), *t)?;
    }
    Ok(total / probs.len().max(1) as f64)
}

/// Renormalizes a raw crop by random crop percentiles drawn from the
/// inference search ranges.
fn crop_percentile_view<R: Rng + ?Sized>(raw: &Image2D, rng: &mut R) -> Result<Image2D> {
    let lo = rng.random_range(5.0..=40.0);
    let hi = rng.random_range(90.0..=95.0);
    Ok(NormParams::from_percentiles(&raw.data, lo, hi)?.apply(raw))
}

const EVAL_BATCH: usize = 32;

impl Trainable for Model<Box2Mask> {
    type Item = RoiSample;

    fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    fn prepare<R: Rng + ?Sized>(&self, item: &RoiSample, cfg: &TrainConfig, rng: &mut R) -> RoiSample {
        let mut out = item.clone();
        if cfg.crop_norm_prob > 0.0 && rng.random_bool(cfg.crop_norm_prob) {
            if let Ok(view) = crop_percentile_view(&item.raw, rng) {
                out.image = view;
            }
        }
        augment_pair(&mut out.image, &mut out.target, &cfg.augment, rng);
        out
    }

    fn batch_loss(&self, g: &mut Graph<f32>, p: &Bound, items: &[RoiSample]) -> Result<Var> {
        let (outs, y) = roi_forward(&self.net, g, p, items)?;
        box2mask_loss(g, &outs, y)
    }

    fn evaluate(&self, items: &[RoiSample]) -> Result<(f64, f64)> {
        let (mut loss, mut score) = (0.0, 0.0);
        for chunk in items.chunks(EVAL_BATCH) {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let (outs, y) = roi_forward(&self.net, &mut g, &p, chunk)?;
            let l = box2mask_loss(&mut g, &outs, y)?;
            loss += g.value(l).item() as f64 * chunk.len() as f64;
            let probs = crate::nets::tensor_to_planes(g.value(outs[0]))?;
            score += mean_dsc(&probs, &chunk.iter().map(|s| &s.target).collect::<Vec<_>>())? * chunk.len() as f64;
        }
        let n = items.len().max(1) as f64;
        Ok((loss / n, score / n))
    }

    fn checkpoint(&self) -> Checkpoint {
        self.to_checkpoint()
    }

    fn epochs_mut(&mut self) -> &mut usize {
        &mut self.epochs
    }
}

impl Trainable for Model<PropMask> {
    type Item = PropagationTask;

    fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    fn prepare<R: Rng + ?Sized>(&self, item: &PropagationTask, cfg: &TrainConfig, rng: &mut R) -> PropagationTask {
        item.augmented(&cfg.augment, rng)
    }

    fn batch_loss(&self, g: &mut Graph<f32>, p: &Bound, items: &[PropagationTask]) -> Result<Var> {
        let mut total: Option<Var> = None;
        for task in items {
            let (out, y) = task_forward(&self.net, g, p, task)?;
            let l = propmask_task_loss(g, out, y)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        let total = total.ok_or(Error::EmptyDataset)?;
        Ok(g.scale(total, 1.0 / items.len() as f32)?)
    }

    fn evaluate(&self, items: &[PropagationTask]) -> Result<(f64, f64)> {
        let (mut loss, mut score) = (0.0, 0.0);
        for task in items {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let (out, y) = task_forward(&self.net, &mut g, &p, task)?;
            let l = propmask_task_loss(&mut g, out, y)?;
            loss += g.value(l).item() as f64;
            let probs = crate::nets::tensor_to_planes(g.value(out))?;
            score += pooled_dsc(&probs, &task.adjacent_targets);
        }
        let n = items.len().max(1) as f64;
        Ok((loss / n, score / n))
    }

    fn checkpoint(&self) -> Checkpoint {
        self.to_checkpoint()
    }

    fn epochs_mut(&mut self) -> &mut usize {
        &mut self.epochs
    }
}

/// Per-head predictions and the target variable for a batch of samples.
fn roi_forward(net: &Box2Mask, g: &mut Graph<f32>, p: &Bound, items: &[RoiSample]) -> Result<(Vec<Var>, Var)> {
    let x = g.input(planes_to_tensor(&items.iter().map(|s| &s.image).collect::<Vec<_>>(), 3)?);
    let y = g.input(masks_to_tensor(&items.iter().map(|s| &s.target).collect::<Vec<_>>())?);
    Ok((net.forward(g, p, x)?, y))
}

/// Prediction and target variables for one task.
fn task_forward(net: &PropMask, g: &mut Graph<f32>, p: &Bound, task: &PropagationTask) -> Result<(Var, Var)> {
    let gi = g.input(planes_to_tensor(&[&task.guide_image], 3)?);
    let gm = g.input(masks_to_tensor(&[&task.guide_mask])?);
    let adj = g.input(planes_to_tensor(&task.adjacent_images.iter().collect::<Vec<_>>(), 3)?);
    let y = g.input(masks_to_tensor(&task.adjacent_targets.iter().collect::<Vec<_>>())?);
    Ok((net.forward(g, p, gi, gm, adj)?, y))
}

/// Trains in place for `cfg.epochs` epochs and returns the metrics log.
/// The model left behind is the latest one.
pub fn train<M: Trainable>(
    model: &mut M,
    pool: &[M::Item],
    val: &[M::Item],
    cfg: &TrainConfig,
    on_log: &mut dyn FnMut(&LogEntry),
) -> Result<TrainReport> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(model.params());
    let mut log = Vec::new();
    let base_epochs = *model.epochs_mut();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut emit = |e: LogEntry, log: &mut Vec<LogEntry>| {
        on_log(&e);
        log.push(e);
    };
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch as f64, cfg);
        let draws: Vec<usize> = (0..cfg.samples_per_epoch).map(|_| rng.random_range(0..pool.len())).collect();
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in draws.chunks(cfg.batch_size) {
            let items: Vec<M::Item> = chunk.iter().map(|&i| model.prepare(&pool[i], cfg, &mut rng)).collect();
            let mut g = Graph::new();
            let p = model.params().bind(&mut g, true);
            let loss = model.batch_loss(&mut g, &p, &items).map_err(diverged)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Diverged(format!("loss {value} at epoch {epoch}")));
            }
            let mut grads = g.backward(loss)?;
            let grads: Vec<Option<Tensor<f32>>> = p.vars().iter().map(|&v| grads.take(v)).collect();
            opt.step(model.params_mut(), &grads, lr, cfg.weight_decay)?;
            loss_sum += value;
            batches += 1;
        }
        *model.epochs_mut() = base_epochs + epoch + 1;
        let wallclock = t0.elapsed().as_secs_f64();
        emit(LogEntry { epoch: epoch + 1, split: Split::Train, loss: loss_sum / batches.max(1) as f64, dsc: None, lr, wallclock }, &mut log);
        let last = epoch + 1 == cfg.epochs;
        if !val.is_empty() && ((epoch + 1) % cfg.eval_interval == 0 || last) {
            let (loss, score) = model.evaluate(val)?;
            let wallclock = t0.elapsed().as_secs_f64();
            emit(LogEntry { epoch: epoch + 1, split: Split::Val, loss, dsc: Some(score), lr, wallclock }, &mut log);
            if cfg.keep_best && best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, model.checkpoint()));
            }
        }
    }
    Ok(TrainReport { log, best })
}

/// Continues training from `base`; the result records `base`'s hash.
/// Zero epochs return `base` untouched.
pub fn finetune<N: Network>(
    base: &Checkpoint,
    pool: &[<Model<N> as Trainable>::Item],
    val: &[<Model<N> as Trainable>::Item],
    cfg: &TrainConfig,
    on_log: &mut dyn FnMut(&LogEntry),
) -> Result<(Checkpoint, TrainReport)>
where
    Model<N>: Trainable,
{
    if cfg.epochs == 0 {
        return Ok((base.clone(), TrainReport { log: Vec::new(), best: None }));
    }
    let mut model = Model::<N>::from_checkpoint(base)?;
    model.finetuned_from = Some(base.sha256());
    let report = train(&mut model, pool, val, cfg, on_log)?;
    Ok((model.to_checkpoint(), report))
}

/// Slices along `axis` whose foreground exceeds 100 pixels.
fn usable_slices(p: &Phantom, axis: Axis) -> Vec<usize> {
    p.mask.slice_areas(axis).iter().enumerate().filter(|(_, &a)| a > 100).map(|(i, _)| i).collect()
}

/// `count` Box2Mask samples from random usable z-slices of random phantoms.
pub fn box_sample_pool(phantoms: &[Phantom], count: usize, resolution: usize, seed: u64) -> Result<Vec<RoiSample>> {
    let usable: Vec<(&Phantom, Vec<usize>)> =
        phantoms.iter().map(|p| (p, usable_slices(p, Axis::Z))).filter(|(_, s)| !s.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let (p, slices) = usable.choose(&mut rng).expect("nonempty");
            let z = *slices.choose(&mut rng).expect("nonempty");
            build_box_sample(&p.id, &p.volume, &p.mask, Axis::Z, z, resolution, &mut rng)
        })
        .collect()
}

/// `count` PropMask tasks guided by random usable z-slices of random phantoms.
pub fn task_pool(
    phantoms: &[Phantom],
    count: usize,
    thickness_mm: f64,
    n_adjacent: usize,
    resolution: usize,
    seed: u64,
) -> Result<Vec<PropagationTask>> {
    let usable: Vec<(&Phantom, Vec<usize>)> =
        phantoms.iter().map(|p| (p, usable_slices(p, Axis::Z))).filter(|(_, s)| !s.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let (p, slices) = usable.choose(&mut rng).expect("nonempty");
            let z = *slices.choose(&mut rng).expect("nonempty");
            build_roi_task(&p.volume, &p.mask, Axis::Z, z, thickness_mm, n_adjacent, resolution, &mut rng)
        })
        .collect()
}
