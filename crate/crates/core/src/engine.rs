//! Prompt-to-volume propagation.
//!
//! A prompt yields a guiding mask on one slice. Each direction then repeats
//! rounds: predict every slice within the propagation thickness of the
//! current guide in one batch, and promote the most distal prediction with
//! enough foreground to be the next guide.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{box2mask_infer, threshold, PercentileGrid};
use crate::metrics::dsc;
use crate::model::{Box2MaskModel, PropMaskModel};
use crate::preprocess::{bounding_box, crop, masked_values, paste, resize_image, resize_image_to, resize_mask, Box2D, NormParams};
use crate::rle::{rle_decode, RleMask};
use crate::volume::{Axis, Mask2D, Mask3D, Plane, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PromptKind {
    Box {
        #[serde(rename = "box")]
        bbox: [usize; 4],
    },
    /// Row-major runs over the prompted slice, see [`crate::rle`].
    Sketch { rle: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    #[serde(default)]
    pub axis: Axis,
    pub slice: usize,
    #[serde(flatten)]
    pub kind: PromptKind,
}

/// A prompt checked against a volume.
#[derive(Clone, Debug, PartialEq)]
pub enum PromptShape {
    Box(Box2D),
    Sketch(Mask2D),
}

impl Prompt {
    pub fn from_box(axis: Axis, slice: usize, b: Box2D) -> Self {
        Self { axis, slice, kind: PromptKind::Box { bbox: [b.x0, b.y0, b.x1, b.y1] } }
    }

    pub fn from_sketch(axis: Axis, slice: usize, m: &Mask2D) -> Self {
        Self { axis, slice, kind: PromptKind::Sketch { rle: crate::rle::rle_encode(m).runs_string() } }
    }

    pub fn resolve<T: crate::volume::Voxel>(&self, volume: &Volume<T>) -> Result<PromptShape> {
        let len = volume.axis_len(self.axis);
        if self.slice >= len {
            return Err(Error::Prompt(format!("slice {} outside 0..{len} along {}", self.slice, self.axis.as_str())));
        }
        let (w, h) = volume.plane_dims(self.axis);
        match &self.kind {
            PromptKind::Box { bbox: [x0, y0, x1, y1] } => {
                let b = Box2D::new(*x0, *y0, *x1, *y1)?;
                let b = b.clamp_to(w, h).ok_or_else(|| Error::Prompt("box lies outside the slice".into()))?;
                Ok(PromptShape::Box(b))
            }
            PromptKind::Sketch { rle } => {
                let m = rle_decode(&RleMask::from_runs_string(rle, w, h)?)?;
                if m.is_empty_mask() {
                    return Err(Error::Prompt("sketch is empty".into()));
                }
                Ok(PromptShape::Sketch(m))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub thickness_mm: f64,
    /// Crop box = guide mask's bounding box scaled by this factor.
    pub context_scale: f64,
    /// Predictions below this many pixels do not become guides.
    pub min_area: usize,
    pub threshold: f32,
    pub max_rounds: usize,
    /// Predict a round's targets in one batch rather than one at a time.
    pub batched: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { thickness_mm: 20.0, context_scale: 1.5, min_area: 100, threshold: 0.5, max_rounds: 64, batched: true }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.thickness_mm > 0.0) {
            return Err(Error::Config("thickness must be positive".into()));
        }
        if !(self.context_scale >= 1.0) {
            return Err(Error::Config("context scale must be >= 1".into()));
        }
        if self.min_area == 0 {
            return Err(Error::Config("min area must be >= 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Slices `g + d, g + 2d, ... g + n*d` with `n = floor(thickness / spacing)`,
/// clipped to `0..len`.
pub fn slice_window(g: usize, direction: i8, thickness_mm: f64, spacing: f64, len: usize) -> Vec<usize> {
    let n = (thickness_mm / spacing + 1e-9).floor() as isize;
    (1..=n.max(0))
        .map(|k| g as isize + k * direction as isize)
        .take_while(|&i| i >= 0 && i < len as isize)
        .map(|i| i as usize)
        .collect()
}

/// Turns prompts into guiding masks and guiding masks into neighbouring masks.
pub trait Segmenter: Sync {
    /// Full-slice mask of the object inside `b`.
    fn box_to_mask(&self, volume: &Volume, axis: Axis, slice: usize, b: &Box2D) -> Result<Mask2D>;

    /// Full-slice masks for `targets`, guided by `guide_mask` on slice `guide`.
    fn propagate(
        &self,
        volume: &Volume,
        axis: Axis,
        guide: usize,
        guide_mask: &Mask2D,
        targets: &[usize],
        config: &EngineConfig,
    ) -> Result<Vec<Mask2D>>;
}

/// Answers with ground truth; ignores crops and images entirely.
pub struct OracleSegmenter {
    pub truth: Mask3D,
}

impl Segmenter for OracleSegmenter {
    fn box_to_mask(&self, _volume: &Volume, axis: Axis, slice: usize, b: &Box2D) -> Result<Mask2D> {
        let gt = self.truth.slice(axis, slice);
        let mut out = Plane::filled(gt.width, gt.height, 0u8);
        paste(&mut out, &crop(&gt, b), b);
        Ok(out)
    }

    fn propagate(&self, _: &Volume, axis: Axis, _: usize, _: &Mask2D, targets: &[usize], _: &EngineConfig) -> Result<Vec<Mask2D>> {
        Ok(targets.iter().map(|&t| self.truth.slice(axis, t)).collect())
    }
}

/// The trained networks.
pub struct PamSegmenter {
    pub box_model: Box2MaskModel,
    pub prop_model: PropMaskModel,
    pub grid: PercentileGrid,
}

impl PamSegmenter {
    pub fn new(box_model: Box2MaskModel, prop_model: PropMaskModel) -> Self {
        Self { box_model, prop_model, grid: PercentileGrid::desk() }
    }
}

impl Segmenter for PamSegmenter {
    fn box_to_mask(&self, volume: &Volume, axis: Axis, slice: usize, b: &Box2D) -> Result<Mask2D> {
        let image = volume.slice(axis, slice);
        let found = box2mask_infer(&self.box_model, &crop(&image, b), &self.grid)?;
        let mut out = Plane::filled(image.width, image.height, 0u8);
        paste(&mut out, &found.mask, b);
        Ok(out)
    }

    fn propagate(
        &self,
        volume: &Volume,
        axis: Axis,
        guide: usize,
        guide_mask: &Mask2D,
        targets: &[usize],
        config: &EngineConfig,
    ) -> Result<Vec<Mask2D>> {
        let (w, h) = (guide_mask.width, guide_mask.height);
        let tight = bounding_box(guide_mask).ok_or(Error::EmptyMask)?;
        let b = tight.scaled(config.context_scale, config.context_scale, w, h);
        let r = self.prop_model.config().resolution;

        let guide_crop = crop(&volume.slice(axis, guide), &b);
        let guide_mask_crop = crop(guide_mask, &b);
        let norm = NormParams::from_values(&masked_values(&guide_crop, &guide_mask_crop))?;
        let guide_in = resize_image(&norm.apply(&guide_crop), r);
        let mask_in = resize_mask(&guide_mask_crop, r, r);
        let inputs: Vec<_> = targets.iter().map(|&t| resize_image(&norm.apply(&crop(&volume.slice(axis, t), &b)), r)).collect();

        let probs = if config.batched {
            self.prop_model.predict(&guide_in, &mask_in, &inputs.iter().collect::<Vec<_>>())?
        } else {
            let mut out = Vec::with_capacity(inputs.len());
            for input in &inputs {
                out.extend(self.prop_model.predict(&guide_in, &mask_in, &[input])?);
            }
            out
        };
        Ok(probs
            .iter()
            .map(|p| {
                let local = threshold(&resize_image_to(p, b.width(), b.height()), config.threshold);
                let mut full = Plane::filled(w, h, 0u8);
                paste(&mut full, &local, &b);
                full
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The window ran off the end of the volume.
    Boundary,
    /// Every slice of the last window fell below the minimum area.
    Empty,
    /// The thickness is thinner than one slice, so no window exists.
    NoWindow,
    SafetyCap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub direction: i8,
    pub rounds: usize,
    pub guides: Vec<usize>,
    pub predicted: Vec<usize>,
    pub stop: StopReason,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub axis: Axis,
    pub initial_slice: usize,
    pub initial_area: usize,
    pub directions: Vec<DirectionReport>,
    /// `(slice, foreground pixels)` for every slice with a prediction.
    pub slice_areas: Vec<(usize, usize)>,
    pub partial: bool,
    pub initial_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug)]
pub struct Segmentation {
    pub mask: Mask3D,
    pub report: RunReport,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn propagate_direction<S: Segmenter + ?Sized>(
    seg: &S,
    volume: &Volume,
    axis: Axis,
    start: usize,
    start_mask: &Mask2D,
    direction: i8,
    config: &EngineConfig,
) -> Result<(Vec<(usize, Mask2D)>, DirectionReport)> {
    let t0 = Instant::now();
    let spacing = volume.axis_spacing(axis);
    let len = volume.axis_len(axis);
    let mut out: Vec<(usize, Mask2D)> = Vec::new();
    let mut guide = start;
    let mut guide_mask = start_mask.clone();
    let mut guides = Vec::new();
    let mut rounds = 0;
    // Furthest slice already predicted; windows never revisit it or anything before it.
    let mut frontier = start;
    let stop = loop {
        let window: Vec<usize> = slice_window(guide, direction, config.thickness_mm, spacing, len)
            .into_iter()
            .filter(|&i| if direction > 0 { i > frontier } else { i < frontier })
            .collect();
        if window.is_empty() {
            break if config.thickness_mm / spacing + 1e-9 < 1.0 { StopReason::NoWindow } else { StopReason::Boundary };
        }
        if rounds >= config.max_rounds {
            break StopReason::SafetyCap;
        }
        guides.push(guide);
        let masks = seg.propagate(volume, axis, guide, &guide_mask, &window, config)?;
        rounds += 1;
        frontier = *window.last().expect("window is nonempty");
        let next = window.iter().zip(&masks).rev().find(|(_, m)| m.area() >= config.min_area).map(|(&i, m)| (i, m.clone()));
        out.extend(window.into_iter().zip(masks));
        match next {
            Some((i, m)) => {
                guide = i;
                guide_mask = m;
            }
            None => break StopReason::Empty,
        }
    };
    let report = DirectionReport {
        direction,
        rounds,
        guides,
        predicted: out.iter().map(|(i, _)| *i).collect(),
        stop,
        elapsed_ms: ms(t0),
    };
    Ok((out, report))
}

/// Segments the whole volume from one prompt.
pub fn segment_volume<S: Segmenter + ?Sized>(seg: &S, volume: &Volume, prompt: &Prompt, config: &EngineConfig) -> Result<Segmentation> {
    config.validate()?;
    let t0 = Instant::now();
    let axis = prompt.axis;
    let initial = match prompt.resolve(volume)? {
        PromptShape::Box(b) => seg.box_to_mask(volume, axis, prompt.slice, &b)?,
        PromptShape::Sketch(m) => m,
    };
    if initial.is_empty_mask() {
        return Err(Error::EmptyInitialMask);
    }
    let initial_ms = ms(t0);

    let (forward, backward) = std::thread::scope(|s| {
        let up = s.spawn(|| propagate_direction(seg, volume, axis, prompt.slice, &initial, 1, config));
        let down = propagate_direction(seg, volume, axis, prompt.slice, &initial, -1, config);
        (up.join().expect("propagation worker panicked"), down)
    });
    let (forward, fwd_report) = forward?;
    let (backward, bwd_report) = backward?;

    let mut mask = Mask3D::filled(volume.dims(), volume.spacing(), 0)?;
    mask.set_slice(axis, prompt.slice, &initial);
    let mut slice_areas = vec![(prompt.slice, initial.area())];
    for (i, m) in backward.iter().chain(&forward) {
        mask.set_slice(axis, *i, m);
        slice_areas.push((*i, m.area()));
    }
    slice_areas.sort_unstable();
    let partial = [&fwd_report, &bwd_report].iter().any(|r| r.stop == StopReason::SafetyCap);
    Ok(Segmentation {
        mask,
        report: RunReport {
            axis,
            initial_slice: prompt.slice,
            initial_area: initial.area(),
            directions: vec![fwd_report, bwd_report],
            slice_areas,
            partial,
            initial_ms,
            total_ms: ms(t0),
        },
    })
}

/// Box prompt drawn as the ground truth's bounding box on `slice`.
pub fn box_prompt_from_truth(truth: &Mask3D, axis: Axis, slice: usize) -> Result<Prompt> {
    let b = bounding_box(&truth.slice(axis, slice)).ok_or(Error::EmptyMask)?;
    Ok(Prompt::from_box(axis, slice, b))
}

/// Initial slice for a deviation `fraction` of the object's extent away from
/// its largest slice, clamped to slices that contain the object.
pub fn deviated_slice(truth: &Mask3D, axis: Axis, fraction: f64) -> Result<usize> {
    let largest = truth.largest_foreground_slice(axis)?;
    let (first, last) = truth.extent(axis).ok_or(Error::EmptyMask)?;
    let extent = (last - first + 1) as f64;
    let target = largest as f64 + (fraction * extent).round();
    Ok((target.max(first as f64).min(last as f64)) as usize)
}

pub const DEVIATIONS: [f64; 9] = [-0.20, -0.15, -0.10, -0.05, 0.0, 0.05, 0.10, 0.15, 0.20];
pub const THICKNESSES_MM: [f64; 4] = [10.0, 20.0, 30.0, 40.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarnessCell {
    pub setting: f64,
    pub dsc: f64,
}

/// 3D DSC of box-prompted runs started at each deviated slice.
pub fn deviation_harness<S: Segmenter + ?Sized>(
    seg: &S,
    volume: &Volume,
    truth: &Mask3D,
    axis: Axis,
    deviations: &[f64],
    config: &EngineConfig,
) -> Result<Vec<HarnessCell>> {
    deviations
        .iter()
        .map(|&p| {
            let slice = deviated_slice(truth, axis, p)?;
            let prompt = box_prompt_from_truth(truth, axis, slice)?;
            let d = match segment_volume(seg, volume, &prompt, config) {
                Ok(s) => dsc(&s.mask, truth)?,
                Err(Error::EmptyInitialMask) => 0.0,
                Err(e) => return Err(e),
            };
            Ok(HarnessCell { setting: p, dsc: d })
        })
        .collect()
}

/// 3D DSC of box-prompted runs from the largest slice at each thickness.
pub fn thickness_harness<S: Segmenter + ?Sized>(
    seg: &S,
    volume: &Volume,
    truth: &Mask3D,
    axis: Axis,
    thicknesses_mm: &[f64],
    config: &EngineConfig,
) -> Result<Vec<HarnessCell>> {
    let slice = truth.largest_foreground_slice(axis)?;
    let prompt = box_prompt_from_truth(truth, axis, slice)?;
    thicknesses_mm
        .iter()
        .map(|&t| {
            let cfg = EngineConfig { thickness_mm: t, ..config.clone() };
            let d = match segment_volume(seg, volume, &prompt, &cfg) {
                Ok(s) => dsc(&s.mask, truth)?,
                Err(Error::EmptyInitialMask) => 0.0,
                Err(e) => return Err(e),
            };
            Ok(HarnessCell { setting: t, dsc: d })
        })
        .collect()
}
