//! Box-prompt inference: a search over crop-percentile normalizations, then
//! a refinement pass normalized by the preliminary foreground.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::Box2MaskModel;
use crate::preprocess::{masked_values, resize_image, resize_image_to, NormParams};
use crate::volume::{Image2D, Mask2D, Plane};

pub const THRESHOLD: f32 = 0.5;

/// Maps normalized `R x R` crops to foreground probabilities at `R x R`.
pub trait RoiPredictor {
    fn resolution(&self) -> usize;
    fn predict_roi(&self, images: &[&Image2D]) -> Result<Vec<Image2D>>;
}

impl RoiPredictor for Box2MaskModel {
    fn resolution(&self) -> usize {
        self.config().resolution
    }

    fn predict_roi(&self, images: &[&Image2D]) -> Result<Vec<Image2D>> {
        self.predict(images)
    }
}

/// Candidate `(p_min, p_max)` percentile pairs for the normalization search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PercentileGrid {
    pub p_min: Vec<f64>,
    pub p_max: Vec<f64>,
}

impl PercentileGrid {
    /// 5th..40th in steps of 1 by 90th..95th in steps of 0.5.
    pub fn paper() -> Self {
        Self {
            p_min: (5..=40).map(f64::from).collect(),
            p_max: (0..=10).map(|i| 90.0 + 0.5 * i as f64).collect(),
        }
    }

    /// The same ranges subsampled to 6 x 3.
    pub fn desk() -> Self {
        Self { p_min: vec![5.0, 12.0, 19.0, 26.0, 33.0, 40.0], p_max: vec![90.0, 92.5, 95.0] }
    }

    pub fn single(p_min: f64, p_max: f64) -> Self {
        Self { p_min: vec![p_min], p_max: vec![p_max] }
    }

    pub fn candidates(&self) -> Vec<(f64, f64)> {
        self.p_min.iter().flat_map(|&lo| self.p_max.iter().map(move |&hi| (lo, hi))).collect()
    }

    pub fn len(&self) -> usize {
        self.p_min.len() * self.p_max.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoxInference {
    pub mask: Mask2D,
    /// Params of the refinement pass; `None` when the search found no foreground.
    pub norm: Option<NormParams>,
    pub low_confidence: bool,
}

pub fn threshold(prob: &Image2D, t: f32) -> Mask2D {
    Plane { width: prob.width, height: prob.height, data: prob.data.iter().map(|&p| u8::from(p >= t)).collect() }
}

fn predict_at_crop_size<P: RoiPredictor + ?Sized>(predictor: &P, crop: &Image2D, norms: &[NormParams]) -> Result<Vec<Image2D>> {
    let r = predictor.resolution();
    let inputs: Vec<Image2D> = norms.iter().map(|n| resize_image(&n.apply(crop), r)).collect();
    let probs = predictor.predict_roi(&inputs.iter().collect::<Vec<_>>())?;
    Ok(probs.iter().map(|p| resize_image_to(p, crop.width, crop.height)).collect())
}

/// Segments the object inside a raw-intensity box crop.
pub fn box2mask_infer<P: RoiPredictor + ?Sized>(predictor: &P, crop: &Image2D, grid: &PercentileGrid) -> Result<BoxInference> {
    if grid.is_empty() {
        return Err(crate::Error::Config("empty percentile grid".into()));
    }
    let mut sorted = crop.data.clone();
    sorted.sort_by(f32::total_cmp);
    let norms: Vec<NormParams> = grid
        .candidates()
        .into_iter()
        .map(|(lo, hi)| NormParams {
            v_min: crate::preprocess::percentile_sorted(&sorted, lo),
            v_max: crate::preprocess::percentile_sorted(&sorted, hi),
        })
        .collect();
    let probs = predict_at_crop_size(predictor, crop, &norms)?;
    let mut mean = Plane::filled(crop.width, crop.height, 0.0f32);
    for p in &probs {
        for (m, &v) in mean.data.iter_mut().zip(&p.data) {
            *m += v;
        }
    }
    let scale = 1.0 / probs.len() as f32;
    mean.data.iter_mut().for_each(|m| *m *= scale);
    let preliminary = threshold(&mean, THRESHOLD);
    if preliminary.is_empty_mask() {
        return Ok(BoxInference { mask: preliminary, norm: None, low_confidence: true });
    }
    let norm = NormParams::from_values(&masked_values(crop, &preliminary))?;
    let refined = predict_at_crop_size(predictor, crop, &[norm])?;
    let mask = threshold(&refined[0], THRESHOLD);
    let low_confidence = mask.is_empty_mask();
    Ok(BoxInference { mask, norm: Some(norm), low_confidence })
}
