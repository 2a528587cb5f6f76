//! Boxes, ROI crops, intensity normalization, augmentation and resizing.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Axis, Image2D, Mask2D, Mask3D, Plane, Volume};

/// Slices at or below this many foreground pixels never yield boxes.
pub const MIN_BOX_PIXELS: usize = 100;

/// Pixel box, inclusive-exclusive: `x0 <= x < x1`, `y0 <= y < y1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Box2D {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Box2D {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::Prompt(format!("degenerate box [{x0}, {y0}, {x1}, {y1}]")));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, other: &Box2D) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    /// Intersection with a `width x height` image; `None` if nothing remains.
    pub fn clamp_to(&self, width: usize, height: usize) -> Option<Box2D> {
        let b = Box2D { x0: self.x0.min(width), y0: self.y0.min(height), x1: self.x1.min(width), y1: self.y1.min(height) };
        (b.x1 > b.x0 && b.y1 > b.y0).then_some(b)
    }

    /// Box with width and height multiplied independently, center preserved,
    /// rounded outward and clamped to the image.
    pub fn scaled(&self, sx: f64, sy: f64, width: usize, height: usize) -> Box2D {
        let cx = (self.x0 + self.x1) as f64 / 2.0;
        let cy = (self.y0 + self.y1) as f64 / 2.0;
        let hw = self.width() as f64 * sx / 2.0;
        let hh = self.height() as f64 * sy / 2.0;
        let x0 = (cx - hw).floor().max(0.0) as usize;
        let y0 = (cy - hh).floor().max(0.0) as usize;
        let x1 = ((cx + hw).ceil() as usize).min(width);
        let y1 = ((cy + hh).ceil() as usize).min(height);
        Box2D { x0: x0.min(self.x0), y0: y0.min(self.y0), x1: x1.max(self.x1.min(width)), y1: y1.max(self.y1.min(height)) }
    }
}

/// Minimal box around all foreground pixels, or `None` for an empty mask.
pub fn bounding_box(m: &Mask2D) -> Option<Box2D> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..m.height {
        for x in 0..m.width {
            if m.get(x, y) != 0 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0 != usize::MAX).then_some(Box2D { x0, y0, x1, y1 })
}

/// Tightest box around a slice mask with more than [`MIN_BOX_PIXELS`] foreground pixels.
pub fn tight_bbox(m: &Mask2D) -> Result<Box2D> {
    let area = m.area();
    if area <= MIN_BOX_PIXELS {
        return Err(Error::TooFewPixels(area));
    }
    bounding_box(m).ok_or(Error::EmptyMask)
}

/// Independently scales width and height by uniform draws in `[lo, hi]`.
pub fn jitter_bbox<R: Rng + ?Sized>(b: &Box2D, lo: f64, hi: f64, width: usize, height: usize, rng: &mut R) -> Box2D {
    assert!(1.0 <= lo && lo <= hi, "jitter ratios must satisfy 1 <= lo <= hi");
    let sx = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let sy = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    b.scaled(sx, sy, width, height)
}

pub fn crop<T: Copy + Default>(plane: &Plane<T>, b: &Box2D) -> Plane<T> {
    let mut data = Vec::with_capacity(b.area());
    for y in b.y0..b.y1 {
        data.extend_from_slice(&plane.data[y * plane.width + b.x0..y * plane.width + b.x1]);
    }
    Plane { width: b.width(), height: b.height(), data }
}

/// Writes `src` into `dst` at the box position.
pub fn paste<T: Copy + Default>(dst: &mut Plane<T>, src: &Plane<T>, b: &Box2D) {
    assert_eq!((src.width, src.height), (b.width(), b.height()));
    for y in 0..src.height {
        let row = (b.y0 + y) * dst.width + b.x0;
        dst.data[row..row + src.width].copy_from_slice(&src.data[y * src.width..(y + 1) * src.width]);
    }
}

/// Linear-interpolation percentile (`p` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f32], p: f64) -> f32 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    percentile_sorted(&sorted, p)
}

pub fn percentile_sorted(sorted: &[f32], p: f64) -> f32 {
    assert!(!sorted.is_empty(), "percentile of empty set");
    let rank = (p / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    (sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * frac) as f32
}

/// Intensity clip bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub v_min: f32,
    pub v_max: f32,
}

impl NormParams {
    /// `v_max == v_min`: every normalized pixel maps to 0.5.
    pub fn is_degenerate(&self) -> bool {
        !(self.v_max > self.v_min)
    }

    /// 0.5th / 99.5th percentiles of `values`.
    pub fn from_values(values: &[f32]) -> Result<Self> {
        Self::from_percentiles(values, 0.5, 99.5)
    }

    pub fn from_percentiles(values: &[f32], lo: f64, hi: f64) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyMask);
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f32::total_cmp);
        Ok(Self { v_min: percentile_sorted(&sorted, lo), v_max: percentile_sorted(&sorted, hi) })
    }

    pub fn apply_value(&self, v: f32) -> f32 {
        if self.is_degenerate() {
            return 0.5;
        }
        (v.clamp(self.v_min, self.v_max) - self.v_min) / (self.v_max - self.v_min)
    }

    pub fn apply(&self, img: &Image2D) -> Image2D {
        Plane { width: img.width, height: img.height, data: img.data.iter().map(|&v| self.apply_value(v)).collect() }
    }
}

/// Values of `img` at the foreground pixels of `region`.
pub fn masked_values(img: &Image2D, region: &Mask2D) -> Vec<f32> {
    img.data.iter().zip(&region.data).filter(|(_, &m)| m != 0).map(|(&v, _)| v).collect()
}

/// Clips to the 0.5/99.5 percentiles of the region's pixels and rescales to `[0, 1]`.
pub fn normalize_intensity(crop: &Image2D, region: &Mask2D) -> Result<(Image2D, NormParams)> {
    let values = masked_values(crop, region);
    let params = NormParams::from_values(&values)?;
    Ok((params.apply(crop), params))
}

pub fn resize_image(img: &Image2D, size: usize) -> Image2D {
    resize_image_to(img, size, size)
}

pub fn resize_image_to(img: &Image2D, width: usize, height: usize) -> Image2D {
    Plane { width, height, data: pam_tensor::resize_bilinear(&img.data, img.height, img.width, height, width) }
}

pub fn resize_mask(m: &Mask2D, width: usize, height: usize) -> Mask2D {
    Plane { width, height, data: pam_tensor::resize_nearest(&m.data, m.height, m.width, height, width) }
}

pub fn flip_horizontal<T: Copy>(p: &mut Plane<T>) {
    for row in p.data.chunks_mut(p.width) {
        row.reverse();
    }
}

pub fn flip_vertical<T: Copy>(p: &mut Plane<T>) {
    let w = p.width;
    for y in 0..p.height / 2 {
        let (top, bottom) = p.data.split_at_mut((p.height - 1 - y) * w);
        top[y * w..(y + 1) * w].swap_with_slice(&mut bottom[..w]);
    }
}

/// Inverse-mapped rotation about the plane center; outside samples are 0.
fn rotate_with<T: Copy + Default>(p: &Plane<T>, degrees: f64, sample: impl Fn(f64, f64) -> T) -> Plane<T> {
    let (s, c) = degrees.to_radians().sin_cos();
    let cx = p.width as f64 / 2.0;
    let cy = p.height as f64 / 2.0;
    let mut out = Plane::filled(p.width, p.height, T::default());
    for y in 0..p.height {
        for x in 0..p.width {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let sx = c * dx + s * dy + cx - 0.5;
            let sy = -s * dx + c * dy + cy - 0.5;
            out.data[y * p.width + x] = sample(sx, sy);
        }
    }
    out
}

pub fn rotate_image(img: &Image2D, degrees: f64) -> Image2D {
    let (w, h) = (img.width as isize, img.height as isize);
    let at = |x: isize, y: isize| if x < 0 || y < 0 || x >= w || y >= h { 0.0 } else { img.data[(y * w + x) as usize] as f64 };
    rotate_with(img, degrees, |sx, sy| {
        let (x0, y0) = (sx.floor(), sy.floor());
        let (fx, fy) = (sx - x0, sy - y0);
        let (x0, y0) = (x0 as isize, y0 as isize);
        let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
        let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    })
}

pub fn rotate_mask(m: &Mask2D, degrees: f64) -> Mask2D {
    let (w, h) = (m.width as isize, m.height as isize);
    rotate_with(m, degrees, |sx, sy| {
        let (x, y) = (sx.round() as isize, sy.round() as isize);
        if x < 0 || y < 0 || x >= w || y >= h {
            0
        } else {
            m.data[(y * w + x) as usize]
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub flip_prob: f64,
    pub photometric_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub rotate_prob: f64,
    pub max_rotation_deg: f64,
}

impl AugmentPolicy {
    /// Flips, brightness/contrast and rotation, each at 50%.
    pub fn box2mask() -> Self {
        Self { flip_prob: 0.5, photometric_prob: 0.5, brightness: 0.2, contrast: 0.2, rotate_prob: 0.5, max_rotation_deg: 45.0 }
    }

    /// Geometric only, applied per image of a task.
    pub fn propmask() -> Self {
        Self { photometric_prob: 0.0, ..Self::box2mask() }
    }

    pub fn none() -> Self {
        Self { flip_prob: 0.0, photometric_prob: 0.0, brightness: 0.0, contrast: 0.0, rotate_prob: 0.0, max_rotation_deg: 0.0 }
    }
}

/// Applies one random draw of `policy` to an image and its paired mask.
/// Geometry is shared; photometric changes touch the image only.
pub fn augment_pair<R: Rng + ?Sized>(img: &mut Image2D, mask: &mut Mask2D, policy: &AugmentPolicy, rng: &mut R) {
    if policy.flip_prob > 0.0 && rng.random_bool(policy.flip_prob) {
        flip_horizontal(img);
        flip_horizontal(mask);
    }
    if policy.flip_prob > 0.0 && rng.random_bool(policy.flip_prob) {
        flip_vertical(img);
        flip_vertical(mask);
    }
    if policy.photometric_prob > 0.0 && rng.random_bool(policy.photometric_prob) {
        let b = rng.random_range(-policy.brightness..=policy.brightness) as f32;
        let c = 1.0 + rng.random_range(-policy.contrast..=policy.contrast) as f32;
        for v in img.data.iter_mut() {
            *v = ((*v - 0.5) * c + 0.5 + b).clamp(0.0, 1.0);
        }
    }
    if policy.rotate_prob > 0.0 && rng.random_bool(policy.rotate_prob) {
        let deg = rng.random_range(-policy.max_rotation_deg..=policy.max_rotation_deg);
        *img = rotate_image(img, deg);
        *mask = rotate_mask(mask, deg);
    }
    for v in img.data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub volume_id: String,
    pub axis: Axis,
    pub slice: usize,
    pub crop: Box2D,
}

/// One Box2Mask training pair at `R x R`. The single intensity channel is
/// replicated to three network channels at batch time.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiSample {
    pub image: Image2D,
    /// The crop before normalization, resized like `image`.
    pub raw: Image2D,
    pub target: Mask2D,
    pub provenance: Provenance,
}

impl RoiSample {
    pub fn augmented<R: Rng + ?Sized>(&self, policy: &AugmentPolicy, rng: &mut R) -> RoiSample {
        let mut out = self.clone();
        augment_pair(&mut out.image, &mut out.target, policy, rng);
        out
    }
}

/// Box sample from slice `index`: jittered tight box (1.0-1.25), crop,
/// mask-region normalization, resize to `resolution`.
#[allow(clippy::too_many_arguments)]
pub fn build_box_sample<R: Rng + ?Sized>(
    volume_id: &str,
    volume: &Volume,
    mask: &Mask3D,
    axis: Axis,
    index: usize,
    resolution: usize,
    rng: &mut R,
) -> Result<RoiSample> {
    let slice_mask = mask.slice(axis, index);
    let tight = tight_bbox(&slice_mask)?;
    let b = jitter_bbox(&tight, 1.0, 1.25, slice_mask.width, slice_mask.height, rng);
    let img = crop(&volume.slice(axis, index), &b);
    let m = crop(&slice_mask, &b);
    let (norm, _) = normalize_intensity(&img, &m)?;
    Ok(RoiSample {
        image: resize_image(&norm, resolution),
        raw: resize_image(&img, resolution),
        target: resize_mask(&m, resolution, resolution),
        provenance: Provenance { volume_id: volume_id.to_string(), axis, slice: index, crop: b },
    })
}

/// One guiding slice and its mask plus adjacent slices, all cropped by one box.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagationTask {
    pub guide_image: Image2D,
    pub guide_mask: Mask2D,
    pub adjacent_images: Vec<Image2D>,
    pub adjacent_targets: Vec<Mask2D>,
    pub crop: Box2D,
    pub offsets_mm: Vec<f64>,
    pub norm: NormParams,
}

impl PropagationTask {
    pub fn len(&self) -> usize {
        self.adjacent_images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacent_images.is_empty()
    }

    /// Independent geometric draw per image; each mask follows its image.
    pub fn augmented<R: Rng + ?Sized>(&self, policy: &AugmentPolicy, rng: &mut R) -> PropagationTask {
        let mut out = self.clone();
        augment_pair(&mut out.guide_image, &mut out.guide_mask, policy, rng);
        for (img, m) in out.adjacent_images.iter_mut().zip(out.adjacent_targets.iter_mut()) {
            augment_pair(img, m, policy, rng);
        }
        out
    }
}

/// Slice offsets `d != 0` with `|d * spacing| <= thickness_mm` that stay inside `0..len`.
pub fn candidate_offsets(guide: usize, len: usize, thickness_mm: f64, spacing: f64) -> Vec<isize> {
    let reach = (thickness_mm / spacing + 1e-9).floor() as isize;
    (-reach..=reach)
        .filter(|&d| d != 0)
        .filter(|&d| {
            let i = guide as isize + d;
            i >= 0 && i < len as isize
        })
        .collect()
}

/// Training task around `guide`: jittered box (1.0-2.0), up to `n_adjacent`
/// distinct slices within the thickness, shared guide-region normalization.
#[allow(clippy::too_many_arguments)]
pub fn build_roi_task<R: Rng + ?Sized>(
    volume: &Volume,
    mask: &Mask3D,
    axis: Axis,
    guide: usize,
    thickness_mm: f64,
    n_adjacent: usize,
    resolution: usize,
    rng: &mut R,
) -> Result<PropagationTask> {
    let guide_mask_full = mask.slice(axis, guide);
    if guide_mask_full.is_empty_mask() {
        return Err(Error::EmptyMask);
    }
    let tight = tight_bbox(&guide_mask_full)?;
    let b = jitter_bbox(&tight, 1.0, 2.0, guide_mask_full.width, guide_mask_full.height, rng);
    let spacing = volume.axis_spacing(axis);
    let candidates = candidate_offsets(guide, volume.axis_len(axis), thickness_mm, spacing);
    if candidates.is_empty() || n_adjacent == 0 {
        return Err(Error::NoAdjacentSlices);
    }
    let picks = sample(rng, candidates.len(), n_adjacent.min(candidates.len()));

    let guide_crop = crop(&volume.slice(axis, guide), &b);
    let guide_mask = crop(&guide_mask_full, &b);
    let norm = NormParams::from_values(&masked_values(&guide_crop, &guide_mask))?;
    let prep = |img: &Image2D| resize_image(&norm.apply(img), resolution);

    let mut adjacent_images = Vec::new();
    let mut adjacent_targets = Vec::new();
    let mut offsets_mm = Vec::new();
    for pick in picks.iter() {
        let d = candidates[pick];
        let idx = (guide as isize + d) as usize;
        adjacent_images.push(prep(&crop(&volume.slice(axis, idx), &b)));
        adjacent_targets.push(resize_mask(&crop(&mask.slice(axis, idx), &b), resolution, resolution));
        offsets_mm.push(d as f64 * spacing);
    }
    Ok(PropagationTask {
        guide_image: prep(&guide_crop),
        guide_mask: resize_mask(&guide_mask, resolution, resolution),
        adjacent_images,
        adjacent_targets,
        crop: b,
        offsets_mm,
        norm,
    })
}
