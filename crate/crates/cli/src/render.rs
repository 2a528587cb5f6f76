//! Grayscale PNG rendering of volume slices.

use std::str::FromStr;

use pam_core::preprocess::percentile_sorted;
use pam_core::Image2D;

/// Intensity window mapped onto 0..=255.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Window {
    /// 0.5th to 99.5th percentile of the slice itself.
    Auto,
    Range { lo: f32, hi: f32 },
}

impl FromStr for Window {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(Window::Auto);
        }
        let parts: Vec<&str> = s.split(',').collect();
        let [lo, hi] = parts.as_slice() else {
            return Err(format!("window must be \"auto\" or \"lo,hi\", got {s:?}"));
        };
        let parse = |t: &str| t.trim().parse::<f32>().map_err(|_| format!("bad window bound {t:?}"));
        let (lo, hi) = (parse(lo)?, parse(hi)?);
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(format!("window bounds must be finite with lo <= hi, got {lo},{hi}"));
        }
        Ok(Window::Range { lo, hi })
    }
}

pub fn window_bounds(plane: &Image2D, window: Window) -> (f32, f32) {
    match window {
        Window::Range { lo, hi } => (lo, hi),
        Window::Auto => {
            let mut sorted = plane.data.clone();
            sorted.sort_by(f32::total_cmp);
            (percentile_sorted(&sorted, 0.5), percentile_sorted(&sorted, 99.5))
        }
    }
}

/// 8-bit gray levels; a zero-width window renders mid-gray.
pub fn to_gray(plane: &Image2D, window: Window) -> Vec<u8> {
    let (lo, hi) = window_bounds(plane, window);
    if !(hi > lo) {
        return vec![128; plane.data.len()];
    }
    let scale = 255.0 / (hi - lo);
    plane.data.iter().map(|&v| ((v.clamp(lo, hi) - lo) * scale).round() as u8).collect()
}

pub fn slice_png(plane: &Image2D, window: Window) -> Result<Vec<u8>, png::EncodingError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, plane.width as u32, plane.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(&to_gray(plane, window))?;
    }
    Ok(out)
}
