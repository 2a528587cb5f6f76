//! Volumes, masks, and the PVOL1 on-disk format.
//!
//! Voxels are stored z-major: index `(z * Y + y) * X + x`.
//!
//! PVOL1 layout, bit-exact:
//! ```text
//! PVOL1\n
//! {"dims":[X,Y,Z],"spacing_mm":[sx,sy,sz],"dtype":"f32"|"u8"}\n
//! 0x00
//! little-endian voxels, z slowest
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PVOL_MAGIC: &str = "PVOL1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    #[default]
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "x" => Some(Axis::X),
            "y" => Some(Axis::Y),
            "z" => Some(Axis::Z),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

/// Element type storable in a PVOL1 file.
pub trait Voxel: Copy + Default + PartialEq + std::fmt::Debug + Send + Sync + 'static {
    const DTYPE: &'static str;
    const SIZE: usize;
    fn put_le(self, out: &mut Vec<u8>);
    fn get_le(bytes: &[u8]) -> Self;
}

impl Voxel for f32 {
    const DTYPE: &'static str = "f32";
    const SIZE: usize = 4;

    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn get_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Voxel for u8 {
    const DTYPE: &'static str = "u8";
    const SIZE: usize = 1;

    fn put_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }

    fn get_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

/// A 2D row-major plane: one slice of a volume, a crop, or a network input.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

pub type Image2D = Plane<f32>;
pub type Mask2D = Plane<u8>;

impl<T: Copy + Default> Plane<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidGeometry(format!(
                "{width}x{height} plane needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }
}

impl Mask2D {
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T = f32> {
    dims: [usize; 3],
    spacing: [f64; 3],
    voxels: Vec<T>,
}

pub type Mask3D = Volume<u8>;

#[derive(Serialize, Deserialize)]
struct Header {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    dtype: String,
}

/// Size and spacing anisotropy, both `min / max` in `(0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub size_anisotropy: f64,
    pub spacing_anisotropy: f64,
}

fn min_over_max(v: [f64; 3]) -> f64 {
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(0.0, f64::max);
    min / max
}

impl<T: Voxel> Volume<T> {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<T>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidGeometry(format!("dims {dims:?} must all be >= 1")));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidGeometry(format!("spacing {spacing:?} must be positive")));
        }
        let n = dims.iter().product::<usize>();
        if voxels.len() != n {
            return Err(Error::InvalidGeometry(format!("{n} voxels expected, got {}", voxels.len())));
        }
        Ok(Self { dims, spacing, voxels })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: T) -> Result<Self> {
        Self::new(dims, spacing, vec![value; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[T] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [T] {
        &mut self.voxels
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.voxels[self.index(x, y, z)]
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.voxels[i] = v;
    }

    /// Number of slices along `axis`.
    pub fn axis_len(&self, axis: Axis) -> usize {
        self.dims[axis.index()]
    }

    pub fn axis_spacing(&self, axis: Axis) -> f64 {
        self.spacing[axis.index()]
    }

    /// `(width, height)` of slices taken along `axis`.
    pub fn plane_dims(&self, axis: Axis) -> (usize, usize) {
        let [x, y, z] = self.dims;
        match axis {
            Axis::Z => (x, y),
            Axis::Y => (x, z),
            Axis::X => (y, z),
        }
    }

    fn plane_to_volume(&self, axis: Axis, index: usize, u: usize, v: usize) -> usize {
        match axis {
            Axis::Z => self.index(u, v, index),
            Axis::Y => self.index(u, index, v),
            Axis::X => self.index(index, u, v),
        }
    }

    pub fn slice(&self, axis: Axis, index: usize) -> Plane<T> {
        assert!(index < self.axis_len(axis), "slice index out of range");
        let (w, h) = self.plane_dims(axis);
        let mut data = Vec::with_capacity(w * h);
        for v in 0..h {
            for u in 0..w {
                data.push(self.voxels[self.plane_to_volume(axis, index, u, v)]);
            }
        }
        Plane { width: w, height: h, data }
    }

    pub fn set_slice(&mut self, axis: Axis, index: usize, plane: &Plane<T>) {
        let (w, h) = self.plane_dims(axis);
        assert_eq!((plane.width, plane.height), (w, h), "plane dims");
        for v in 0..h {
            for u in 0..w {
                let i = self.plane_to_volume(axis, index, u, v);
                self.voxels[i] = plane.data[v * w + u];
            }
        }
    }

    pub fn fingerprint(&self) -> Fingerprint {
        Fingerprint {
            size_anisotropy: min_over_max(self.dims.map(|d| d as f64)),
            spacing_anisotropy: min_over_max(self.spacing),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header { dims: self.dims, spacing_mm: self.spacing, dtype: T::DTYPE.to_string() };
        let mut out = Vec::with_capacity(64 + self.voxels.len() * T::SIZE);
        out.extend_from_slice(PVOL_MAGIC.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(serde_json::to_string(&header).expect("header serializes").as_bytes());
        out.push(b'\n');
        out.push(0);
        for &v in &self.voxels {
            v.put_le(&mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = split_pvol(bytes)?;
        if header.dtype != T::DTYPE {
            return Err(Error::DtypeMismatch { expected: T::DTYPE, found: header.dtype });
        }
        let n: usize = header.dims.iter().product();
        let expected = n * T::SIZE;
        if payload.len() < expected {
            return Err(Error::Truncated { expected, found: payload.len() });
        }
        if payload.len() > expected {
            return Err(Error::BadHeader(format!("{} trailing bytes after payload", payload.len() - expected)));
        }
        let voxels = payload.chunks_exact(T::SIZE).map(T::get_le).collect();
        Self::new(header.dims, header.spacing_mm, voxels)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn split_pvol(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let magic = format!("{PVOL_MAGIC}\n");
    let rest = bytes.strip_prefix(magic.as_bytes()).ok_or(Error::BadMagic { expected: PVOL_MAGIC })?;
    let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::BadHeader("missing header line".into()))?;
    let header: Header =
        serde_json::from_slice(&rest[..nl]).map_err(|e| Error::BadHeader(format!("header json: {e}")))?;
    match rest.get(nl + 1) {
        Some(0) => Ok((header, &rest[nl + 2..])),
        Some(_) => Err(Error::BadHeader("missing 0x00 separator".into())),
        None => Err(Error::Truncated { expected: 1, found: 0 }),
    }
}

/// Dtype recorded in a PVOL1 file, without decoding its payload.
pub fn pvol_dtype(bytes: &[u8]) -> Result<String> {
    split_pvol(bytes).map(|(h, _)| h.dtype)
}

impl Mask3D {
    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v != 0).count()
    }

    /// Foreground pixel count of every slice along `axis`.
    pub fn slice_areas(&self, axis: Axis) -> Vec<usize> {
        let mut areas = vec![0; self.axis_len(axis)];
        let [nx, ny, _] = self.dims;
        for (i, &v) in self.voxels.iter().enumerate() {
            if v != 0 {
                let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
                areas[[x, y, z][axis.index()]] += 1;
            }
        }
        areas
    }

    /// Slice with the most foreground along `axis`; ties go to the smallest index.
    pub fn largest_foreground_slice(&self, axis: Axis) -> Result<usize> {
        let areas = self.slice_areas(axis);
        let (best, &area) = areas
            .iter()
            .enumerate()
            .fold((0, &0), |(bi, ba), (i, a)| if a > ba { (i, a) } else { (bi, ba) });
        if area == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(best)
    }

    /// Inclusive range of slice indices with any foreground along `axis`.
    pub fn extent(&self, axis: Axis) -> Option<(usize, usize)> {
        let areas = self.slice_areas(axis);
        let first = areas.iter().position(|&a| a > 0)?;
        let last = areas.iter().rposition(|&a| a > 0)?;
        Some((first, last))
    }
}
