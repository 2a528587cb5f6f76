//! Synthetic phantoms with analytically known ground truth.
//!
//! Every mask voxel is decided by evaluating the shape's inequality at the
//! voxel center `((i + 0.5) * spacing)` in millimetres.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Axis, Mask3D, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Ellipsoid,
    Capsule,
    Torus,
    Blob,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 4] = [ShapeFamily::Ellipsoid, ShapeFamily::Capsule, ShapeFamily::Torus, ShapeFamily::Blob];

    pub fn as_str(self) -> &'static str {
        match self {
            ShapeFamily::Ellipsoid => "ellipsoid",
            ShapeFamily::Capsule => "capsule",
            ShapeFamily::Torus => "torus",
            ShapeFamily::Blob => "blob",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metaball {
    pub center: [f64; 3],
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Shape {
    /// Axis-aligned ellipsoid, optionally rotated about z by `yaw_deg`.
    Ellipsoid { center: [f64; 3], radii: [f64; 3], yaw_deg: f64 },
    /// Points within `radius` of the segment `start..end`.
    Capsule { start: [f64; 3], end: [f64; 3], radius: f64 },
    Torus { center: [f64; 3], major: f64, minor: f64, axis: Axis },
    /// `sum_i r_i^2 / |p - c_i|^2 >= threshold`.
    Blob { balls: Vec<Metaball>, threshold: f64 },
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl Shape {
    pub fn family(&self) -> ShapeFamily {
        match self {
            Shape::Ellipsoid { .. } => ShapeFamily::Ellipsoid,
            Shape::Capsule { .. } => ShapeFamily::Capsule,
            Shape::Torus { .. } => ShapeFamily::Torus,
            Shape::Blob { .. } => ShapeFamily::Blob,
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Shape::Ellipsoid { center, radii, yaw_deg } => {
                let d = sub(p, *center);
                let (s, c) = yaw_deg.to_radians().sin_cos();
                let u = c * d[0] + s * d[1];
                let v = -s * d[0] + c * d[1];
                (u / radii[0]).powi(2) + (v / radii[1]).powi(2) + (d[2] / radii[2]).powi(2) <= 1.0
            }
            Shape::Capsule { start, end, radius } => {
                let seg = sub(*end, *start);
                let len2 = dot(seg, seg);
                let t = if len2 > 0.0 { (dot(sub(p, *start), seg) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let closest = [start[0] + t * seg[0], start[1] + t * seg[1], start[2] + t * seg[2]];
                let d = sub(p, closest);
                dot(d, d) <= radius * radius
            }
            Shape::Torus { center, major, minor, axis } => {
                let d = sub(p, *center);
                let along = d[axis.index()];
                let radial = (dot(d, d) - along * along).max(0.0).sqrt();
                (radial - major).powi(2) + along * along <= minor * minor
            }
            Shape::Blob { balls, threshold } => {
                let mut field = 0.0;
                for b in balls {
                    let d = sub(p, b.center);
                    let d2 = dot(d, d);
                    if d2 == 0.0 {
                        return true;
                    }
                    field += b.radius * b.radius / d2;
                }
                field >= *threshold
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = |v: f64, what: &str| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::OutOfBounds(format!("{what} must be positive, got {v}")))
            }
        };
        match self {
            Shape::Ellipsoid { radii, .. } => radii.iter().try_for_each(|&r| positive(r, "ellipsoid radius")),
            Shape::Capsule { radius, .. } => positive(*radius, "capsule radius"),
            Shape::Torus { major, minor, .. } => {
                positive(*minor, "torus minor radius")?;
                positive(*major - *minor, "torus major minus minor radius")
            }
            Shape::Blob { balls, threshold } => {
                if balls.is_empty() {
                    return Err(Error::OutOfBounds("blob needs at least one ball".into()));
                }
                positive(*threshold, "blob threshold")?;
                balls.iter().try_for_each(|b| positive(b.radius, "metaball radius"))
            }
        }
    }

    /// Axis-aligned bounds in mm for the analytic families; blobs return `None`
    /// and are checked on the rasterized mask instead.
    fn bounds(&self) -> Option<([f64; 3], [f64; 3])> {
        match self {
            Shape::Ellipsoid { center, radii, yaw_deg } => {
                let (s, c) = yaw_deg.to_radians().sin_cos();
                let ex = ((radii[0] * c).powi(2) + (radii[1] * s).powi(2)).sqrt();
                let ey = ((radii[0] * s).powi(2) + (radii[1] * c).powi(2)).sqrt();
                let e = [ex, ey, radii[2]];
                Some(([center[0] - e[0], center[1] - e[1], center[2] - e[2]], [center[0] + e[0], center[1] + e[1], center[2] + e[2]]))
            }
            Shape::Capsule { start, end, radius } => {
                let lo = [0, 1, 2].map(|i| start[i].min(end[i]) - radius);
                let hi = [0, 1, 2].map(|i| start[i].max(end[i]) + radius);
                Some((lo, hi))
            }
            Shape::Torus { center, major, minor, axis } => {
                let e = [0, 1, 2].map(|i| if i == axis.index() { *minor } else { major + minor });
                Some(([0, 1, 2].map(|i| center[i] - e[i]), [0, 1, 2].map(|i| center[i] + e[i])))
            }
            Shape::Blob { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: Shape,
    pub foreground: f64,
    pub background: f64,
    pub noise_sigma: f64,
    pub distractors: usize,
    pub seed: u64,
}

impl PhantomSpec {
    fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        for (name, v) in [("foreground", self.foreground), ("background", self.background)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} intensity {v} outside [0, 1]")));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise sigma {} must be >= 0", self.noise_sigma)));
        }
        Ok(())
    }

    /// Random spec of the given family sized to sit well inside `dims x spacing`.
    pub fn random<R: Rng + ?Sized>(family: ShapeFamily, dims: [usize; 3], spacing: [f64; 3], rng: &mut R) -> Self {
        let ext = [0, 1, 2].map(|i| dims[i] as f64 * spacing[i]);
        let inplane = ext[0].min(ext[1]);
        let center_for = |half: [f64; 3], rng: &mut R| {
            [0, 1, 2].map(|i| {
                let margin = half[i] + 2.0 * spacing[i];
                if ext[i] - margin > margin {
                    rng.random_range(margin..ext[i] - margin)
                } else {
                    ext[i] / 2.0
                }
            })
        };
        let shape = match family {
            ShapeFamily::Ellipsoid => {
                let radii = [
                    rng.random_range(0.14..0.26) * inplane,
                    rng.random_range(0.14..0.26) * inplane,
                    rng.random_range(0.2..0.34) * ext[2],
                ];
                let half = [radii[0].max(radii[1]), radii[0].max(radii[1]), radii[2]];
                Shape::Ellipsoid { center: center_for(half, rng), radii, yaw_deg: rng.random_range(0.0..180.0) }
            }
            ShapeFamily::Capsule => {
                let radius = rng.random_range(0.11..0.17) * inplane;
                let half_len = rng.random_range(0.12..0.22) * ext[2];
                let tilt: [f64; 2] = [rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)];
                let dir_norm = (1.0 + tilt[0] * tilt[0] + tilt[1] * tilt[1]).sqrt();
                let axis = [tilt[0] / dir_norm, tilt[1] / dir_norm, 1.0 / dir_norm];
                let half = [0, 1, 2].map(|i| axis[i].abs() * half_len + radius);
                let c = center_for(half, rng);
                Shape::Capsule {
                    start: [0, 1, 2].map(|i| c[i] - axis[i] * half_len),
                    end: [0, 1, 2].map(|i| c[i] + axis[i] * half_len),
                    radius,
                }
            }
            ShapeFamily::Torus => {
                let minor = rng.random_range(0.07..0.1) * inplane;
                let major = minor + rng.random_range(0.08..0.12) * inplane;
                let half = [major + minor, major + minor, minor];
                Shape::Torus { center: center_for(half, rng), major, minor, axis: Axis::Z }
            }
            ShapeFamily::Blob => {
                let k = rng.random_range(3..=5);
                let spread = 0.14 * inplane;
                let r_max = 0.15 * inplane;
                let half = [spread + 1.6 * r_max, spread + 1.6 * r_max, (spread + 1.6 * r_max).min(0.45 * ext[2])];
                let c = center_for(half, rng);
                let balls = (0..k)
                    .map(|_| Metaball {
                        center: [
                            c[0] + rng.random_range(-spread..spread),
                            c[1] + rng.random_range(-spread..spread),
                            c[2] + rng.random_range(-spread..spread) * (ext[2] / inplane).min(1.0),
                        ],
                        radius: rng.random_range(0.09 * inplane..r_max),
                    })
                    .collect();
                Shape::Blob { balls, threshold: 1.0 }
            }
        };
        let foreground: f64 = rng.random_range(0.25..0.85);
        let mut background = rng.random_range(0.05..0.95);
        while (background - foreground).abs() < 0.2 {
            background = rng.random_range(0.05..0.95);
        }
        Self {
            shape,
            foreground,
            background,
            noise_sigma: rng.random_range(0.02..0.08),
            distractors: rng.random_range(0..=3),
            seed: rng.random(),
        }
    }
}

fn voxel_center(i: usize, s: f64) -> f64 {
    (i as f64 + 0.5) * s
}

/// Rasterizes the spec's shape at voxel centers.
pub fn rasterize(shape: &Shape, dims: [usize; 3], spacing: [f64; 3]) -> Result<Mask3D> {
    let mut mask = Mask3D::filled(dims, spacing, 0)?;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let p = [voxel_center(x, spacing[0]), voxel_center(y, spacing[1]), voxel_center(z, spacing[2])];
                if shape.contains(p) {
                    mask.set(x, y, z, 1);
                }
            }
        }
    }
    Ok(mask)
}

fn touches_border(mask: &Mask3D) -> bool {
    let [nx, ny, nz] = mask.dims();
    (0..nz).any(|z| {
        (0..ny).any(|y| {
            (0..nx).any(|x| {
                let border = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
                border && mask.get(x, y, z) != 0
            })
        })
    })
}

/// `(volume, mask)` where the volume is background plus the object (and any
/// distractor spheres) plus Gaussian noise. Deterministic for a given spec.
pub fn generate_phantom(spec: &PhantomSpec, dims: [usize; 3], spacing: [f64; 3]) -> Result<(Volume, Mask3D)> {
    spec.validate()?;
    let ext = [0, 1, 2].map(|i| dims[i] as f64 * spacing[i]);
    if let Some((lo, hi)) = spec.shape.bounds() {
        if (0..3).any(|i| lo[i] < 0.0 || hi[i] > ext[i]) {
            return Err(Error::OutOfBounds(format!("shape bounds {lo:?}..{hi:?} exceed volume extent {ext:?}")));
        }
    }
    let mask = rasterize(&spec.shape, dims, spacing)?;
    if mask.count() == 0 {
        return Err(Error::OutOfBounds("shape covers no voxel center".into()));
    }
    if touches_border(&mask) {
        return Err(Error::OutOfBounds("shape touches the volume boundary".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut intensity = vec![spec.background as f32; mask.voxels().len()];
    for _ in 0..spec.distractors {
        let radius = rng.random_range(0.05..0.09) * ext[0].min(ext[1]);
        let center = [0, 1, 2].map(|i| rng.random_range(0.0..ext[i]));
        let mut level = rng.random_range(0.0..1.0);
        while (level - spec.foreground).abs() < 0.3 {
            level = rng.random_range(0.0..1.0);
        }
        let ball = Shape::Ellipsoid { center, radii: [radius; 3], yaw_deg: 0.0 };
        let blob = rasterize(&ball, dims, spacing)?;
        for (v, &m) in intensity.iter_mut().zip(blob.voxels()) {
            if m != 0 {
                *v = level as f32;
            }
        }
    }
    for (v, &m) in intensity.iter_mut().zip(mask.voxels()) {
        if m != 0 {
            *v = spec.foreground as f32;
        }
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for v in intensity.iter_mut() {
            *v += noise.sample(&mut rng) as f32;
        }
    }
    Ok((Volume::new(dims, spacing, intensity)?, mask))
}

/// Desk-scale phantom geometry: 64 x 64 x 32 voxels at 1 x 1 x 2 mm.
pub const DESK_DIMS: [usize; 3] = [64, 64, 32];
pub const DESK_SPACING: [f64; 3] = [1.0, 1.0, 2.0];

/// A labelled phantom with its spec, ready for training or evaluation.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub id: String,
    pub spec: PhantomSpec,
    pub volume: Volume,
    pub mask: Mask3D,
}

/// `count` valid random phantoms of one family; specs that fail validation are redrawn.
pub fn phantom_suite(family: ShapeFamily, count: usize, seed: u64, dims: [usize; 3], spacing: [f64; 3]) -> Vec<Phantom> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let spec = PhantomSpec::random(family, dims, spacing, &mut rng);
        if let Ok((volume, mask)) = generate_phantom(&spec, dims, spacing) {
            let areas = mask.slice_areas(Axis::Z);
            if areas.iter().copied().max().unwrap_or(0) > 150 {
                out.push(Phantom { id: format!("{}-{seed}-{:03}", family.as_str(), out.len()), spec, volume, mask });
            }
        }
    }
    out
}

/// Index file written next to the volumes by [`save_phantoms`].
pub const PHANTOM_INDEX: &str = "phantoms.json";

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    id: String,
    spec: PhantomSpec,
}

/// Writes `<id>.pvol`, `<id>.mask.pvol` and an index of specs into `dir`.
pub fn save_phantoms(dir: &Path, phantoms: &[Phantom]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for p in phantoms {
        p.volume.write(dir.join(format!("{}.pvol", p.id)))?;
        p.mask.write(dir.join(format!("{}.mask.pvol", p.id)))?;
    }
    let index: Vec<IndexEntry> = phantoms.iter().map(|p| IndexEntry { id: p.id.clone(), spec: p.spec.clone() }).collect();
    std::fs::write(dir.join(PHANTOM_INDEX), serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

/// Reads back a directory written by [`save_phantoms`].
pub fn load_phantoms(dir: &Path) -> Result<Vec<Phantom>> {
    let index: Vec<IndexEntry> = serde_json::from_slice(&std::fs::read(dir.join(PHANTOM_INDEX))?)?;
    index
        .into_iter()
        .map(|e| {
            let volume = Volume::read(dir.join(format!("{}.pvol", e.id)))?;
            let mask = Mask3D::read(dir.join(format!("{}.mask.pvol", e.id)))?;
            if volume.dims() != mask.dims() {
                return Err(Error::InvalidGeometry(format!("{}: volume and mask dims differ", e.id)));
            }
            Ok(Phantom { id: e.id, spec: e.spec, volume, mask })
        })
        .collect()
}
