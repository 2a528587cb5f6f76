//! Overlap and shape-irregularity metrics, plus per-dataset aggregation.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::bounding_box;
use crate::volume::{Mask2D, Mask3D};

/// Binary masks of any dimensionality.
pub trait MaskData {
    fn bits(&self) -> &[u8];
    fn extents(&self) -> Vec<usize>;
}

impl MaskData for Mask2D {
    fn bits(&self) -> &[u8] {
        &self.data
    }

    fn extents(&self) -> Vec<usize> {
        vec![self.width, self.height]
    }
}

impl MaskData for Mask3D {
    fn bits(&self) -> &[u8] {
        self.voxels()
    }

    fn extents(&self) -> Vec<usize> {
        self.dims().to_vec()
    }
}

/// `2|A ∩ B| / (|A| + |B|)`; two empty masks agree perfectly (1.0).
pub fn dsc<M: MaskData>(a: &M, b: &M) -> Result<f64> {
    if a.extents() != b.extents() {
        return Err(Error::InvalidGeometry(format!("dsc of {:?} and {:?} masks", a.extents(), b.extents())));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        let (x, y) = (x != 0, y != 0);
        na += usize::from(x);
        nb += usize::from(y);
        inter += usize::from(x && y);
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

fn pixels(m: &Mask2D) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    for y in 0..m.height {
        for x in 0..m.width {
            if m.get(x, y) != 0 {
                out.push((x as i64, y as i64));
            }
        }
    }
    out
}

/// Foreground pixels over bounding-box pixels.
pub fn box_ratio(m: &Mask2D) -> Result<f64> {
    let b = bounding_box(m).ok_or(Error::EmptyMask)?;
    Ok(m.area() as f64 / b.area() as f64)
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Counter-clockwise hull of integer points by Andrew's monotone chain,
/// collinear points dropped.
pub fn convex_hull(points: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let mut pts = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<(i64, i64)> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<(i64, i64)> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Whether `p` lies inside or on a counter-clockwise convex polygon.
fn in_hull(hull: &[(i64, i64)], p: (i64, i64)) -> bool {
    (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], p) >= 0)
}

/// Foreground pixels over pixels whose centers lie in the convex hull of the
/// foreground centers. Collinear masks have no area and score 1.0.
pub fn convex_ratio(m: &Mask2D) -> Result<f64> {
    let pts = pixels(m);
    if pts.is_empty() {
        return Err(Error::EmptyMask);
    }
    let hull = convex_hull(&pts);
    if hull.len() < 3 {
        return Ok(1.0);
    }
    let (x0, x1) = (hull.iter().map(|p| p.0).min().unwrap(), hull.iter().map(|p| p.0).max().unwrap());
    let (y0, y1) = (hull.iter().map(|p| p.1).min().unwrap(), hull.iter().map(|p| p.1).max().unwrap());
    let mut inside = 0usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            inside += usize::from(in_hull(&hull, (x, y)));
        }
    }
    Ok(pts.len() as f64 / inside as f64)
}

/// Sum of squared pixel-center distances from the centroid.
pub fn rotational_inertia(m: &Mask2D) -> f64 {
    let pts = pixels(m);
    if pts.is_empty() {
        return 0.0;
    }
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.0 as f64).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.1 as f64).sum::<f64>() / n;
    pts.iter().map(|p| (p.0 as f64 - cx).powi(2) + (p.1 as f64 - cy).powi(2)).sum()
}

/// Inverse rotational inertia `0.75|M| / (0.8 pi RI)^(5/3)`; `None` when the
/// inertia is zero (at most one pixel).
pub fn iri(m: &Mask2D) -> Option<f64> {
    let ri = rotational_inertia(m);
    if m.area() < 2 || ri <= 0.0 {
        return None;
    }
    Some(0.75 * m.area() as f64 / (0.8 * std::f64::consts::PI * ri).powf(5.0 / 3.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrregularityReport {
    pub slice: usize,
    pub n_pixels: usize,
    pub box_ratio: f64,
    pub convex_ratio: f64,
    pub iri: Option<f64>,
}

/// Irregularity of a 3D object, measured on its largest slice along `axis`.
pub fn irregularity(m: &Mask3D, axis: crate::volume::Axis) -> Result<IrregularityReport> {
    let slice = m.largest_foreground_slice(axis)?;
    let s = m.slice(axis, slice);
    Ok(IrregularityReport { slice, n_pixels: s.area(), box_ratio: box_ratio(&s)?, convex_ratio: convex_ratio(&s)?, iri: iri(&s) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub dataset: String,
    pub object_id: String,
    pub dsc: f64,
    pub box_ratio: f64,
    pub convex_ratio: f64,
    pub iri: Option<f64>,
    pub n_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    /// Unweighted mean DSC per dataset, sorted by dataset name.
    pub datasets: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    /// Mean of the dataset means.
    pub overall: f64,
}

pub fn aggregate(records: &[ObjectRecord]) -> Result<AggregateReport> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut sorted: Vec<&ObjectRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (&a.dataset, &a.object_id).cmp(&(&b.dataset, &b.object_id)).then(a.dsc.total_cmp(&b.dsc)));
    for r in sorted {
        let e = sums.entry(r.dataset.clone()).or_insert((0.0, 0));
        e.0 += r.dsc;
        e.1 += 1;
    }
    let datasets: BTreeMap<String, f64> = sums.iter().map(|(k, (s, n))| (k.clone(), s / *n as f64)).collect();
    let counts = sums.iter().map(|(k, (_, n))| (k.clone(), *n)).collect();
    let overall = datasets.values().sum::<f64>() / datasets.len() as f64;
    Ok(AggregateReport { datasets, counts, overall })
}

pub const CSV_HEADER: &str = "dataset,object_id,dsc,box_ratio,convex_ratio,iri,n_pixels";

pub fn write_csv<W: Write>(mut out: W, records: &[ObjectRecord]) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        let iri = r.iri.map(|v| format!("{v}")).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.dataset, r.object_id, r.dsc, r.box_ratio, r.convex_ratio, iri, r.n_pixels
        )?;
    }
    Ok(())
}
