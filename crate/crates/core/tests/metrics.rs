use pam_core::metrics::*;
use pam_core::{Axis, Error, Mask2D, Mask3D, Plane};
use proptest::prelude::*;

fn from_bits(bits: u32, w: usize, h: usize) -> Mask2D {
    Plane::new(w, h, (0..w * h).map(|i| ((bits >> i) & 1) as u8).collect()).unwrap()
}

fn points(m: &Mask2D) -> Vec<(f64, f64)> {
    let mut p = Vec::new();
    for y in 0..m.height {
        for x in 0..m.width {
            if m.get(x, y) != 0 {
                p.push((x as f64, y as f64));
            }
        }
    }
    p
}

fn orient(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

/// Point-in-hull by Carathéodory: inside some triangle of mask points,
/// edges included.
fn in_hull_oracle(pts: &[(f64, f64)], p: (f64, f64)) -> bool {
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            for k in j + 1..pts.len() {
                let (a, b, c) = (pts[i], pts[j], pts[k]);
                let d = [orient(a, b, p), orient(b, c, p), orient(c, a, p)];
                let has_neg = d.iter().any(|&v| v < 0.0);
                let has_pos = d.iter().any(|&v| v > 0.0);
                if orient(a, b, c) != 0.0 && !(has_neg && has_pos) {
                    return true;
                }
            }
        }
    }
    false
}

fn convex_ratio_oracle(m: &Mask2D) -> f64 {
    let pts = points(m);
    let collinear = pts.len() < 3 || pts.iter().all(|&p| orient(pts[0], pts[1], p) == 0.0);
    if collinear {
        return 1.0;
    }
    let mut inside = 0;
    for y in 0..m.height {
        for x in 0..m.width {
            inside += in_hull_oracle(&pts, (x as f64, y as f64)) as usize;
        }
    }
    pts.len() as f64 / inside as f64
}

fn box_ratio_oracle(m: &Mask2D) -> f64 {
    let pts = points(m);
    let w = pts.iter().map(|p| p.0).fold(f64::MIN, f64::max) - pts.iter().map(|p| p.0).fold(f64::MAX, f64::min) + 1.0;
    let h = pts.iter().map(|p| p.1).fold(f64::MIN, f64::max) - pts.iter().map(|p| p.1).fold(f64::MAX, f64::min) + 1.0;
    pts.len() as f64 / (w * h)
}

fn iri_oracle(m: &Mask2D) -> Option<f64> {
    let pts = points(m);
    let n = pts.len() as f64;
    // Pairwise form of the centroid moment: sum |x - c|^2 = sum_{i<j} |xi - xj|^2 / n.
    let mut pair = 0.0;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            pair += (pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2);
        }
    }
    let ri = pair / n;
    (pts.len() >= 2).then(|| 0.75 * n / (0.8 * std::f64::consts::PI * ri).powf(5.0 / 3.0))
}

#[test]
fn all_4x4_masks_match_oracles() {
    let probes: Vec<Mask2D> = [0u32, 0xffff, 0x0f0f, 0x8421, 0x1234, 0xbeef].iter().map(|&b| from_bits(b, 4, 4)).collect();
    for bits in 0u32..65536 {
        let m = from_bits(bits, 4, 4);
        for q in &probes {
            let (a, b) = (bits, (0..16).fold(0u32, |acc, i| acc | ((q.data[i] as u32) << i)));
            let expect = if a | b == 0 { 1.0 } else { 2.0 * (a & b).count_ones() as f64 / (a.count_ones() + b.count_ones()) as f64 };
            assert_eq!(dsc(&m, q).unwrap(), expect);
        }
        if bits == 0 {
            assert!(matches!(box_ratio(&m), Err(Error::EmptyMask)));
            assert!(matches!(convex_ratio(&m), Err(Error::EmptyMask)));
            assert_eq!(iri(&m), None);
            continue;
        }
        assert_eq!(box_ratio(&m).unwrap(), box_ratio_oracle(&m), "box {bits:#06x}");
        let c = convex_ratio(&m).unwrap();
        assert_eq!(c, convex_ratio_oracle(&m), "convex {bits:#06x}");
        assert!(c > 0.0 && c <= 1.0);
        match (iri(&m), iri_oracle(&m)) {
            (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12 * b.max(1.0), "iri {bits:#06x}: {a} vs {b}"),
            (None, None) => assert_eq!(bits.count_ones(), 1),
            other => panic!("iri {bits:#06x}: {other:?}"),
        }
    }
}

#[test]
fn named_shapes() {
    let ring = from_bits(0b111_101_111, 3, 3);
    assert_eq!(convex_ratio(&ring).unwrap(), 8.0 / 9.0);
    let square = from_bits(0b11_11, 2, 2);
    let expect = 3.0 / (1.6 * std::f64::consts::PI).powf(5.0 / 3.0);
    assert!((iri(&square).unwrap() - expect).abs() < 1e-15);
    assert!((iri(&square).unwrap() - 0.2034).abs() < 5e-5);
    assert_eq!(rotational_inertia(&square), 2.0);
    let diag = from_bits(0x8421, 4, 4);
    assert_eq!(box_ratio(&diag).unwrap(), 0.25);
    assert_eq!(convex_ratio(&diag).unwrap(), 1.0);
    let rect = Plane::filled(3, 5, 1u8);
    assert_eq!(box_ratio(&rect).unwrap(), 1.0);
    assert_eq!(convex_ratio(&rect).unwrap(), 1.0);
}

#[test]
fn dsc_examples_and_errors() {
    let a = from_bits(0b1111, 4, 2);
    let b = from_bits(0b111100, 4, 2);
    assert_eq!(dsc(&a, &b).unwrap(), 0.5);
    assert!(matches!(dsc(&a, &from_bits(0, 2, 4)), Err(Error::InvalidGeometry(_))));
    let v = Mask3D::filled([2, 2, 2], [1.0; 3], 1).unwrap();
    let w = Mask3D::filled([2, 2, 3], [1.0; 3], 1).unwrap();
    assert!(dsc(&v, &w).is_err());
    assert_eq!(dsc(&v, &v).unwrap(), 1.0);
}

#[test]
fn irregularity_uses_largest_slice() {
    let mut m = Mask3D::filled([4, 4, 3], [1.0; 3], 0).unwrap();
    m.set(0, 0, 0, 1);
    for (x, y) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
        m.set(x, y, 2, 1);
    }
    let r = irregularity(&m, Axis::Z).unwrap();
    assert_eq!((r.slice, r.n_pixels, r.box_ratio, r.convex_ratio), (2, 4, 1.0, 1.0));
    assert!(r.iri.is_some());
}

fn record(dataset: &str, id: &str, d: f64) -> ObjectRecord {
    ObjectRecord { dataset: dataset.into(), object_id: id.into(), dsc: d, box_ratio: 1.0, convex_ratio: 1.0, iri: None, n_pixels: 1 }
}

#[test]
fn aggregate_means() {
    let one = aggregate(&[record("a", "0", 0.7)]).unwrap();
    assert_eq!(one.datasets["a"], 0.7);
    let r = aggregate(&[record("a", "0", 1.0), record("a", "1", 0.0), record("b", "0", 0.9)]).unwrap();
    assert_eq!(r.datasets["a"], 0.5);
    assert_eq!(r.counts["a"], 2);
    assert!((r.overall - 0.7).abs() < 1e-15);
    assert!(matches!(aggregate(&[]), Err(Error::EmptyDataset)));
}

#[test]
fn csv_layout() {
    let mut out = Vec::new();
    let mut r = record("ellipsoid", "e-3", 0.875);
    r.iri = Some(0.25);
    write_csv(&mut out, &[r, record("blob", "b-1", 1.0)]).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "dataset,object_id,dsc,box_ratio,convex_ratio,iri,n_pixels");
    assert_eq!(lines[1], "ellipsoid,e-3,0.875,1,1,0.25,1");
    assert_eq!(lines[2], "blob,b-1,1,1,1,,1");
}

proptest! {
    #[test]
    fn aggregate_is_order_invariant(ds in proptest::collection::vec((0usize..3, 0.0f64..1.0), 1..20), seed in any::<u64>()) {
        let records: Vec<_> = ds.iter().enumerate().map(|(i, (g, d))| record(&format!("g{g}"), &i.to_string(), *d)).collect();
        let mut shuffled = records.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            shuffled.swap(i, (seed as usize ^ i.wrapping_mul(2654435761)) % (i + 1));
        }
        prop_assert_eq!(aggregate(&records).unwrap(), aggregate(&shuffled).unwrap());
    }

    #[test]
    fn six_by_six_masks_match_oracles(bits in 1u64..(1 << 36)) {
        let m = Plane::new(6, 6, (0..36).map(|i| ((bits >> i) & 1) as u8).collect()).unwrap();
        prop_assert_eq!(box_ratio(&m).unwrap(), box_ratio_oracle(&m));
        if let (Some(a), Some(b)) = (iri(&m), iri_oracle(&m)) {
            prop_assert!((a - b).abs() <= 1e-12 * b.max(1.0));
        }
    }

    #[test]
    fn iri_is_translation_invariant(bits in 2u32..65536, dx in 0usize..4, dy in 0usize..4) {
        prop_assume!(bits.count_ones() >= 2);
        let m = from_bits(bits, 4, 4);
        let mut big = Plane::filled(8, 8, 0u8);
        for y in 0..4 {
            for x in 0..4 {
                big.set(x + dx, y + dy, m.get(x, y));
            }
        }
        let (a, b) = (iri(&m).unwrap(), iri(&big).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * a);
    }
}
