use pam_core::engine::*;
use pam_core::metrics::dsc;
use pam_core::phantom::{phantom_suite, ShapeFamily, DESK_DIMS, DESK_SPACING};
use pam_core::preprocess::Box2D;
use pam_core::{Axis, Error, Mask2D, Mask3D, Plane, Volume};

fn sphere(dims: [usize; 3], spacing: [f64; 3], r_mm: f64) -> Mask3D {
    let mut m = Mask3D::filled(dims, spacing, 0).unwrap();
    let c = dims.map(|d| (d as f64 - 1.0) / 2.0);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let d2 = ((x as f64 - c[0]) * spacing[0]).powi(2)
                    + ((y as f64 - c[1]) * spacing[1]).powi(2)
                    + ((z as f64 - c[2]) * spacing[2]).powi(2);
                if d2 <= r_mm * r_mm {
                    m.set(x, y, z, 1);
                }
            }
        }
    }
    m
}

fn blank(dims: [usize; 3], spacing: [f64; 3]) -> Volume {
    Volume::filled(dims, spacing, 0.0).unwrap()
}

#[test]
fn window_examples() {
    assert_eq!(slice_window(10, 1, 20.0, 2.0, 32), (11..=20).collect::<Vec<_>>());
    assert_eq!(slice_window(10, -1, 20.0, 2.0, 32), (0..=9).rev().collect::<Vec<_>>());
    assert_eq!(slice_window(28, 1, 20.0, 2.0, 32), vec![29, 30, 31]);
    assert_eq!(slice_window(3, -1, 10.0, 2.5, 32), vec![2, 1, 0]);
    assert!(slice_window(5, 1, 1.0, 2.0, 32).is_empty());
    assert!(slice_window(31, 1, 20.0, 2.0, 32).is_empty());
}

#[test]
fn oracle_reproduces_sphere_for_every_thickness() {
    let truth = sphere(DESK_DIMS, DESK_SPACING, 20.0);
    let seg = OracleSegmenter { truth: truth.clone() };
    let vol = blank(DESK_DIMS, DESK_SPACING);
    let slice = truth.largest_foreground_slice(Axis::Z).unwrap();
    let prompt = box_prompt_from_truth(&truth, Axis::Z, slice).unwrap();
    for t in THICKNESSES_MM {
        let cfg = EngineConfig { thickness_mm: t, ..Default::default() };
        let out = segment_volume(&seg, &vol, &prompt, &cfg).unwrap();
        assert_eq!(out.mask, truth, "thickness {t}");
        assert!(!out.report.partial);
    }
}

#[test]
fn oracle_closure_on_phantom_suites() {
    for family in ShapeFamily::ALL {
        for p in phantom_suite(family, 13, 101, DESK_DIMS, DESK_SPACING) {
            let seg = OracleSegmenter { truth: p.mask.clone() };
            for cell in thickness_harness(&seg, &p.volume, &p.mask, Axis::Z, &THICKNESSES_MM, &EngineConfig::default()).unwrap() {
                assert_eq!(cell.dsc, 1.0, "{} at {} mm", p.id, cell.setting);
            }
        }
    }
}

#[test]
fn sketch_prompt_is_used_verbatim() {
    let truth = sphere(DESK_DIMS, DESK_SPACING, 16.0);
    let seg = OracleSegmenter { truth: truth.clone() };
    let vol = blank(DESK_DIMS, DESK_SPACING);
    let mut sketch = Plane::filled(64, 64, 0u8);
    for y in 20..30 {
        for x in 20..30 {
            sketch.set(x, y, 1);
        }
    }
    let prompt = Prompt::from_sketch(Axis::Z, 16, &sketch);
    let out = segment_volume(&seg, &vol, &prompt, &EngineConfig::default()).unwrap();
    assert_eq!(out.mask.slice(Axis::Z, 16), sketch);
    assert_eq!(out.mask.slice(Axis::Z, 15), truth.slice(Axis::Z, 15));
}

#[test]
fn empty_box_prompt_fails() {
    let truth = sphere(DESK_DIMS, DESK_SPACING, 10.0);
    let seg = OracleSegmenter { truth };
    let vol = blank(DESK_DIMS, DESK_SPACING);
    let prompt = Prompt::from_box(Axis::Z, 16, Box2D::new(0, 0, 5, 5).unwrap());
    assert!(matches!(segment_volume(&seg, &vol, &prompt, &EngineConfig::default()), Err(Error::EmptyInitialMask)));
}

#[test]
fn bad_prompts_are_rejected() {
    let vol = blank(DESK_DIMS, DESK_SPACING);
    let seg = OracleSegmenter { truth: sphere(DESK_DIMS, DESK_SPACING, 10.0) };
    let cfg = EngineConfig::default();
    let outside = Prompt::from_box(Axis::Z, 32, Box2D::new(0, 0, 5, 5).unwrap());
    assert!(matches!(segment_volume(&seg, &vol, &outside, &cfg), Err(Error::Prompt(_))));
    let empty = Prompt::from_sketch(Axis::Z, 3, &Plane::filled(64, 64, 0u8));
    assert!(matches!(segment_volume(&seg, &vol, &empty, &cfg), Err(Error::Prompt(_))));
    let bad = EngineConfig { context_scale: 0.5, ..Default::default() };
    let ok = Prompt::from_box(Axis::Z, 16, Box2D::new(0, 0, 64, 64).unwrap());
    assert!(matches!(segment_volume(&seg, &vol, &ok, &bad), Err(Error::Config(_))));
}

/// Returns ground truth, but reports every slice past `cut` as empty.
struct Truncating {
    truth: Mask3D,
    cut: usize,
}

impl Segmenter for Truncating {
    fn box_to_mask(&self, v: &Volume, axis: Axis, slice: usize, b: &Box2D) -> pam_core::Result<Mask2D> {
        OracleSegmenter { truth: self.truth.clone() }.box_to_mask(v, axis, slice, b)
    }

    fn propagate(&self, _: &Volume, axis: Axis, _: usize, _: &Mask2D, targets: &[usize], _: &EngineConfig) -> pam_core::Result<Vec<Mask2D>> {
        Ok(targets
            .iter()
            .map(|&t| if t > self.cut { Plane::filled(64, 64, 0) } else { self.truth.slice(axis, t) })
            .collect())
    }
}

#[test]
fn stop_reasons() {
    let truth = Mask3D::filled(DESK_DIMS, DESK_SPACING, 1).unwrap();
    let vol = blank(DESK_DIMS, DESK_SPACING);
    let prompt = Prompt::from_box(Axis::Z, 10, Box2D::new(0, 0, 64, 64).unwrap());

    let seg = Truncating { truth: truth.clone(), cut: 12 };
    let cfg = EngineConfig { thickness_mm: 4.0, ..Default::default() };
    let out = segment_volume(&seg, &vol, &prompt, &cfg).unwrap();
    let up = &out.report.directions[0];
    assert_eq!(up.stop, StopReason::Empty);
    assert_eq!(up.guides, vec![10, 12]);
    assert_eq!(up.predicted, vec![11, 12, 13, 14]);
    assert_eq!(out.report.directions[1].stop, StopReason::Boundary);

    let thin = EngineConfig { thickness_mm: 1.0, ..Default::default() };
    let out = segment_volume(&seg, &vol, &prompt, &thin).unwrap();
    assert!(out.report.directions.iter().all(|d| d.stop == StopReason::NoWindow));
    assert_eq!(out.mask.count(), 64 * 64);

    let capped = EngineConfig { thickness_mm: 2.0, max_rounds: 3, ..Default::default() };
    let out = segment_volume(&OracleSegmenter { truth }, &vol, &prompt, &capped).unwrap();
    assert_eq!(out.report.directions[0].stop, StopReason::SafetyCap);
    assert!(out.report.partial);
    assert_eq!(out.mask.count(), 64 * 64 * 7);
}

#[test]
fn every_slice_is_written_once_per_direction() {
    for p in phantom_suite(ShapeFamily::Blob, 5, 9, DESK_DIMS, DESK_SPACING) {
        let seg = OracleSegmenter { truth: p.mask.clone() };
        let slice = p.mask.largest_foreground_slice(Axis::Z).unwrap();
        let prompt = box_prompt_from_truth(&p.mask, Axis::Z, slice).unwrap();
        let cfg = EngineConfig { thickness_mm: 6.0, ..Default::default() };
        let out = segment_volume(&seg, &p.volume, &prompt, &cfg).unwrap();
        for d in &out.report.directions {
            let mut seen = d.predicted.clone();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), d.predicted.len());
            assert!(!d.predicted.contains(&slice));
        }
    }
}

#[test]
fn deviated_slices_stay_on_the_object() {
    let truth = sphere(DESK_DIMS, DESK_SPACING, 20.0);
    let (first, last) = truth.extent(Axis::Z).unwrap();
    for p in DEVIATIONS {
        let s = deviated_slice(&truth, Axis::Z, p).unwrap();
        assert!(s >= first && s <= last);
    }
    assert_eq!(deviated_slice(&truth, Axis::Z, 0.0).unwrap(), truth.largest_foreground_slice(Axis::Z).unwrap());
}

#[test]
fn prompt_json_shapes() {
    let p: Prompt = serde_json::from_str(r#"{"kind":"box","slice":4,"box":[1,2,10,12]}"#).unwrap();
    assert_eq!(p, Prompt::from_box(Axis::Z, 4, Box2D::new(1, 2, 10, 12).unwrap()));
    let s: Prompt = serde_json::from_str(r#"{"kind":"sketch","axis":"y","slice":2,"rle":"3 2"}"#).unwrap();
    assert_eq!(s.axis, Axis::Y);
    let back: Prompt = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
    assert_eq!(back, p);
}

#[test]
fn oracle_dsc_is_one() {
    let truth = sphere(DESK_DIMS, DESK_SPACING, 12.0);
    let seg = OracleSegmenter { truth: truth.clone() };
    let cells = deviation_harness(&seg, &blank(DESK_DIMS, DESK_SPACING), &truth, Axis::Z, &DEVIATIONS, &EngineConfig::default()).unwrap();
    assert_eq!(cells.len(), 9);
    assert!(cells.iter().all(|c| c.dsc == 1.0));
    assert_eq!(dsc(&truth, &truth).unwrap(), 1.0);
}
