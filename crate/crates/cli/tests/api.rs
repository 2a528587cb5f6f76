use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use pam_cli::api::{router, AppState, Backend, JobStatus, JobView, SliceMask, SCHEMA_VERSION};
use pam_core::engine::{box_prompt_from_truth, Prompt};
use pam_core::phantom::{phantom_suite, Phantom, ShapeFamily, DESK_DIMS, DESK_SPACING};
use pam_core::rle::rle_decode;
use pam_core::{Axis, Mask3D, Volume};
use serde_json::{json, Value};
use tower::ServiceExt;

fn app(backend: Backend) -> Router {
    router(Arc::new(AppState::new(backend)))
}

async fn call(app: &Router, method: Method, uri: &str, body: Vec<u8>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).body(Body::from(body)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn call_json(app: &Router, method: Method, uri: &str, body: Vec<u8>) -> (StatusCode, Value) {
    let (status, bytes) = call(app, method, uri, body).await;
    let v: Value = serde_json::from_slice(&bytes).unwrap_or_else(|e| panic!("{uri}: not JSON ({e}): {bytes:?}"));
    assert_eq!(v["schema_version"], SCHEMA_VERSION, "{uri} answered without schema_version: {v}");
    (status, v)
}

fn phantom(seed: u64) -> Phantom {
    phantom_suite(ShapeFamily::Ellipsoid, 1, seed, DESK_DIMS, DESK_SPACING).remove(0)
}

/// Uploads volume and truth, returning the volume id.
async fn upload(app: &Router, p: &Phantom) -> String {
    let (status, meta) = call_json(app, Method::POST, "/api/volumes", p.volume.to_bytes()).await;
    assert_eq!(status, StatusCode::CREATED, "{meta}");
    let id = meta["volume_id"].as_str().unwrap().to_string();
    let (status, meta) = call_json(app, Method::PUT, &format!("/api/volumes/{id}/truth"), p.mask.to_bytes()).await;
    assert_eq!(status, StatusCode::OK, "{meta}");
    assert_eq!(meta["has_truth"], true);
    id
}

async fn segment(app: &Router, id: &str, prompt: &Prompt) -> (StatusCode, Value) {
    let body = serde_json::to_vec(&json!({ "prompt": prompt, "config": { "thickness_mm": 20.0 } })).unwrap();
    call_json(app, Method::POST, &format!("/api/volumes/{id}/segmentations"), body).await
}

fn sketch_prompt(truth: &Mask3D) -> Prompt {
    let s = truth.largest_foreground_slice(Axis::Z).unwrap();
    Prompt::from_sketch(Axis::Z, s, &truth.slice(Axis::Z, s))
}

#[tokio::test]
async fn info_reports_backend() {
    let (status, v) = call_json(&app(Backend::Oracle), Method::GET, "/api/info", vec![]).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["backend"], "oracle");
}

#[tokio::test]
async fn upload_is_content_addressed() {
    let app = app(Backend::Oracle);
    let p = phantom(3);
    let bytes = p.volume.to_bytes();
    let (status, a) = call_json(&app, Method::POST, "/api/volumes", bytes.clone()).await;
    assert_eq!(status, StatusCode::CREATED);
    let (_, b) = call_json(&app, Method::POST, "/api/volumes", bytes).await;
    assert_eq!(a["volume_id"], b["volume_id"]);
    assert_eq!(a["volume_id"].as_str().unwrap().len(), 16);
    assert_eq!(a["dims"], json!(DESK_DIMS));
    assert_eq!(a["spacing"], json!(DESK_SPACING));
    assert_eq!(a["has_truth"], false);

    let id = a["volume_id"].as_str().unwrap();
    let (status, meta) = call_json(&app, Method::GET, &format!("/api/volumes/{id}/meta"), vec![]).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(meta, a);

    let other = phantom(4);
    let (_, c) = call_json(&app, Method::POST, "/api/volumes", other.volume.to_bytes()).await;
    assert_ne!(a["volume_id"], c["volume_id"]);
}

#[tokio::test]
async fn malformed_uploads_are_rejected() {
    let app = app(Backend::Oracle);
    let (status, v) = call_json(&app, Method::POST, "/api/volumes", b"not a volume".to_vec()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "invalid_volume");

    // A mask is u8, the store wants f32 intensities.
    let p = phantom(3);
    let (status, _) = call_json(&app, Method::POST, "/api/volumes", p.mask.to_bytes()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let id = upload(&app, &p).await;
    let small = Mask3D::filled([4, 4, 4], [1.0; 3], 0).unwrap();
    let (status, v) = call_json(&app, Method::PUT, &format!("/api/volumes/{id}/truth"), small.to_bytes()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "bad_request");
}

#[tokio::test]
async fn unknown_resources_give_json_404() {
    let app = app(Backend::Oracle);
    let id = upload(&app, &phantom(3)).await;
    for uri in [
        "/api/nowhere".to_string(),
        "/api/volumes/feedfeedfeedfeed/meta".to_string(),
        "/api/jobs/job-99".to_string(),
        "/api/jobs/job-99/mask".to_string(),
        format!("/api/volumes/{id}/slices/z/32.png"),
        format!("/api/volumes/{id}/slices/z/five.png"),
        format!("/api/volumes/{id}/slices/z/3.jpg"),
    ] {
        let (status, v) = call_json(&app, Method::GET, &uri, vec![]).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(v["code"], "not_found", "{uri}");
        assert!(v["message"].as_str().is_some_and(|m| !m.is_empty()));
    }
    let (status, v) = call_json(&app, Method::GET, &format!("/api/volumes/{id}/slices/w/3.png"), vec![]).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "bad_request");
}

fn decode_png(bytes: &[u8]) -> (u32, u32, Vec<u8>) {
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    assert_eq!(info.color_type, png::ColorType::Grayscale);
    assert_eq!(info.bit_depth, png::BitDepth::Eight);
    buf.truncate(info.buffer_size());
    (info.width, info.height, buf)
}

#[tokio::test]
async fn slices_render_as_png() {
    let app = app(Backend::Oracle);
    let p = phantom(3);
    let id = upload(&app, &p).await;

    for (axis, w, h) in [("z", 64, 64), ("y", 64, 32), ("x", 64, 32)] {
        let (status, bytes) = call(&app, Method::GET, &format!("/api/volumes/{id}/slices/{axis}/10.png"), vec![]).await;
        assert_eq!(status, StatusCode::OK, "{axis}");
        let (pw, ph, pixels) = decode_png(&bytes);
        assert_eq!((pw, ph), (w, h), "{axis}");
        assert_eq!(pixels.len(), (w * h) as usize);
        let (_, again) = call(&app, Method::GET, &format!("/api/volumes/{id}/slices/{axis}/10.png"), vec![]).await;
        assert_eq!(bytes, again);
    }

    // An explicit window maps lo to black and hi to white.
    let (status, bytes) = call(&app, Method::GET, &format!("/api/volumes/{id}/slices/z/16.png?window=-1e9,-1e9"), vec![]).await;
    assert_eq!(status, StatusCode::OK);
    assert!(decode_png(&bytes).2.iter().all(|&v| v == 128), "zero-width window is mid-gray");
    let (_, bytes) = call(&app, Method::GET, &format!("/api/volumes/{id}/slices/z/16.png?window=1e9,2e9"), vec![]).await;
    assert!(decode_png(&bytes).2.iter().all(|&v| v == 0));
    let (_, bytes) = call(&app, Method::GET, &format!("/api/volumes/{id}/slices/z/16.png?window=-2e9,-1e9"), vec![]).await;
    assert!(decode_png(&bytes).2.iter().all(|&v| v == 255));

    let (status, v) = call_json(&app, Method::GET, &format!("/api/volumes/{id}/slices/z/16.png?window=9,1"), vec![]).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "bad_request");
}

#[tokio::test]
async fn constant_slice_renders_mid_gray() {
    let app = app(Backend::Oracle);
    let volume = Volume::filled([5, 3, 2], [1.0; 3], 7.0f32).unwrap();
    let (_, meta) = call_json(&app, Method::POST, "/api/volumes", volume.to_bytes()).await;
    let id = meta["volume_id"].as_str().unwrap();
    let (_, bytes) = call(&app, Method::GET, &format!("/api/volumes/{id}/slices/z/1.png"), vec![]).await;
    let (w, h, pixels) = decode_png(&bytes);
    assert_eq!((w, h), (5, 3));
    assert_eq!(pixels, vec![128; 15]);
}

#[tokio::test]
async fn oracle_sketch_job_reproduces_truth() {
    let app = app(Backend::Oracle);
    let p = phantom(3);
    let id = upload(&app, &p).await;
    let (status, created) = segment(&app, &id, &sketch_prompt(&p.mask)).await;
    assert_eq!(status, StatusCode::CREATED, "{created}");
    assert_eq!(created["status"], "done");
    let job_id = created["job_id"].as_str().unwrap();

    let (status, v) = call_json(&app, Method::GET, &format!("/api/jobs/{job_id}"), vec![]).await;
    assert_eq!(status, StatusCode::OK);
    let view: JobView = serde_json::from_value(v).unwrap();
    assert_eq!(view.status, JobStatus::Done);
    assert_eq!(view.volume_id, id);
    assert_eq!(view.dsc, Some(1.0));
    assert!(view.report.is_some());
    assert!(view.error.is_none());

    let (status, bytes) = call(&app, Method::GET, &format!("/api/jobs/{job_id}/mask"), vec![]).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(Mask3D::from_bytes(&bytes).unwrap(), p.mask);
}

#[tokio::test]
async fn slice_masks_match_the_volume_mask() {
    let app = app(Backend::Oracle);
    let p = phantom(5);
    let id = upload(&app, &p).await;
    let prompt = box_prompt_from_truth(&p.mask, Axis::Z, p.mask.largest_foreground_slice(Axis::Z).unwrap()).unwrap();
    let (_, created) = segment(&app, &id, &prompt).await;
    assert_eq!(created["status"], "done");
    let job_id = created["job_id"].as_str().unwrap();
    let (_, bytes) = call(&app, Method::GET, &format!("/api/jobs/{job_id}/mask"), vec![]).await;
    let full = Mask3D::from_bytes(&bytes).unwrap();

    for axis in [Axis::X, Axis::Y, Axis::Z] {
        for index in 0..full.axis_len(axis) {
            let uri = format!("/api/jobs/{job_id}/masks/{}/{index}", axis.as_str());
            let (status, v) = call_json(&app, Method::GET, &uri, vec![]).await;
            assert_eq!(status, StatusCode::OK, "{uri}");
            let slice: SliceMask = serde_json::from_value(v).unwrap();
            assert_eq!((slice.axis, slice.index), (axis, index));
            assert_eq!(rle_decode(&slice.rle).unwrap(), full.slice(axis, index), "{uri}");
        }
    }
    let (status, _) = call_json(&app, Method::GET, &format!("/api/jobs/{job_id}/masks/z/32"), vec![]).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn bad_prompts_fail_the_job() {
    let app = app(Backend::Oracle);
    let p = phantom(3);
    let id = upload(&app, &p).await;

    // A box over empty background: the oracle finds nothing to propagate.
    let empty = serde_json::from_value::<Prompt>(json!({ "axis": "z", "slice": 0, "kind": "box", "box": [0, 0, 4, 4] })).unwrap();
    let (status, created) = segment(&app, &id, &empty).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(created["status"], "failed");
    let job_id = created["job_id"].as_str().unwrap();
    let (_, v) = call_json(&app, Method::GET, &format!("/api/jobs/{job_id}"), vec![]).await;
    assert!(v["error"].as_str().unwrap().contains("empty"), "{v}");
    let (status, v) = call_json(&app, Method::GET, &format!("/api/jobs/{job_id}/mask"), vec![]).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(v["code"], "job_not_done");

    let outside = serde_json::from_value::<Prompt>(json!({ "axis": "z", "slice": 99, "kind": "box", "box": [0, 0, 4, 4] })).unwrap();
    let (_, created) = segment(&app, &id, &outside).await;
    assert_eq!(created["status"], "failed");

    let (status, v) = call_json(&app, Method::POST, &format!("/api/volumes/{id}/segmentations"), b"{\"prompt\": 3}".to_vec()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "bad_request");

    let (status, _) = segment(&app, "feedfeedfeedfeed", &sketch_prompt(&p.mask)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn oracle_without_truth_fails_the_job() {
    let app = app(Backend::Oracle);
    let p = phantom(3);
    let (_, meta) = call_json(&app, Method::POST, "/api/volumes", p.volume.to_bytes()).await;
    let id = meta["volume_id"].as_str().unwrap();
    let (_, created) = segment(&app, id, &sketch_prompt(&p.mask)).await;
    assert_eq!(created["status"], "failed");
    let (_, v) = call_json(&app, Method::GET, &format!("/api/jobs/{}", created["job_id"].as_str().unwrap()), vec![]).await;
    assert!(v["error"].as_str().unwrap().contains("ground truth"), "{v}");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_jobs_keep_their_own_results() {
    let app = app(Backend::Oracle);
    let phantoms: Vec<Phantom> = (0..4).map(|i| phantom(30 + i)).collect();
    let mut ids = Vec::new();
    for p in &phantoms {
        ids.push(upload(&app, p).await);
    }
    // Two jobs per volume, all in flight together.
    let mut handles = Vec::new();
    for round in 0..2 {
        for (p, id) in phantoms.iter().zip(&ids) {
            let (app, id, prompt) = (app.clone(), id.clone(), sketch_prompt(&p.mask));
            handles.push(tokio::spawn(async move { (round, id.clone(), segment(&app, &id, &prompt).await) }));
        }
    }
    let mut job_ids = std::collections::HashSet::new();
    for h in handles {
        let (_, id, (status, created)) = h.await.unwrap();
        assert_eq!(status, StatusCode::CREATED);
        assert_eq!(created["status"], "done");
        let job_id = created["job_id"].as_str().unwrap().to_string();
        assert!(job_ids.insert(job_id.clone()), "job id {job_id} reused");

        let (_, v) = call_json(&app, Method::GET, &format!("/api/jobs/{job_id}"), vec![]).await;
        assert_eq!(v["volume_id"], id.as_str());
        assert_eq!(v["dsc"], 1.0);
        let (_, bytes) = call(&app, Method::GET, &format!("/api/jobs/{job_id}/mask"), vec![]).await;
        let p = &phantoms[ids.iter().position(|i| *i == id).unwrap()];
        assert_eq!(Mask3D::from_bytes(&bytes).unwrap(), p.mask);
    }
    assert_eq!(job_ids.len(), 8);
}

#[tokio::test]
async fn spill_dir_keeps_uploads() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(Arc::new(AppState::new(Backend::Oracle).with_spill_dir(dir.path().to_path_buf())));
    let p = phantom(3);
    let (_, meta) = call_json(&app, Method::POST, "/api/volumes", p.volume.to_bytes()).await;
    let id = meta["volume_id"].as_str().unwrap();
    let kept = Volume::read(dir.path().join(format!("{id}.pvol"))).unwrap();
    assert_eq!(kept, p.volume);
}
