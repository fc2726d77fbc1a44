use std::time::{Duration, Instant};

use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use axum::Router;
use futures_util::StreamExt;
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message;
use tower::ServiceExt;

use cinevol::imageio::{decode_pfm, decode_png};
use cinevol::postfx::{finish, tone_map_image};
use cinevol::scene::{preset_scene, Scene, ScenePreset, VolumeSource};
use cinevol::tracer::{render, Framebuffer, RenderSettings};
use cinevol::volume::PhantomKind;
use cinevol_service::{
    router, serve, PatchError, Session, Status, FRAME_HEADER_LEN, FRAME_INTERVAL,
};

const TIMEOUT: Duration = Duration::from_secs(60);

fn small_scene(iterations: u32) -> Scene {
    let mut s = preset_scene(ScenePreset::Default);
    s.volume = VolumeSource::phantom(PhantomKind::TwoChamber, 24);
    s.render = RenderSettings {
        width: 24,
        height: 20,
        iterations,
        max_bounces: 3,
        ..s.render
    };
    s
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = to_bytes(resp.into_body(), usize::MAX)
        .await
        .unwrap()
        .to_vec();
    (status, headers, body)
}

fn json_body(b: &[u8]) -> Value {
    serde_json::from_slice(b).unwrap()
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn patch(body: Value, if_match: Option<&str>) -> Request<Body> {
    let mut r = Request::patch("/api/scene").header(header::CONTENT_TYPE, "application/json");
    if let Some(m) = if_match {
        r = r.header(header::IF_MATCH, m);
    }
    r.body(Body::from(body.to_string())).unwrap()
}

fn snapshot(format: &str) -> Request<Body> {
    Request::post(format!("/api/snapshot?format={format}"))
        .body(Body::empty())
        .unwrap()
}

/// Batch render of `scene` with exactly `k` passes, encoded as the service does.
fn batch_png(scene: &Scene, k: u32) -> Vec<u8> {
    let mut s = scene.clone();
    s.render.iterations = k;
    let rs = s.prepare(std::path::Path::new(".")).unwrap();
    let mut fb = Framebuffer::new(rs.settings.width, rs.settings.height);
    render(&rs, &rs.settings, &mut fb).unwrap();
    let (_, ldr) = finish(&fb, &rs.camera, &rs.settings).unwrap();
    ldr.to_png().unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn get_scene_returns_the_loaded_document() {
    let scene = small_scene(2);
    let session = Session::start_paused(scene.clone(), ".", Some(1)).unwrap();
    let app = router(session);
    let (status, headers, body) = call(&app, get("/api/scene")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers[header::ETAG], "\"1\"");
    let v = json_body(&body);
    assert_eq!(v["revision"], 1);
    assert_eq!(Scene::from_value(v["scene"].clone()).unwrap(), scene);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn patch_bumps_revision_once_per_change() {
    let session = Session::start_paused(small_scene(2), ".", Some(1)).unwrap();
    let app = router(session.clone());

    let (status, _, body) = call(
        &app,
        patch(json!({ "material": { "roughness": 0.9 } }), Some("\"1\"")),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_body(&body), json!({ "revision": 2, "changed": true }));
    assert_eq!(session.scene().0.material.roughness, 0.9);

    let (status, _, body) = call(
        &app,
        patch(json!({ "material": { "roughness": 0.9 } }), Some("2")),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_body(&body), json!({ "revision": 2, "changed": false }));

    let (_, _, body) = call(&app, get("/api/scene")).await;
    assert_eq!(json_body(&body)["revision"], 2);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn invalid_patch_reports_path_and_keeps_revision() {
    let session = Session::start_paused(small_scene(2), ".", Some(1)).unwrap();
    let before = session.scene().0;
    let app = router(session.clone());
    let (status, _, body) = call(
        &app,
        patch(json!({ "camera": { "vertical_fov": 200.0 } }), Some("1")),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let v = json_body(&body);
    assert_eq!(v["path"], "camera.vertical_fov");
    assert_eq!(v["revision"], 1);
    assert_eq!(session.scene(), (before, 1));

    let (status, _, body) = call(
        &app,
        patch(json!({ "material": { "shininess": 1 } }), Some("1")),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(json_body(&body)["path"]
        .as_str()
        .unwrap()
        .starts_with("material"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn patch_preconditions() {
    let session = Session::start_paused(small_scene(2), ".", Some(1)).unwrap();
    let app = router(session.clone());
    let edit = json!({ "material": { "metallic": 1.0 } });

    let (status, _, _) = call(&app, patch(edit.clone(), None)).await;
    assert_eq!(status, StatusCode::PRECONDITION_REQUIRED);
    let (status, _, _) = call(&app, patch(edit.clone(), Some("abc"))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _, _) = call(&app, patch(json!([1, 2]), Some("1"))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (status, _, body) = call(&app, patch(edit.clone(), Some("7"))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(json_body(&body)["revision"], 1);
    assert_eq!(session.revision(), 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_patches_accept_exactly_one() {
    let session = Session::start_paused(small_scene(2), ".", Some(1)).unwrap();
    let app = router(session.clone());
    let tasks: Vec<_> = (0..8)
        .map(|i| {
            let app = app.clone();
            tokio::spawn(async move {
                let edit = json!({ "material": { "roughness": 0.1 * f64::from(i) + 0.05 } });
                call(&app, patch(edit, Some("1"))).await.0
            })
        })
        .collect();
    let mut codes = Vec::new();
    for t in tasks {
        codes.push(t.await.unwrap());
    }
    assert_eq!(
        codes.iter().filter(|&&c| c == StatusCode::OK).count(),
        1,
        "{codes:?}"
    );
    assert_eq!(
        codes.iter().filter(|&&c| c == StatusCode::CONFLICT).count(),
        7
    );
    assert_eq!(session.revision(), 2);
}

#[test]
fn concurrent_session_patches_accept_exactly_one() {
    let session = Session::start_paused(small_scene(2), ".", Some(1)).unwrap();
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..6)
            .map(|i| {
                let session = &session;
                s.spawn(move || {
                    session.patch(
                        &json!({ "material": { "specular": 0.1 * f64::from(i) } }),
                        1,
                    )
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(
        results
            .iter()
            .filter(|r| r.as_ref().is_ok_and(|o| o.changed))
            .count(),
        1
    );
    assert!(results
        .iter()
        .filter(|r| r.is_err())
        .all(|r| matches!(r, Err(PatchError::Conflict { current: 2 }))));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn snapshot_before_and_after_the_first_pass() {
    let session = Session::start_paused(small_scene(3), ".", Some(1)).unwrap();
    let app = router(session.clone());
    let (status, _, _) = call(&app, snapshot("png")).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let (status, _, _) = call(&app, snapshot("tiff")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    session.set_paused(false);
    let s2 = session.clone();
    let done = tokio::task::spawn_blocking(move || s2.wait_for_iteration(3, TIMEOUT))
        .await
        .unwrap()
        .unwrap();
    assert_eq!(done.iteration(), 3);

    let (status, headers, png) = call(&app, snapshot("png")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers[header::CONTENT_TYPE], "image/png");
    assert_eq!(headers["x-iteration"], "3");
    assert_eq!(headers["x-revision"], "1");
    let (w, h, rgb) = decode_png(&png).unwrap();
    assert_eq!((w, h), (24, 20));

    let (_, _, again) = call(&app, snapshot("png")).await;
    assert_eq!(again, png);
    assert_eq!(png, batch_png(&small_scene(3), 3));

    let (status, headers, pfm) = call(&app, snapshot("pfm")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers[header::CONTENT_TYPE], "image/x-portable-floatmap");
    let hdr = decode_pfm(&pfm).unwrap();
    let exposure = small_scene(3).render.exposure;
    assert_eq!(
        tone_map_image(&hdr, exposure).rgb8.as_slice(),
        rgb.as_slice()
    );
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn health_reports_state() {
    let session = Session::start_paused(small_scene(2), ".", Some(1)).unwrap();
    let app = router(session.clone());
    let (status, _, body) = call(&app, get("/api/health")).await;
    assert_eq!(status, StatusCode::OK);
    let v = json_body(&body);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["state"], "paused");
    assert_eq!(v["revision"], 1);
    assert_eq!(v["iteration"], 0);

    session.set_paused(false);
    let s2 = session.clone();
    tokio::task::spawn_blocking(move || s2.wait_for_iteration(2, TIMEOUT))
        .await
        .unwrap()
        .unwrap();
    let deadline = Instant::now() + TIMEOUT;
    while session.status() != Status::Idle && Instant::now() < deadline {
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    let (_, _, body) = call(&app, get("/api/health")).await;
    let v = json_body(&body);
    assert_eq!(v["state"], "idle");
    assert_eq!(v["iteration"], 2);
    assert!(v["error"].is_null());
}

#[test]
fn unreadable_volume_surfaces_as_error() {
    let mut scene = small_scene(2);
    scene.volume = VolumeSource::Nrrd {
        path: "does/not/exist.nrrd".into(),
    };
    let session = Session::start(scene, ".", Some(1)).unwrap();
    let deadline = Instant::now() + TIMEOUT;
    while session.last_error().is_none() && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(5));
    }
    assert!(session.last_error().is_some());
    assert!(session.latest_frame().is_none());
}

struct Header {
    revision: u32,
    iteration: u32,
    width: u32,
    height: u32,
}

fn parse_header(b: &[u8]) -> Header {
    let f = |i: usize| u32::from_le_bytes(b[4 * i..4 * i + 4].try_into().unwrap());
    Header {
        revision: f(0),
        iteration: f(1),
        width: f(2),
        height: f(3),
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn websocket_streams_progressive_frames() {
    let scene = small_scene(1_000_000);
    let session = Session::start(scene.clone(), ".", Some(1)).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let server = tokio::spawn(serve(listener, session.clone()));
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/api/stream"))
        .await
        .unwrap();

    let mut frames: Vec<(Instant, Header, Vec<u8>)> = Vec::new();
    let mut patched_at = None;
    let mut after_patch: Vec<Header> = Vec::new();
    let deadline = Instant::now() + TIMEOUT;
    while Instant::now() < deadline {
        let msg = tokio::time::timeout(TIMEOUT, ws.next())
            .await
            .unwrap()
            .unwrap()
            .unwrap();
        let Message::Binary(bytes) = msg else {
            continue;
        };
        let h = parse_header(&bytes);
        assert_eq!((h.width, h.height), (24, 20));
        let png = bytes[FRAME_HEADER_LEN..].to_vec();
        if patched_at.is_none() {
            frames.push((Instant::now(), h, png));
            if frames.len() == 4 {
                let s = session.clone();
                let out = tokio::task::spawn_blocking(move || {
                    s.patch(&json!({ "material": { "roughness": 0.2 } }), 1)
                })
                .await
                .unwrap()
                .unwrap();
                assert_eq!(out.revision, 2);
                patched_at = Some(frames.len());
            }
        } else if h.revision == 2 {
            after_patch.push(h);
            if after_patch.len() == 2 {
                break;
            }
        }
    }
    server.abort();

    assert_eq!(frames[0].1.revision, 1);
    assert_eq!(frames[0].1.iteration, 1);
    for w in frames.windows(2) {
        assert!(w[1].1.iteration > w[0].1.iteration);
        let gap = w[1].0 - w[0].0;
        assert!(
            gap >= FRAME_INTERVAL - Duration::from_millis(20),
            "frames {gap:?} apart"
        );
    }
    assert_eq!(after_patch.len(), 2, "no frames after the edit");
    assert_eq!(after_patch[0].iteration, 1);
    assert!(after_patch[1].iteration > 1);

    for (_, h, png) in frames.iter().take(3) {
        assert_eq!(
            png,
            &batch_png(&scene, h.iteration),
            "frame at iteration {}",
            h.iteration
        );
    }
}
