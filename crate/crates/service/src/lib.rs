//! Long-running render service. A worker thread renders progressive passes
//! of the current scene; HTTP handlers read and patch the scene, take
//! snapshots, and a WebSocket streams tone-mapped frames.
//!
//! Edits are applied at pass boundaries: an accepted patch bumps the
//! revision and the worker restarts accumulation before its next pass.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, OnceLock, Weak};
use std::thread::JoinHandle;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::watch;

use cinevol::imageio::{encode_pfm, HdrImage};
use cinevol::postfx::finish;
use cinevol::scene::{Camera, Scene, VolumeSource};
use cinevol::tracer::{render_pass, Framebuffer, RenderScene, RenderSettings};
use cinevol::volume::{SmoothingParams, VoxelGrid};
use cinevol::{Error, Result};

/// Minimum spacing between streamed frames (at most 10 per second).
pub const FRAME_INTERVAL: Duration = Duration::from_millis(100);

/// Size of the binary frame header: revision, iteration, width, height.
pub const FRAME_HEADER_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Rendering,
    Paused,
    Idle,
}

/// One completed pass, frozen. Display images are produced on first use and
/// cached, so every consumer of a frame sees identical bytes.
pub struct Frame {
    pub revision: u64,
    pub fb: Framebuffer,
    camera: Camera,
    settings: RenderSettings,
    display: OnceLock<std::result::Result<(HdrImage, Vec<u8>), String>>,
}

impl Frame {
    pub fn iteration(&self) -> u32 {
        self.fb.iteration_count()
    }

    fn display(&self) -> Result<&(HdrImage, Vec<u8>)> {
        self.display
            .get_or_init(|| {
                let (hdr, ldr) =
                    finish(&self.fb, &self.camera, &self.settings).map_err(|e| e.to_string())?;
                let png = ldr.to_png().map_err(|e| e.to_string())?;
                Ok((hdr, png))
            })
            .as_ref()
            .map_err(|e| Error::Image(e.clone()))
    }

    /// Tone-mapped PNG, identical to a batch render of the same pass count.
    pub fn png(&self) -> Result<&[u8]> {
        Ok(&self.display()?.1)
    }

    /// HDR image (after ambient occlusion) as PFM.
    pub fn pfm(&self) -> Result<Vec<u8>> {
        Ok(encode_pfm(&self.display()?.0))
    }

    pub fn header(&self) -> [u8; FRAME_HEADER_LEN] {
        let mut h = [0u8; FRAME_HEADER_LEN];
        let fields = [
            self.revision as u32,
            self.iteration(),
            self.fb.width() as u32,
            self.fb.height() as u32,
        ];
        for (chunk, v) in h.chunks_exact_mut(4).zip(fields) {
            chunk.copy_from_slice(&v.to_le_bytes());
        }
        h
    }

    /// Header followed by the PNG payload.
    pub fn message(&self) -> Result<Vec<u8>> {
        let png = self.png()?;
        let mut out = Vec::with_capacity(FRAME_HEADER_LEN + png.len());
        out.extend_from_slice(&self.header());
        out.extend_from_slice(png);
        Ok(out)
    }
}

/// Frames of the current revision: the first pass (so every revision's
/// stream starts at iteration 1) and the most recent one.
#[derive(Clone, Default)]
pub struct FrameSlot {
    pub revision: u64,
    pub first: Option<Arc<Frame>>,
    pub latest: Option<Arc<Frame>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PatchError {
    /// `If-Match` named a stale revision.
    Conflict { current: u64 },
    /// The merged document failed to parse or validate.
    Invalid { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchOutcome {
    pub revision: u64,
    pub changed: bool,
}

struct Control {
    scene: Scene,
    revision: u64,
    status: Status,
    error: Option<String>,
    shutdown: bool,
}

struct Shared {
    control: Mutex<Control>,
    wake: Condvar,
    frames: watch::Sender<FrameSlot>,
    base_dir: PathBuf,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Control> {
        self.control.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// Handle to a running session. Cloning shares the session; the render
/// worker stops when the last handle is dropped.
#[derive(Clone)]
pub struct Session {
    shared: Arc<Shared>,
    _worker: Arc<WorkerGuard>,
}

struct WorkerGuard {
    shared: Weak<Shared>,
    handle: Mutex<Option<JoinHandle<()>>>,
}

impl Drop for WorkerGuard {
    fn drop(&mut self) {
        if let Some(s) = self.shared.upgrade() {
            s.lock().shutdown = true;
            s.wake.notify_all();
        }
        if let Some(h) = self.handle.lock().unwrap_or_else(|p| p.into_inner()).take() {
            let _ = h.join();
        }
    }
}

impl Session {
    /// Validates `scene` and starts rendering it on `threads` workers
    /// (all cores when `None`). Relative paths resolve against `base_dir`.
    pub fn start(scene: Scene, base_dir: impl AsRef<Path>, threads: Option<usize>) -> Result<Self> {
        Self::start_with(scene, base_dir.as_ref(), threads, Status::Rendering)
    }

    /// Like [`Session::start`] but no pass runs until `set_paused(false)`.
    pub fn start_paused(
        scene: Scene,
        base_dir: impl AsRef<Path>,
        threads: Option<usize>,
    ) -> Result<Self> {
        Self::start_with(scene, base_dir.as_ref(), threads, Status::Paused)
    }

    fn start_with(
        scene: Scene,
        base_dir: &Path,
        threads: Option<usize>,
        status: Status,
    ) -> Result<Self> {
        scene.validate()?;
        let pool = match threads {
            Some(0) => return Err(Error::InvalidArgument("THREADS must be >= 1".into())),
            Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n),
            None => rayon::ThreadPoolBuilder::new(),
        }
        .thread_name(|i| format!("render-{i}"))
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let (frames, _) = watch::channel(FrameSlot {
            revision: 1,
            ..FrameSlot::default()
        });
        let shared = Arc::new(Shared {
            control: Mutex::new(Control {
                scene,
                revision: 1,
                status,
                error: None,
                shutdown: false,
            }),
            wake: Condvar::new(),
            frames,
            base_dir: base_dir.to_path_buf(),
        });
        let weak = Arc::downgrade(&shared);
        let handle = std::thread::Builder::new()
            .name("render-worker".into())
            .spawn(move || worker(weak, pool))?;
        let guard = WorkerGuard {
            shared: Arc::downgrade(&shared),
            handle: Mutex::new(Some(handle)),
        };
        Ok(Session {
            shared,
            _worker: Arc::new(guard),
        })
    }

    pub fn scene(&self) -> (Scene, u64) {
        let c = self.shared.lock();
        (c.scene.clone(), c.revision)
    }

    pub fn revision(&self) -> u64 {
        self.shared.lock().revision
    }

    pub fn status(&self) -> Status {
        self.shared.lock().status
    }

    /// Last worker error (for example an unreadable volume), if any.
    pub fn last_error(&self) -> Option<String> {
        self.shared.lock().error.clone()
    }

    pub fn subscribe(&self) -> watch::Receiver<FrameSlot> {
        self.shared.frames.subscribe()
    }

    /// Latest frame of the current revision.
    pub fn latest_frame(&self) -> Option<Arc<Frame>> {
        self.shared.frames.borrow().latest.clone()
    }

    pub fn set_paused(&self, paused: bool) {
        let mut c = self.shared.lock();
        c.status = if paused {
            Status::Paused
        } else {
            Status::Rendering
        };
        self.shared.wake.notify_all();
    }

    /// Merges `patch` (JSON merge patch) into the scene if `expected`
    /// matches the current revision. A patch that leaves the scene
    /// structurally unchanged is accepted without bumping the revision.
    pub fn patch(
        &self,
        patch: &Value,
        expected: u64,
    ) -> std::result::Result<PatchOutcome, PatchError> {
        let mut c = self.shared.lock();
        if expected != c.revision {
            return Err(PatchError::Conflict {
                current: c.revision,
            });
        }
        let mut doc = c.scene.to_value();
        merge_patch(&mut doc, patch);
        let scene = Scene::from_value(doc).map_err(|e| match e {
            Error::SceneParse { path, msg, .. } => PatchError::Invalid { path, msg },
            other => PatchError::Invalid {
                path: String::new(),
                msg: other.to_string(),
            },
        })?;
        if scene == c.scene {
            return Ok(PatchOutcome {
                revision: c.revision,
                changed: false,
            });
        }
        c.scene = scene;
        c.revision += 1;
        c.error = None;
        if c.status == Status::Idle {
            c.status = Status::Rendering;
        }
        let revision = c.revision;
        self.shared.frames.send_replace(FrameSlot {
            revision,
            first: None,
            latest: None,
        });
        self.shared.wake.notify_all();
        Ok(PatchOutcome {
            revision,
            changed: true,
        })
    }

    /// Blocks until the current revision has at least `iterations` passes or
    /// the timeout elapses. Returns the latest frame.
    pub fn wait_for_iteration(&self, iterations: u32, timeout: Duration) -> Option<Arc<Frame>> {
        let deadline = std::time::Instant::now() + timeout;
        let mut rx = self.subscribe();
        loop {
            if let Some(f) = rx.borrow_and_update().latest.clone() {
                if f.iteration() >= iterations {
                    return Some(f);
                }
            }
            if std::time::Instant::now() >= deadline {
                return self.latest_frame();
            }
            std::thread::sleep(Duration::from_millis(5));
        }
    }
}

/// RFC 7386 JSON merge patch: objects merge recursively, `null` deletes,
/// anything else replaces.
pub fn merge_patch(target: &mut Value, patch: &Value) {
    let Value::Object(p) = patch else {
        *target = patch.clone();
        return;
    };
    if !target.is_object() {
        *target = Value::Object(Default::default());
    }
    let t = target.as_object_mut().expect("object");
    for (k, v) in p {
        if v.is_null() {
            t.remove(k);
        } else {
            merge_patch(t.entry(k.clone()).or_insert(Value::Null), v);
        }
    }
}

struct Active {
    revision: u64,
    scene: RenderScene,
    fb: Framebuffer,
}

type GridKey = (VolumeSource, SmoothingParams);

fn worker(weak: Weak<Shared>, pool: rayon::ThreadPool) {
    let mut active: Option<Active> = None;
    let mut grid_cache: Option<(GridKey, Arc<VoxelGrid>)> = None;
    loop {
        let Some(shared) = weak.upgrade() else { return };
        let next = {
            let mut c = shared.lock();
            if c.shutdown {
                return;
            }
            let stale = active.as_ref().is_none_or(|a| a.revision != c.revision);
            let done = active
                .as_ref()
                .is_some_and(|a| a.fb.iteration_count() >= a.scene.settings.iterations);
            if c.status == Status::Paused || (!stale && (done || c.error.is_some())) {
                if done && c.status == Status::Rendering {
                    c.status = Status::Idle;
                }
                let _ = shared.wake.wait_timeout(c, Duration::from_millis(200));
                continue;
            }
            stale.then(|| (c.scene.clone(), c.revision))
        };
        if let Some((scene, revision)) = next {
            match build(&scene, &shared.base_dir, &mut grid_cache) {
                Ok(rs) => {
                    let fb = Framebuffer::new(rs.settings.width, rs.settings.height);
                    active = Some(Active {
                        revision,
                        scene: rs,
                        fb,
                    });
                }
                Err(e) => {
                    log::error!("cannot prepare scene revision {revision}: {e}");
                    let mut c = shared.lock();
                    if c.revision == revision {
                        c.error = Some(e.to_string());
                        c.status = Status::Idle;
                    }
                    active = None;
                    continue;
                }
            }
        }
        let Some(a) = active.as_mut() else { continue };
        pool.install(|| render_pass(&a.scene, a.scene.settings.seed, &mut a.fb));
        let frame = Arc::new(Frame {
            revision: a.revision,
            fb: a.fb.clone(),
            camera: a.scene.camera,
            settings: a.scene.settings,
            display: OnceLock::new(),
        });
        // Publish under the control lock so a concurrent patch either sees
        // this frame replaced or rejects it as stale.
        let c = shared.lock();
        if c.revision == a.revision {
            shared.frames.send_modify(|slot| {
                if slot.revision == frame.revision {
                    if slot.first.is_none() {
                        slot.first = Some(frame.clone());
                    }
                    slot.latest = Some(frame);
                }
            });
        }
    }
}

fn build(
    scene: &Scene,
    base_dir: &Path,
    cache: &mut Option<(GridKey, Arc<VoxelGrid>)>,
) -> Result<RenderScene> {
    let key = (scene.volume.clone(), scene.smoothing);
    let grid = match cache {
        Some((k, g)) if *k == key => g.clone(),
        _ => {
            let g = Arc::new(scene.load_volume(base_dir)?);
            *cache = Some((key, g.clone()));
            g
        }
    };
    scene.prepare_with_grid(grid, base_dir)
}

fn json_error(status: StatusCode, body: Value) -> Response {
    (status, Json(body)).into_response()
}

fn revision_header(revision: u64) -> HeaderValue {
    HeaderValue::from_str(&format!("\"{revision}\"")).expect("ascii")
}

async fn get_scene(State(s): State<Session>) -> Response {
    let (scene, revision) = s.scene();
    let mut resp = Json(json!({ "revision": revision, "scene": scene.to_value() })).into_response();
    resp.headers_mut()
        .insert(header::ETAG, revision_header(revision));
    resp
}

fn parse_if_match(headers: &HeaderMap) -> std::result::Result<u64, Response> {
    let Some(v) = headers.get(header::IF_MATCH) else {
        return Err(json_error(
            StatusCode::PRECONDITION_REQUIRED,
            json!({ "error": "If-Match header with the expected revision is required" }),
        ));
    };
    v.to_str()
        .ok()
        .map(|s| s.trim().trim_start_matches("W/").trim_matches('"'))
        .and_then(|s| s.parse::<u64>().ok())
        .ok_or_else(|| {
            json_error(
                StatusCode::BAD_REQUEST,
                json!({ "error": "If-Match must be a revision number" }),
            )
        })
}

async fn patch_scene(State(s): State<Session>, headers: HeaderMap, body: Bytes) -> Response {
    let expected = match parse_if_match(&headers) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let patch: Value = match serde_json::from_slice(&body) {
        Ok(v @ Value::Object(_)) => v,
        Ok(_) => {
            return json_error(
                StatusCode::BAD_REQUEST,
                json!({ "error": "patch body must be a JSON object" }),
            )
        }
        Err(e) => {
            return json_error(
                StatusCode::BAD_REQUEST,
                json!({ "error": format!("invalid JSON: {e}") }),
            )
        }
    };
    let session = s.clone();
    let result = tokio::task::spawn_blocking(move || session.patch(&patch, expected)).await;
    match result {
        Ok(Ok(out)) => {
            let mut resp =
                Json(json!({ "revision": out.revision, "changed": out.changed })).into_response();
            resp.headers_mut()
                .insert(header::ETAG, revision_header(out.revision));
            resp
        }
        Ok(Err(PatchError::Conflict { current })) => json_error(
            StatusCode::CONFLICT,
            json!({ "error": "revision conflict", "revision": current }),
        ),
        Ok(Err(PatchError::Invalid { path, msg })) => json_error(
            StatusCode::UNPROCESSABLE_ENTITY,
            json!({ "error": msg, "path": path, "revision": s.revision() }),
        ),
        Err(e) => json_error(
            StatusCode::INTERNAL_SERVER_ERROR,
            json!({ "error": e.to_string() }),
        ),
    }
}

#[derive(Deserialize)]
struct SnapshotQuery {
    format: Option<String>,
}

async fn snapshot(State(s): State<Session>, Query(q): Query<SnapshotQuery>) -> Response {
    let format = q.format.unwrap_or_else(|| "png".into());
    if format != "png" && format != "pfm" {
        return json_error(
            StatusCode::BAD_REQUEST,
            json!({ "error": format!("unknown format `{format}`") }),
        );
    }
    let Some(frame) = s.latest_frame() else {
        return json_error(
            StatusCode::SERVICE_UNAVAILABLE,
            json!({ "error": Error::NotReady.to_string() }),
        );
    };
    let encoded = tokio::task::spawn_blocking(move || {
        let bytes = if format == "png" {
            frame.png().map(<[u8]>::to_vec)
        } else {
            frame.pfm()
        };
        (frame, format, bytes)
    })
    .await;
    let (frame, format, bytes) = match encoded {
        Ok(v) => v,
        Err(e) => {
            return json_error(
                StatusCode::INTERNAL_SERVER_ERROR,
                json!({ "error": e.to_string() }),
            )
        }
    };
    match bytes {
        Ok(b) => {
            let mime = if format == "png" {
                "image/png"
            } else {
                "image/x-portable-floatmap"
            };
            let mut resp = (StatusCode::OK, b).into_response();
            let h = resp.headers_mut();
            h.insert(header::CONTENT_TYPE, HeaderValue::from_static(mime));
            h.insert("x-revision", HeaderValue::from(frame.revision));
            h.insert("x-iteration", HeaderValue::from(frame.iteration()));
            resp
        }
        Err(e) => json_error(
            StatusCode::INTERNAL_SERVER_ERROR,
            json!({ "error": e.to_string() }),
        ),
    }
}

async fn health(State(s): State<Session>) -> Response {
    let iteration = s.latest_frame().map_or(0, |f| f.iteration());
    Json(json!({
        "status": "ok",
        "state": s.status(),
        "revision": s.revision(),
        "iteration": iteration,
        "error": s.last_error(),
    }))
    .into_response()
}

async fn stream(ws: WebSocketUpgrade, State(s): State<Session>) -> Response {
    ws.on_upgrade(move |socket| stream_frames(socket, s))
}

/// Picks the next frame to send after `last` (revision, iteration): the
/// first frame of a new revision, otherwise the newest frame if it is ahead.
fn next_frame(slot: &FrameSlot, last: Option<(u64, u32)>) -> Option<Arc<Frame>> {
    match last {
        Some((rev, it)) if rev == slot.revision => {
            slot.latest.clone().filter(|f| f.iteration() > it)
        }
        _ => slot.first.clone(),
    }
}

async fn stream_frames(mut socket: WebSocket, s: Session) {
    let mut rx = s.subscribe();
    let mut last: Option<(u64, u32)> = None;
    let mut next_send = tokio::time::Instant::now();
    loop {
        let frame = next_frame(&rx.borrow_and_update(), last);
        let Some(frame) = frame else {
            tokio::select! {
                changed = rx.changed() => if changed.is_err() { return },
                msg = socket.recv() => match msg {
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                    _ => {}
                },
            }
            continue;
        };
        tokio::time::sleep_until(next_send).await;
        // Latest wins: a newer frame of the same revision may have landed.
        let frame = match next_frame(&rx.borrow(), last) {
            Some(newer) if newer.revision == frame.revision => newer,
            _ => frame,
        };
        let encoded = tokio::task::spawn_blocking({
            let frame = frame.clone();
            move || frame.message()
        })
        .await;
        let Ok(Ok(bytes)) = encoded else { return };
        if socket.send(Message::Binary(bytes.into())).await.is_err() {
            return;
        }
        last = Some((frame.revision, frame.iteration()));
        next_send = tokio::time::Instant::now() + FRAME_INTERVAL;
    }
}

pub fn router(session: Session) -> Router {
    Router::new()
        .route("/api/scene", get(get_scene).patch(patch_scene))
        .route("/api/snapshot", post(snapshot))
        .route("/api/health", get(health))
        .route("/api/stream", get(stream))
        .with_state(session)
}

pub struct Config {
    pub port: u16,
    pub threads: Option<usize>,
    pub scene: Scene,
    pub base_dir: PathBuf,
}

/// Serves on `listener` until the future is dropped.
pub async fn serve(listener: tokio::net::TcpListener, session: Session) -> std::io::Result<()> {
    axum::serve(listener, router(session)).await
}

/// Starts a session and serves it on `0.0.0.0:port`, blocking forever.
pub fn run(config: Config) -> Result<()> {
    let session = Session::start(config.scene, &config.base_dir, config.threads)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()?;
    rt.block_on(async move {
        let addr = SocketAddr::from(([0, 0, 0, 0], config.port));
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("listening on {}", listener.local_addr()?);
        println!("listening on http://{}", listener.local_addr()?);
        serve(listener, session).await
    })?;
    Ok(())
}
