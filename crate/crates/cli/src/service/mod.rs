//! Session-oriented HTTP service for interactive annotation.
//!
//! | method | path | effect |
//! |---|---|---|
//! | `POST` | `/sessions` | create a session for `{"video": id}` |
//! | `GET` | `/sessions`, `/sessions/{id}` | list or inspect sessions |
//! | `PUT` | `/sessions/{id}/frames/{frame}/prompts` | store `{"boxes": [[x_min, y_min, x_max, y_max], ...]}` |
//! | `POST` | `/sessions/{id}/seed` | segment `{"frame": f}` with its stored boxes |
//! | `POST` | `/sessions/{id}/propagate` | start `{"mode": "forward" \| "plus"}` in the background |
//! | `GET` | `/sessions/{id}/frames/{frame}/mask?layer=final\|forward\|backward` | base64 PNG mask |
//! | `GET` | `/sessions/{id}/agreement` | forward/backward agreement records |
//! | `POST` | `/sessions/{id}/frames/{frame}/repredict` | `{"boxes": [...], "repropagate": bool}` |
//!
//! Every response carries the session `revision`, which increases with each
//! state change. Frames are 0-based.

mod session;
mod store;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use shadowsam_core::data_io::{load_video_sequence, VideoSequence};
use shadowsam_core::lstn::Lstn;
use shadowsam_core::propagation::{AgreementRecord, FrameStatus, PlusSettings};
use shadowsam_core::segmenter::SamLite;
use tokio::sync::{Mutex, RwLock};

pub use session::{
    compute_propagation, compute_repropagation, decode_mask, encode_mask, Event, Layer, Mode, Session, SessionState,
};
use session::{compute_seed, parse_boxes, PropagationJob};
pub use store::Store;

#[derive(Debug, Clone, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub revision: Option<u64>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            revision: None,
        }
    }

    pub fn not_found(m: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, m)
    }

    pub fn conflict(m: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, m)
    }

    pub fn unprocessable(m: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, m)
    }

    pub fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }

    pub fn at(mut self, revision: u64) -> Self {
        self.revision = Some(revision);
        self
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.message, "revision": self.revision}))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct Slot {
    session: Session,
    video: Arc<VideoSequence>,
}

struct Inner {
    data_root: PathBuf,
    store: Store,
    segmenter: Arc<SamLite>,
    lstn: Arc<Lstn>,
    settings: PlusSettings,
    sessions: RwLock<HashMap<String, Arc<Mutex<Slot>>>>,
    next_id: AtomicU64,
}

/// Shared service state; requests on one session serialize through its lock.
#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// Loads persisted sessions from `state_dir` and restarts propagations
    /// that were interrupted. Must be called inside a Tokio runtime.
    pub fn open(
        data_root: &Path,
        state_dir: &Path,
        segmenter: SamLite,
        lstn: Lstn,
        settings: PlusSettings,
    ) -> anyhow::Result<Self> {
        let store = Store::open(state_dir)?;
        let mut sessions = HashMap::new();
        let mut max_id = 0;
        let mut resume = Vec::new();
        for s in store.load_all()? {
            let video = load_video_sequence(data_root, &s.video)
                .map_err(|e| anyhow::anyhow!("session {}: {e}", s.id))?;
            if let Some(n) = s.id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()) {
                max_id = max_id.max(n);
            }
            let interrupted = s.state == SessionState::Propagating;
            let mode = s.mode;
            let slot = Arc::new(Mutex::new(Slot {
                video: Arc::new(video),
                session: s.clone(),
            }));
            if interrupted {
                let job = s.job(mode.unwrap_or(Mode::Forward)).map_err(|e| anyhow::anyhow!(e.message))?;
                resume.push((slot.clone(), job));
            }
            sessions.insert(s.id.clone(), slot);
        }
        let app = AppState(Arc::new(Inner {
            data_root: data_root.to_path_buf(),
            store,
            segmenter: Arc::new(segmenter),
            lstn: Arc::new(lstn),
            settings,
            sessions: RwLock::new(sessions),
            next_id: AtomicU64::new(max_id + 1),
        }));
        for (slot, job) in resume {
            log::info!("resuming interrupted propagation");
            app.spawn_propagation(slot, job);
        }
        Ok(app)
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/sessions", post(create_session).get(list_sessions))
            .route("/sessions/{id}", get(get_session))
            .route("/sessions/{id}/frames/{frame}/prompts", put(put_prompts))
            .route("/sessions/{id}/seed", post(seed))
            .route("/sessions/{id}/propagate", post(propagate))
            .route("/sessions/{id}/frames/{frame}/mask", get(get_mask))
            .route("/sessions/{id}/agreement", get(get_agreement))
            .route("/sessions/{id}/frames/{frame}/repredict", post(repredict))
            .with_state(self.clone())
    }

    async fn slot(&self, id: &str) -> ApiResult<Arc<Mutex<Slot>>> {
        self.0
            .sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id}")))
    }

    fn persist(&self, s: &Session) -> ApiResult<()> {
        self.0.store.save(s).map_err(|e| ApiError::internal(format!("{e:#}")).at(s.revision))
    }

    fn spawn_propagation(&self, slot: Arc<Mutex<Slot>>, job: PropagationJob) {
        let app = self.clone();
        tokio::spawn(async move {
            let video = slot.lock().await.video.clone();
            let (seg, lstn, settings) = (app.0.segmenter.clone(), app.0.lstn.clone(), app.0.settings);
            let result =
                tokio::task::spawn_blocking(move || compute_propagation(&seg, &lstn, &video, &job, &settings)).await;
            let mut slot = slot.lock().await;
            let s = &mut slot.session;
            let outcome = match result {
                Ok(Ok(out)) => s.finish_propagation(out).map_err(|e| e.message),
                Ok(Err(e)) => Err(e.to_string()),
                Err(e) => Err(format!("propagation task failed: {e}")),
            };
            if let Err(msg) = outcome {
                log::error!("session {}: {msg}", s.id);
                s.fail_propagation(&msg);
            }
            if let Err(e) = app.persist(s) {
                log::error!("session {}: {}", s.id, e.message);
            }
        });
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub video: String,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub state: SessionState,
    pub revision: u64,
    pub prompts: std::collections::BTreeMap<usize, Vec<[usize; 4]>>,
    pub seed_frame: Option<usize>,
    pub mode: Option<Mode>,
    pub frame_status: Vec<FrameStatus>,
    pub last_error: Option<String>,
    pub events: Vec<Event>,
}

impl From<&Session> for SessionView {
    fn from(s: &Session) -> Self {
        Self {
            id: s.id.clone(),
            video: s.video.clone(),
            frames: s.frames,
            width: s.width,
            height: s.height,
            state: s.state,
            revision: s.revision,
            prompts: s.prompts.clone(),
            seed_frame: s.seed_frame,
            mode: s.mode,
            frame_status: s.frame_status.clone(),
            last_error: s.last_error.clone(),
            events: s.events.clone(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MaskView {
    pub frame: usize,
    pub revision: u64,
    pub layer: Layer,
    pub status: FrameStatus,
    pub width: usize,
    pub height: usize,
    pub png_base64: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SeedView {
    pub revision: u64,
    pub state: SessionState,
    pub frame: usize,
    pub width: usize,
    pub height: usize,
    pub png_base64: String,
    pub warning: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RepredictView {
    pub revision: u64,
    pub state: SessionState,
    pub frame: usize,
    pub width: usize,
    pub height: usize,
    pub png_base64: String,
    pub repropagated: Vec<usize>,
    pub warning: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AgreementView {
    pub revision: u64,
    pub mode: Option<Mode>,
    pub iou_gate: f64,
    pub records: Vec<AgreementRecord>,
}

#[derive(Debug, Deserialize)]
pub struct CreateRequest {
    pub video: String,
}

#[derive(Debug, Deserialize)]
pub struct PromptsRequest {
    pub boxes: Vec<[usize; 4]>,
}

#[derive(Debug, Deserialize)]
pub struct SeedRequest {
    pub frame: usize,
}

#[derive(Debug, Deserialize)]
pub struct PropagateRequest {
    pub mode: Mode,
}

#[derive(Debug, Deserialize)]
pub struct RepredictRequest {
    pub boxes: Vec<[usize; 4]>,
    #[serde(default)]
    pub repropagate: bool,
}

#[derive(Debug, Deserialize)]
pub struct MaskQuery {
    #[serde(default)]
    pub layer: Layer,
}

const WHOLE_IMAGE_WARNING: &str = "no boxes given; the whole image was used as the prompt";

async fn create_session(State(app): State<AppState>, Json(req): Json<CreateRequest>) -> ApiResult<(StatusCode, Json<SessionView>)> {
    if req.video.is_empty() || req.video.contains(['/', '\\']) || req.video.starts_with('.') {
        return Err(ApiError::unprocessable(format!("invalid video id {:?}", req.video)));
    }
    let root = app.0.data_root.clone();
    let id = req.video.clone();
    let video = tokio::task::spawn_blocking(move || load_video_sequence(&root, &id))
        .await
        .map_err(ApiError::internal)?
        .map_err(|e| match e {
            shadowsam_core::Error::NotFound(m) => ApiError::not_found(format!("unknown video: {m}")),
            e => ApiError::internal(e),
        })?;
    let id = format!("s{:06}", app.0.next_id.fetch_add(1, Ordering::SeqCst));
    let session = Session::new(id.clone(), &video);
    app.persist(&session)?;
    let view = SessionView::from(&session);
    app.0.sessions.write().await.insert(
        id,
        Arc::new(Mutex::new(Slot {
            session,
            video: Arc::new(video),
        })),
    );
    Ok((StatusCode::CREATED, Json(view)))
}

async fn list_sessions(State(app): State<AppState>) -> Json<Vec<SessionView>> {
    let slots: Vec<_> = app.0.sessions.read().await.values().cloned().collect();
    let mut out = Vec::with_capacity(slots.len());
    for s in slots {
        out.push(SessionView::from(&s.lock().await.session));
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Json(out)
}

async fn get_session(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionView>> {
    let slot = app.slot(&id).await?;
    let g = slot.lock().await;
    Ok(Json(SessionView::from(&g.session)))
}

async fn put_prompts(
    State(app): State<AppState>,
    UrlPath((id, frame)): UrlPath<(String, usize)>,
    Json(req): Json<PromptsRequest>,
) -> ApiResult<Json<SessionView>> {
    let slot = app.slot(&id).await?;
    let mut g = slot.lock().await;
    g.session.put_prompts(frame, req.boxes)?;
    app.persist(&g.session)?;
    Ok(Json(SessionView::from(&g.session)))
}

async fn seed(State(app): State<AppState>, UrlPath(id): UrlPath<String>, Json(req): Json<SeedRequest>) -> ApiResult<Json<SeedView>> {
    let slot = app.slot(&id).await?;
    let mut g = slot.lock().await;
    let boxes = g.session.seed_boxes(req.frame)?;
    let (seg, video, frame) = (app.0.segmenter.clone(), g.video.clone(), req.frame);
    let warning = boxes.is_empty().then(|| WHOLE_IMAGE_WARNING.to_string());
    let mask = tokio::task::spawn_blocking(move || compute_seed(&seg, &video, frame, &boxes))
        .await
        .map_err(ApiError::internal)??;
    let png = g.session.apply_seed(frame, &mask)?;
    app.persist(&g.session)?;
    Ok(Json(SeedView {
        revision: g.session.revision,
        state: g.session.state,
        frame,
        width: mask.width(),
        height: mask.height(),
        png_base64: png,
        warning,
    }))
}

async fn propagate(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<PropagateRequest>,
) -> ApiResult<(StatusCode, Json<SessionView>)> {
    let slot = app.slot(&id).await?;
    let mut g = slot.lock().await;
    let job = g.session.begin_propagation(req.mode)?;
    app.persist(&g.session)?;
    let view = SessionView::from(&g.session);
    drop(g);
    app.spawn_propagation(slot, job);
    Ok((StatusCode::ACCEPTED, Json(view)))
}

async fn get_mask(
    State(app): State<AppState>,
    UrlPath((id, frame)): UrlPath<(String, usize)>,
    Query(q): Query<MaskQuery>,
) -> ApiResult<Json<MaskView>> {
    let slot = app.slot(&id).await?;
    let g = slot.lock().await;
    let s = &g.session;
    let png = s.mask(frame, q.layer)?.to_string();
    Ok(Json(MaskView {
        frame,
        revision: s.revision,
        layer: q.layer,
        status: s.frame_status[frame],
        width: s.width,
        height: s.height,
        png_base64: png,
    }))
}

async fn get_agreement(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<AgreementView>> {
    let slot = app.slot(&id).await?;
    let g = slot.lock().await;
    let s = &g.session;
    if !s.has_results() {
        return Err(ApiError::conflict("no propagation result yet").at(s.revision));
    }
    Ok(Json(AgreementView {
        revision: s.revision,
        mode: s.mode,
        iou_gate: app.0.settings.iou_gate,
        records: s.agreement.clone(),
    }))
}

async fn repredict(
    State(app): State<AppState>,
    UrlPath((id, frame)): UrlPath<(String, usize)>,
    Json(req): Json<RepredictRequest>,
) -> ApiResult<Json<RepredictView>> {
    let slot = app.slot(&id).await?;
    let mut g = slot.lock().await;
    g.session.check_repredict(frame)?;
    let boxes = parse_boxes(&req.boxes, g.session.height, g.session.width).map_err(|e| e.at(g.session.revision))?;
    let warning = boxes.is_empty().then(|| WHOLE_IMAGE_WARNING.to_string());
    let memory_seed = if req.repropagate { Some(g.session.memory_seed()?) } else { None };
    let (seg, lstn, video) = (app.0.segmenter.clone(), app.0.lstn.clone(), g.video.clone());
    let (mask, downstream) = tokio::task::spawn_blocking(move || -> ApiResult<_> {
        let mask = compute_seed(&seg, &video, frame, &boxes)?;
        let downstream = match memory_seed {
            Some((s, seed)) => compute_repropagation(&lstn, &video, (s, &seed), frame, &mask).map_err(ApiError::internal)?,
            None => Vec::new(),
        };
        Ok((mask, downstream))
    })
    .await
    .map_err(ApiError::internal)??;
    let png = g.session.apply_repredict(frame, req.boxes, &mask, &downstream)?;
    app.persist(&g.session)?;
    Ok(Json(RepredictView {
        revision: g.session.revision,
        state: g.session.state,
        frame,
        width: mask.width(),
        height: mask.height(),
        png_base64: png,
        repropagated: downstream.iter().map(|(t, _)| *t).collect(),
        warning,
    }))
}

/// Binds and serves until interrupted.
pub async fn serve(app: AppState, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app.router())
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
