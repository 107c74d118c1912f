//! HTTP service: search, feedback sessions, background refinement and
//! evaluation over one loaded corpus.
//!
//! Query texts are embedded by lookup in the loaded text corpus, so an
//! external encoder must have produced an embedding for the exact text
//! (conventionally prefixed with "a photo of a"). Sessions are JSON files
//! under `<state_dir>/sessions`, so a restarted service picks them up.

mod problem;
mod session;

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use fsir_core::eval::{evaluate_run, DEFAULT_K};
use fsir_core::prompt::TrainConfig;
use fsir_core::refselect::SelectionConfig;
use fsir_core::{ExactIndex, MetricReport, RankedRun};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use problem::{Problem, ProblemBody};
pub use session::{
    FeedbackLabel, JobState, JobStatus, Label, Loaded, Method, QueryScore, Refinement, Session, Snapshot,
    EASY_NEGATIVES,
};

use crate::fsix::{self, AnyIndex};
use crate::{fsem, manifest, models, runs};

type ApiResult<T> = Result<T, Problem>;

/// Files to load with `POST /corpus`. `images` defaults to the manifest's corpus.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CorpusRequest {
    pub manifest: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub texts: PathBuf,
    pub index: Option<PathBuf>,
    pub ctr_model: Option<PathBuf>,
    /// JSON object mapping image ids to thumbnail paths.
    pub image_paths: Option<PathBuf>,
}

pub fn load_corpus(req: &CorpusRequest) -> crate::Result<Loaded> {
    let manifest = req.manifest.as_deref().map(manifest::read).transpose()?;
    let images_path = match (&req.images, &req.manifest, &manifest) {
        (Some(p), _, _) => p.clone(),
        (None, Some(mp), Some(m)) => manifest::corpus_path(mp, m),
        _ => {
            return Err(crate::Error::Invalid(
                "either `images` or `manifest` is required".into(),
            ))
        }
    };
    let images = fsem::read(&images_path)?;
    if let Some(m) = &manifest {
        m.validate(&images)?;
    }
    let texts = fsem::read(&req.texts)?;
    let index = match &req.index {
        Some(p) => fsix::read(p, &images)?,
        None => AnyIndex::Exact(ExactIndex::build(&images)?),
    };
    let ctr = req.ctr_model.as_deref().map(models::read_ctr).transpose()?;
    let image_paths = match &req.image_paths {
        Some(p) => manifest::read_image_paths(p)?,
        None => Default::default(),
    };
    Ok(Loaded {
        digest: fsem::digest(&images)?,
        images,
        texts,
        index,
        manifest,
        ctr,
        image_paths,
    })
}

pub struct AppState {
    state_dir: PathBuf,
    loaded: RwLock<Option<Arc<Loaded>>>,
    guards: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
    running: Mutex<HashSet<String>>,
}

impl AppState {
    pub fn new(state_dir: impl Into<PathBuf>) -> crate::Result<Arc<Self>> {
        let state_dir = state_dir.into();
        let sessions = state_dir.join("sessions");
        std::fs::create_dir_all(&sessions).map_err(|e| crate::Error::io(&sessions, e))?;
        Ok(Arc::new(Self {
            state_dir,
            loaded: RwLock::new(None),
            guards: Mutex::new(HashMap::new()),
            running: Mutex::new(HashSet::new()),
        }))
    }

    pub fn set_loaded(&self, loaded: Loaded) {
        *self.loaded.write().expect("lock poisoned") = Some(Arc::new(loaded));
    }

    fn loaded(&self) -> ApiResult<Arc<Loaded>> {
        self.loaded.read().expect("lock poisoned").clone().ok_or_else(|| {
            Problem::new(
                StatusCode::CONFLICT,
                "NO_CORPUS",
                "no corpus loaded; POST /corpus first",
            )
        })
    }

    fn session_path(&self, id: &str) -> ApiResult<PathBuf> {
        let valid = !id.is_empty() && id.chars().all(|c| c.is_ascii_hexdigit() || c == '-');
        if !valid {
            return Err(not_found(id));
        }
        Ok(self.state_dir.join("sessions").join(format!("{id}.json")))
    }

    fn guard(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.guards
            .lock()
            .expect("lock poisoned")
            .entry(id.to_string())
            .or_default()
            .clone()
    }

    fn read_session(&self, id: &str) -> ApiResult<Session> {
        let path = self.session_path(id)?;
        let bytes = std::fs::read(&path).map_err(|_| not_found(id))?;
        serde_json::from_slice(&bytes).map_err(|e| crate::Error::from(e).into())
    }

    fn write_session(&self, s: &Session) -> ApiResult<()> {
        let path = self.session_path(&s.id)?;
        let tmp = path.with_extension("json.tmp");
        let bytes = serde_json::to_vec_pretty(s).map_err(crate::Error::from)?;
        std::fs::write(&tmp, bytes).map_err(|e| crate::Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| crate::Error::io(&path, e))?;
        Ok(())
    }

    /// Runs `f` on the stored session under its exclusive guard and saves the result.
    async fn update<T>(&self, id: &str, f: impl FnOnce(&mut Session) -> ApiResult<T>) -> ApiResult<T> {
        let guard = self.guard(id);
        let _held = guard.lock().await;
        let mut s = self.read_session(id)?;
        let out = f(&mut s)?;
        self.write_session(&s)?;
        Ok(out)
    }

    async fn snapshot(&self, id: &str) -> ApiResult<Session> {
        let guard = self.guard(id);
        let _held = guard.lock().await;
        self.read_session(id)
    }
}

fn not_found(id: &str) -> Problem {
    Problem::new(StatusCode::NOT_FOUND, "SESSION_NOT_FOUND", format!("no session `{id}`"))
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let bytes: &[u8] = if body.iter().all(u8::is_ascii_whitespace) {
        b"{}"
    } else {
        body
    };
    serde_json::from_slice(bytes).map_err(|e| crate::Error::from(e).into())
}

/// Overlays the keys of `overrides` on the serialized default config.
fn with_overrides<T: Serialize + DeserializeOwned>(base: T, overrides: Option<&Value>) -> ApiResult<T> {
    let Some(o) = overrides else { return Ok(base) };
    let Value::Object(o) = o else {
        return Err(Problem::new(
            StatusCode::BAD_REQUEST,
            "INVALID_ARGUMENT",
            "config must be an object",
        ));
    };
    let mut v = serde_json::to_value(base).map_err(crate::Error::from)?;
    let target = v.as_object_mut().expect("configs serialize to objects");
    for (key, value) in o {
        if !target.contains_key(key) {
            return Err(Problem::new(
                StatusCode::BAD_REQUEST,
                "INVALID_ARGUMENT",
                format!("unknown config key `{key}`"),
            ));
        }
        target.insert(key.clone(), value.clone());
    }
    serde_json::from_value(v).map_err(|e| crate::Error::from(e).into())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/corpus", post(load))
        .route("/search", post(search))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/feedback", post(feedback))
        .route("/sessions/{id}/refine", post(refine))
        .route("/sessions/{id}/status", get(status))
        .route("/sessions/{id}/compare", get(compare))
        .route("/evaluate", post(evaluate))
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn health(State(st): State<Arc<AppState>>) -> Json<Value> {
    let loaded = st.loaded.read().expect("lock poisoned").clone();
    Json(match loaded {
        None => json!({ "status": "ok", "corpus_loaded": false }),
        Some(l) => json!({
            "status": "ok",
            "corpus_loaded": true,
            "corpus_digest": l.digest,
            "images": l.images.len(),
            "texts": l.texts.len(),
            "queries": l.manifest.as_ref().map_or(0, |m| m.queries.len()),
            "ctr_model": l.ctr.is_some(),
        }),
    })
}

async fn load(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: CorpusRequest = parse(&body)?;
    let loaded = tokio::task::spawn_blocking(move || load_corpus(&req))
        .await
        .map_err(|e| Problem::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", e.to_string()))??;
    let out = json!({
        "corpus_digest": loaded.digest,
        "images": loaded.images.len(),
        "texts": loaded.texts.len(),
        "queries": loaded.manifest.as_ref().map_or(0, |m| m.queries.len()),
    });
    st.set_loaded(loaded);
    Ok(Json(out))
}

#[derive(Debug, Deserialize)]
struct SearchRequest {
    query_text: Option<String>,
    session_id: Option<String>,
    #[serde(default = "default_search_k")]
    k: usize,
    #[serde(default = "default_method")]
    method: Method,
}

fn default_search_k() -> usize {
    10
}

fn default_method() -> Method {
    Method::ZeroShot
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredId {
    pub id: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thumbnail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub method: Method,
    pub refined: bool,
    pub k: usize,
    pub results: Vec<ScoredId>,
}

fn scored(loaded: &Loaded, hits: Vec<fsir_core::Hit>) -> Vec<ScoredId> {
    hits.into_iter()
        .map(|h| ScoredId {
            thumbnail: loaded.image_paths.get(&h.id).map(|p| p.display().to_string()),
            id: h.id,
            score: h.similarity.value(),
        })
        .collect()
}

async fn search(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<SearchResponse>> {
    let req: SearchRequest = parse(&body)?;
    let loaded = st.loaded()?;
    let q: Vec<f32> = match (&req.session_id, &req.query_text) {
        (Some(id), _) => {
            let s = st.snapshot(id).await?;
            s.embedding(req.method)
                .ok_or_else(|| {
                    Problem::new(
                        StatusCode::CONFLICT,
                        "NOT_REFINED",
                        format!("session has no {:?} refinement", req.method),
                    )
                })?
                .to_vec()
        }
        (None, Some(text)) => {
            if req.method != Method::ZeroShot {
                return Err(Problem::new(
                    StatusCode::BAD_REQUEST,
                    "INVALID_ARGUMENT",
                    "refined methods need a session_id",
                ));
            }
            fsir_core::pipeline::text_embedding(&loaded.texts, text)?.to_vec()
        }
        (None, None) => {
            return Err(Problem::new(
                StatusCode::BAD_REQUEST,
                "INVALID_ARGUMENT",
                "query_text or session_id is required",
            ))
        }
    };
    let hits = loaded.rank(&q, req.k, &Default::default())?;
    Ok(Json(SearchResponse {
        method: req.method,
        refined: req.method != Method::ZeroShot,
        k: req.k,
        results: scored(&loaded, hits),
    }))
}

#[derive(Debug, Deserialize)]
struct CreateSession {
    query_text: String,
}

async fn create_session(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<Session>)> {
    let req: CreateSession = parse(&body)?;
    let loaded = st.loaded()?;
    let zero_shot = fsir_core::pipeline::text_embedding(&loaded.texts, &req.query_text)?.to_vec();
    let mut s = Session {
        id: uuid::Uuid::new_v4().to_string(),
        query_id: loaded.query_id_for(&req.query_text),
        query_text: req.query_text,
        zero_shot,
        feedback: Default::default(),
        refined: Default::default(),
        status: JobStatus::default(),
        history: Vec::new(),
    };
    s.history.push(Snapshot {
        method: Method::ZeroShot,
        positives: 0,
        hard_negatives: 0,
        metrics: loaded.score(&s, &s.zero_shot, session::HISTORY_K)?,
    });
    st.write_session(&s)?;
    Ok((StatusCode::CREATED, Json(s)))
}

async fn get_session(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Session>> {
    Ok(Json(st.snapshot(&id).await?))
}

#[derive(Debug, Deserialize)]
struct FeedbackRequest {
    item_id: String,
    label: FeedbackLabel,
}

async fn feedback(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<Session>> {
    let req: FeedbackRequest = parse(&body)?;
    let loaded = st.loaded()?;
    if !loaded.images.contains(&req.item_id) {
        return Err(fsir_core::Error::UnknownId(req.item_id).into());
    }
    let s = st
        .update(&id, |s| {
            match req.label {
                FeedbackLabel::Positive => s.feedback.insert(req.item_id, Label::Positive),
                FeedbackLabel::HardNegative => s.feedback.insert(req.item_id, Label::HardNegative),
                FeedbackLabel::Cleared => s.feedback.remove(&req.item_id),
            };
            Ok(s.clone())
        })
        .await?;
    Ok(Json(s))
}

#[derive(Debug, Deserialize)]
struct RefineRequest {
    method: Method,
    config: Option<Value>,
}

enum Job {
    Pl(TrainConfig),
    Ctr(SelectionConfig, Arc<Loaded>),
}

async fn refine(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<JobStatus>)> {
    let req: RefineRequest = parse(&body)?;
    let loaded = st.loaded()?;
    let job = match req.method {
        Method::Pl => Job::Pl(with_overrides(TrainConfig::default(), req.config.as_ref())?),
        Method::Ctr => {
            if loaded.ctr.is_none() {
                return Err(Problem::new(
                    StatusCode::CONFLICT,
                    "NO_CTR_MODEL",
                    "no CTR model loaded",
                ));
            }
            Job::Ctr(
                with_overrides(SelectionConfig::default(), req.config.as_ref())?,
                loaded.clone(),
            )
        }
        Method::ZeroShot => {
            return Err(Problem::new(
                StatusCode::BAD_REQUEST,
                "INVALID_ARGUMENT",
                "zero_shot needs no refinement",
            ))
        }
    };
    let method = req.method;
    let session = st
        .update(&id, |s| {
            if s.labelled(Label::Positive).is_empty() {
                return Err(fsir_core::Error::InsufficientExamples("mark at least one positive first".into()).into());
            }
            if !st.running.lock().expect("lock poisoned").insert(id.clone()) {
                return Err(Problem::new(
                    StatusCode::CONFLICT,
                    "REFINE_IN_PROGRESS",
                    "a refinement is already running for this session",
                ));
            }
            s.status = JobStatus {
                state: JobState::Running,
                method: Some(method),
                error: None,
            };
            Ok(s.clone())
        })
        .await?;
    let status = session.status.clone();
    let st2 = st.clone();
    tokio::spawn(async move {
        let work = {
            let loaded = loaded.clone();
            let session = session.clone();
            tokio::task::spawn_blocking(move || match job {
                Job::Pl(cfg) => session::refine_pl(&loaded, &session, &cfg),
                Job::Ctr(cfg, l) => {
                    let model = l.ctr.as_ref().expect("checked before spawning");
                    session::refine_ctr(&loaded, model, &session, &cfg, 0)
                }
            })
        };
        let result: ApiResult<Refinement> = match work.await {
            Ok(r) => r.map_err(Problem::from),
            Err(e) => Err(Problem::new(
                StatusCode::INTERNAL_SERVER_ERROR,
                "INTERNAL",
                e.to_string(),
            )),
        };
        let id2 = session.id.clone();
        let saved = st2
            .update(&id2, |s| {
                match result {
                    Ok(r) => {
                        let metrics = loaded.score(s, &r.embedding, session::HISTORY_K)?;
                        s.history.push(Snapshot {
                            method,
                            positives: r.positives,
                            hard_negatives: r.hard_negatives,
                            metrics,
                        });
                        s.refined.insert(method, r);
                        s.status.state = JobState::Done;
                    }
                    Err(p) => {
                        tracing::warn!(session = %s.id, code = %p.code, "refinement failed");
                        s.status.state = JobState::Failed;
                        s.status.error = Some(p.body());
                    }
                }
                Ok(())
            })
            .await;
        if let Err(p) = saved {
            tracing::error!(session = %id2, code = %p.code, "could not store refinement");
        }
        st2.running.lock().expect("lock poisoned").remove(&id2);
    });
    Ok((StatusCode::ACCEPTED, Json(status)))
}

async fn status(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let s = st.snapshot(&id).await?;
    Ok(Json(json!({
        "session_id": s.id,
        "status": s.status,
        "refined_methods": s.refined.keys().collect::<Vec<_>>(),
        "positives": s.labelled(Label::Positive).len(),
        "hard_negatives": s.labelled(Label::HardNegative).len(),
    })))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareEntry {
    pub method: Method,
    pub ranking: Vec<ScoredId>,
    pub metrics: Option<QueryScore>,
    /// AP change against zero-shot.
    pub delta_ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareResponse {
    pub query_id: Option<String>,
    pub labelled: bool,
    pub k: usize,
    pub entries: Vec<CompareEntry>,
}

/// Zero-shot against every refinement, with the session's feedback items and
/// its query's FSR set held out of the rankings.
async fn compare(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<CompareResponse>> {
    let loaded = st.loaded()?;
    let s = st.snapshot(&id).await?;
    let k = session::HISTORY_K;
    let held_out = loaded.held_out(&s);
    let mut entries = Vec::new();
    let methods = std::iter::once(Method::ZeroShot).chain(s.refined.keys().copied());
    for method in methods {
        let q = s.embedding(method).expect("method listed");
        entries.push(CompareEntry {
            method,
            ranking: scored(&loaded, loaded.rank(q, k, &held_out)?),
            metrics: loaded.score(&s, q, k)?,
            delta_ap: None,
        });
    }
    let base = entries[0].metrics.as_ref().map(|m| m.average_precision);
    for e in &mut entries {
        e.delta_ap = base.zip(e.metrics.as_ref()).map(|(b, m)| m.average_precision - b);
    }
    Ok(Json(CompareResponse {
        query_id: s.query_id.clone(),
        labelled: base.is_some(),
        k,
        entries,
    }))
}

#[derive(Debug, Deserialize)]
struct EvaluateRequest {
    runs: Option<Vec<RankedRun>>,
    run_file: Option<PathBuf>,
    #[serde(default = "default_k")]
    k: usize,
}

fn default_k() -> usize {
    DEFAULT_K
}

async fn evaluate(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<MetricReport>> {
    let req: EvaluateRequest = parse(&body)?;
    let loaded = st.loaded()?;
    let manifest = loaded
        .manifest
        .as_ref()
        .ok_or_else(|| Problem::new(StatusCode::CONFLICT, "NO_MANIFEST", "no manifest loaded"))?;
    let run_list = match (req.runs, req.run_file) {
        (Some(r), None) => r,
        (None, Some(p)) => runs::read_runs(Path::new(&p))?,
        _ => {
            return Err(Problem::new(
                StatusCode::BAD_REQUEST,
                "INVALID_ARGUMENT",
                "give exactly one of `runs` and `run_file`",
            ))
        }
    };
    Ok(Json(evaluate_run(&run_list, manifest, req.k)?))
}
