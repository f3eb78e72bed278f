use std::collections::{HashMap, HashSet};
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{SecondsFormat, Utc};
use cystscribe_core::risk::RiskCategory;
use cystscribe_core::PclFeatureRecord;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{oneshot, Mutex};
use tokio::task::JoinHandle;
use tower_http::services::ServeDir;

use crate::log::{AnnotationLog, ReaderAnnotation};
use crate::study::Study;
use crate::summary::{summarize, AgreementSummary};
use crate::ReaderError;

/// What a reader is shown. There is deliberately no model identity here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextCase {
    Case {
        case_id: String,
        presentation_order: usize,
        answered: usize,
        total: usize,
        report_text: String,
        model_features: PclFeatureRecord,
        model_category: RiskCategory,
    },
    Done {
        answered: usize,
        total: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Submission {
    pub reader_id: String,
    pub case_id: String,
    pub presentation_order: usize,
    pub agrees_with_model: bool,
    pub reader_category: String,
}

const SUBMISSION_SHAPE: &str = "body must be a JSON object with exactly reader_id, case_id, \
     presentation_order, agrees_with_model and reader_category";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Receipt {
    pub case_id: String,
    pub presentation_order: usize,
    pub submitted_at: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderProgress {
    pub reader_id: String,
    pub answered: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub readers: Vec<ReaderProgress>,
    pub annotations: usize,
}

#[derive(Debug, Default)]
struct Snapshot {
    annotations: Vec<ReaderAnnotation>,
    /// Reader id → answered positions in that reader's order.
    answered: HashMap<String, HashSet<usize>>,
}

impl Snapshot {
    fn with(&self, row: ReaderAnnotation) -> Snapshot {
        let mut answered = self.answered.clone();
        answered
            .entry(row.reader_id.clone())
            .or_default()
            .insert(row.presentation_order);
        let mut annotations = self.annotations.clone();
        annotations.push(row);
        Snapshot { annotations, answered }
    }

    fn answered(&self, reader_id: &str) -> Option<&HashSet<usize>> {
        self.answered.get(reader_id)
    }
}

/// Shared service state. Readers see immutable snapshots; writers go
/// through the log mutex one at a time.
pub struct AppState {
    study: Arc<Study>,
    snapshot: RwLock<Arc<Snapshot>>,
    log: Mutex<AnnotationLog>,
}

impl AppState {
    /// Opens the study's log (if it has a directory) and replays it.
    pub fn new(study: Study) -> Result<Arc<Self>, ReaderError> {
        let (log, rows) = match study.log_path() {
            Some(path) => AnnotationLog::open(&path)?,
            None => (AnnotationLog::ephemeral(), Vec::new()),
        };
        let mut snapshot = Snapshot::default();
        for row in rows {
            check_replayed(&study, &snapshot, &row)?;
            snapshot = snapshot.with(row);
        }
        Ok(Arc::new(AppState {
            study: Arc::new(study),
            snapshot: RwLock::new(Arc::new(snapshot)),
            log: Mutex::new(log),
        }))
    }

    pub fn study(&self) -> &Study {
        &self.study
    }

    fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    pub fn annotations(&self) -> Vec<ReaderAnnotation> {
        self.snapshot().annotations.clone()
    }

    pub fn summary(&self) -> AgreementSummary {
        summarize(&self.study, &self.snapshot().annotations)
    }
}

fn check_replayed(study: &Study, snapshot: &Snapshot, row: &ReaderAnnotation) -> Result<(), ReaderError> {
    let bad = |why: &str| {
        Err(ReaderError::Log(format!(
            "annotation by {} for case {}: {why}",
            row.reader_id, row.case_id
        )))
    };
    let Some(order) = study.order(&row.reader_id) else {
        return bad("unknown reader");
    };
    let Some(&item) = order.get(row.presentation_order) else {
        return bad("position outside the reader's order");
    };
    let expected = &study.items[item];
    if expected.case_id != row.case_id || expected.model_source != row.model_source {
        return bad("does not match the study's case order");
    }
    if snapshot
        .answered(&row.reader_id)
        .is_some_and(|s| s.contains(&row.presentation_order))
    {
        return bad("duplicate");
    }
    Ok(())
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn err(status: StatusCode, message: impl Into<String>) -> ApiError {
    ApiError(status, message.into())
}

fn bearer(headers: &HeaderMap) -> Result<&str, ApiError> {
    headers
        .get(axum::http::header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .ok_or_else(|| err(StatusCode::UNAUTHORIZED, "missing bearer token"))
}

fn authorize_reader(state: &AppState, headers: &HeaderMap, reader_id: &str) -> Result<(), ApiError> {
    let token = bearer(headers)?;
    match state.study.reader_for_token(token) {
        None => Err(err(StatusCode::UNAUTHORIZED, "unknown token")),
        Some(owner) if owner != reader_id => Err(err(StatusCode::FORBIDDEN, "token belongs to another reader")),
        Some(_) => Ok(()),
    }
}

fn authorize_admin(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    if state.study.is_admin(bearer(headers)?) {
        Ok(())
    } else {
        Err(err(StatusCode::UNAUTHORIZED, "admin token required"))
    }
}

async fn next_case(
    State(state): State<Arc<AppState>>,
    Path(reader_id): Path<String>,
    headers: HeaderMap,
) -> Result<Json<NextCase>, ApiError> {
    let Some(order) = state.study.order(&reader_id) else {
        return Err(err(StatusCode::NOT_FOUND, format!("unknown reader {reader_id}")));
    };
    authorize_reader(&state, &headers, &reader_id)?;
    let snapshot = state.snapshot();
    let done = snapshot.answered(&reader_id);
    let answered = done.map_or(0, HashSet::len);
    let total = order.len();
    let next = (0..total).find(|k| !done.is_some_and(|d| d.contains(k)));
    Ok(Json(match next {
        None => NextCase::Done { answered, total },
        Some(position) => {
            let item = &state.study.items[order[position]];
            NextCase::Case {
                case_id: item.case_id.clone(),
                presentation_order: position,
                answered,
                total,
                report_text: item.report_text.clone(),
                model_features: item.model_features.clone(),
                model_category: item.model_category,
            }
        }
    }))
}

async fn submit(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Result<Json<Submission>, JsonRejection>,
) -> Result<(StatusCode, Json<Receipt>), ApiError> {
    // The rejection text can echo client keys back, so it is not forwarded.
    let Json(sub) = body.map_err(|_| err(StatusCode::UNPROCESSABLE_ENTITY, SUBMISSION_SHAPE))?;
    let Some(order) = state.study.order(&sub.reader_id) else {
        return Err(err(StatusCode::NOT_FOUND, format!("unknown reader {}", sub.reader_id)));
    };
    authorize_reader(&state, &headers, &sub.reader_id)?;
    let Some(category) = RiskCategory::parse(&sub.reader_category) else {
        return Err(err(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!(
                "reader_category {:?} is not one of the five categories",
                sub.reader_category
            ),
        ));
    };
    let item = order
        .get(sub.presentation_order)
        .map(|&i| &state.study.items[i])
        .filter(|item| item.case_id == sub.case_id)
        .ok_or_else(|| {
            err(
                StatusCode::NOT_FOUND,
                format!(
                    "case {} is not at position {} for this reader",
                    sub.case_id, sub.presentation_order
                ),
            )
        })?;

    let mut log = state.log.lock().await;
    let current = state.snapshot();
    if current
        .answered(&sub.reader_id)
        .is_some_and(|s| s.contains(&sub.presentation_order))
    {
        return Err(err(
            StatusCode::CONFLICT,
            "already answered; annotations cannot be changed",
        ));
    }
    let row = ReaderAnnotation {
        case_id: sub.case_id.clone(),
        reader_id: sub.reader_id.clone(),
        model_source: item.model_source.clone(),
        presentation_order: sub.presentation_order,
        agrees_with_model: sub.agrees_with_model,
        reader_category: category,
        submitted_at: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
    };
    log.append(&row).map_err(|e| {
        tracing::error!(error = %e, "annotation write failed");
        err(StatusCode::INTERNAL_SERVER_ERROR, "annotation could not be stored")
    })?;
    let receipt = Receipt {
        case_id: row.case_id.clone(),
        presentation_order: row.presentation_order,
        submitted_at: row.submitted_at.clone(),
    };
    *state.snapshot.write().expect("snapshot lock") = Arc::new(current.with(row));
    drop(log);
    Ok((StatusCode::CREATED, Json(receipt)))
}

async fn summary(State(state): State<Arc<AppState>>, headers: HeaderMap) -> Result<Json<AgreementSummary>, ApiError> {
    authorize_admin(&state, &headers)?;
    let study = state.study.clone();
    let annotations = state.snapshot();
    let summary = tokio::task::spawn_blocking(move || summarize(&study, &annotations.annotations))
        .await
        .map_err(|e| err(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(summary))
}

async fn progress(State(state): State<Arc<AppState>>, headers: HeaderMap) -> Result<Json<Progress>, ApiError> {
    authorize_admin(&state, &headers)?;
    let snapshot = state.snapshot();
    let total = state.study.items.len();
    Ok(Json(Progress {
        readers: state
            .study
            .reader_ids()
            .map(|id| ReaderProgress {
                reader_id: id.to_string(),
                answered: snapshot.answered(id).map_or(0, HashSet::len),
                total,
            })
            .collect(),
        annotations: snapshot.annotations.len(),
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    let static_dir = state.study.static_dir();
    let api = Router::new()
        .route("/api/readers/{id}/next", get(next_case))
        .route("/api/annotations", post(submit))
        .route("/api/summary", get(summary))
        .route("/api/progress", get(progress))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// A running service bound to a local address.
pub struct ReaderServer {
    addr: SocketAddr,
    state: Arc<AppState>,
    shutdown: Option<oneshot::Sender<()>>,
    handle: Option<JoinHandle<()>>,
}

impl ReaderServer {
    pub async fn start(study: Study, addr: SocketAddr) -> Result<Self, ReaderError> {
        let state = AppState::new(study)?;
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| ReaderError::Bind(addr, e))?;
        let addr = listener.local_addr().map_err(|e| ReaderError::Bind(addr, e))?;
        let (tx, rx) = oneshot::channel();
        let app = router(state.clone());
        let handle = tokio::spawn(async move {
            let served = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
            if let Err(e) = served {
                tracing::error!(error = %e, "reader service stopped");
            }
        });
        Ok(ReaderServer {
            addr,
            state,
            shutdown: Some(tx),
            handle: Some(handle),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn state(&self) -> &Arc<AppState> {
        &self.state
    }

    /// Runs until the process receives Ctrl-C.
    pub async fn run_until_ctrl_c(mut self) {
        let _ = tokio::signal::ctrl_c().await;
        self.stop().await;
    }

    pub async fn shutdown(mut self) {
        self.stop().await;
    }

    async fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(handle) = self.handle.take() {
            let _ = handle.await;
        }
    }
}

impl Drop for ReaderServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}
