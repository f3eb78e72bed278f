//! In-process OpenAI-compatible endpoint for tests and offline runs.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use serde_json::{json, Value};
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

use crate::prompt::ChatMessage;

#[derive(Debug, Clone)]
pub struct StubRequest {
    pub request_id: Option<String>,
    pub body: Value,
    pub messages: Vec<ChatMessage>,
    pub n: usize,
}

impl StubRequest {
    /// Content of the final user message.
    pub fn user_report(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map_or("", |m| m.content.as_str())
    }
}

#[derive(Debug, Clone)]
pub enum StubReply {
    Choices(Vec<String>),
    Status {
        status: u16,
        retry_after: Option<u64>,
        body: String,
    },
    /// Sent verbatim with status 200.
    Raw(String),
}

pub type Responder = Arc<dyn Fn(&StubRequest) -> StubReply + Send + Sync>;

#[derive(Debug, Clone, Default)]
pub struct StubOptions {
    pub latency: Duration,
    /// Caps the choices returned per response, forcing clients to top up.
    pub max_choices: Option<usize>,
    /// Defaults to an ephemeral loopback port.
    pub bind: Option<std::net::SocketAddr>,
}

#[derive(Debug, Default)]
pub struct StubStats {
    requests: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    request_ids: Mutex<Vec<String>>,
    bodies: Mutex<Vec<Value>>,
}

impl StubStats {
    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn request_ids(&self) -> Vec<String> {
        self.request_ids.lock().unwrap().clone()
    }

    pub fn bodies(&self) -> Vec<Value> {
        self.bodies.lock().unwrap().clone()
    }
}

#[derive(Clone)]
struct AppState {
    responder: Responder,
    options: StubOptions,
    stats: Arc<StubStats>,
}

pub struct StubServer {
    addr: SocketAddr,
    stats: Arc<StubStats>,
    shutdown: Option<oneshot::Sender<()>>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    pub async fn start(responder: Responder) -> std::io::Result<Self> {
        Self::start_with(responder, StubOptions::default()).await
    }

    pub async fn start_with(responder: Responder, options: StubOptions) -> std::io::Result<Self> {
        let bind = options
            .bind
            .unwrap_or_else(|| std::net::SocketAddr::from(([127, 0, 0, 1], 0)));
        let listener = tokio::net::TcpListener::bind(bind).await?;
        let addr = listener.local_addr()?;
        let stats = Arc::new(StubStats::default());
        let state = AppState {
            responder,
            options,
            stats: stats.clone(),
        };
        let app = Router::new()
            .route("/v1/chat/completions", post(chat_completions))
            .with_state(state);
        let (tx, rx) = oneshot::channel();
        let handle = tokio::spawn(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
        Ok(StubServer {
            addr,
            stats,
            shutdown: Some(tx),
            handle: Some(handle),
        })
    }

    /// Every choice is `text`.
    pub async fn fixed(text: &str) -> std::io::Result<Self> {
        let text = text.to_string();
        Self::start(Arc::new(move |req: &StubRequest| {
            StubReply::Choices(vec![text.clone(); req.n])
        }))
        .await
    }

    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn stats(&self) -> &StubStats {
        &self.stats
    }

    pub async fn shutdown(mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(handle) = self.handle.take() {
            let _ = handle.await;
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

async fn chat_completions(State(state): State<AppState>, headers: HeaderMap, body: String) -> Response {
    let stats = &state.stats;
    stats.requests.fetch_add(1, Ordering::SeqCst);
    let now = stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    stats.max_in_flight.fetch_max(now, Ordering::SeqCst);
    let response = respond(&state, &headers, &body).await;
    stats.in_flight.fetch_sub(1, Ordering::SeqCst);
    response
}

async fn respond(state: &AppState, headers: &HeaderMap, body: &str) -> Response {
    if !state.options.latency.is_zero() {
        tokio::time::sleep(state.options.latency).await;
    }
    let request_id = headers
        .get("x-request-id")
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    if let Some(id) = &request_id {
        state.stats.request_ids.lock().unwrap().push(id.clone());
    }
    let Ok(value) = serde_json::from_str::<Value>(body) else {
        return (StatusCode::BAD_REQUEST, "request body is not JSON").into_response();
    };
    state.stats.bodies.lock().unwrap().push(value.clone());
    let messages: Vec<ChatMessage> = match value.get("messages").cloned().map(serde_json::from_value) {
        Some(Ok(m)) => m,
        _ => return (StatusCode::BAD_REQUEST, "messages missing").into_response(),
    };
    let n = value.get("n").and_then(Value::as_u64).unwrap_or(1) as usize;
    let request = StubRequest {
        request_id,
        body: value,
        messages,
        n,
    };
    match (state.responder)(&request) {
        StubReply::Choices(texts) => {
            let limit = state.options.max_choices.unwrap_or(usize::MAX).min(n);
            let choices: Vec<Value> = texts
                .into_iter()
                .take(limit)
                .enumerate()
                .map(|(i, text)| {
                    json!({
                        "index": i,
                        "message": {"role": "assistant", "content": text},
                        "finish_reason": "stop",
                    })
                })
                .collect();
            let payload = json!({
                "id": "stub",
                "object": "chat.completion",
                "model": request.body.get("model").cloned().unwrap_or(Value::Null),
                "choices": choices,
            });
            axum::Json(payload).into_response()
        }
        StubReply::Status {
            status,
            retry_after,
            body,
        } => {
            let code = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            let mut response = (code, body).into_response();
            if let Some(secs) = retry_after {
                response
                    .headers_mut()
                    .insert("retry-after", secs.to_string().parse().unwrap());
            }
            response
        }
        StubReply::Raw(text) => (StatusCode::OK, text).into_response(),
    }
}
