//! HTTP endpoints: `POST /webhook`, `GET /status` and the admin actions.

use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lightci_core::config::ServiceConfig;
use lightci_core::gateway::{DispatchOutcome, Gateway};
use lightci_core::modulator::{CodeHost, HttpCodeHost, NoopCodeHost};
use lightci_core::runtime::Engine;
use lightci_core::webhook::Delivery;
use serde_json::json;

/// Seconds suggested to a code host whose delivery was rejected with 503.
pub const RETRY_AFTER_SECONDS: u64 = 5;

pub struct AppState {
    pub gateway: Gateway,
    pub admin_token: Option<String>,
}

impl AppState {
    pub fn engine(&self) -> &Arc<Engine> {
        self.gateway.engine()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/webhook", post(webhook))
        .route("/status", get(status))
        .route("/admin/reclaim", post(admin_reclaim))
        .route("/admin/cancel/{*target}", post(admin_cancel))
        .with_state(state)
}

fn error(code: StatusCode, message: impl Into<String>) -> Response {
    (code, Json(json!({ "error": message.into() }))).into_response()
}

fn outcome_json(outcome: &DispatchOutcome) -> serde_json::Value {
    match outcome {
        DispatchOutcome::Enqueued(id) => json!({ "outcome": "enqueued", "task_id": id }),
        DispatchOutcome::Superseded { killed, task_id } => {
            json!({ "outcome": "superseded", "task_id": task_id, "killed": killed })
        }
        DispatchOutcome::Cancelled(ids) => json!({ "outcome": "cancelled", "cancelled": ids }),
        DispatchOutcome::Ignored(reason) => json!({ "outcome": "ignored", "reason": reason }),
    }
}

async fn webhook(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    let mut delivery = Delivery::new(body.to_vec());
    for (name, value) in &headers {
        if let Ok(v) = value.to_str() {
            delivery.insert_header(name.as_str(), v);
        }
    }
    let st = state.clone();
    let handled = tokio::task::spawn_blocking(move || st.gateway.handle(&delivery)).await;
    match handled {
        Ok(Ok(outcome)) => (StatusCode::ACCEPTED, Json(outcome_json(&outcome))).into_response(),
        Ok(Err(e)) => {
            let code = StatusCode::from_u16(e.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            let mut resp = error(code, e.to_string());
            if code == StatusCode::SERVICE_UNAVAILABLE {
                resp.headers_mut().insert(header::RETRY_AFTER, RETRY_AFTER_SECONDS.into());
            }
            resp
        }
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("handler failed: {e}")),
    }
}

async fn status(State(state): State<Arc<AppState>>) -> Response {
    Json(state.engine().snapshot()).into_response()
}

/// Returns the rejection, if any, for an admin request.
fn reject_admin(state: &AppState, headers: &HeaderMap) -> Option<Response> {
    let Some(expected) = state.admin_token.as_deref() else {
        return Some(error(StatusCode::FORBIDDEN, "admin endpoints are disabled (no admin_token configured)"));
    };
    let given =
        headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()).and_then(|v| v.strip_prefix("Bearer "));
    match given {
        Some(token) if constant_time_eq(token.as_bytes(), expected.as_bytes()) => None,
        _ => Some(error(StatusCode::UNAUTHORIZED, "missing or wrong bearer token")),
    }
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

async fn admin_reclaim(State(state): State<Arc<AppState>>, headers: HeaderMap) -> Response {
    if let Some(resp) = reject_admin(&state, &headers) {
        return resp;
    }
    let st = state.clone();
    match tokio::task::spawn_blocking(move || st.engine().reclaim()).await {
        Ok(Ok(victim)) => Json(json!({ "reclaimed": victim })).into_response(),
        Ok(Err(e)) => error(StatusCode::SERVICE_UNAVAILABLE, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// `target` is `<repo_id>/<pr_number>`; repo ids themselves contain a slash.
async fn admin_cancel(State(state): State<Arc<AppState>>, Path(target): Path<String>, headers: HeaderMap) -> Response {
    if let Some(resp) = reject_admin(&state, &headers) {
        return resp;
    }
    let Some((repo, pr)) = target.rsplit_once('/') else {
        return error(StatusCode::BAD_REQUEST, "expected /admin/cancel/<repo>/<pr>");
    };
    let Ok(pr) = pr.parse::<u64>() else {
        return error(StatusCode::BAD_REQUEST, format!("invalid PR number {pr:?}"));
    };
    let (st, repo) = (state.clone(), repo.to_owned());
    match tokio::task::spawn_blocking(move || st.engine().cancel(&repo, pr)).await {
        Ok(Ok(ids)) => Json(json!({ "cancelled": ids })).into_response(),
        Ok(Err(e)) => error(StatusCode::SERVICE_UNAVAILABLE, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

pub fn code_host(config: &ServiceConfig) -> Arc<dyn CodeHost> {
    if config.code_host_base_url.is_empty() {
        Arc::new(NoopCodeHost)
    } else {
        Arc::new(HttpCodeHost::new(&config.code_host_base_url, config.code_host_token.clone()))
    }
}

async fn termination() {
    use tokio::signal::unix::{signal, SignalKind};
    let mut term = signal(SignalKind::terminate()).expect("SIGTERM handler installs");
    tokio::select! {
        _ = term.recv() => log::info!("SIGTERM received"),
        _ = tokio::signal::ctrl_c() => log::info!("interrupt received"),
    }
}

/// Runs the daemon until SIGTERM or SIGINT, then kills live tasks and waits
/// up to `shutdown_grace_seconds` for them.
pub fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    let engine = Arc::new(Engine::start(&config, code_host(&config)).context("cannot start engine")?);
    let state = Arc::new(AppState {
        gateway: Gateway::new(
            engine.clone(),
            config.webhook_secret.as_deref(),
            config.repositories.iter().map(|r| r.repo_id.clone()),
        ),
        admin_token: config.admin_token.clone(),
    });
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().context("tokio runtime")?;
    let served: anyhow::Result<()> = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&config.listen_address)
            .await
            .with_context(|| format!("cannot bind {}", config.listen_address))?;
        let addr = listener.local_addr()?;
        log::info!("listening on {addr}");
        println!("listening on {addr}");
        axum::serve(listener, router(state)).with_graceful_shutdown(termination()).await?;
        Ok(())
    });
    engine.shutdown(Duration::from_secs(config.shutdown_grace_seconds));
    log::info!("stopped");
    served
}
