//! JSON-over-HTTP routes.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Redirect, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use tower_http::services::ServeDir;

use decc_core::eval::Verdict;

use crate::store::{Store, StoreError};

impl IntoResponse for StoreError {
    fn into_response(self) -> Response {
        let status = match &self {
            StoreError::UnknownAnnotator(_) => StatusCode::FORBIDDEN,
            StoreError::UnknownItem(_) => StatusCode::NOT_FOUND,
            StoreError::Duplicate { .. } | StoreError::Resolved(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Deserialize)]
struct NextQuery {
    annotator: String,
}

/// `200` with the item, or `204` when the annotator has nothing left.
async fn next_item(State(store): State<Arc<Store>>, Query(q): Query<NextQuery>) -> Result<Response, StoreError> {
    Ok(match store.next_item(&q.annotator)? {
        Some(item) => Json(item).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

#[derive(Deserialize)]
struct Submission {
    annotator: String,
    item: String,
    verdict: Verdict,
}

async fn submit(State(store): State<Arc<Store>>, Json(s): Json<Submission>) -> Result<Response, StoreError> {
    let item = tokio::task::spawn_blocking(move || store.submit(&s.annotator, &s.item, s.verdict))
        .await
        .expect("submit task panicked")?;
    Ok(Json(item).into_response())
}

async fn progress(State(store): State<Arc<Store>>) -> Response {
    Json(store.progress()).into_response()
}

async fn export(State(store): State<Arc<Store>>) -> Response {
    Json(store.export()).into_response()
}

/// Routes over `store`; `ui` is served under `/ui/` when given.
pub fn router(store: Arc<Store>, ui: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/items/next", get(next_item))
        .route("/judgments", post(submit))
        .route("/progress", get(progress))
        .route("/export", get(export))
        .with_state(store);
    match ui {
        Some(dir) => api
            .route("/", get(|| async { Redirect::temporary("/ui/") }))
            .nest_service("/ui", ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api,
    }
}

/// Serves on an already bound listener until Ctrl-C.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
