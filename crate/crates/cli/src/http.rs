//! JSON API over [`bayes_emu::service`].

use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use bayes_emu::service::{self, ApiError, EffectQuery, ServiceState};
use bayes_emu::store::RunStore;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Clone)]
pub struct AppState {
    current: Arc<RwLock<Arc<ServiceState>>>,
    store: Option<PathBuf>,
}

impl AppState {
    pub fn new(state: ServiceState, store: Option<PathBuf>) -> Self {
        AppState {
            current: Arc::new(RwLock::new(Arc::new(state))),
            store,
        }
    }

    pub fn from_store(root: PathBuf) -> bayes_emu::Result<Self> {
        let state = ServiceState::from_store(&RunStore::open(&root)?)?;
        Ok(AppState::new(state, Some(root)))
    }

    pub fn snapshot(&self) -> Arc<ServiceState> {
        self.current.read().expect("state lock poisoned").clone()
    }

    fn swap(&self, next: ServiceState) {
        *self.current.write().expect("state lock poisoned") = Arc::new(next);
    }
}

struct ApiResponse(Result<String, ApiError>);

impl IntoResponse for ApiResponse {
    fn into_response(self) -> Response {
        let (status, body) = match self.0 {
            Ok(s) => (StatusCode::OK, s),
            Err(e) => (
                StatusCode::from_u16(e.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR),
                e.to_json(),
            ),
        };
        (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
    }
}

fn json<T: Serialize>(r: Result<T, ApiError>) -> ApiResponse {
    ApiResponse(r.and_then(|v| {
        serde_json::to_string(&v).map_err(|e| ApiError::new(500, "Internal", e.to_string(), None))
    }))
}

fn decode<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(400, "InvalidRequest", e.to_string(), None))
}

/// Runs a handler off the async executor.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| Err(ApiError::new(500, "Internal", e.to_string(), None)))
}

async fn space(State(app): State<AppState>) -> ApiResponse {
    json(Ok(service::handle_space(&app.snapshot())))
}

async fn outputs(State(app): State<AppState>) -> ApiResponse {
    json(Ok(service::handle_outputs(&app.snapshot())))
}

async fn predict(State(app): State<AppState>, body: Bytes) -> ApiResponse {
    let s = app.snapshot();
    json(decode(&body).and_then(|req| service::handle_predict(&s, &req)))
}

async fn robust(State(app): State<AppState>, body: Bytes) -> ApiResponse {
    let s = app.snapshot();
    json(blocking(move || decode(&body).and_then(|req| service::handle_robust(&s, &req))).await)
}

async fn sensitivity(State(app): State<AppState>) -> ApiResponse {
    json(service::handle_sensitivity(&app.snapshot()))
}

async fn effects(
    State(app): State<AppState>,
    Path((output, input)): Path<(String, String)>,
    Query(q): Query<EffectQuery>,
) -> ApiResponse {
    let s = app.snapshot();
    json(blocking(move || service::handle_effects(&s, &output, &input, &q)).await)
}

#[derive(Serialize)]
struct Reloaded {
    outputs: Vec<String>,
}

async fn reload(State(app): State<AppState>) -> ApiResponse {
    let Some(root) = app.store.clone() else {
        return json::<Reloaded>(Err(ApiError::new(409, "NoStore", "service was started without a store", None)));
    };
    let next = blocking(move || {
        RunStore::open(&root)
            .and_then(|st| ServiceState::from_store(&st))
            .map_err(|e| ApiError::new(500, "ReloadFailed", e.to_string(), None))
    })
    .await;
    json(next.map(|st| {
        let outputs = st.emulators.iter().map(|e| e.output_name().to_string()).collect();
        app.swap(st);
        log::info!("reloaded emulators from store");
        Reloaded { outputs }
    }))
}

pub fn router(app: AppState) -> Router {
    Router::new()
        .route("/api/v1/space", get(space))
        .route("/api/v1/outputs", get(outputs))
        .route("/api/v1/predict", post(predict))
        .route("/api/v1/robust", post(robust))
        .route("/api/v1/sensitivity", get(sensitivity))
        .route("/api/v1/effects/{output}/{input}", get(effects))
        .route("/api/v1/admin/reload", post(reload))
        .with_state(app)
}

pub async fn serve(app: AppState, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
