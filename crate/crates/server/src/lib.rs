//! HTTP/JSON front end for the pipeline. Training and scoring run on the
//! blocking pool; a run id (or a pretrained directory) is held by at most one
//! request at a time, and a second request for it gets `409`.

use std::collections::HashSet;
use std::path::Path;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use evaug_core::api::*;
use evaug_core::backends::masked_lm::{UniformMaskedLm, UnigramMaskedLm};
use evaug_core::backends::MaskedLmBackend;
use evaug_core::orchestrator::plot::render_report;
use evaug_core::orchestrator::report::{read_episodes, to_csv, ReportRow};
use evaug_core::orchestrator::{retrain, run_pretrain_phase, Phase, RetrainOutcome, RunConfig, RunStore};
use evaug_core::quality_metrics::{corpus_pll, novel_distinct_ngrams, PllReport};
use evaug_core::scoring::{score_corpus, ScoreReport};
use evaug_core::Error;

#[derive(Clone)]
pub struct AppState {
    store: RunStore,
    held: Arc<Mutex<HashSet<String>>>,
}

impl AppState {
    pub fn new(store: RunStore) -> Self {
        AppState {
            store,
            held: Arc::default(),
        }
    }
}

/// Releases its key when dropped, including when the blocking task panics.
#[derive(Debug)]
pub struct Hold {
    held: Arc<Mutex<HashSet<String>>>,
    key: String,
}

impl Drop for Hold {
    fn drop(&mut self) {
        self.held.lock().unwrap_or_else(|e| e.into_inner()).remove(&self.key);
    }
}

impl AppState {
    /// Claim `key` (a run id, or `pretrained/<dir>`) until the guard drops.
    pub fn hold(&self, key: String) -> Result<Hold, ApiError> {
        let mut held = self.held.lock().unwrap_or_else(|e| e.into_inner());
        if !held.insert(key.clone()) {
            return Err(ApiError::busy(&key));
        }
        Ok(Hold {
            held: self.held.clone(),
            key,
        })
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn busy(key: &str) -> Self {
        ApiError {
            status: StatusCode::CONFLICT,
            body: ErrorBody {
                kind: ErrorKind::Busy,
                message: format!("`{key}` is in use by another request"),
            },
        }
    }

    fn internal(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            body: ErrorBody {
                kind: ErrorKind::Internal,
                message: message.into(),
            },
        }
    }
}

pub fn status_of(kind: ErrorKind) -> StatusCode {
    match kind {
        ErrorKind::InvalidInput | ErrorKind::Config | ErrorKind::Data => StatusCode::BAD_REQUEST,
        ErrorKind::MissingState => StatusCode::NOT_FOUND,
        ErrorKind::ConfigMismatch | ErrorKind::Busy => StatusCode::CONFLICT,
        ErrorKind::CoverageNotReached | ErrorKind::SingleClass => StatusCode::UNPROCESSABLE_ENTITY,
        ErrorKind::Backend => StatusCode::BAD_GATEWAY,
        ErrorKind::Io | ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let body = ErrorBody::from(&e);
        ApiError {
            status: status_of(body.kind),
            body,
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody {
                kind: ErrorKind::InvalidInput,
                message: r.body_text(),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, axum::Json(self.body)).into_response()
    }
}

/// `Json` whose rejections use the service's error body.
#[derive(FromRequest)]
#[from_request(via(axum::Json), rejection(ApiError))]
pub struct Json<T>(pub T);

impl<T: serde::Serialize> IntoResponse for Json<T> {
    fn into_response(self) -> Response {
        axum::Json(self.0).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, Error> + Send + 'static) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => Ok(Json(r?)),
        Err(e) => Err(ApiError::internal(format!("worker failed: {e}"))),
    }
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

async fn defaults() -> Json<DefaultsResponse> {
    let published = RunConfig::published_defaults()
        .into_iter()
        .map(|(key, value, note)| DefaultEntry {
            key: key.into(),
            value,
            note: note.into(),
        })
        .collect();
    Json(DefaultsResponse {
        config: RunConfig::default(),
        published,
    })
}

async fn evaluate(Json(req): Json<EvaluateRequest>) -> ApiResult<ScoreReport> {
    blocking(move || Ok(score_corpus(&req.pred, &req.gold))).await
}

async fn diversity(Json(req): Json<DiversityRequest>) -> ApiResult<DiversityResponse> {
    blocking(move || {
        let reports = req
            .orders
            .iter()
            .map(|&n| novel_distinct_ngrams(&req.generated, &req.original, n))
            .collect::<Result<_, _>>()?;
        Ok(DiversityResponse { reports })
    })
    .await
}

async fn pll(Json(req): Json<PllRequest>) -> ApiResult<PllReport> {
    blocking(move || {
        let model: Box<dyn MaskedLmBackend> = match req.model {
            PllModel::Uniform { vocab_size: 0 } => {
                return Err(Error::InvalidInput("uniform model needs a positive vocab_size".into()))
            }
            PllModel::Uniform { vocab_size } => Box::new(UniformMaskedLm::new(vocab_size)),
            PllModel::Unigram { fit } => {
                let mut lm = UnigramMaskedLm::new();
                lm.fine_tune(&fit)?;
                Box::new(lm)
            }
        };
        corpus_pll(&*model, &req.sentences)
    })
    .await
}

async fn pretrain(State(state): State<AppState>, Json(req): Json<PretrainRequest>) -> ApiResult<PretrainResponse> {
    req.config.validate()?;
    let key = format!("pretrained/{}", state.store.pretrained_dir(&req.config).display());
    let hold = state.hold(key)?;
    let store = state.store.clone();
    blocking(move || {
        let _hold = hold;
        let phases = match req.phase {
            Some(p) => vec![p],
            None => vec![Phase::Generator, Phase::Policy, Phase::Extractor],
        };
        let phases = phases
            .into_iter()
            .map(|p| run_pretrain_phase(&store, &req.config, p))
            .collect::<Result<_, _>>()?;
        Ok(PretrainResponse { phases })
    })
    .await
}

async fn retrain_run(State(state): State<AppState>, Json(req): Json<RetrainRequest>) -> ApiResult<RetrainOutcome> {
    req.config.validate()?;
    let mut options = req.options;
    let hold = match (&options.resume, &options.run_id) {
        (Some(id), _) | (None, Some(id)) => {
            state.store.run_dir(id)?;
            state.hold(id.clone())?
        }
        (None, None) => {
            // Pick and claim the id under one lock so two fresh runs never share it.
            let mut held = state.held.lock().unwrap_or_else(|e| e.into_inner());
            let id = state.store.fresh_run_id_avoiding(&req.config, |id| held.contains(id));
            held.insert(id.clone());
            options.run_id = Some(id.clone());
            Hold {
                held: state.held.clone(),
                key: id,
            }
        }
    };
    let store = state.store.clone();
    blocking(move || {
        let _hold = hold;
        retrain(&store, &req.config, &options)
    })
    .await
}

fn run_rows(store: &RunStore, run_id: &str) -> Result<(std::path::PathBuf, Vec<ReportRow>), Error> {
    let dir = store.run_dir(run_id)?;
    let config = dir.join("config.json");
    if !config.exists() {
        return Err(Error::MissingState(config));
    }
    let rows = read_episodes(&dir)?.iter().map(ReportRow::from).collect();
    Ok((dir, rows))
}

async fn report(State(state): State<AppState>, UrlPath(run_id): UrlPath<String>) -> ApiResult<ReportResponse> {
    blocking(move || {
        let (_, rows) = run_rows(&state.store, &run_id)?;
        Ok(ReportResponse {
            csv: to_csv(&rows),
            run_id,
            rows,
        })
    })
    .await
}

fn read_chart(path: &Path) -> Result<Chart, Error> {
    let svg = std::fs::read_to_string(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
    Ok(Chart { name, svg })
}

async fn plot(State(state): State<AppState>, UrlPath(run_id): UrlPath<String>) -> ApiResult<PlotResponse> {
    blocking(move || {
        let (dir, rows) = run_rows(&state.store, &run_id)?;
        let written = render_report(&rows, &dir.join("plots"))?;
        let charts = written.iter().map(|p| read_chart(p)).collect::<Result<_, _>>()?;
        Ok(PlotResponse { written, charts })
    })
    .await
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/config/defaults", get(defaults))
        .route("/v1/evaluate", post(evaluate))
        .route("/v1/metrics/diversity", post(diversity))
        .route("/v1/metrics/pll", post(pll))
        .route("/v1/pretrain", post(pretrain))
        .route("/v1/retrain", post(retrain_run))
        .route("/v1/runs/{id}/report", get(report))
        .route("/v1/runs/{id}/plot", post(plot))
        .with_state(state)
}

/// Serve on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
