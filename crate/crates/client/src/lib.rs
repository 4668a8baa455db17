//! Async client for the augmentation service.

use evaug_core::api::*;
use evaug_core::event_model::AnnotatedSentence;
use evaug_core::orchestrator::{Phase, RetrainOptions, RetrainOutcome, RunConfig};
use evaug_core::quality_metrics::PllReport;
use evaug_core::scoring::ScoreReport;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// The service answered with its error body.
    #[error("{} ({status}): {}", kind_name(body.kind), body.message)]
    Api { status: u16, body: ErrorBody },
    #[error("request to {url} failed: {source}")]
    Transport { url: String, source: reqwest::Error },
    #[error("unexpected response from {url} ({status}): {detail}")]
    Unexpected { url: String, status: u16, detail: String },
}

fn kind_name(kind: ErrorKind) -> String {
    serde_json::to_value(kind).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

impl ClientError {
    pub fn kind(&self) -> Option<ErrorKind> {
        match self {
            ClientError::Api { body, .. } => Some(body.kind),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    /// `base` like `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>) -> Self {
        Client {
            base: base.into().trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn send<T: DeserializeOwned>(&self, req: reqwest::RequestBuilder, url: String) -> Result<T, ClientError> {
        let resp = req.send().await.map_err(|source| ClientError::Transport { url: url.clone(), source })?;
        let status = resp.status();
        let bytes = resp.bytes().await.map_err(|source| ClientError::Transport { url: url.clone(), source })?;
        if status.is_success() {
            return serde_json::from_slice(&bytes).map_err(|e| ClientError::Unexpected {
                url,
                status: status.as_u16(),
                detail: e.to_string(),
            });
        }
        match serde_json::from_slice::<ErrorBody>(&bytes) {
            Ok(body) => Err(ClientError::Api {
                status: status.as_u16(),
                body,
            }),
            Err(_) => Err(ClientError::Unexpected {
                url,
                status: status.as_u16(),
                detail: String::from_utf8_lossy(&bytes).into_owned(),
            }),
        }
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ClientError> {
        let url = format!("{}{path}", self.base);
        self.send(self.http.get(&url), url).await
    }

    async fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ClientError> {
        let url = format!("{}{path}", self.base);
        self.send(self.http.post(&url).json(body), url).await
    }

    pub async fn health(&self) -> Result<Health, ClientError> {
        self.get("/health").await
    }

    pub async fn defaults(&self) -> Result<DefaultsResponse, ClientError> {
        self.get("/v1/config/defaults").await
    }

    pub async fn evaluate(&self, pred: Vec<AnnotatedSentence>, gold: Vec<AnnotatedSentence>) -> Result<ScoreReport, ClientError> {
        self.post("/v1/evaluate", &EvaluateRequest { pred, gold }).await
    }

    pub async fn diversity(&self, request: &DiversityRequest) -> Result<DiversityResponse, ClientError> {
        self.post("/v1/metrics/diversity", request).await
    }

    pub async fn pll(&self, request: &PllRequest) -> Result<PllReport, ClientError> {
        self.post("/v1/metrics/pll", request).await
    }

    pub async fn pretrain(&self, config: RunConfig, phase: Option<Phase>) -> Result<PretrainResponse, ClientError> {
        self.post("/v1/pretrain", &PretrainRequest { config, phase }).await
    }

    pub async fn retrain(&self, config: RunConfig, options: RetrainOptions) -> Result<RetrainOutcome, ClientError> {
        self.post("/v1/retrain", &RetrainRequest { config, options }).await
    }

    pub async fn report(&self, run_id: &str) -> Result<ReportResponse, ClientError> {
        self.get(&format!("/v1/runs/{run_id}/report")).await
    }

    pub async fn plot(&self, run_id: &str) -> Result<PlotResponse, ClientError> {
        self.post(&format!("/v1/runs/{run_id}/plot"), &()).await
    }
}
