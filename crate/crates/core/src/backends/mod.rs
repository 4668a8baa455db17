//! Model interfaces the framework trains and queries.
//!
//! Queries take `&self` and may run concurrently; training takes `&mut self`,
//! so a backend is never queried while it trains.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::BackendError;
use crate::event_model::{AnnotatedSentence, EventRecord};
use crate::generation_training::{GenLossReport, TokenProbMatrix, Vocab};
use crate::policy::PolicyBatch;
use crate::serialization::{ExtractionInput, GenerationInput, PolicyInput};

pub mod adapter;
pub mod conformance;
pub mod echo;
pub mod masked_lm;
pub mod mock_extractor;
pub mod mock_generator;
pub mod mock_policy;

pub type BackendResult<T> = Result<T, BackendError>;

/// Generated text with one probability row per generated token.
#[derive(Debug, Clone)]
pub struct Generation {
    pub text: String,
    pub tokens: Vec<String>,
    pub probs: TokenProbMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorExample {
    pub input: GenerationInput,
    pub records: Vec<EventRecord>,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTrainParams {
    pub beta: f64,
    pub gamma: f64,
}

pub trait GeneratorBackend: Send + Sync {
    fn vocab(&self) -> Arc<Vocab>;
    fn generate(&self, input: &GenerationInput) -> BackendResult<Generation>;
    /// One pass over `batch` minimizing the weighted generator loss.
    fn train(&mut self, batch: &[GeneratorExample], params: &GeneratorTrainParams) -> BackendResult<GenLossReport>;
    fn save_state(&self) -> BackendResult<Vec<u8>>;
    fn load_state(&mut self, state: &[u8]) -> BackendResult<()>;
}

/// Where an extraction training example came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ExampleOrigin {
    Original,
    /// `complete` is false when some trigger or argument of the source
    /// records could not be located in the generated text.
    Generated { complete: bool },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorExample {
    pub sentence: AnnotatedSentence,
    pub origin: ExampleOrigin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtractorTrainParams {
    pub epochs: usize,
    pub negative_ratio: f64,
}

pub trait ExtractorBackend: Send + Sync {
    /// The answered prompt for one event type.
    fn extract(&self, input: &ExtractionInput) -> BackendResult<String>;
    /// Returns one loss value per epoch.
    fn train(&mut self, batch: &[ExtractorExample], params: &ExtractorTrainParams) -> BackendResult<Vec<f64>>;
    fn save_state(&self) -> BackendResult<Vec<u8>>;
    fn load_state(&mut self, state: &[u8]) -> BackendResult<()>;
}

pub trait PolicyBackend: Send + Sync {
    /// Probability of retaining the sample.
    fn score(&self, input: &PolicyInput) -> BackendResult<f64>;
    /// One supervised pass on the cross-entropy loss; returns the loss before the update.
    fn train_supervised(&mut self, batch: &PolicyBatch) -> BackendResult<f64>;
    /// One pass on the reward-weighted loss over the two diff batches, whose
    /// labels are the actions taken; returns the loss before the update.
    fn train_reinforce(&mut self, new: &PolicyBatch, old: &PolicyBatch, reward: f64) -> BackendResult<f64>;
    fn save_state(&self) -> BackendResult<Vec<u8>>;
    fn load_state(&mut self, state: &[u8]) -> BackendResult<()>;
}

pub trait MaskedLmBackend: Send + Sync {
    /// Probability of `tokens[position]` with that position masked.
    fn token_prob(&self, tokens: &[String], position: usize) -> BackendResult<f64>;
    fn fine_tune(&mut self, _corpus: &[String]) -> BackendResult<()> {
        Ok(())
    }
}

pub(crate) fn to_state<T: Serialize>(value: &T) -> BackendResult<Vec<u8>> {
    serde_json::to_vec_pretty(value).map_err(|e| BackendError::failed("state", e.to_string()))
}

pub(crate) fn from_state<T: serde::de::DeserializeOwned>(name: &str, bytes: &[u8]) -> BackendResult<T> {
    serde_json::from_slice(bytes).map_err(|e| BackendError::failed(name, format!("bad state: {e}")))
}
