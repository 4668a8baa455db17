//! Extractor with a single fidelity parameter `q`.
//!
//! For each (context, event type) a fixed uniform `u` is drawn from the seed;
//! the answer is the gold-filled template when `u < q` and the unfilled
//! template otherwise. Raising `q` therefore only ever turns wrong answers
//! into right ones. Each training epoch adds `δ·clean/|batch|` to `q`,
//! where clean examples are originals plus generated sentences whose
//! elements were all re-anchored.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{from_state, to_state, BackendResult, ExampleOrigin, ExtractorBackend, ExtractorExample, ExtractorTrainParams};
use crate::error::BackendError;
use crate::event_model::{AnnotatedSentence, EventRecord, EventSchema};
use crate::rng::keyed_uniform;
use crate::serialization::{fill_template, ExtractionInput, INSTANCE_SEP};

const NAME: &str = "fidelity-extractor";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FidelityConfig {
    pub initial_fidelity: f64,
    pub delta: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FidelityState {
    fidelity: f64,
    epochs_trained: usize,
}

#[derive(Debug, Clone)]
pub struct FidelityExtractor {
    schema: EventSchema,
    config: FidelityConfig,
    gold: BTreeMap<String, Vec<EventRecord>>,
    state: FidelityState,
}

impl FidelityExtractor {
    /// `gold` supplies the correct answers, keyed by context.
    pub fn new(schema: EventSchema, config: FidelityConfig, gold: &[AnnotatedSentence]) -> BackendResult<Self> {
        if !(0.0..=1.0).contains(&config.initial_fidelity) || config.delta < 0.0 {
            return Err(BackendError::failed(
                NAME,
                format!("fidelity {} / delta {} out of range", config.initial_fidelity, config.delta),
            ));
        }
        let mut by_context: BTreeMap<String, Vec<EventRecord>> = BTreeMap::new();
        for s in gold {
            by_context
                .entry(s.context.clone())
                .or_default()
                .extend(s.records.iter().cloned());
        }
        Ok(FidelityExtractor {
            schema,
            config,
            gold: by_context,
            state: FidelityState {
                fidelity: config.initial_fidelity,
                epochs_trained: 0,
            },
        })
    }

    pub fn fidelity(&self) -> f64 {
        self.state.fidelity
    }

    pub fn epochs_trained(&self) -> usize {
        self.state.epochs_trained
    }

    /// The fixed uniform deciding whether `(context, event_type)` is answered.
    pub fn answer_uniform(seed: u64, context: &str, event_type: &str) -> f64 {
        keyed_uniform(seed, &[context.as_bytes(), event_type.as_bytes()])
    }
}

impl ExtractorBackend for FidelityExtractor {
    fn extract(&self, input: &ExtractionInput) -> BackendResult<String> {
        let template = self
            .schema
            .template(&input.event_type)
            .ok_or_else(|| BackendError::failed(NAME, format!("unknown event type `{}`", input.event_type)))?;
        let records: Vec<&EventRecord> = self
            .gold
            .get(&input.context)
            .map(|rs| rs.iter().filter(|r| r.event_type == input.event_type).collect())
            .unwrap_or_default();
        let u = Self::answer_uniform(self.config.seed, &input.context, &input.event_type);
        if records.is_empty() || u >= self.state.fidelity {
            return Ok(template.as_str().to_string());
        }
        let filled = records
            .iter()
            .map(|r| fill_template(&self.schema, r))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| BackendError::failed(NAME, e.to_string()))?;
        Ok(filled.join(INSTANCE_SEP))
    }

    fn train(&mut self, batch: &[ExtractorExample], params: &ExtractorTrainParams) -> BackendResult<Vec<f64>> {
        if !(0.0..=1.0).contains(&params.negative_ratio) {
            return Err(BackendError::failed(
                NAME,
                format!("negative ratio {} outside [0, 1]", params.negative_ratio),
            ));
        }
        if params.epochs == 0 {
            return Ok(Vec::new());
        }
        if batch.is_empty() {
            return Err(BackendError::failed(NAME, "empty training batch"));
        }
        let clean = batch
            .iter()
            .filter(|e| matches!(e.origin, ExampleOrigin::Original | ExampleOrigin::Generated { complete: true }))
            .count();
        let gain = self.config.delta * clean as f64 / batch.len() as f64;
        let mut curve = Vec::with_capacity(params.epochs);
        for _ in 0..params.epochs {
            self.state.fidelity = (self.state.fidelity + gain).min(1.0);
            self.state.epochs_trained += 1;
            curve.push(1.0 - self.state.fidelity);
        }
        Ok(curve)
    }

    fn save_state(&self) -> BackendResult<Vec<u8>> {
        to_state(&self.state)
    }

    fn load_state(&mut self, state: &[u8]) -> BackendResult<()> {
        self.state = from_state(NAME, state)?;
        Ok(())
    }
}
