//! Backends whose observable behaviour follows a script, for testing the
//! pretraining stop rules.

use std::sync::{Arc, Mutex};

use evaug_core::backends::{BackendResult, Generation, GeneratorBackend, GeneratorExample, GeneratorTrainParams, PolicyBackend};
use evaug_core::event_model::{toy_schema, AnnotatedSentence, EventRecord, Span};
use evaug_core::generation_training::{GenLossReport, TokenProbMatrix, Vocab};
use evaug_core::orchestrator::pipeline::generator_vocab;
use evaug_core::orchestrator::pretrain::split_holdout;
use evaug_core::orchestrator::{RunConfig, RunData};
use evaug_core::policy::{Action, BatchPurpose, PolicyBatch, PolicyExample};
use evaug_core::serialization::{build_policy_input, GenerationInput, PolicyInput};

/// Ten sentences with one single-token trigger each, so coverage is k/10.
pub fn ten_sources() -> RunData {
    let train: Vec<AnnotatedSentence> = (0..10)
        .map(|i| {
            let trig = format!("moved{i}");
            AnnotatedSentence {
                id: format!("s{i}"),
                context: format!("cargo {trig} today"),
                records: vec![EventRecord {
                    event_type: "Movement:Transport".into(),
                    trigger: Span::new(trig.clone(), 6, 6 + trig.len()),
                    arguments: Vec::new(),
                }],
                relations: Vec::new(),
            }
        })
        .collect();
    RunData {
        schema: toy_schema(),
        dev: train[..2].to_vec(),
        train,
    }
}

/// Coverage follows a script indexed by the number of train calls.
pub struct ScriptedCoverage {
    pub vocab: Arc<Vocab>,
    pub script: Vec<f64>,
    pub calls: usize,
}

impl GeneratorBackend for ScriptedCoverage {
    fn vocab(&self) -> Arc<Vocab> {
        self.vocab.clone()
    }
    fn generate(&self, input: &GenerationInput) -> BackendResult<Generation> {
        let idx: usize = input.source_id[1..].parse().unwrap();
        let level = self.script[self.calls.saturating_sub(1).min(self.script.len() - 1)];
        let text = if (idx as f64) < (level * 10.0).round() {
            input.target.clone()
        } else {
            "cargo stayed today".to_string()
        };
        let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        let rows = tokens
            .iter()
            .map(|t| {
                let mut r = vec![0.0; self.vocab.len()];
                r[self.vocab.id(t).unwrap()] = 1.0;
                r
            })
            .collect();
        Ok(Generation {
            text,
            probs: TokenProbMatrix::new(self.vocab.clone(), rows).unwrap(),
            tokens,
        })
    }
    fn train(&mut self, _: &[GeneratorExample], _: &GeneratorTrainParams) -> BackendResult<GenLossReport> {
        self.calls += 1;
        Ok(GenLossReport::default())
    }
    fn save_state(&self) -> BackendResult<Vec<u8>> {
        Ok(self.calls.to_string().into_bytes())
    }
    fn load_state(&mut self, state: &[u8]) -> BackendResult<()> {
        self.calls = std::str::from_utf8(state).unwrap().parse().unwrap();
        Ok(())
    }
}

pub fn scripted(script: &[f64]) -> ScriptedCoverage {
    ScriptedCoverage {
        vocab: Arc::new(generator_vocab(&ten_sources(), &["stayed"])),
        script: script.to_vec(),
        calls: 0,
    }
}

/// Held-out precision follows a script: all held-out positives are retained,
/// plus the first `script[e]` held-out negatives after `e` train calls.
pub struct ScriptedPrecision {
    pub held_negatives: Vec<String>,
    pub script: Vec<usize>,
    pub calls: usize,
    pub log: Arc<Mutex<Vec<usize>>>,
}

impl PolicyBackend for ScriptedPrecision {
    fn score(&self, input: &PolicyInput) -> BackendResult<f64> {
        if input.generated_text.starts_with("pos") {
            return Ok(0.9);
        }
        let r = self.script[self.calls.saturating_sub(1).min(self.script.len() - 1)];
        let retained = self.held_negatives[..r].contains(&input.generated_text);
        Ok(if retained { 0.9 } else { 0.1 })
    }
    fn train_supervised(&mut self, _: &PolicyBatch) -> BackendResult<f64> {
        self.calls += 1;
        Ok(1.0 / self.calls as f64)
    }
    fn train_reinforce(&mut self, _: &PolicyBatch, _: &PolicyBatch, _: f64) -> BackendResult<f64> {
        unreachable!("not used in pretraining")
    }
    fn save_state(&self) -> BackendResult<Vec<u8>> {
        Ok(self.calls.to_string().into_bytes())
    }
    fn load_state(&mut self, state: &[u8]) -> BackendResult<()> {
        self.calls = std::str::from_utf8(state).unwrap().parse().unwrap();
        self.log.lock().unwrap().push(self.calls);
        Ok(())
    }
}

pub fn labelled_batch(pos: usize, neg: usize) -> PolicyBatch {
    let item = |label: Action, text: String| PolicyExample {
        sample_id: text.clone(),
        input: build_policy_input("Movement:Transport moved", &text).unwrap(),
        label,
    };
    let mut items: Vec<PolicyExample> = (0..pos).map(|i| item(Action::Retain, format!("pos {i}"))).collect();
    items.extend((0..neg).map(|i| item(Action::Remove, format!("neg {i}"))));
    PolicyBatch::new(items, BatchPurpose::Pretrain)
}

pub fn scripted_policy(cfg: &RunConfig, batch: &PolicyBatch, script: &[usize]) -> ScriptedPrecision {
    let (_, held) = split_holdout(cfg, batch).unwrap();
    ScriptedPrecision {
        held_negatives: held
            .items
            .iter()
            .filter(|e| e.label == Action::Remove)
            .map(|e| e.input.generated_text.clone())
            .collect(),
        script: script.to_vec(),
        calls: 0,
        log: Arc::default(),
    }
}

pub fn half_holdout() -> RunConfig {
    let mut cfg = super::toy_config();
    cfg.schedule.policy_holdout_fraction = 0.5;
    cfg
}

