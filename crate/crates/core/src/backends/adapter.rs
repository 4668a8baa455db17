//! Exchange format for attaching external models.
//!
//! One JSON object per line in each direction. A request is
//! `{"op": <op>, "payload": ...}`; a response is `{"ok": true, "result": ...}`
//! or `{"ok": false, "error": "..."}`.
//!
//! | op           | payload                          | result                                   |
//! |--------------|----------------------------------|------------------------------------------|
//! | `generate`   | [`GenerationInput`]              | [`GenerateResult`]                       |
//! | `extract`    | [`ExtractionInput`]              | `{"answer": str}`                        |
//! | `score`      | [`PolicyInput`]                  | `{"retain_probability": f64}`            |
//! | `token_prob` | `{"tokens": [str], "position"}`  | `{"probability": f64}`                   |
//! | `train`      | [`TrainPayload`]                 | [`TrainResult`]                          |
//! | `save`/`load`| `{"path": str}`                  | `{}`                                     |
//!
//! Generation rows are either dense over the caller's vocabulary or sparse:
//! the top tokens with their probabilities plus a tail mass spread evenly
//! over every other token.

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::conformance::check_rows;
use super::{
    BackendResult, ExtractorBackend, ExtractorExample, ExtractorTrainParams, Generation, GeneratorBackend,
    GeneratorExample, GeneratorTrainParams, MaskedLmBackend, PolicyBackend,
};
use crate::error::BackendError;
use crate::event_model::EventSchema;
use crate::generation_training::{GenLossReport, TokenProbMatrix, Vocab, ROW_SUM_TOL};
use crate::policy::PolicyBatch;
use crate::serialization::{build_extraction_input, fill_template, ExtractionInput, GenerationInput, PolicyInput, INSTANCE_SEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Generate,
    Extract,
    Score,
    Train,
    TokenProb,
    Save,
    Load,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub op: Op,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Response {
    pub fn success(result: Value) -> Self {
        Response {
            ok: true,
            result: Some(result),
            error: None,
        }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        Response {
            ok: false,
            result: None,
            error: Some(message.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseRow {
    pub top: Vec<(String, f64)>,
    pub tail: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResult {
    pub text: String,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparse_rows: Option<Vec<SparseRow>>,
}

/// A training pair as text, with its sample weight and the element strings
/// the argument-aware term should place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedPair {
    pub source: String,
    pub target: String,
    pub weight: f64,
    #[serde(default)]
    pub elements: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelledText {
    pub input: String,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum TrainPayload {
    Generator {
        examples: Vec<WeightedPair>,
        beta: f64,
        gamma: f64,
    },
    Extractor {
        examples: Vec<WeightedPair>,
        epochs: usize,
        negative_ratio: f64,
    },
    PolicySupervised {
        examples: Vec<LabelledText>,
    },
    PolicyReinforce {
        new: Vec<LabelledText>,
        old: Vec<LabelledText>,
        reward: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub loss: f64,
    #[serde(default)]
    pub weighted_loss: Option<f64>,
    #[serde(default)]
    pub losses: Vec<f64>,
}

/// Carries one request to a plugin and returns its result value.
pub trait Transport: Send + Sync {
    fn call(&self, request: &Request) -> BackendResult<Value>;
}

fn brief(value: &Value) -> String {
    let s = value.to_string();
    if s.chars().count() > 200 {
        format!("{}...", s.chars().take(200).collect::<String>())
    } else {
        s
    }
}

fn unwrap_response(request: &Request, response: Response) -> BackendResult<Value> {
    let ctx = || format!("{:?} {}", request.op, brief(&request.payload));
    match response {
        Response { ok: true, result: Some(v), .. } => Ok(v),
        Response { ok: true, result: None, .. } => Ok(Value::Object(Default::default())),
        Response { ok: false, error, .. } => Err(BackendError::Protocol(format!(
            "plugin failed on {}: {}",
            ctx(),
            error.unwrap_or_else(|| "no error message".into())
        ))),
    }
}

/// Runs a handler in the caller's process.
pub struct InProcessTransport {
    handler: Box<dyn Fn(&Request) -> Response + Send + Sync>,
}

impl InProcessTransport {
    pub fn new(handler: impl Fn(&Request) -> Response + Send + Sync + 'static) -> Self {
        InProcessTransport {
            handler: Box::new(handler),
        }
    }
}

impl Transport for InProcessTransport {
    fn call(&self, request: &Request) -> BackendResult<Value> {
        unwrap_response(request, (self.handler)(request))
    }
}

/// Talks to a child process over its stdin/stdout.
pub struct ProcessTransport {
    command: String,
    child: Mutex<Child>,
    io: Mutex<(ChildStdin, BufReader<ChildStdout>)>,
}

impl ProcessTransport {
    pub fn spawn(program: impl Into<PathBuf>, args: &[String]) -> BackendResult<Self> {
        let program = program.into();
        let mut child = Command::new(&program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BackendError::Protocol(format!("cannot start plugin `{}`: {e}", program.display())))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(ProcessTransport {
            command: program.display().to_string(),
            child: Mutex::new(child),
            io: Mutex::new((stdin, stdout)),
        })
    }
}

impl Transport for ProcessTransport {
    fn call(&self, request: &Request) -> BackendResult<Value> {
        let mut io = self.io.lock().unwrap_or_else(|p| p.into_inner());
        let (stdin, stdout) = &mut *io;
        let mut line = serde_json::to_string(request).map_err(|e| BackendError::Protocol(e.to_string()))?;
        line.push('\n');
        stdin.write_all(line.as_bytes())?;
        stdin.flush()?;
        let mut reply = String::new();
        if stdout.read_line(&mut reply)? == 0 {
            return Err(BackendError::Protocol(format!(
                "plugin `{}` closed its output during {:?} {}",
                self.command,
                request.op,
                brief(&request.payload)
            )));
        }
        let response: Response = serde_json::from_str(&reply).map_err(|e| {
            BackendError::Protocol(format!(
                "malformed response to {:?} {}: {e}: `{}`",
                request.op,
                brief(&request.payload),
                reply.trim_end()
            ))
        })?;
        unwrap_response(request, response)
    }
}

impl Drop for ProcessTransport {
    fn drop(&mut self) {
        if let Ok(mut child) = self.child.lock() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

fn call_as<T: serde::de::DeserializeOwned>(transport: &dyn Transport, op: Op, payload: Value) -> BackendResult<T> {
    let request = Request { op, payload };
    let value = transport.call(&request)?;
    serde_json::from_value(value.clone()).map_err(|e| {
        BackendError::Protocol(format!(
            "unexpected result for {:?} {}: {e}: {}",
            op,
            brief(&request.payload),
            brief(&value)
        ))
    })
}

fn to_value<T: Serialize>(v: &T) -> BackendResult<Value> {
    serde_json::to_value(v).map_err(|e| BackendError::Protocol(e.to_string()))
}

/// Expand sparse rows over `vocab`; the tail is shared evenly by tokens not
/// listed in `top`, and the row is renormalized.
pub fn densify(vocab: &Vocab, row: &SparseRow, index: usize) -> BackendResult<Vec<f64>> {
    let listed: f64 = row.top.iter().map(|(_, p)| p).sum::<f64>() + row.tail;
    if (listed - 1.0).abs() > ROW_SUM_TOL {
        return Err(BackendError::Protocol(format!("sparse row {index} sums to {listed}")));
    }
    let mut dense = vec![0.0; vocab.len()];
    let mut named = vec![false; vocab.len()];
    for (token, p) in &row.top {
        let id = vocab
            .id(token)
            .ok_or_else(|| BackendError::Protocol(format!("sparse row {index}: token `{token}` not in vocabulary")))?;
        dense[id] += p;
        named[id] = true;
    }
    let rest = named.iter().filter(|n| !**n).count();
    if rest > 0 {
        let share = row.tail / rest as f64;
        for (d, n) in dense.iter_mut().zip(&named) {
            if !n {
                *d = share;
            }
        }
    }
    let sum: f64 = dense.iter().sum();
    if sum > 0.0 {
        dense.iter_mut().for_each(|d| *d /= sum);
    }
    Ok(dense)
}

static STATE_COUNTER: AtomicU64 = AtomicU64::new(0);

fn scratch_path() -> PathBuf {
    let n = STATE_COUNTER.fetch_add(1, Ordering::Relaxed);
    std::env::temp_dir().join(format!("evaug-plugin-{}-{n}.state", std::process::id()))
}

fn save_via(transport: &dyn Transport) -> BackendResult<Vec<u8>> {
    let path = scratch_path();
    let _: Value = call_as(transport, Op::Save, json!({ "path": path }))?;
    let bytes = std::fs::read(&path)?;
    let _ = std::fs::remove_file(&path);
    Ok(bytes)
}

fn load_via(transport: &dyn Transport, state: &[u8]) -> BackendResult<()> {
    let path = scratch_path();
    std::fs::write(&path, state)?;
    let result: BackendResult<Value> = call_as(transport, Op::Load, json!({ "path": path }));
    let _ = std::fs::remove_file(&path);
    result.map(|_| ())
}

pub struct AdapterGenerator {
    transport: Arc<dyn Transport>,
    vocab: Arc<Vocab>,
}

impl AdapterGenerator {
    pub fn new(transport: Arc<dyn Transport>, vocab: Arc<Vocab>) -> Self {
        AdapterGenerator { transport, vocab }
    }
}

impl GeneratorBackend for AdapterGenerator {
    fn vocab(&self) -> Arc<Vocab> {
        self.vocab.clone()
    }

    fn generate(&self, input: &GenerationInput) -> BackendResult<Generation> {
        let result: GenerateResult = call_as(&*self.transport, Op::Generate, to_value(input)?)?;
        let rows = match (result.rows, result.sparse_rows) {
            (Some(rows), None) => rows,
            (None, Some(sparse)) => sparse
                .iter()
                .enumerate()
                .map(|(i, r)| densify(&self.vocab, r, i))
                .collect::<BackendResult<_>>()?,
            _ => {
                return Err(BackendError::Protocol(format!(
                    "generate `{}`: exactly one of `rows` and `sparse_rows` is required",
                    input.source_id
                )))
            }
        };
        check_rows(&self.vocab, &result.tokens, &rows)
            .map_err(|v| BackendError::Protocol(format!("generate `{}`: {v}", input.source_id)))?;
        let probs = TokenProbMatrix::new(self.vocab.clone(), rows).map_err(|e| BackendError::Protocol(e.to_string()))?;
        Ok(Generation {
            text: result.text,
            tokens: result.tokens,
            probs,
        })
    }

    fn train(&mut self, batch: &[GeneratorExample], params: &GeneratorTrainParams) -> BackendResult<GenLossReport> {
        let examples = batch
            .iter()
            .map(|ex| WeightedPair {
                source: ex.input.rendered.clone(),
                target: ex.input.target.clone(),
                weight: ex.weight,
                elements: ex
                    .records
                    .iter()
                    .flat_map(|r| r.element_texts().map(str::to_string))
                    .collect(),
            })
            .collect();
        let payload = TrainPayload::Generator {
            examples,
            beta: params.beta,
            gamma: params.gamma,
        };
        let result: TrainResult = call_as(&*self.transport, Op::Train, to_value(&payload)?)?;
        Ok(GenLossReport {
            loss: result.loss,
            weighted_loss: result.weighted_loss,
            beta: params.beta,
            gamma: params.gamma,
            ..Default::default()
        })
    }

    fn save_state(&self) -> BackendResult<Vec<u8>> {
        save_via(&*self.transport)
    }

    fn load_state(&mut self, state: &[u8]) -> BackendResult<()> {
        load_via(&*self.transport, state)
    }
}

pub struct AdapterExtractor {
    transport: Arc<dyn Transport>,
    schema: EventSchema,
}

impl AdapterExtractor {
    pub fn new(transport: Arc<dyn Transport>, schema: EventSchema) -> Self {
        AdapterExtractor { transport, schema }
    }
}

#[derive(Deserialize)]
struct Answer {
    answer: String,
}

impl ExtractorBackend for AdapterExtractor {
    fn extract(&self, input: &ExtractionInput) -> BackendResult<String> {
        let a: Answer = call_as(&*self.transport, Op::Extract, to_value(input)?)?;
        Ok(a.answer)
    }

    fn train(&mut self, batch: &[ExtractorExample], params: &ExtractorTrainParams) -> BackendResult<Vec<f64>> {
        let mut examples = Vec::new();
        for ex in batch {
            for event_type in self.schema.event_types() {
                let records: Vec<_> = ex.sentence.records.iter().filter(|r| r.event_type == event_type).collect();
                if records.is_empty() {
                    continue;
                }
                let input = build_extraction_input(&self.schema, event_type, &ex.sentence.context)
                    .map_err(|e| BackendError::failed("adapter-extractor", e.to_string()))?;
                let target = records
                    .iter()
                    .map(|r| fill_template(&self.schema, r))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| BackendError::failed("adapter-extractor", e.to_string()))?
                    .join(INSTANCE_SEP);
                examples.push(WeightedPair {
                    source: input.rendered,
                    target,
                    weight: 1.0,
                    elements: Vec::new(),
                });
            }
        }
        let payload = TrainPayload::Extractor {
            examples,
            epochs: params.epochs,
            negative_ratio: params.negative_ratio,
        };
        let result: TrainResult = call_as(&*self.transport, Op::Train, to_value(&payload)?)?;
        Ok(result.losses)
    }

    fn save_state(&self) -> BackendResult<Vec<u8>> {
        save_via(&*self.transport)
    }

    fn load_state(&mut self, state: &[u8]) -> BackendResult<()> {
        load_via(&*self.transport, state)
    }
}

pub struct AdapterPolicy {
    transport: Arc<dyn Transport>,
}

impl AdapterPolicy {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        AdapterPolicy { transport }
    }
}

#[derive(Deserialize)]
struct Retain {
    retain_probability: f64,
}

fn labelled(batch: &PolicyBatch) -> Vec<LabelledText> {
    batch
        .items
        .iter()
        .map(|e| LabelledText {
            input: e.input.rendered.clone(),
            label: e.label.label(),
        })
        .collect()
}

impl PolicyBackend for AdapterPolicy {
    fn score(&self, input: &PolicyInput) -> BackendResult<f64> {
        let r: Retain = call_as(&*self.transport, Op::Score, to_value(input)?)?;
        if !(0.0..=1.0).contains(&r.retain_probability) {
            return Err(BackendError::Protocol(format!(
                "score `{}`: probability {} outside [0, 1]",
                input.rendered, r.retain_probability
            )));
        }
        Ok(r.retain_probability)
    }

    fn train_supervised(&mut self, batch: &PolicyBatch) -> BackendResult<f64> {
        let payload = TrainPayload::PolicySupervised { examples: labelled(batch) };
        let r: TrainResult = call_as(&*self.transport, Op::Train, to_value(&payload)?)?;
        Ok(r.loss)
    }

    fn train_reinforce(&mut self, new: &PolicyBatch, old: &PolicyBatch, reward: f64) -> BackendResult<f64> {
        let payload = TrainPayload::PolicyReinforce {
            new: labelled(new),
            old: labelled(old),
            reward,
        };
        let r: TrainResult = call_as(&*self.transport, Op::Train, to_value(&payload)?)?;
        Ok(r.loss)
    }

    fn save_state(&self) -> BackendResult<Vec<u8>> {
        save_via(&*self.transport)
    }

    fn load_state(&mut self, state: &[u8]) -> BackendResult<()> {
        load_via(&*self.transport, state)
    }
}

pub struct AdapterMaskedLm {
    transport: Arc<dyn Transport>,
}

impl AdapterMaskedLm {
    pub fn new(transport: Arc<dyn Transport>) -> Self {
        AdapterMaskedLm { transport }
    }
}

#[derive(Deserialize)]
struct Probability {
    probability: f64,
}

impl MaskedLmBackend for AdapterMaskedLm {
    fn token_prob(&self, tokens: &[String], position: usize) -> BackendResult<f64> {
        let p: Probability = call_as(
            &*self.transport,
            Op::TokenProb,
            json!({ "tokens": tokens, "position": position }),
        )?;
        Ok(p.probability)
    }
}
