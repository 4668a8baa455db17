//! Table-driven generator with closed-form probabilities.
//!
//! Visible tokens of the masked context are copied (one-hot rows). A masked
//! position `s` draws from `m·onehot(y_s) + (1 − m)·q`, where `y_s` is the
//! original token, `m` a per-source "mass" on the target and `q` a shared
//! noise distribution. Training shifts `m` toward 1 by
//! `min(1, step·w)·(1 − m)` per sample, so coverage rises with training.
//!
//! Each (source, position) has a fixed uniform used for inverse-CDF sampling
//! with the target token first, so a position that emits its target keeps
//! doing so as `m` grows. Coverage can still dip when a noise token that
//! happened to complete some phrase is replaced by its target.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{from_state, to_state, BackendResult, Generation, GeneratorBackend, GeneratorExample, GeneratorTrainParams};
use crate::error::BackendError;
use crate::generation_training::{
    align_sample, generation_loss, sample_loss, weighted_generation_loss, GenLossReport,
    TokenProbMatrix, Vocab, LOG_EPS,
};
use crate::rng::keyed_uniform;
use crate::serialization::{GenerationInput, MASK};

const NAME: &str = "table-generator";

/// Noise distribution used at masked positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Noise {
    /// `softmax(logits)` over the vocabulary.
    Logits { logits: Vec<f64> },
    /// All noise mass on one token.
    Token { token: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableGeneratorConfig {
    pub initial_mass: f64,
    /// Zero makes the table fixed.
    pub step: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TableState {
    masses: BTreeMap<String, f64>,
    noise: Noise,
    train_calls: usize,
}

#[derive(Debug, Clone)]
pub struct TableGenerator {
    vocab: Arc<Vocab>,
    config: TableGeneratorConfig,
    state: TableState,
}

/// How one row of a sample's matrix is produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RowKind {
    Copy(usize),
    Mixture { target: usize },
}

/// Inputs to the loss frozen at one generation: the argument-loss terms
/// depend on a discrete alignment, which gradients treat as constant.
#[derive(Debug, Clone)]
pub struct FrozenSample {
    pub source_id: String,
    pub rows: Vec<RowKind>,
    pub target: Vec<usize>,
    /// `(position, vocabulary index)` pairs of matched argument words.
    pub arg_terms: Vec<(usize, usize)>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorGradient {
    pub masses: BTreeMap<String, f64>,
    pub noise_logits: Vec<f64>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

impl TableGenerator {
    pub fn new(vocab: Arc<Vocab>, config: TableGeneratorConfig, noise: Noise) -> BackendResult<Self> {
        if vocab.is_empty() {
            return Err(BackendError::failed(NAME, "empty vocabulary"));
        }
        if !(0.0..=1.0).contains(&config.initial_mass) || config.step < 0.0 {
            return Err(BackendError::failed(
                NAME,
                format!("mass {} / step {} out of range", config.initial_mass, config.step),
            ));
        }
        match &noise {
            Noise::Logits { logits } if logits.len() != vocab.len() => {
                return Err(BackendError::failed(
                    NAME,
                    format!("{} noise logits for {} tokens", logits.len(), vocab.len()),
                ))
            }
            Noise::Token { token } if vocab.id(token).is_none() => {
                return Err(BackendError::failed(NAME, format!("noise token `{token}` not in vocabulary")))
            }
            _ => {}
        }
        Ok(TableGenerator {
            vocab,
            config,
            state: TableState {
                masses: BTreeMap::new(),
                noise,
                train_calls: 0,
            },
        })
    }

    /// Noise logits drawn uniformly from `[-1, 1)` keyed by the seed.
    pub fn seeded_noise(vocab: &Vocab, seed: u64) -> Noise {
        let logits = (0..vocab.len())
            .map(|i| 2.0 * keyed_uniform(seed, &[b"noise", &(i as u64).to_le_bytes()]) - 1.0)
            .collect();
        Noise::Logits { logits }
    }

    pub fn config(&self) -> &TableGeneratorConfig {
        &self.config
    }

    pub fn mass(&self, source_id: &str) -> f64 {
        self.state
            .masses
            .get(source_id)
            .copied()
            .unwrap_or(self.config.initial_mass)
    }

    pub fn set_mass(&mut self, source_id: &str, mass: f64) {
        self.state.masses.insert(source_id.to_string(), mass);
    }

    pub fn noise(&self) -> &Noise {
        &self.state.noise
    }

    pub fn noise_logits_mut(&mut self) -> Option<&mut Vec<f64>> {
        match &mut self.state.noise {
            Noise::Logits { logits } => Some(logits),
            Noise::Token { .. } => None,
        }
    }

    pub fn train_calls(&self) -> usize {
        self.state.train_calls
    }

    fn noise_probs(&self) -> Vec<f64> {
        match &self.state.noise {
            Noise::Logits { logits } => softmax(logits),
            Noise::Token { token } => {
                let mut q = vec![0.0; self.vocab.len()];
                q[self.vocab.id(token).expect("validated")] = 1.0;
                q
            }
        }
    }

    fn token_id(&self, token: &str, source: &str) -> BackendResult<usize> {
        self.vocab
            .id(token)
            .ok_or_else(|| BackendError::failed(NAME, format!("`{source}`: token `{token}` not in vocabulary")))
    }

    pub fn row_kinds(&self, input: &GenerationInput) -> BackendResult<Vec<RowKind>> {
        let masked: Vec<&str> = input.masked_context.split_whitespace().collect();
        let target: Vec<&str> = input.target.split_whitespace().collect();
        if masked.len() != target.len() {
            return Err(BackendError::failed(
                NAME,
                format!(
                    "`{}`: masked context has {} tokens, target {}",
                    input.source_id,
                    masked.len(),
                    target.len()
                ),
            ));
        }
        masked
            .iter()
            .zip(&target)
            .map(|(m, t)| {
                if *m == MASK {
                    Ok(RowKind::Mixture {
                        target: self.token_id(t, &input.source_id)?,
                    })
                } else {
                    Ok(RowKind::Copy(self.token_id(m, &input.source_id)?))
                }
            })
            .collect()
    }

    fn rows(&self, kinds: &[RowKind], mass: f64, q: &[f64]) -> Vec<Vec<f64>> {
        kinds
            .iter()
            .map(|k| match *k {
                RowKind::Copy(t) => {
                    let mut r = vec![0.0; self.vocab.len()];
                    r[t] = 1.0;
                    r
                }
                RowKind::Mixture { target } => {
                    let mut r: Vec<f64> = q.iter().map(|p| (1.0 - mass) * p).collect();
                    r[target] += mass;
                    r
                }
            })
            .collect()
    }

    /// Rows for `input` under the current parameters (teacher-forced and
    /// free-running rows coincide for this model).
    pub fn probs(&self, input: &GenerationInput) -> BackendResult<TokenProbMatrix> {
        let kinds = self.row_kinds(input)?;
        let rows = self.rows(&kinds, self.mass(&input.source_id), &self.noise_probs());
        TokenProbMatrix::new(self.vocab.clone(), rows).map_err(|e| BackendError::failed(NAME, e.to_string()))
    }

    /// The fixed uniform for `(source, position)`.
    pub fn position_uniform(&self, source_id: &str, position: usize) -> f64 {
        keyed_uniform(
            self.config.seed,
            &[source_id.as_bytes(), &(position as u64).to_le_bytes()],
        )
    }

    fn draw(&self, row: &[f64], first: usize, u: f64) -> usize {
        let mut cum = row[first];
        if u < cum {
            return first;
        }
        let mut last = first;
        for (v, p) in row.iter().enumerate() {
            if v == first || *p <= 0.0 {
                continue;
            }
            cum += p;
            last = v;
            if u < cum {
                return v;
            }
        }
        last
    }

    pub fn freeze(&self, example: &GeneratorExample) -> BackendResult<FrozenSample> {
        let gen = self.generate(&example.input)?;
        let kinds = self.row_kinds(&example.input)?;
        let target = kinds
            .iter()
            .map(|k| match *k {
                RowKind::Copy(t) | RowKind::Mixture { target: t } => t,
            })
            .collect();
        let alignment = align_sample(&example.records, &gen.text, &gen.probs);
        let mut arg_terms = Vec::new();
        for p in &alignment.assignment.placements {
            let e = &alignment.elements[p.element];
            for (j, k) in (p.window.start..=p.window.end).enumerate() {
                arg_terms.push((k, e.onehots[j]));
            }
        }
        Ok(FrozenSample {
            source_id: example.input.source_id.clone(),
            rows: kinds,
            target,
            arg_terms,
            weight: example.weight,
        })
    }

    fn prob_at(&self, kind: RowKind, token: usize, mass: f64, q: &[f64]) -> f64 {
        match kind {
            RowKind::Copy(t) => f64::from(u8::from(t == token)),
            RowKind::Mixture { target } => mass * f64::from(u8::from(target == token)) + (1.0 - mass) * q[token],
        }
    }

    /// Weighted generator loss over frozen samples under the current parameters.
    pub fn objective(&self, frozen: &[FrozenSample], beta: f64, gamma: f64) -> f64 {
        let q = self.noise_probs();
        let n = frozen.len() as f64;
        let mut total = 0.0;
        for f in frozen {
            let m = self.mass(&f.source_id);
            let lp = |s: usize, t: usize| self.prob_at(f.rows[s], t, m, &q).max(LOG_EPS).ln();
            let lm: f64 = f.target.iter().enumerate().map(|(s, &t)| lp(s, t)).sum();
            let arg: f64 = f.arg_terms.iter().map(|&(k, t)| lp(k, t)).sum();
            total += f.weight * (beta * lm + gamma * arg);
        }
        -total / n
    }

    /// Analytic gradient of [`TableGenerator::objective`] with respect to
    /// each sample's mass and the noise logits.
    pub fn objective_gradient(&self, frozen: &[FrozenSample], beta: f64, gamma: f64) -> GeneratorGradient {
        let q = self.noise_probs();
        let v = self.vocab.len();
        let n = frozen.len() as f64;
        let logits = matches!(self.state.noise, Noise::Logits { .. });
        let mut masses: BTreeMap<String, f64> = BTreeMap::new();
        let mut noise = vec![0.0; v];
        for f in frozen {
            let m = self.mass(&f.source_id);
            let mut dm = 0.0;
            let mut term = |s: usize, token: usize, coeff: f64| {
                let RowKind::Mixture { target } = f.rows[s] else {
                    return;
                };
                let p = self.prob_at(f.rows[s], token, m, &q);
                if p < LOG_EPS {
                    return;
                }
                let hot = f64::from(u8::from(target == token));
                dm += coeff * (hot - q[token]) / p;
                if logits {
                    // d q_w / d eta_j = q_w (delta_wj - q_j)
                    let scale = coeff * (1.0 - m) * q[token] / p;
                    for (j, g) in noise.iter_mut().enumerate() {
                        let delta = f64::from(u8::from(j == token));
                        *g += scale * (delta - q[j]);
                    }
                }
            };
            let lm_coeff = -f.weight * beta / n;
            for (s, &t) in f.target.iter().enumerate() {
                term(s, t, lm_coeff);
            }
            let arg_coeff = -f.weight * gamma / n;
            for &(k, t) in &f.arg_terms {
                term(k, t, arg_coeff);
            }
            *masses.entry(f.source_id.clone()).or_default() += dm;
        }
        GeneratorGradient {
            masses,
            noise_logits: if logits { noise } else { Vec::new() },
        }
    }
}

impl GeneratorBackend for TableGenerator {
    fn vocab(&self) -> Arc<Vocab> {
        self.vocab.clone()
    }

    fn generate(&self, input: &GenerationInput) -> BackendResult<Generation> {
        let kinds = self.row_kinds(input)?;
        let probs = self.probs(input)?;
        let tokens: Vec<String> = kinds
            .iter()
            .enumerate()
            .map(|(s, k)| {
                let id = match *k {
                    RowKind::Copy(t) => t,
                    RowKind::Mixture { target } => {
                        self.draw(&probs.rows()[s], target, self.position_uniform(&input.source_id, s))
                    }
                };
                self.vocab.token(id).to_string()
            })
            .collect();
        Ok(Generation {
            text: tokens.join(" "),
            tokens,
            probs,
        })
    }

    fn train(&mut self, batch: &[GeneratorExample], params: &GeneratorTrainParams) -> BackendResult<GenLossReport> {
        if batch.is_empty() {
            return Err(BackendError::failed(NAME, "empty training batch"));
        }
        let mut samples = Vec::with_capacity(batch.len());
        let mut weights = Vec::with_capacity(batch.len());
        let mut clamped = 0;
        let mut unencodable = 0;
        for ex in batch {
            let gen = self.generate(&ex.input)?;
            let kinds = self.row_kinds(&ex.input)?;
            let target: Vec<usize> = kinds
                .iter()
                .map(|k| match *k {
                    RowKind::Copy(t) | RowKind::Mixture { target: t } => t,
                })
                .collect();
            let alignment = align_sample(&ex.records, &gen.text, &gen.probs);
            let (loss, c) = sample_loss(&gen.probs, &target, &gen.probs, &alignment)
                .map_err(|e| BackendError::failed(NAME, e.to_string()))?;
            clamped += c;
            unencodable += alignment.unencodable.len();
            samples.push(loss);
            weights.push(ex.weight);
        }
        let loss = generation_loss(&samples, params.beta, params.gamma)
            .map_err(|e| BackendError::failed(NAME, e.to_string()))?;
        let weighted = weighted_generation_loss(&samples, &weights, params.beta, params.gamma)
            .map_err(|e| BackendError::failed(NAME, e.to_string()))?;
        for ex in batch {
            let m = self.mass(&ex.input.source_id);
            let shift = (self.config.step * ex.weight).min(1.0);
            self.set_mass(&ex.input.source_id, m + shift * (1.0 - m));
        }
        self.state.train_calls += 1;
        Ok(GenLossReport {
            samples,
            loss,
            weighted_loss: Some(weighted),
            beta: params.beta,
            gamma: params.gamma,
            clamped,
            unencodable,
        })
    }

    fn save_state(&self) -> BackendResult<Vec<u8>> {
        to_state(&self.state)
    }

    fn load_state(&mut self, state: &[u8]) -> BackendResult<()> {
        self.state = from_state(NAME, state)?;
        Ok(())
    }
}

/// Closed-form mass after `k` unit-weight training calls.
pub fn mass_after(initial: f64, step: f64, k: usize) -> f64 {
    1.0 - (1.0 - initial) * (1.0 - step.min(1.0)).powi(k as i32)
}
