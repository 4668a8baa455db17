//! Rule-based policies.
//!
//! [`CoverageRulePolicy`] judges a pair covered when the generated text holds
//! every element named by its description, then answers with one of two
//! trainable levels `σ(a)` (covered) and `σ(b)` (not covered). An optional
//! keyed flip rate inverts the judgement on a fixed subset of inputs so
//! precision can sit below 1.

use serde::{Deserialize, Serialize};

use super::{from_state, to_state, BackendResult, PolicyBackend};
use crate::error::BackendError;
use crate::generation_training::clamped_ln;
use crate::policy::{Action, PolicyBatch};
use crate::rng::keyed_uniform;
use crate::serialization::{contains_phrase, parse_event_description, PolicyInput};

const NAME: &str = "coverage-rule-policy";

/// Always returns the same retain probability; training is a no-op.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPolicy(pub f64);

impl PolicyBackend for FixedPolicy {
    fn score(&self, _: &PolicyInput) -> BackendResult<f64> {
        Ok(self.0)
    }

    fn train_supervised(&mut self, batch: &PolicyBatch) -> BackendResult<f64> {
        let labels: Vec<Action> = batch.items.iter().map(|e| e.label).collect();
        let probs = vec![self.0; labels.len()];
        crate::policy::pretrain_loss(&labels, &probs).map_err(|e| BackendError::failed("fixed-policy", e.to_string()))
    }

    fn train_reinforce(&mut self, _: &PolicyBatch, _: &PolicyBatch, _: f64) -> BackendResult<f64> {
        Ok(0.0)
    }

    fn save_state(&self) -> BackendResult<Vec<u8>> {
        to_state(&self.0)
    }

    fn load_state(&mut self, state: &[u8]) -> BackendResult<()> {
        self.0 = from_state("fixed-policy", state)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageRuleConfig {
    pub covered_level: f64,
    pub uncovered_level: f64,
    pub flip_rate: f64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for CoverageRuleConfig {
    fn default() -> Self {
        CoverageRuleConfig {
            covered_level: 0.9,
            uncovered_level: 0.1,
            flip_rate: 0.0,
            learning_rate: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct Levels {
    covered_logit: f64,
    uncovered_logit: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone)]
pub struct CoverageRulePolicy {
    config: CoverageRuleConfig,
    levels: Levels,
}

impl CoverageRulePolicy {
    pub fn new(config: CoverageRuleConfig) -> BackendResult<Self> {
        for (name, p) in [("covered", config.covered_level), ("uncovered", config.uncovered_level)] {
            if !(p > 0.0 && p < 1.0) {
                return Err(BackendError::failed(NAME, format!("{name} level {p} must lie in (0, 1)")));
            }
        }
        if !(0.0..=1.0).contains(&config.flip_rate) {
            return Err(BackendError::failed(NAME, format!("flip rate {} outside [0, 1]", config.flip_rate)));
        }
        Ok(CoverageRulePolicy {
            config,
            levels: Levels {
                covered_logit: logit(config.covered_level),
                uncovered_logit: logit(config.uncovered_level),
            },
        })
    }

    pub fn covered_level(&self) -> f64 {
        sigmoid(self.levels.covered_logit)
    }

    pub fn uncovered_level(&self) -> f64 {
        sigmoid(self.levels.uncovered_logit)
    }

    /// Whether the rule (after any flip) treats the input as covered.
    pub fn judges_covered(&self, input: &PolicyInput) -> bool {
        let elements = parse_event_description(&input.event_description);
        let covered = !elements.is_empty() && elements.iter().all(|e| contains_phrase(&input.generated_text, e));
        let flip = self.config.flip_rate > 0.0
            && keyed_uniform(self.config.seed, &[input.rendered.as_bytes()]) < self.config.flip_rate;
        covered != flip
    }

    /// `(d/da, d/db)` of `Σ coeff·log p(action)` over the batch.
    fn log_prob_gradient(&self, batch: &PolicyBatch, coeff: f64) -> (f64, f64) {
        let mut ga = 0.0;
        let mut gb = 0.0;
        for item in &batch.items {
            let covered = self.judges_covered(&item.input);
            let p = if covered { self.covered_level() } else { self.uncovered_level() };
            // d log σ(z) = 1 − σ(z); d log(1 − σ(z)) = −σ(z)
            let d = match item.label {
                Action::Retain => 1.0 - p,
                Action::Remove => -p,
            };
            if covered {
                ga += coeff * d;
            } else {
                gb += coeff * d;
            }
        }
        (ga, gb)
    }

    fn log_probs(&self, batch: &PolicyBatch) -> BackendResult<f64> {
        let mut sum = 0.0;
        for item in &batch.items {
            sum += clamped_ln(item.label.probability(self.score(&item.input)?));
        }
        Ok(sum)
    }

    fn step(&mut self, grad: (f64, f64)) {
        self.levels.covered_logit -= self.config.learning_rate * grad.0;
        self.levels.uncovered_logit -= self.config.learning_rate * grad.1;
    }
}

impl PolicyBackend for CoverageRulePolicy {
    fn score(&self, input: &PolicyInput) -> BackendResult<f64> {
        Ok(if self.judges_covered(input) {
            self.covered_level()
        } else {
            self.uncovered_level()
        })
    }

    fn train_supervised(&mut self, batch: &PolicyBatch) -> BackendResult<f64> {
        if batch.is_empty() {
            return Err(BackendError::failed(NAME, "empty policy batch"));
        }
        let n = batch.items.len() as f64;
        let loss = -self.log_probs(batch)? / n;
        let grad = self.log_prob_gradient(batch, -1.0 / n);
        self.step(grad);
        Ok(loss)
    }

    fn train_reinforce(&mut self, new: &PolicyBatch, old: &PolicyBatch, reward: f64) -> BackendResult<f64> {
        if !reward.is_finite() {
            return Err(BackendError::failed(NAME, format!("reward {reward} is not finite")));
        }
        let loss = self.log_probs(new)? * reward - self.log_probs(old)? * reward;
        let (a1, b1) = self.log_prob_gradient(new, reward);
        let (a2, b2) = self.log_prob_gradient(old, -reward);
        self.step((a1 + a2, b1 + b2));
        Ok(loss)
    }

    fn save_state(&self) -> BackendResult<Vec<u8>> {
        to_state(&self.levels)
    }

    fn load_state(&mut self, state: &[u8]) -> BackendResult<()> {
        self.levels = from_state(NAME, state)?;
        Ok(())
    }
}
