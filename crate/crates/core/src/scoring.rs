//! Trigger/argument classification scores, the reward and the checkpoint rule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::event_model::{AnnotatedSentence, EventRecord};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl std::ops::Add for Counts {
    type Output = Counts;
    fn add(self, o: Counts) -> Counts {
        Counts {
            correct: self.correct + o.correct,
            predicted: self.predicted + o.predicted,
            gold: self.gold + o.gold,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
}

impl Prf {
    pub fn from_counts(counts: Counts) -> Self {
        let precision = if counts.predicted == 0 {
            0.0
        } else {
            counts.correct as f64 / counts.predicted as f64
        };
        let recall = if counts.gold == 0 {
            0.0
        } else {
            counts.correct as f64 / counts.gold as f64
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
            counts,
        }
    }
}

/// Size of the multiset intersection of two key lists.
fn matched<K: Ord>(pred: impl IntoIterator<Item = K>, gold: impl IntoIterator<Item = K>) -> usize {
    let mut pool: BTreeMap<K, usize> = BTreeMap::new();
    for k in gold {
        *pool.entry(k).or_default() += 1;
    }
    let mut hits = 0;
    for k in pred {
        if let Some(n) = pool.get_mut(&k) {
            if *n > 0 {
                *n -= 1;
                hits += 1;
            }
        }
    }
    hits
}

fn trigger_key(r: &EventRecord) -> (&str, usize, usize) {
    (r.event_type.as_str(), r.trigger.start, r.trigger.end)
}

fn argument_keys(r: &EventRecord) -> impl Iterator<Item = (&str, &str, usize, usize)> {
    r.arguments
        .iter()
        .map(move |a| (r.event_type.as_str(), a.role.as_str(), a.span.start, a.span.end))
}

pub fn trigger_counts(pred: &[EventRecord], gold: &[EventRecord]) -> Counts {
    Counts {
        correct: matched(pred.iter().map(trigger_key), gold.iter().map(trigger_key)),
        predicted: pred.len(),
        gold: gold.len(),
    }
}

pub fn argument_counts(pred: &[EventRecord], gold: &[EventRecord]) -> Counts {
    Counts {
        correct: matched(
            pred.iter().flat_map(argument_keys),
            gold.iter().flat_map(argument_keys),
        ),
        predicted: pred.iter().map(|r| r.arguments.len()).sum(),
        gold: gold.iter().map(|r| r.arguments.len()).sum(),
    }
}

/// Trig-C: event type and trigger offsets must match.
pub fn score_triggers(pred: &[EventRecord], gold: &[EventRecord]) -> Prf {
    Prf::from_counts(trigger_counts(pred, gold))
}

/// Arg-C: event type, role and argument offsets must match.
pub fn score_arguments(pred: &[EventRecord], gold: &[EventRecord]) -> Prf {
    Prf::from_counts(argument_counts(pred, gold))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub trigger: Prf,
    pub argument: Prf,
}

/// Corpus-level scores; sentences are paired by id, and a gold sentence with
/// no prediction counts as predicting nothing.
pub fn score_corpus(pred: &[AnnotatedSentence], gold: &[AnnotatedSentence]) -> ScoreReport {
    let by_id: BTreeMap<&str, &AnnotatedSentence> = pred.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut trig = Counts::default();
    let mut arg = Counts::default();
    let mut seen = std::collections::BTreeSet::new();
    for g in gold {
        seen.insert(g.id.as_str());
        let p: &[EventRecord] = by_id.get(g.id.as_str()).map_or(&[], |s| &s.records);
        trig = trig + trigger_counts(p, &g.records);
        arg = arg + argument_counts(p, &g.records);
    }
    for p in pred.iter().filter(|p| !seen.contains(p.id.as_str())) {
        trig = trig + trigger_counts(&p.records, &[]);
        arg = arg + argument_counts(&p.records, &[]);
    }
    ScoreReport {
        trigger: Prf::from_counts(trig),
        argument: Prf::from_counts(arg),
    }
}

/// `α (F_i − F_{i−1})`.
pub fn reward(f1: f64, prev_f1: f64, alpha: f64) -> f64 {
    alpha * (f1 - prev_f1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub epoch: usize,
    pub f1: f64,
    pub prev_f1: f64,
    pub alpha: f64,
    pub reward: f64,
}

impl RewardRecord {
    pub fn new(epoch: usize, f1: f64, prev_f1: f64, alpha: f64) -> Self {
        RewardRecord {
            epoch,
            f1,
            prev_f1,
            alpha,
            reward: reward(f1, prev_f1, alpha),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointDecision {
    pub update: bool,
    pub best_trigger_f1: f64,
    pub best_argument_f1: f64,
}

/// Save when either F1 strictly beats its best; bests never decrease.
pub fn should_update_checkpoint(trigger_f1: f64, argument_f1: f64, best_trigger: f64, best_argument: f64) -> CheckpointDecision {
    let update = trigger_f1 > best_trigger || argument_f1 > best_argument;
    if update {
        CheckpointDecision {
            update,
            best_trigger_f1: best_trigger.max(trigger_f1),
            best_argument_f1: best_argument.max(argument_f1),
        }
    } else {
        CheckpointDecision {
            update,
            best_trigger_f1: best_trigger,
            best_argument_f1: best_argument,
        }
    }
}
