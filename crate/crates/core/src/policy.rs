//! The filtering agent: action selection, episode set algebra and the
//! policy losses, plus the removal weights handed to generator retraining.
//!
//! Sample identity across epochs is the source sentence id, since the text
//! generated for a sentence changes every epoch.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backends::PolicyBackend;
use crate::error::{BackendError, Error, Result};
use crate::generation_training::clamped_ln;
use crate::serialization::{build_policy_input, PolicyInput};

pub type SampleId = String;
pub type IdSet = BTreeSet<SampleId>;

/// Threshold on the retain probability for greedy decisions.
pub const GREEDY_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Retain,
    Remove,
}

impl Action {
    /// Class label: retain is 1, remove is 0.
    pub fn label(self) -> u8 {
        match self {
            Action::Retain => 1,
            Action::Remove => 0,
        }
    }

    /// Probability of this action given the retain probability.
    pub fn probability(self, retain_probability: f64) -> f64 {
        match self {
            Action::Retain => retain_probability,
            Action::Remove => 1.0 - retain_probability,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionMode {
    Sampled,
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDecision {
    pub sample_id: SampleId,
    pub retain_probability: f64,
    pub action: Action,
    pub mode: DecisionMode,
}

/// Score each input and pick an action. Sampled mode draws one uniform per
/// input, in order, from `rng`.
pub fn decide<R: Rng + ?Sized>(
    backend: &dyn PolicyBackend,
    inputs: &[(SampleId, PolicyInput)],
    mode: DecisionMode,
    rng: &mut R,
) -> Result<Vec<PolicyDecision>> {
    let mut out = Vec::with_capacity(inputs.len());
    for (id, input) in inputs {
        let p = backend.score(input).map_err(|e| match e {
            BackendError::Failed { backend, message } => BackendError::Failed {
                backend,
                message: format!("sample `{id}`: {message}"),
            },
            other => other,
        })?;
        if !(0.0..=1.0).contains(&p) {
            return Err(BackendError::Protocol(format!("sample `{id}`: retain probability {p} outside [0, 1]")).into());
        }
        let action = match mode {
            DecisionMode::Greedy => {
                if p >= GREEDY_THRESHOLD {
                    Action::Retain
                } else {
                    Action::Remove
                }
            }
            DecisionMode::Sampled => {
                let u: f64 = rng.gen();
                if u < p {
                    Action::Retain
                } else {
                    Action::Remove
                }
            }
        };
        out.push(PolicyDecision {
            sample_id: id.clone(),
            retain_probability: p,
            action,
            mode,
        });
    }
    Ok(out)
}

/// Split decisions into (retained, removed) id sets. `instance_ids` must name
/// exactly the decided samples.
pub fn partition(decisions: &[PolicyDecision], instance_ids: &[SampleId]) -> Result<(IdSet, IdSet)> {
    let decided: BTreeSet<&str> = decisions.iter().map(|d| d.sample_id.as_str()).collect();
    let expected: BTreeSet<&str> = instance_ids.iter().map(String::as_str).collect();
    if decided.len() != decisions.len() || expected.len() != instance_ids.len() || decided != expected {
        let missing: Vec<_> = expected.difference(&decided).take(3).collect();
        let extra: Vec<_> = decided.difference(&expected).take(3).collect();
        return Err(Error::InvalidInput(format!(
            "decisions do not match instances (missing {missing:?}, unexpected {extra:?}, {} decisions for {} instances)",
            decisions.len(),
            instance_ids.len()
        )));
    }
    let mut retained = IdSet::new();
    let mut removed = IdSet::new();
    for d in decisions {
        match d.action {
            Action::Retain => retained.insert(d.sample_id.clone()),
            Action::Remove => removed.insert(d.sample_id.clone()),
        };
    }
    Ok((retained, removed))
}

/// `(N_{i-1} \ N_i, N_i \ N_{i-1})`: samples that left and entered the removed set.
pub fn episode_diff(prev_negatives: &IdSet, curr_negatives: &IdSet) -> (IdSet, IdSet) {
    let common: IdSet = prev_negatives.intersection(curr_negatives).cloned().collect();
    let old = prev_negatives.difference(&common).cloned().collect();
    let new = curr_negatives.difference(&common).cloned().collect();
    (old, new)
}

fn subsample<R: Rng + ?Sized>(set: &IdSet, c: usize, rng: &mut R) -> IdSet {
    if c >= set.len() {
        return set.clone();
    }
    let items: Vec<&SampleId> = set.iter().collect();
    sample(rng, items.len(), c).into_iter().map(|i| items[i].clone()).collect()
}

/// Uniform subsets of size `min(c, |set|)`, the older diff drawn first.
pub fn subsample_diffs<R: Rng + ?Sized>(old: &IdSet, new: &IdSet, c: usize, rng: &mut R) -> (IdSet, IdSet) {
    let a = subsample(old, c, rng);
    let b = subsample(new, c, rng);
    (a, b)
}

/// One labelled policy example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyExample {
    pub sample_id: SampleId,
    pub input: PolicyInput,
    pub label: Action,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchPurpose {
    Pretrain,
    RetrainNew,
    RetrainOld,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyBatch {
    pub items: Vec<PolicyExample>,
    pub purpose: BatchPurpose,
}

impl PolicyBatch {
    pub fn new(items: Vec<PolicyExample>, purpose: BatchPurpose) -> Self {
        PolicyBatch { items, purpose }
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.items.iter().filter(|e| e.label == Action::Retain).count();
        (pos, self.items.len() - pos)
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// `−(1/N) Σ log p(y_n)`, where `p(y_n)` is the probability of the gold class.
pub fn pretrain_loss(labels: &[Action], retain_probs: &[f64]) -> Result<f64> {
    if labels.len() != retain_probs.len() {
        return Err(Error::InvalidInput(format!(
            "{} labels for {} probabilities",
            labels.len(),
            retain_probs.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("policy loss over an empty batch".into()));
    }
    let n = labels.len() as f64;
    let sum: f64 = labels
        .iter()
        .zip(retain_probs)
        .map(|(y, p)| clamped_ln(y.probability(*p)))
        .sum();
    Ok(-sum / n)
}

/// Reward-weighted loss over the two diff sets, unnormalized:
/// `Σ_new log p(y)·R + Σ_old log p(y)·(−R)`. Each entry is `(action taken, retain probability)`.
pub fn retrain_loss(new: &[(Action, f64)], old: &[(Action, f64)], reward: f64) -> Result<f64> {
    if !reward.is_finite() {
        return Err(Error::InvalidInput(format!("reward {reward} is not finite")));
    }
    let term = |items: &[(Action, f64)]| -> f64 { items.iter().map(|(a, p)| clamped_ln(a.probability(*p))).sum() };
    Ok(term(new) * reward + term(old) * (-reward))
}

/// `1 − log p` for retain probability `p`; `p = 0` is clamped.
pub fn removal_weight(retain_probability: f64) -> f64 {
    1.0 - clamped_ln(retain_probability)
}

/// A generated sentence as the policy sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSample {
    pub sample_id: SampleId,
    pub event_description: String,
    pub generated_text: String,
    /// Whether every trigger and argument appears in the text.
    pub covered: bool,
}

/// Pretraining data: covered generations are positives, uncovered ones
/// negatives. With `balance`, extra negatives pair a random description with
/// a random corpus sentence from a different source until classes match.
pub fn build_pretrain_set<R: Rng + ?Sized>(
    generated: &[CandidateSample],
    corpus: &[(SampleId, String)],
    rng: &mut R,
    balance: bool,
) -> Result<PolicyBatch> {
    let mut items = Vec::new();
    for g in generated {
        items.push(PolicyExample {
            sample_id: g.sample_id.clone(),
            input: build_policy_input(&g.event_description, &g.generated_text)?,
            label: if g.covered { Action::Retain } else { Action::Remove },
        });
    }
    if balance {
        let positives = items.iter().filter(|e| e.label == Action::Retain).count();
        let mut negatives = items.len() - positives;
        let mut synthesized = 0usize;
        while negatives < positives {
            let g = &generated[rng.gen_range(0..generated.len())];
            let others: Vec<&(SampleId, String)> = corpus
                .iter()
                .filter(|(id, text)| id != &g.sample_id && !text.trim().is_empty())
                .collect();
            if others.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "cannot balance policy data: no unrelated sentence for `{}` ({positives} positives, {negatives} negatives)",
                    g.sample_id
                )));
            }
            let (other_id, text) = others[rng.gen_range(0..others.len())];
            items.push(PolicyExample {
                sample_id: format!("mismatch:{}:{}:{synthesized}", g.sample_id, other_id),
                input: build_policy_input(&g.event_description, text)?,
                label: Action::Remove,
            });
            synthesized += 1;
            negatives += 1;
        }
    }
    Ok(PolicyBatch::new(items, BatchPurpose::Pretrain))
}

/// RL bookkeeping carried from one epoch to the next.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeState {
    pub epoch: usize,
    pub generated: IdSet,
    pub positives: IdSet,
    pub negatives: IdSet,
    pub prev_negatives: IdSet,
    pub diff_old: IdSet,
    pub diff_new: IdSet,
    /// `(trigger F1, argument F1)` per epoch; index 0 is the pretrained model.
    pub f1_history: Vec<(f64, f64)>,
    pub best_trigger_f1: f64,
    pub best_argument_f1: f64,
}

impl EpisodeState {
    pub fn new(initial_trigger_f1: f64, initial_argument_f1: f64) -> Self {
        EpisodeState {
            f1_history: vec![(initial_trigger_f1, initial_argument_f1)],
            best_trigger_f1: initial_trigger_f1,
            best_argument_f1: initial_argument_f1,
            ..Default::default()
        }
    }

    /// Record this epoch's partition; the previous negatives roll over and
    /// the diffs are recomputed.
    pub fn advance(&mut self, epoch: usize, positives: IdSet, negatives: IdSet) {
        self.epoch = epoch;
        self.prev_negatives = std::mem::take(&mut self.negatives);
        self.generated = positives.union(&negatives).cloned().collect();
        self.positives = positives;
        self.negatives = negatives;
        let (old, new) = episode_diff(&self.prev_negatives, &self.negatives);
        self.diff_old = old;
        self.diff_new = new;
    }

    pub fn last_argument_f1(&self) -> f64 {
        self.f1_history.last().map_or(0.0, |f| f.1)
    }

    /// Partition and diff invariants hold.
    pub fn is_consistent(&self) -> bool {
        let (old, new) = episode_diff(&self.prev_negatives, &self.negatives);
        self.positives.is_disjoint(&self.negatives)
            && self.positives.union(&self.negatives).cloned().collect::<IdSet>() == self.generated
            && old == self.diff_old
            && new == self.diff_new
    }
}

/// Per-sample removal weights from the current policy.
pub fn removal_weights(
    backend: &dyn PolicyBackend,
    inputs: &[(SampleId, PolicyInput)],
) -> Result<BTreeMap<SampleId, f64>> {
    inputs
        .iter()
        .map(|(id, input)| {
            let p = backend.score(input)?;
            Ok((id.clone(), removal_weight(p)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::mock_policy::FixedPolicy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ids(xs: &[&str]) -> IdSet {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn inputs(n: usize) -> Vec<(SampleId, PolicyInput)> {
        (0..n)
            .map(|i| (format!("s{i}"), build_policy_input("d", &format!("g{i}")).unwrap()))
            .collect()
    }

    #[test]
    fn degenerate_bernoulli() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all = decide(&FixedPolicy(1.0), &inputs(20), DecisionMode::Sampled, &mut rng).unwrap();
        assert!(all.iter().all(|d| d.action == Action::Retain));
        let none = decide(&FixedPolicy(0.0), &inputs(20), DecisionMode::Sampled, &mut rng).unwrap();
        assert!(none.iter().all(|d| d.action == Action::Remove));
    }

    #[test]
    fn sampled_actions_replay_reference_stream() {
        let d = decide(&FixedPolicy(0.7), &inputs(10), DecisionMode::Sampled, &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        let mut replay = ChaCha8Rng::seed_from_u64(5);
        let expected: Vec<Action> = (0..10)
            .map(|_| if replay.gen::<f64>() < 0.7 { Action::Retain } else { Action::Remove })
            .collect();
        assert_eq!(d.iter().map(|d| d.action).collect::<Vec<_>>(), expected);
    }

    #[test]
    fn greedy_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = decide(&FixedPolicy(0.5), &inputs(1), DecisionMode::Greedy, &mut rng).unwrap();
        assert_eq!(d[0].action, Action::Retain);
        let d = decide(&FixedPolicy(0.49), &inputs(1), DecisionMode::Greedy, &mut rng).unwrap();
        assert_eq!(d[0].action, Action::Remove);
    }

    fn decision(id: &str, action: Action) -> PolicyDecision {
        PolicyDecision {
            sample_id: id.into(),
            retain_probability: 0.5,
            action,
            mode: DecisionMode::Sampled,
        }
    }

    #[test]
    fn partition_cases() {
        use Action::*;
        let all: Vec<SampleId> = ["a", "b", "c", "d", "e"].iter().map(|s| s.to_string()).collect();
        let mixed = [
            decision("a", Retain),
            decision("b", Remove),
            decision("c", Retain),
            decision("d", Remove),
            decision("e", Retain),
        ];
        let (p, n) = partition(&mixed, &all).unwrap();
        assert_eq!(p, ids(&["a", "c", "e"]));
        assert_eq!(n, ids(&["b", "d"]));
        let keep: Vec<_> = all.iter().map(|i| decision(i, Retain)).collect();
        assert!(partition(&keep, &all).unwrap().1.is_empty());
        let drop: Vec<_> = all.iter().map(|i| decision(i, Remove)).collect();
        assert!(partition(&drop, &all).unwrap().0.is_empty());
        assert!(partition(&mixed[..4], &all).is_err());
    }

    #[test]
    fn diff_examples() {
        assert_eq!(
            episode_diff(&ids(&["a", "b", "c"]), &ids(&["b", "c", "d"])),
            (ids(&["a"]), ids(&["d"]))
        );
        assert_eq!(episode_diff(&ids(&["a"]), &ids(&["a"])), (ids(&[]), ids(&[])));
        assert_eq!(
            episode_diff(&ids(&["a"]), &ids(&["b"])),
            (ids(&["a"]), ids(&["b"]))
        );
    }

    #[test]
    fn subsample_cases() {
        let five = ids(&["a", "b", "c", "d", "e"]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(subsample_diffs(&five, &five, 0, &mut rng), (ids(&[]), ids(&[])));
        assert_eq!(subsample_diffs(&five, &ids(&["x"]), 10, &mut rng), (five.clone(), ids(&["x"])));
        let (a, b) = subsample_diffs(&five, &IdSet::new(), 2, &mut ChaCha8Rng::seed_from_u64(9));
        let mut replay = ChaCha8Rng::seed_from_u64(9);
        let items: Vec<&str> = vec!["a", "b", "c", "d", "e"];
        let expected: IdSet = sample(&mut replay, 5, 2).into_iter().map(|i| items[i].to_string()).collect();
        assert_eq!(a, expected);
        assert_eq!(a.len(), 2);
        assert!(b.is_empty());
    }

    #[test]
    fn pretrain_loss_examples() {
        use Action::*;
        assert_eq!(pretrain_loss(&[Retain, Remove], &[1.0, 0.0]).unwrap(), 0.0);
        assert!((pretrain_loss(&[Retain], &[0.5]).unwrap() - 0.693_147_180_559_945_3).abs() < 1e-12);
        let two = pretrain_loss(&[Retain, Retain], &[0.5, 0.25]).unwrap();
        assert!((two - (0.693_147_180_559_945_3 + 1.386_294_361_119_890_6) / 2.0).abs() < 1e-12);
        // a negative example contributes the remove-class probability
        let neg = pretrain_loss(&[Remove], &[0.75]).unwrap();
        assert!((neg - 1.386_294_361_119_890_6).abs() < 1e-12);
    }

    #[test]
    fn retrain_loss_examples() {
        use Action::*;
        assert_eq!(retrain_loss(&[(Remove, 0.3)], &[(Remove, 0.6)], 0.0).unwrap(), 0.0);
        assert_eq!(retrain_loss(&[], &[], 3.0).unwrap(), 0.0);
        assert_eq!(retrain_loss(&[(Retain, 0.5)], &[(Retain, 0.5)], 2.0).unwrap(), 0.0);
        assert!(retrain_loss(&[], &[], f64::NAN).is_err());
    }

    #[test]
    fn removal_weight_examples() {
        assert_eq!(removal_weight(1.0), 1.0);
        assert!((removal_weight((-1.0f64).exp()) - 2.0).abs() < 1e-12);
        assert!((removal_weight(0.5) - 1.693_147_180_559_945_3).abs() < 1e-12);
        assert!(removal_weight(0.0).is_finite());
    }

    fn cand(id: &str, covered: bool) -> CandidateSample {
        CandidateSample {
            sample_id: id.into(),
            event_description: format!("desc {id}"),
            generated_text: format!("text {id}"),
            covered,
        }
    }

    #[test]
    fn pretrain_set_balancing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gen = [cand("a", true), cand("b", true)];
        let b = build_pretrain_set(&gen, &[], &mut rng, false).unwrap();
        assert_eq!(b.class_counts(), (2, 0));

        let gen = [cand("a", true), cand("b", true), cand("c", true), cand("d", false)];
        let corpus: Vec<(SampleId, String)> =
            ["a", "b", "c", "d"].iter().map(|i| (i.to_string(), format!("sentence {i}"))).collect();
        let b = build_pretrain_set(&gen, &corpus, &mut rng, true).unwrap();
        assert_eq!(b.class_counts(), (3, 3));
        let synthesized: Vec<_> = b.items.iter().filter(|e| e.sample_id.starts_with("mismatch:")).collect();
        assert_eq!(synthesized.len(), 2);
        for s in synthesized {
            let parts: Vec<&str> = s.sample_id.split(':').collect();
            assert_ne!(parts[1], parts[2]);
        }

        let gen = [cand("a", true)];
        assert!(build_pretrain_set(&gen, &[], &mut rng, true).is_err());
    }

    #[test]
    fn episode_state_rolls_over() {
        let mut st = EpisodeState::new(0.5, 0.4);
        st.advance(1, ids(&["a"]), ids(&["b", "c"]));
        st.advance(2, ids(&["b"]), ids(&["c", "a"]));
        assert_eq!(st.prev_negatives, ids(&["b", "c"]));
        assert_eq!(st.diff_old, ids(&["b"]));
        assert_eq!(st.diff_new, ids(&["a"]));
        assert!(st.is_consistent());
    }
}
