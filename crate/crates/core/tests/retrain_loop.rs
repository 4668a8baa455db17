mod common;

use std::sync::{Arc, Mutex};

use evaug_core::backends::mock_extractor::FidelityExtractor;
use evaug_core::backends::{
    BackendResult, ExtractorBackend, ExtractorExample, ExtractorTrainParams, Generation, GeneratorBackend,
    GeneratorExample, GeneratorTrainParams, PolicyBackend,
};
use evaug_core::event_model::AnnotatedSentence;
use evaug_core::generation_training::{GenLossReport, Vocab};
use evaug_core::orchestrator::config::PolicySpec;
use evaug_core::orchestrator::pipeline::{evaluate, reanchor};
use evaug_core::orchestrator::retrain::RunState;
use evaug_core::orchestrator::{pretrain_all, retrain, retrain_with, Backends, RetrainOptions, RunConfig, RunData, RunStore};
use evaug_core::policy::{DecisionMode, PolicyBatch};
use evaug_core::rng::stream_seed;
use evaug_core::scoring::{Counts, Prf};
use evaug_core::serialization::{ExtractionInput, GenerationInput, PolicyInput};
use evaug_core::{backends::ExampleOrigin, Error};

type Log = Arc<Mutex<Vec<String>>>;

struct LoggedGenerator(Box<dyn GeneratorBackend>, Log);
struct LoggedExtractor(Box<dyn ExtractorBackend>, Log);
struct LoggedPolicy(Box<dyn PolicyBackend>, Log);

fn note(log: &Log, what: &str) {
    let mut l = log.lock().unwrap();
    if l.last().map(String::as_str) != Some(what) {
        l.push(what.to_string());
    }
}

impl GeneratorBackend for LoggedGenerator {
    fn vocab(&self) -> Arc<Vocab> {
        self.0.vocab()
    }
    fn generate(&self, input: &GenerationInput) -> BackendResult<Generation> {
        note(&self.1, "generator.generate");
        self.0.generate(input)
    }
    fn train(&mut self, b: &[GeneratorExample], p: &GeneratorTrainParams) -> BackendResult<GenLossReport> {
        note(&self.1, "generator.train");
        self.0.train(b, p)
    }
    fn save_state(&self) -> BackendResult<Vec<u8>> {
        note(&self.1, "save");
        self.0.save_state()
    }
    fn load_state(&mut self, s: &[u8]) -> BackendResult<()> {
        self.0.load_state(s)
    }
}

impl ExtractorBackend for LoggedExtractor {
    fn extract(&self, input: &ExtractionInput) -> BackendResult<String> {
        note(&self.1, "extractor.extract");
        self.0.extract(input)
    }
    fn train(&mut self, b: &[ExtractorExample], p: &ExtractorTrainParams) -> BackendResult<Vec<f64>> {
        note(&self.1, "extractor.train");
        self.0.train(b, p)
    }
    fn save_state(&self) -> BackendResult<Vec<u8>> {
        note(&self.1, "save");
        self.0.save_state()
    }
    fn load_state(&mut self, s: &[u8]) -> BackendResult<()> {
        self.0.load_state(s)
    }
}

impl PolicyBackend for LoggedPolicy {
    fn score(&self, input: &PolicyInput) -> BackendResult<f64> {
        note(&self.1, "policy.score");
        self.0.score(input)
    }
    fn train_supervised(&mut self, b: &PolicyBatch) -> BackendResult<f64> {
        note(&self.1, "policy.train_supervised");
        self.0.train_supervised(b)
    }
    fn train_reinforce(&mut self, n: &PolicyBatch, o: &PolicyBatch, r: f64) -> BackendResult<f64> {
        note(&self.1, "policy.train_reinforce");
        self.0.train_reinforce(n, o, r)
    }
    fn save_state(&self) -> BackendResult<Vec<u8>> {
        note(&self.1, "save");
        self.0.save_state()
    }
    fn load_state(&mut self, s: &[u8]) -> BackendResult<()> {
        self.0.load_state(s)
    }
}

fn one_epoch_config() -> RunConfig {
    let mut cfg = common::toy_config();
    cfg.epochs = 1;
    cfg
}

#[test]
fn epoch_follows_algorithm_order() {
    let cfg = one_epoch_config();
    let data = RunData::load(&cfg).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let store = RunStore::new(tmp.path());
    let log: Log = Arc::default();
    let inner = Backends::build(&cfg, &data).unwrap();
    let mut backends = Backends {
        generator: Box::new(LoggedGenerator(inner.generator, log.clone())),
        extractor: Box::new(LoggedExtractor(inner.extractor, log.clone())),
        policy: Box::new(LoggedPolicy(inner.policy, log.clone())),
        masked_lm: inner.masked_lm,
    };
    retrain_with(&store, &cfg, &data, &mut backends, &RetrainOptions::default()).unwrap();
    let calls = log.lock().unwrap().clone();
    // Epoch 0 generates, evaluates and persists; epoch 1 starts at the first policy score.
    let start = calls.iter().position(|c| c == "policy.score").unwrap();
    assert_eq!(&calls[..start], ["generator.generate", "extractor.extract", "save"]);
    let epoch: Vec<&str> = calls[start..].iter().map(String::as_str).filter(|c| *c != "save").collect();
    assert_eq!(
        epoch,
        [
            "policy.score",
            "extractor.train",
            "extractor.extract",
            "policy.train_reinforce",
            "policy.score",
            "generator.train",
            "generator.generate",
        ]
    );
}

#[test]
fn resumed_run_matches_uninterrupted() {
    let mut cfg = common::toy_config();
    cfg.epochs = 3;
    let full = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let data = RunData::load(&cfg).unwrap();
    for dir in [full.path(), split.path()] {
        pretrain_all(&RunStore::new(dir), &cfg, &data, &mut Backends::build(&cfg, &data).unwrap()).unwrap();
    }
    let a = retrain(&RunStore::new(full.path()), &cfg, &RetrainOptions::default()).unwrap();
    let store = RunStore::new(split.path());
    let first = retrain(&store, &cfg, &RetrainOptions { stop_after: Some(2), ..Default::default() }).unwrap();
    assert!(!first.finished);
    assert_eq!(first.report.len(), 2);
    let b = retrain(&store, &cfg, &RetrainOptions { resume: Some(first.run_id.clone()), ..Default::default() }).unwrap();
    assert!(b.finished);
    assert_eq!(a.report.len(), 3);
    let ra = std::fs::read(a.run_dir.join("report.csv")).unwrap();
    let rb = std::fs::read(b.run_dir.join("report.csv")).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn resume_with_changed_config_is_refused_with_a_diff() {
    let cfg = one_epoch_config();
    let data = RunData::load(&cfg).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let store = RunStore::new(tmp.path());
    let out = retrain_with(&store, &cfg, &data, &mut Backends::build(&cfg, &data).unwrap(), &RetrainOptions::default()).unwrap();
    let mut changed = cfg.clone();
    changed.alpha = 5.0;
    let err = retrain(&store, &changed, &RetrainOptions { resume: Some(out.run_id), ..Default::default() }).unwrap_err();
    assert!(matches!(err, Error::ConfigMismatch(_)));
    assert!(err.to_string().contains("alpha: 10.0 -> 5.0"), "{err}");
}

#[test]
fn missing_pretrained_state_is_named() {
    let cfg = one_epoch_config();
    let tmp = tempfile::tempdir().unwrap();
    let err = retrain(&RunStore::new(tmp.path()), &cfg, &RetrainOptions::default()).unwrap_err();
    assert!(matches!(err, Error::MissingState(_)));
    assert!(err.to_string().contains("generator.state"), "{err}");
}

#[test]
fn remove_all_policy_trains_on_originals_only() {
    let mut cfg = common::toy_config();
    cfg.epochs = 3;
    cfg.backends.policy = PolicySpec::Fixed { retain_probability: 0.0 };
    let data = RunData::load(&cfg).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let out = retrain_with(
        &RunStore::new(tmp.path()),
        &cfg,
        &data,
        &mut Backends::build(&cfg, &data).unwrap(),
        &RetrainOptions::default(),
    )
    .unwrap();
    let n = data.sources().len();
    for (i, row) in out.report.iter().enumerate() {
        assert_eq!((row.pos, row.neg), (0, n));
        // Everything enters the removed set once and then stays there.
        assert_eq!((row.diff_new, row.diff_old), if i == 0 { (n, 0) } else { (0, 0) });
    }
}

/// Dev scores implied by the fidelity mock at fidelity `q`: a (context, type)
/// pair is answered perfectly iff its fixed uniform is below `q`.
fn replay_scores(seed: u64, q: f64, dev: &[AnnotatedSentence]) -> (Prf, Prf) {
    let (mut t, mut a) = (Counts::default(), Counts::default());
    for s in dev {
        for r in &s.records {
            t.gold += 1;
            a.gold += r.arguments.len();
            if FidelityExtractor::answer_uniform(seed, &s.context, &r.event_type) < q {
                t.correct += 1;
                t.predicted += 1;
                a.correct += r.arguments.len();
                a.predicted += r.arguments.len();
            }
        }
    }
    (Prf::from_counts(t), Prf::from_counts(a))
}

#[test]
fn half_fidelity_scores_replay_from_the_seed() {
    let mut cfg = common::toy_config();
    cfg.backends.extractor = evaug_core::orchestrator::config::ExtractorSpec::Fidelity {
        initial_fidelity: 0.5,
        delta: 0.05,
    };
    let data = RunData::load(&cfg).unwrap();
    let b = Backends::build(&cfg, &data).unwrap();
    let got = evaluate(&*b.extractor, &data.schema, &data.dev).unwrap();
    let again = evaluate(&*b.extractor, &data.schema, &data.dev).unwrap();
    assert_eq!(got, again);
    let (t, a) = replay_scores(stream_seed(cfg.seed, "extractor", 0), 0.5, &data.dev);
    assert_eq!(got.trigger, t);
    assert_eq!(got.argument, a);
    assert!(t.recall > 0.0 && t.recall < 1.0);
}

#[test]
fn hand_traced_single_epoch() {
    // Five training sentences, three dev sentences, a policy that keeps all.
    let full = RunData::load(&common::toy_config()).unwrap();
    let data = RunData {
        schema: full.schema.clone(),
        train: full.sources().into_iter().take(5).cloned().collect(),
        dev: full.dev.iter().take(3).cloned().collect(),
    };
    let mut cfg = common::toy_config();
    cfg.epochs = 1;
    cfg.original_ratio = 0.6;
    cfg.decision_mode = DecisionMode::Greedy;
    cfg.backends.policy = PolicySpec::Fixed { retain_probability: 0.7 };
    let tmp = tempfile::tempdir().unwrap();
    let mut backends = Backends::build(&cfg, &data).unwrap();
    let out = retrain_with(&RunStore::new(tmp.path()), &cfg, &data, &mut backends, &RetrainOptions::default()).unwrap();
    let row = &out.report[0];
    assert_eq!((row.pos, row.neg, row.diff_new, row.diff_old), (5, 0, 0, 0));

    // Batch: round(0.6 * 5) = 3 originals plus 5 re-anchored generations.
    let state0: RunState = serde_json::from_slice(&std::fs::read(out.run_dir.join("epoch-0/state.json")).unwrap()).unwrap();
    let complete = state0
        .instances
        .iter()
        .filter(|g| reanchor(g, String::new()).origin == ExampleOrigin::Generated { complete: true })
        .count();
    let mut q = 0.3;
    for _ in 0..cfg.schedule.extractor_retrain_epochs {
        q = f64::min(q + 0.05 * (3 + complete) as f64 / 8.0, 1.0);
    }
    let seed = stream_seed(cfg.seed, "extractor", 0);
    let (t0, a0) = replay_scores(seed, 0.3, &data.dev);
    let (t1, a1) = replay_scores(seed, q, &data.dev);
    assert_eq!((row.trig_f1, row.arg_f1), (t1.f1, a1.f1));
    let episode0: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.run_dir.join("epoch-0/episode.json")).unwrap()).unwrap();
    assert_eq!(episode0["scores"]["argument"]["f1"].as_f64().unwrap(), a0.f1);
    assert_eq!(episode0["scores"]["trigger"]["f1"].as_f64().unwrap(), t0.f1);
    assert_eq!(row.reward, 10.0 * (a1.f1 - a0.f1));
    assert_eq!(row.ckpt, t1.f1 > t0.f1 || a1.f1 > a0.f1);
}
