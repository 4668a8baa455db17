//! The reinforcement retraining loop with per-epoch persistence and resume.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::pipeline::{
    evaluate, generate_instances, generation_inputs, original_examples, quality, reanchor, Backends, GenerationInstance,
    QualitySnapshot, RunData,
};
use super::report::{rebuild_report, ReportRow};
use super::store::{epoch_dir, load_backends, read_json, save_backends, write_json, RunStore};
use crate::backends::{ExtractorTrainParams, GeneratorExample, GeneratorTrainParams};
use crate::error::{Error, Result};
use crate::policy::{
    decide, partition, removal_weights, subsample_diffs, Action, BatchPurpose, EpisodeState, IdSet, PolicyBatch,
    PolicyExample, SampleId,
};
use crate::rng::stream;
use crate::scoring::{should_update_checkpoint, RewardRecord, ScoreReport};
use crate::serialization::PolicyInput;

/// What one epoch did; `episode.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub epoch: usize,
    pub positives: IdSet,
    pub negatives: IdSet,
    pub diff_old: IdSet,
    pub diff_new: IdSet,
    pub diff_old_sampled: IdSet,
    pub diff_new_sampled: IdSet,
    pub original_subset: Vec<SampleId>,
    pub extractor_losses: Vec<f64>,
    pub scores: ScoreReport,
    pub reward: f64,
    pub checkpoint_updated: bool,
    pub best_trigger_f1: f64,
    pub best_argument_f1: f64,
    pub policy_loss: f64,
    pub generator_loss: f64,
    pub generator_weighted_loss: Option<f64>,
    pub quality: QualitySnapshot,
    pub coverage: f64,
}

/// Everything needed to continue after an epoch; `state.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub episode: EpisodeState,
    /// The current generated set.
    pub instances: Vec<GenerationInstance>,
    /// Policy inputs the previous epoch's actions were taken on.
    pub previous_inputs: BTreeMap<SampleId, PolicyInput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestCheckpoint {
    pub epoch: usize,
    pub trigger_f1: f64,
    pub argument_f1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrainOptions {
    /// New run id; generated when absent.
    pub run_id: Option<String>,
    /// Continue this existing run.
    pub resume: Option<String>,
    /// Stop after completing this epoch.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainOutcome {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub last_epoch: usize,
    pub finished: bool,
    pub stop_reason: Option<String>,
    pub best: BestCheckpoint,
    pub report: Vec<ReportRow>,
}

/// Last epoch whose `state.json` was written.
pub fn last_complete_epoch(run_dir: &Path) -> Option<usize> {
    (0..)
        .take_while(|e| epoch_dir(run_dir, *e).join("state.json").exists())
        .last()
}

fn persist_epoch(run_dir: &Path, epoch: usize, record: &EpisodeRecord, state: &RunState, backends: &Backends) -> Result<()> {
    let dir = epoch_dir(run_dir, epoch);
    write_json(&dir.join("episode.json"), record)?;
    save_backends(&dir.join("backends"), backends)?;
    // Written last: its presence marks the epoch complete.
    write_json(&dir.join("state.json"), state)
}

fn save_best(run_dir: &Path, best: &BestCheckpoint, backends: &Backends) -> Result<()> {
    let dir = run_dir.join("best");
    save_backends(&dir, backends)?;
    write_json(&dir.join("best.json"), best)
}

fn policy_batch(ids: &IdSet, inputs: impl Fn(&SampleId) -> PolicyInput, purpose: BatchPurpose) -> PolicyBatch {
    PolicyBatch::new(
        ids.iter()
            .map(|id| PolicyExample {
                sample_id: id.clone(),
                input: inputs(id),
                label: Action::Remove,
            })
            .collect(),
        purpose,
    )
}

/// Generate the initial set, score the pretrained extractor and persist epoch 0.
fn initialize(config: &RunConfig, data: &RunData, backends: &Backends, run_dir: &Path) -> Result<RunState> {
    let instances = generate_instances(&*backends.generator, generation_inputs(config, data, "mask", 0)?)?;
    let scores = evaluate(&*backends.extractor, &data.schema, &data.dev)?;
    let episode = EpisodeState::new(scores.trigger.f1, scores.argument.f1);
    let record = EpisodeRecord {
        epoch: 0,
        positives: IdSet::new(),
        negatives: IdSet::new(),
        diff_old: IdSet::new(),
        diff_new: IdSet::new(),
        diff_old_sampled: IdSet::new(),
        diff_new_sampled: IdSet::new(),
        original_subset: Vec::new(),
        extractor_losses: Vec::new(),
        scores,
        reward: 0.0,
        checkpoint_updated: false,
        best_trigger_f1: episode.best_trigger_f1,
        best_argument_f1: episode.best_argument_f1,
        policy_loss: 0.0,
        generator_loss: 0.0,
        generator_weighted_loss: None,
        quality: quality(&*backends.masked_lm, &instances, &data.train_contexts())?,
        coverage: super::pipeline::instance_coverage(&instances)?,
    };
    let state = RunState {
        episode,
        instances,
        previous_inputs: BTreeMap::new(),
    };
    save_best(
        run_dir,
        &BestCheckpoint {
            epoch: 0,
            trigger_f1: state.episode.best_trigger_f1,
            argument_f1: state.episode.best_argument_f1,
        },
        backends,
    )?;
    persist_epoch(run_dir, 0, &record, &state, backends)?;
    Ok(state)
}

/// One pass of the loop, in the algorithm's line order.
pub fn run_epoch(
    config: &RunConfig,
    data: &RunData,
    backends: &mut Backends,
    state: &mut RunState,
    epoch: usize,
    run_dir: &Path,
) -> Result<EpisodeRecord> {
    let index = epoch as u64;
    let current: BTreeMap<SampleId, PolicyInput> = state
        .instances
        .iter()
        .map(|g| (g.source_id.clone(), g.policy_input.clone()))
        .collect();
    let inputs: Vec<(SampleId, PolicyInput)> = current.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let ids: Vec<SampleId> = inputs.iter().map(|(id, _)| id.clone()).collect();

    // Actions and partition.
    let decisions = decide(
        &*backends.policy,
        &inputs,
        config.decision_mode,
        &mut stream(config.seed, "policy-action", index),
    )?;
    let (positives, negatives) = partition(&decisions, &ids)?;
    state.episode.advance(epoch, positives, negatives);

    // Diff subsamples.
    let (old_sampled, new_sampled) = subsample_diffs(
        &state.episode.diff_old,
        &state.episode.diff_new,
        config.diff_sample_size,
        &mut stream(config.seed, "diff-sample", index),
    );

    // Reconstructed training set: fresh original subset plus retained generations.
    let n = data.train.len();
    let k = ((config.original_ratio * n as f64).round() as usize).min(n);
    let mut picked = sample(&mut stream(config.seed, "subset", index), n, k).into_vec();
    picked.sort_unstable();
    let subset: Vec<_> = picked.iter().map(|&i| data.train[i].clone()).collect();
    let mut batch = original_examples(&subset);
    for g in state.instances.iter().filter(|g| state.episode.positives.contains(&g.source_id)) {
        batch.push(reanchor(g, format!("gen:{}:{epoch}", g.source_id)));
    }

    // Extractor retraining and dev evaluation.
    let extractor_losses = backends.extractor.train(
        &batch,
        &ExtractorTrainParams {
            epochs: config.schedule.extractor_retrain_epochs,
            negative_ratio: config.negative_ratio,
        },
    )?;
    let scores = evaluate(&*backends.extractor, &data.schema, &data.dev)?;
    let prev_arg = state.episode.last_argument_f1();
    let reward = RewardRecord::new(epoch, scores.argument.f1, prev_arg, config.alpha).reward;
    state.episode.f1_history.push((scores.trigger.f1, scores.argument.f1));

    // Checkpoint rule.
    let ckpt = should_update_checkpoint(
        scores.trigger.f1,
        scores.argument.f1,
        state.episode.best_trigger_f1,
        state.episode.best_argument_f1,
    );
    state.episode.best_trigger_f1 = ckpt.best_trigger_f1;
    state.episode.best_argument_f1 = ckpt.best_argument_f1;
    if ckpt.update {
        save_best(
            run_dir,
            &BestCheckpoint {
                epoch,
                trigger_f1: ckpt.best_trigger_f1,
                argument_f1: ckpt.best_argument_f1,
            },
            backends,
        )?;
    }

    // Policy retraining on the diff subsamples.
    let new_batch = policy_batch(&new_sampled, |id| current[id].clone(), BatchPurpose::RetrainNew);
    let old_batch = policy_batch(
        &old_sampled,
        |id| state.previous_inputs.get(id).or_else(|| current.get(id)).cloned().expect("diff ids were generated"),
        BatchPurpose::RetrainOld,
    );
    let mut policy_loss = 0.0;
    for _ in 0..config.schedule.policy_retrain_epochs {
        policy_loss = backends.policy.train_reinforce(&new_batch, &old_batch, reward)?;
    }

    // Removal weights and weighted generator retraining.
    let weights = removal_weights(&*backends.policy, &inputs)?;
    let examples: Vec<GeneratorExample> = state
        .instances
        .iter()
        .map(|g| GeneratorExample {
            input: g.input.clone(),
            records: g.records.clone(),
            weight: weights[&g.source_id],
        })
        .collect();
    let mut generator_loss = 0.0;
    let mut generator_weighted_loss = None;
    for _ in 0..config.schedule.generator_retrain_epochs {
        let report = backends.generator.train(
            &examples,
            &GeneratorTrainParams {
                beta: config.beta,
                gamma: config.gamma,
            },
        )?;
        generator_loss = report.loss;
        generator_weighted_loss = report.weighted_loss;
    }

    // Regenerate.
    let instances = generate_instances(&*backends.generator, generation_inputs(config, data, "mask", index)?)?;
    let quality = quality(&*backends.masked_lm, &instances, &data.train_contexts())?;
    let coverage = super::pipeline::instance_coverage(&instances)?;
    state.previous_inputs = current;
    state.instances = instances;

    Ok(EpisodeRecord {
        epoch,
        positives: state.episode.positives.clone(),
        negatives: state.episode.negatives.clone(),
        diff_old: state.episode.diff_old.clone(),
        diff_new: state.episode.diff_new.clone(),
        diff_old_sampled: old_sampled,
        diff_new_sampled: new_sampled,
        original_subset: subset.iter().map(|s| s.id.clone()).collect(),
        extractor_losses,
        scores,
        reward,
        checkpoint_updated: ckpt.update,
        best_trigger_f1: ckpt.best_trigger_f1,
        best_argument_f1: ckpt.best_argument_f1,
        policy_loss,
        generator_loss,
        generator_weighted_loss,
        quality,
        coverage,
    })
}

/// Run (or resume) the loop with already constructed backends. For a new
/// run the backends must hold their pretrained state.
pub fn retrain_with(
    store: &RunStore,
    config: &RunConfig,
    data: &RunData,
    backends: &mut Backends,
    options: &RetrainOptions,
) -> Result<RetrainOutcome> {
    config.validate()?;
    let started = Instant::now();
    let (run_id, run_dir, mut state, start) = match &options.resume {
        Some(id) => {
            let run_dir = store.run_dir(id)?;
            let stored: RunConfig = read_json(&run_dir.join("config.json"))?;
            if stored.fingerprint() != config.fingerprint() {
                return Err(Error::ConfigMismatch(stored.diff(config).join("; ")));
            }
            let last = last_complete_epoch(&run_dir).ok_or_else(|| Error::MissingState(epoch_dir(&run_dir, 0).join("state.json")))?;
            load_backends(&epoch_dir(&run_dir, last).join("backends"), backends)?;
            let state: RunState = read_json(&epoch_dir(&run_dir, last).join("state.json"))?;
            (id.clone(), run_dir, state, last + 1)
        }
        None => {
            let id = options.run_id.clone().unwrap_or_else(|| store.fresh_run_id(config));
            let run_dir = store.run_dir(&id)?;
            if run_dir.exists() {
                return Err(Error::InvalidInput(format!("run `{id}` already exists; resume it or pick another id")));
            }
            write_json(&run_dir.join("config.json"), config)?;
            let state = initialize(config, data, backends, &run_dir)?;
            (id, run_dir, state, 1)
        }
    };

    let mut stop_reason = None;
    let mut last_epoch = start - 1;
    for epoch in start..=config.epochs {
        if let Some(cap) = config.max_wall_clock_secs {
            if started.elapsed().as_secs() >= cap {
                stop_reason = Some(format!("wall-clock cap of {cap}s reached before epoch {epoch}"));
                break;
            }
        }
        let record = run_epoch(config, data, backends, &mut state, epoch, &run_dir)?;
        persist_epoch(&run_dir, epoch, &record, &state, backends)?;
        last_epoch = epoch;
        if options.stop_after == Some(epoch) && epoch < config.epochs {
            stop_reason = Some(format!("stopped after epoch {epoch} on request"));
            break;
        }
    }
    let report = rebuild_report(&run_dir)?;
    let best: BestCheckpoint = read_json(&run_dir.join("best").join("best.json"))?;
    Ok(RetrainOutcome {
        run_id,
        finished: last_epoch >= config.epochs,
        run_dir,
        last_epoch,
        stop_reason,
        best,
        report,
    })
}
