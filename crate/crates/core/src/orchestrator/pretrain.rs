//! The three pretraining schedules.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::pipeline::{generate_instances, generation_inputs, instance_coverage, original_examples, RunData};
use crate::backends::{ExtractorBackend, ExtractorTrainParams, GeneratorBackend, GeneratorExample, GeneratorTrainParams, PolicyBackend};
use crate::error::{Error, Result};
use crate::policy::{build_pretrain_set, Action, BatchPurpose, CandidateSample, PolicyBatch, PolicyExample, GREEDY_THRESHOLD};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoveragePoint {
    pub epoch: usize,
    pub loss: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageTrace {
    pub points: Vec<CoveragePoint>,
    pub stopped_epoch: usize,
}

fn generator_params(config: &RunConfig) -> GeneratorTrainParams {
    GeneratorTrainParams {
        beta: config.beta,
        gamma: config.gamma,
    }
}

/// Train until coverage over the training sources strictly exceeds the
/// threshold; fail at the epoch cap.
pub fn pretrain_generator(config: &RunConfig, data: &RunData, generator: &mut dyn GeneratorBackend) -> Result<CoverageTrace> {
    if data.sources().is_empty() {
        return Err(Error::InvalidInput("no training sentence has event records".into()));
    }
    let cap = config.schedule.generator_pretrain_max_epochs;
    let mut points = Vec::new();
    for epoch in 1..=cap {
        let inputs = generation_inputs(config, data, "pretrain-mask", epoch as u64)?;
        let batch: Vec<GeneratorExample> = inputs
            .iter()
            .map(|(input, records)| GeneratorExample {
                input: input.clone(),
                records: records.clone(),
                weight: 1.0,
            })
            .collect();
        let report = generator.train(&batch, &generator_params(config))?;
        let instances = generate_instances(generator, inputs)?;
        let coverage = instance_coverage(&instances)?;
        points.push(CoveragePoint {
            epoch,
            loss: report.loss,
            coverage,
        });
        if coverage > config.coverage_threshold {
            return Ok(CoverageTrace {
                points,
                stopped_epoch: epoch,
            });
        }
    }
    Err(Error::CoverageNotReached {
        coverage: points.last().map_or(0.0, |p| p.coverage),
        threshold: config.coverage_threshold,
        epochs: cap,
    })
}

/// Policy pretraining data from the generator's current outputs.
pub fn policy_pretrain_set(config: &RunConfig, data: &RunData, generator: &dyn GeneratorBackend) -> Result<PolicyBatch> {
    let inputs = generation_inputs(config, data, "policy-data", 0)?;
    let candidates: Vec<CandidateSample> = generate_instances(generator, inputs)?
        .into_iter()
        .map(|g| CandidateSample {
            sample_id: g.source_id,
            event_description: g.input.event_description,
            generated_text: g.text,
            covered: g.covered,
        })
        .collect();
    let corpus: Vec<(String, String)> = data.train.iter().map(|s| (s.id.clone(), s.context.clone())).collect();
    let mut rng = stream(config.seed, "policy-balance", 0);
    build_pretrain_set(&candidates, &corpus, &mut rng, config.balance_policy_data)
}

/// Precision of the retain class under greedy decisions; 0 when nothing is retained.
pub fn retain_precision(policy: &dyn PolicyBackend, batch: &PolicyBatch) -> Result<f64> {
    let mut retained = 0usize;
    let mut correct = 0usize;
    for item in &batch.items {
        if policy.score(&item.input)? >= GREEDY_THRESHOLD {
            retained += 1;
            if item.label == Action::Retain {
                correct += 1;
            }
        }
    }
    Ok(if retained == 0 {
        0.0
    } else {
        correct as f64 / retained as f64
    })
}

/// Stratified split: `fraction` of each class (at least one) is held out.
pub fn split_holdout(config: &RunConfig, batch: &PolicyBatch) -> Result<(PolicyBatch, PolicyBatch)> {
    let (pos, neg) = batch.class_counts();
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass {
            positives: pos,
            negatives: neg,
        });
    }
    let mut rng = stream(config.seed, "policy-holdout", 0);
    let mut train = Vec::new();
    let mut held = Vec::new();
    for class in [Action::Retain, Action::Remove] {
        let mut items: Vec<PolicyExample> = batch.items.iter().filter(|e| e.label == class).cloned().collect();
        items.shuffle(&mut rng);
        let k = ((items.len() as f64 * config.schedule.policy_holdout_fraction).round() as usize).clamp(1, items.len());
        let rest = items.split_off(k);
        held.extend(items);
        train.extend(rest);
    }
    Ok((
        PolicyBatch::new(train, BatchPurpose::Pretrain),
        PolicyBatch::new(held, BatchPurpose::Pretrain),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionPoint {
    pub epoch: usize,
    pub loss: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyPretrainReport {
    pub points: Vec<PrecisionPoint>,
    /// Epoch whose state the policy ends with.
    pub stopped_epoch: usize,
    pub in_band: bool,
    /// Set when the band was never entered.
    pub deviation: Option<String>,
}

fn band_distance(p: f64, band: (f64, f64)) -> f64 {
    if p < band.0 {
        band.0 - p
    } else if p > band.1 {
        p - band.1
    } else {
        0.0
    }
}

/// Train with cross-entropy until held-out precision first lands in the
/// band. If it jumps past the band or the cap is hit, the policy is rolled
/// back to the epoch closest to the band.
pub fn pretrain_policy(config: &RunConfig, batch: &PolicyBatch, policy: &mut dyn PolicyBackend) -> Result<PolicyPretrainReport> {
    let (train, held) = split_holdout(config, batch)?;
    let (hp, hn) = held.class_counts();
    if hp == 0 || hn == 0 {
        return Err(Error::SingleClass {
            positives: hp,
            negatives: hn,
        });
    }
    if train.is_empty() {
        return Err(Error::InvalidInput("policy data too small to leave a training split".into()));
    }
    let band = config.precision_band;
    let mut points = Vec::new();
    let mut closest: Option<(f64, usize, Vec<u8>)> = None;
    for epoch in 1..=config.schedule.policy_pretrain_max_epochs {
        let loss = policy.train_supervised(&train)?;
        let precision = retain_precision(policy, &held)?;
        points.push(PrecisionPoint { epoch, loss, precision });
        let distance = band_distance(precision, band);
        if distance == 0.0 {
            return Ok(PolicyPretrainReport {
                points,
                stopped_epoch: epoch,
                in_band: true,
                deviation: None,
            });
        }
        if closest.as_ref().map_or(true, |(d, _, _)| distance < *d) {
            closest = Some((distance, epoch, policy.save_state()?));
        }
        if precision > band.1 {
            break;
        }
    }
    let Some((_, epoch, state)) = closest else {
        return Err(Error::Config("`schedule.policy_pretrain_max_epochs` is 0".into()));
    };
    policy.load_state(&state)?;
    let last = points.last().map_or(0.0, |p| p.precision);
    let deviation = format!(
        "precision never entered [{}, {}] (last {last:.4} after {} epochs); kept epoch {epoch}, precision {:.4}",
        band.0,
        band.1,
        points.len(),
        points[epoch - 1].precision
    );
    Ok(PolicyPretrainReport {
        points,
        stopped_epoch: epoch,
        in_band: false,
        deviation: Some(deviation),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorPretrainReport {
    pub extractor_losses: Vec<f64>,
    pub generator_losses: Vec<f64>,
}

/// Fixed-epoch extractor training on the original data, with the
/// configured number of further generator epochs on the same data.
pub fn pretrain_extractor(
    config: &RunConfig,
    data: &RunData,
    extractor: &mut dyn ExtractorBackend,
    generator: &mut dyn GeneratorBackend,
) -> Result<ExtractorPretrainReport> {
    let extractor_losses = extractor.train(
        &original_examples(&data.train),
        &ExtractorTrainParams {
            epochs: config.schedule.extractor_pretrain_epochs,
            negative_ratio: config.negative_ratio,
        },
    )?;
    let mut generator_losses = Vec::new();
    for epoch in 1..=config.schedule.generator_continue_epochs {
        let batch: Vec<GeneratorExample> = generation_inputs(config, data, "continue-mask", epoch as u64)?
            .into_iter()
            .map(|(input, records)| GeneratorExample {
                input,
                records,
                weight: 1.0,
            })
            .collect();
        generator_losses.push(generator.train(&batch, &generator_params(config))?.loss);
    }
    Ok(ExtractorPretrainReport {
        extractor_losses,
        generator_losses,
    })
}
