//! Pretraining schedules and the retraining loop, wired to backends built
//! from a [`RunConfig`], with runs persisted under a [`RunStore`].

pub mod config;
pub mod pipeline;
pub mod plot;
pub mod pretrain;
pub mod report;
pub mod retrain;
pub mod store;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use config::RunConfig;
pub use pipeline::{Backends, RunData};
pub use retrain::{retrain_with, RetrainOptions, RetrainOutcome};
pub use store::RunStore;

use crate::error::{Error, Result};
use pipeline::{EXTRACTOR, GENERATOR, POLICY};
use pretrain::{
    policy_pretrain_set, pretrain_extractor, pretrain_generator, pretrain_policy, CoverageTrace, ExtractorPretrainReport,
    PolicyPretrainReport,
};
use store::{load_one, state_file, write_atomic, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Generator,
    Policy,
    Extractor,
}

impl std::str::FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generator" => Ok(Phase::Generator),
            "policy" => Ok(Phase::Policy),
            "extractor" => Ok(Phase::Extractor),
            other => Err(Error::InvalidInput(format!(
                "unknown phase `{other}` (expected generator, policy or extractor)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "lowercase")]
pub enum PhaseReport {
    Generator(CoverageTrace),
    Policy(PolicyPretrainReport),
    Extractor(ExtractorPretrainReport),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseOutcome {
    pub state_dir: PathBuf,
    pub report: PhaseReport,
}

fn restore(backends: &mut Backends, dir: &std::path::Path, names: &[&str]) -> Result<()> {
    for name in names {
        let bytes = load_one(dir, name)?;
        match *name {
            GENERATOR => backends.generator.load_state(&bytes)?,
            EXTRACTOR => backends.extractor.load_state(&bytes)?,
            POLICY => backends.policy.load_state(&bytes)?,
            _ => unreachable!("known backend names"),
        }
    }
    Ok(())
}

/// Run one pretraining phase. Phases run in the order generator, policy,
/// extractor; each later phase starts from the states the earlier ones saved.
pub fn run_pretrain_phase(store: &RunStore, config: &RunConfig, phase: Phase) -> Result<PhaseOutcome> {
    config.validate()?;
    let data = RunData::load(config)?;
    let mut backends = Backends::build(config, &data)?;
    run_pretrain_phase_with(store, config, &data, &mut backends, phase)
}

pub fn run_pretrain_phase_with(
    store: &RunStore,
    config: &RunConfig,
    data: &RunData,
    backends: &mut Backends,
    phase: Phase,
) -> Result<PhaseOutcome> {
    let dir = store.pretrained_dir(config);
    write_json(&dir.join("config.json"), config)?;
    let report = match phase {
        Phase::Generator => {
            let trace = pretrain_generator(config, data, &mut *backends.generator)?;
            write_atomic(&state_file(&dir, GENERATOR), &backends.generator.save_state()?)?;
            write_json(&dir.join("coverage_trace.json"), &trace)?;
            PhaseReport::Generator(trace)
        }
        Phase::Policy => {
            restore(backends, &dir, &[GENERATOR])?;
            let batch = policy_pretrain_set(config, data, &*backends.generator)?;
            let report = pretrain_policy(config, &batch, &mut *backends.policy)?;
            write_atomic(&state_file(&dir, POLICY), &backends.policy.save_state()?)?;
            write_json(&dir.join("policy_pretrain.json"), &report)?;
            PhaseReport::Policy(report)
        }
        Phase::Extractor => {
            restore(backends, &dir, &[GENERATOR])?;
            let report = pretrain_extractor(config, data, &mut *backends.extractor, &mut *backends.generator)?;
            write_atomic(&state_file(&dir, GENERATOR), &backends.generator.save_state()?)?;
            write_atomic(&state_file(&dir, EXTRACTOR), &backends.extractor.save_state()?)?;
            write_json(&dir.join("extractor_pretrain.json"), &report)?;
            PhaseReport::Extractor(report)
        }
    };
    Ok(PhaseOutcome { state_dir: dir, report })
}

/// Run all three phases in order.
pub fn pretrain_all(store: &RunStore, config: &RunConfig, data: &RunData, backends: &mut Backends) -> Result<Vec<PhaseOutcome>> {
    [Phase::Generator, Phase::Policy, Phase::Extractor]
        .into_iter()
        .map(|p| run_pretrain_phase_with(store, config, data, backends, p))
        .collect()
}

/// Start a run from the pretrained states, or resume one.
pub fn retrain(store: &RunStore, config: &RunConfig, options: &RetrainOptions) -> Result<RetrainOutcome> {
    config.validate()?;
    let data = RunData::load(config)?;
    let mut backends = Backends::build(config, &data)?;
    if options.resume.is_none() {
        restore(&mut backends, &store.pretrained_dir(config), &[GENERATOR, POLICY, EXTRACTOR])?;
    }
    retrain_with(store, config, &data, &mut backends, options)
}
