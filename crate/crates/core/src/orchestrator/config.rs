//! Run configuration: hyperparameters, schedules, data paths and backend choice.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::policy::DecisionMode;
use crate::rng::stable_hash;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub schema: PathBuf,
    pub train: PathBuf,
    pub dev: PathBuf,
}

/// Epoch counts per phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    pub generator_pretrain_max_epochs: usize,
    pub policy_pretrain_max_epochs: usize,
    pub extractor_pretrain_epochs: usize,
    /// Generator epochs on the original data alongside extractor pretraining.
    pub generator_continue_epochs: usize,
    pub extractor_retrain_epochs: usize,
    pub policy_retrain_epochs: usize,
    pub generator_retrain_epochs: usize,
    /// Share of each class held out to measure policy precision.
    pub policy_holdout_fraction: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            generator_pretrain_max_epochs: 50,
            policy_pretrain_max_epochs: 20,
            extractor_pretrain_epochs: 15,
            generator_continue_epochs: 0,
            extractor_retrain_epochs: 2,
            policy_retrain_epochs: 1,
            generator_retrain_epochs: 1,
            policy_holdout_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    /// Softmax of seeded logits in `[-1, 1)`.
    Seeded,
    Token { token: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginSpec {
    pub command: PathBuf,
    #[serde(default)]
    pub args: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSpec {
    Table {
        initial_mass: f64,
        step: f64,
        noise: NoiseSpec,
    },
    Plugin {
        command: PathBuf,
        #[serde(default)]
        args: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExtractorSpec {
    Fidelity { initial_fidelity: f64, delta: f64 },
    Plugin {
        command: PathBuf,
        #[serde(default)]
        args: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    CoverageRule {
        covered_level: f64,
        uncovered_level: f64,
        flip_rate: f64,
        learning_rate: f64,
    },
    Fixed { retain_probability: f64 },
    Plugin {
        command: PathBuf,
        #[serde(default)]
        args: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskedLmSpec {
    /// Add-one unigram model fitted to the training contexts.
    Unigram,
    Uniform { vocab_size: usize },
    Plugin {
        command: PathBuf,
        #[serde(default)]
        args: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    pub generator: GeneratorSpec,
    pub extractor: ExtractorSpec,
    pub policy: PolicySpec,
    pub masked_lm: MaskedLmSpec,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        BackendsConfig {
            generator: GeneratorSpec::Table {
                initial_mass: 0.2,
                step: 0.25,
                noise: NoiseSpec::Seeded,
            },
            extractor: ExtractorSpec::Fidelity {
                initial_fidelity: 0.3,
                delta: 0.05,
            },
            policy: PolicySpec::CoverageRule {
                covered_level: 0.9,
                uncovered_level: 0.1,
                flip_rate: 0.05,
                learning_rate: 0.1,
            },
            masked_lm: MaskedLmSpec::Unigram,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataPaths,
    /// Reward scale.
    pub alpha: f64,
    /// Language-model term weight.
    pub beta: f64,
    /// Argument-aware term weight.
    pub gamma: f64,
    pub mask_rate: f64,
    /// Retraining epochs.
    pub epochs: usize,
    /// Samples drawn from each diff set per epoch.
    pub diff_sample_size: usize,
    /// Share of the original training set mixed into each epoch.
    pub original_ratio: f64,
    pub negative_ratio: f64,
    pub coverage_threshold: f64,
    pub precision_band: (f64, f64),
    pub schedule: Schedule,
    pub seed: u64,
    pub decision_mode: DecisionMode,
    /// Pad policy pretraining negatives with mismatched pairs.
    pub balance_policy_data: bool,
    pub protect_event_tokens: bool,
    pub max_wall_clock_secs: Option<u64>,
    pub backends: BackendsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataPaths::default(),
            alpha: 10.0,
            beta: 0.9,
            gamma: 0.1,
            mask_rate: 0.3,
            epochs: 80,
            diff_sample_size: 32,
            original_ratio: 0.5,
            negative_ratio: 0.12,
            coverage_threshold: 0.70,
            precision_band: (0.80, 0.90),
            schedule: Schedule::default(),
            seed: 20231016,
            decision_mode: DecisionMode::Sampled,
            balance_policy_data: true,
            protect_event_tokens: false,
            max_wall_clock_secs: None,
            backends: BackendsConfig::default(),
        }
    }
}

/// One row of the defaults table: `(key, value, note)`.
pub type DefaultNote = (&'static str, String, &'static str);

impl RunConfig {
    /// Desk-scale profile for the bundled toy corpus.
    pub fn toy(data_dir: &Path) -> Self {
        RunConfig {
            data: DataPaths {
                schema: data_dir.join("schema.json"),
                train: data_dir.join("train.jsonl"),
                dev: data_dir.join("dev.jsonl"),
            },
            epochs: 10,
            schedule: Schedule {
                extractor_pretrain_epochs: 3,
                generator_continue_epochs: 1,
                policy_holdout_fraction: 0.4,
                ..Schedule::default()
            },
            ..RunConfig::default()
        }
    }

    /// The published hyperparameters with a note on each.
    pub fn published_defaults() -> Vec<DefaultNote> {
        let d = RunConfig::default();
        let s = &d.schedule;
        vec![
            ("alpha", d.alpha.to_string(), "reward scale; published value"),
            ("beta", d.beta.to_string(), "language-model loss weight; published value"),
            ("gamma", d.gamma.to_string(), "argument-aware loss weight; published value"),
            ("epochs", d.epochs.to_string(), "RL retraining epochs; published value, the toy profile uses 10"),
            ("original_ratio", d.original_ratio.to_string(), "share of original data per epoch; published value"),
            ("negative_ratio", d.negative_ratio.to_string(), "extractor negative-prompt ratio; published value"),
            ("coverage_threshold", d.coverage_threshold.to_string(), "generator pretraining stop; published value"),
            (
                "precision_band",
                format!("[{}, {}]", d.precision_band.0, d.precision_band.1),
                "policy pretraining stop; published value",
            ),
            ("extractor_pretrain_epochs", s.extractor_pretrain_epochs.to_string(), "published value"),
            ("extractor_retrain_epochs", s.extractor_retrain_epochs.to_string(), "published value"),
            ("policy_retrain_epochs", s.policy_retrain_epochs.to_string(), "published value"),
            ("generator_retrain_epochs", s.generator_retrain_epochs.to_string(), "published value"),
            ("mask_rate", d.mask_rate.to_string(), "not published; chosen default"),
            ("diff_sample_size", d.diff_sample_size.to_string(), "not published; chosen default"),
        ]
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Make relative data and plugin paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.data.schema);
        fix(&mut self.data.train);
        fix(&mut self.data.dev);
        let b = &mut self.backends;
        for cmd in [
            match &mut b.generator {
                GeneratorSpec::Plugin { command, .. } => Some(command),
                _ => None,
            },
            match &mut b.extractor {
                ExtractorSpec::Plugin { command, .. } => Some(command),
                _ => None,
            },
            match &mut b.policy {
                PolicySpec::Plugin { command, .. } => Some(command),
                _ => None,
            },
            match &mut b.masked_lm {
                MaskedLmSpec::Plugin { command, .. } => Some(command),
                _ => None,
            },
        ]
        .into_iter()
        .flatten()
        {
            // Bare program names are looked up on PATH.
            if cmd.components().count() > 1 {
                fix(cmd);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let rate = |name: &str, v: f64, problems: &mut Vec<String>| {
            if !(0.0..=1.0).contains(&v) {
                problems.push(format!("`{name}` = {v} outside [0, 1]"));
            }
        };
        rate("mask_rate", self.mask_rate, &mut problems);
        rate("original_ratio", self.original_ratio, &mut problems);
        rate("negative_ratio", self.negative_ratio, &mut problems);
        rate("coverage_threshold", self.coverage_threshold, &mut problems);
        rate("precision_band.0", self.precision_band.0, &mut problems);
        rate("precision_band.1", self.precision_band.1, &mut problems);
        rate(
            "schedule.policy_holdout_fraction",
            self.schedule.policy_holdout_fraction,
            &mut problems,
        );
        if self.precision_band.0 > self.precision_band.1 {
            problems.push(format!(
                "`precision_band` low {} above high {}",
                self.precision_band.0, self.precision_band.1
            ));
        }
        if self.epochs == 0 {
            problems.push("`epochs` must be at least 1".into());
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                problems.push(format!("`{name}` = {v} must be finite and non-negative"));
            }
        }
        for (name, p) in [
            ("data.schema", &self.data.schema),
            ("data.train", &self.data.train),
            ("data.dev", &self.data.dev),
        ] {
            if p.as_os_str().is_empty() {
                problems.push(format!("`{name}` is not set"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Stable fingerprint of every field.
    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", stable_hash([text.as_bytes()]))
    }

    /// Human-readable differences, one `key: a -> b` per changed leaf.
    pub fn diff(&self, other: &RunConfig) -> Vec<String> {
        let a = flatten(&serde_json::to_value(self).expect("config serializes"));
        let b = flatten(&serde_json::to_value(other).expect("config serializes"));
        let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
        keys.into_iter()
            .filter_map(|k| {
                let (x, y) = (a.get(k), b.get(k));
                (x != y).then(|| {
                    let show = |v: Option<&String>| v.cloned().unwrap_or_else(|| "<absent>".into());
                    format!("{k}: {} -> {}", show(x), show(y))
                })
            })
            .collect()
    }
}

fn flatten(value: &Value) -> BTreeMap<String, String> {
    fn walk(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
        match v {
            Value::Object(map) => {
                for (k, v) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            Value::Array(items) => {
                for (i, v) in items.iter().enumerate() {
                    walk(&format!("{prefix}[{i}]"), v, out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.to_string());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk("", value, &mut out);
    out
}
