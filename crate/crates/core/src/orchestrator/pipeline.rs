//! Shared steps: loading data, building backends, generating, extracting and
//! scoring.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::{ExtractorSpec, GeneratorSpec, MaskedLmSpec, NoiseSpec, PluginSpec, PolicySpec, RunConfig};
use crate::backends::adapter::{AdapterExtractor, AdapterGenerator, AdapterMaskedLm, AdapterPolicy, ProcessTransport, Transport};
use crate::backends::masked_lm::{UniformMaskedLm, UnigramMaskedLm};
use crate::backends::mock_extractor::{FidelityConfig, FidelityExtractor};
use crate::backends::mock_generator::{Noise, TableGenerator, TableGeneratorConfig};
use crate::backends::mock_policy::{CoverageRuleConfig, CoverageRulePolicy, FixedPolicy};
use crate::backends::{
    ExampleOrigin, ExtractorBackend, ExtractorExample, GeneratorBackend, MaskedLmBackend, PolicyBackend,
};
use crate::error::{Error, Result};
use crate::event_model::{load_dataset, AnnotatedSentence, Argument, EventRecord, EventSchema};
use crate::generation_training::{coverage_counts, Vocab};
use crate::policy::SampleId;
use crate::quality_metrics::{corpus_pll, novel_distinct_ngrams};
use crate::rng::{stream, stream_seed};
use crate::scoring::{score_corpus, ScoreReport};
use crate::serialization::{
    build_extraction_input, build_generation_input, build_policy_input, parse_answered_prompt, GenerationInput,
    OffsetDecoder, PolicyInput,
};

/// The schema plus the original training and development sentences.
#[derive(Debug, Clone)]
pub struct RunData {
    pub schema: EventSchema,
    pub train: Vec<AnnotatedSentence>,
    pub dev: Vec<AnnotatedSentence>,
}

impl RunData {
    pub fn load(config: &RunConfig) -> Result<Self> {
        let schema = EventSchema::load(&config.data.schema)?;
        let train = load_dataset(&config.data.train, &schema)?.sentences;
        let dev = load_dataset(&config.data.dev, &schema)?.sentences;
        if train.is_empty() {
            return Err(Error::InvalidInput(format!(
                "training set {} is empty",
                config.data.train.display()
            )));
        }
        Ok(RunData { schema, train, dev })
    }

    /// Training sentences with at least one record: the augmentation sources.
    pub fn sources(&self) -> Vec<&AnnotatedSentence> {
        self.train.iter().filter(|s| !s.records.is_empty()).collect()
    }

    pub fn train_contexts(&self) -> Vec<String> {
        self.train.iter().map(|s| s.context.clone()).collect()
    }
}

pub struct Backends {
    pub generator: Box<dyn GeneratorBackend>,
    pub extractor: Box<dyn ExtractorBackend>,
    pub policy: Box<dyn PolicyBackend>,
    pub masked_lm: Box<dyn MaskedLmBackend>,
}

pub const GENERATOR: &str = "generator";
pub const EXTRACTOR: &str = "extractor";
pub const POLICY: &str = "policy";

fn spawn(spec: PluginSpec) -> Result<Arc<dyn Transport>> {
    Ok(Arc::new(ProcessTransport::spawn(spec.command, &spec.args)?))
}

/// Vocabulary over every context the generator may have to reproduce.
pub fn generator_vocab(data: &RunData, extra: &[&str]) -> Vocab {
    Vocab::from_texts(data.train.iter().map(|s| s.context.as_str()), extra)
}

impl Backends {
    pub fn build(config: &RunConfig, data: &RunData) -> Result<Self> {
        let b = &config.backends;
        let generator: Box<dyn GeneratorBackend> = match &b.generator {
            GeneratorSpec::Table { initial_mass, step, noise } => {
                let seed = stream_seed(config.seed, GENERATOR, 0);
                let (vocab, noise) = match noise {
                    NoiseSpec::Seeded => {
                        let v = generator_vocab(data, &[]);
                        let n = TableGenerator::seeded_noise(&v, seed);
                        (v, n)
                    }
                    NoiseSpec::Token { token } => (
                        generator_vocab(data, &[token.as_str()]),
                        Noise::Token { token: token.clone() },
                    ),
                };
                Box::new(TableGenerator::new(
                    Arc::new(vocab),
                    TableGeneratorConfig {
                        initial_mass: *initial_mass,
                        step: *step,
                        seed,
                    },
                    noise,
                )?)
            }
            GeneratorSpec::Plugin { command, args } => Box::new(AdapterGenerator::new(
                spawn(PluginSpec {
                    command: command.clone(),
                    args: args.clone(),
                })?,
                Arc::new(generator_vocab(data, &[])),
            )),
        };
        let extractor: Box<dyn ExtractorBackend> = match &b.extractor {
            ExtractorSpec::Fidelity { initial_fidelity, delta } => {
                let gold: Vec<AnnotatedSentence> = data.train.iter().chain(&data.dev).cloned().collect();
                Box::new(FidelityExtractor::new(
                    data.schema.clone(),
                    FidelityConfig {
                        initial_fidelity: *initial_fidelity,
                        delta: *delta,
                        seed: stream_seed(config.seed, EXTRACTOR, 0),
                    },
                    &gold,
                )?)
            }
            ExtractorSpec::Plugin { command, args } => Box::new(AdapterExtractor::new(
                spawn(PluginSpec {
                    command: command.clone(),
                    args: args.clone(),
                })?,
                data.schema.clone(),
            )),
        };
        let policy: Box<dyn PolicyBackend> = match &b.policy {
            PolicySpec::CoverageRule {
                covered_level,
                uncovered_level,
                flip_rate,
                learning_rate,
            } => Box::new(CoverageRulePolicy::new(CoverageRuleConfig {
                covered_level: *covered_level,
                uncovered_level: *uncovered_level,
                flip_rate: *flip_rate,
                learning_rate: *learning_rate,
                seed: stream_seed(config.seed, POLICY, 0),
            })?),
            PolicySpec::Fixed { retain_probability } => Box::new(FixedPolicy(*retain_probability)),
            PolicySpec::Plugin { command, args } => Box::new(AdapterPolicy::new(spawn(PluginSpec {
                command: command.clone(),
                args: args.clone(),
            })?)),
        };
        let mut masked_lm: Box<dyn MaskedLmBackend> = match &b.masked_lm {
            MaskedLmSpec::Unigram => Box::new(UnigramMaskedLm::new()),
            MaskedLmSpec::Uniform { vocab_size } => {
                if *vocab_size == 0 {
                    return Err(Error::Config("`backends.masked_lm.vocab_size` must be positive".into()));
                }
                Box::new(UniformMaskedLm::new(*vocab_size))
            }
            MaskedLmSpec::Plugin { command, args } => Box::new(AdapterMaskedLm::new(spawn(PluginSpec {
                command: command.clone(),
                args: args.clone(),
            })?)),
        };
        masked_lm.fine_tune(&data.train_contexts())?;
        Ok(Backends {
            generator,
            extractor,
            policy,
            masked_lm,
        })
    }
}

/// One generated sentence and everything derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationInstance {
    pub source_id: SampleId,
    pub input: GenerationInput,
    pub records: Vec<EventRecord>,
    pub text: String,
    pub covered: bool,
    pub policy_input: PolicyInput,
}

/// Build generation inputs for every source; masks come from a per-source
/// stream so the result does not depend on iteration order.
pub fn generation_inputs(
    config: &RunConfig,
    data: &RunData,
    stream_name: &str,
    index: u64,
) -> Result<Vec<(GenerationInput, Vec<EventRecord>)>> {
    data.sources()
        .into_iter()
        .map(|s| {
            let mut rng = stream(config.seed, &format!("{stream_name}:{}", s.id), index);
            let input = build_generation_input(&data.schema, s, config.mask_rate, &mut rng, config.protect_event_tokens)?;
            Ok((input, s.records.clone()))
        })
        .collect()
}

pub fn generate_instances(
    generator: &dyn GeneratorBackend,
    inputs: Vec<(GenerationInput, Vec<EventRecord>)>,
) -> Result<Vec<GenerationInstance>> {
    inputs
        .into_iter()
        .map(|(input, records)| {
            let gen = generator.generate(&input)?;
            let (covered, total) = coverage_counts(&records, &gen.text);
            let policy_input = build_policy_input(&input.event_description, &gen.text)?;
            Ok(GenerationInstance {
                source_id: input.source_id.clone(),
                input,
                records,
                covered: covered == total,
                text: gen.text,
                policy_input,
            })
        })
        .collect()
}

/// Coverage over a generated set.
pub fn instance_coverage(instances: &[GenerationInstance]) -> Result<f64> {
    crate::generation_training::coverage_rate(instances.iter().map(|g| (g.records.as_slice(), g.text.as_str())))
}

/// Re-anchor the source records in the generated text. Elements that cannot
/// be found are dropped; the example is complete when none were.
pub fn reanchor(instance: &GenerationInstance, id: String) -> ExtractorExample {
    let mut decoder = OffsetDecoder::new(&instance.text);
    let mut complete = true;
    let mut records = Vec::new();
    for r in &instance.records {
        let Some(trigger) = decoder.decode(&r.trigger.text, None) else {
            complete = false;
            continue;
        };
        let mut arguments = Vec::new();
        for a in &r.arguments {
            match decoder.decode(&a.span.text, Some(&trigger)) {
                Some(span) => arguments.push(Argument::new(a.role.clone(), span)),
                None => complete = false,
            }
        }
        records.push(EventRecord {
            event_type: r.event_type.clone(),
            trigger,
            arguments,
        });
    }
    ExtractorExample {
        sentence: AnnotatedSentence {
            id,
            context: instance.text.clone(),
            records,
            relations: Vec::new(),
        },
        origin: ExampleOrigin::Generated { complete },
    }
}

pub fn original_examples(sentences: &[AnnotatedSentence]) -> Vec<ExtractorExample> {
    sentences
        .iter()
        .map(|s| ExtractorExample {
            sentence: s.clone(),
            origin: ExampleOrigin::Original,
        })
        .collect()
}

/// Extract every schema type from one sentence and decode offsets.
pub fn predict_sentence(
    extractor: &dyn ExtractorBackend,
    schema: &EventSchema,
    sentence: &AnnotatedSentence,
) -> Result<AnnotatedSentence> {
    let mut decoder = OffsetDecoder::new(&sentence.context);
    let mut records = Vec::new();
    for event_type in schema.event_types() {
        let input = build_extraction_input(schema, event_type, &sentence.context)?;
        let answer = extractor.extract(&input)?;
        for parsed in parse_answered_prompt(&answer, schema, event_type)? {
            let Some(trigger) = decoder.decode(&parsed.trigger, None) else {
                continue;
            };
            let arguments = parsed
                .arguments
                .iter()
                .filter_map(|(role, text)| {
                    decoder
                        .decode(text, Some(&trigger))
                        .map(|span| Argument::new(role.clone(), span))
                })
                .collect();
            records.push(EventRecord {
                event_type: event_type.to_string(),
                trigger,
                arguments,
            });
        }
    }
    Ok(AnnotatedSentence {
        id: sentence.id.clone(),
        context: sentence.context.clone(),
        records,
        relations: Vec::new(),
    })
}

pub fn evaluate(extractor: &dyn ExtractorBackend, schema: &EventSchema, gold: &[AnnotatedSentence]) -> Result<ScoreReport> {
    let predictions = gold
        .iter()
        .map(|s| predict_sentence(extractor, schema, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(score_corpus(&predictions, gold))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualitySnapshot {
    pub pll: f64,
    pub distinct2: f64,
    pub distinct3: f64,
}

pub fn quality(masked_lm: &dyn MaskedLmBackend, instances: &[GenerationInstance], original: &[String]) -> Result<QualitySnapshot> {
    let texts: Vec<&str> = instances.iter().map(|g| g.text.as_str()).collect();
    Ok(QualitySnapshot {
        pll: corpus_pll(masked_lm, &texts)?.mean,
        distinct2: novel_distinct_ngrams(&texts, original, 2)?.ratio,
        distinct3: novel_distinct_ngrams(&texts, original, 3)?.ratio,
    })
}
