//! Interface invariants every backend must satisfy, mock or plugin.

use crate::generation_training::{Vocab, ROW_SUM_TOL};
use crate::serialization::{ExtractionInput, GenerationInput, PolicyInput};

use super::{ExtractorBackend, GeneratorBackend, MaskedLmBackend, PolicyBackend};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Violation {
    #[error("{rows} probability rows for {tokens} tokens (first unmatched index {index})")]
    RowCount { rows: usize, tokens: usize, index: usize },
    #[error("row {index} has {len} entries, vocabulary has {vocab}")]
    RowWidth { index: usize, len: usize, vocab: usize },
    #[error("row {index} sums to {sum}")]
    RowSum { index: usize, sum: f64 },
    #[error("row {index} has an entry outside [0, 1]")]
    RowRange { index: usize },
    #[error("token {index} `{token}` is not in the vocabulary")]
    UnknownToken { index: usize, token: String },
    #[error("text `{text}` does not join the returned tokens")]
    TextMismatch { text: String },
    #[error("probability {value} outside [0, 1] for {what}")]
    Probability { what: String, value: f64 },
    #[error("{what}: two identical calls disagreed")]
    Nondeterministic { what: String },
    #[error("{what}: backend error: {message}")]
    Backend { what: String, message: String },
}

/// Checks a raw generation before it becomes a matrix.
pub fn check_rows(vocab: &Vocab, tokens: &[String], rows: &[Vec<f64>]) -> Result<(), Violation> {
    if rows.len() != tokens.len() {
        return Err(Violation::RowCount {
            rows: rows.len(),
            tokens: tokens.len(),
            index: rows.len().min(tokens.len()),
        });
    }
    for (index, row) in rows.iter().enumerate() {
        if row.len() != vocab.len() {
            return Err(Violation::RowWidth {
                index,
                len: row.len(),
                vocab: vocab.len(),
            });
        }
        if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Violation::RowRange { index });
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Violation::RowSum { index, sum });
        }
    }
    for (index, token) in tokens.iter().enumerate() {
        if vocab.id(token).is_none() {
            return Err(Violation::UnknownToken {
                index,
                token: token.clone(),
            });
        }
    }
    Ok(())
}

fn backend_err(what: &str, e: impl std::fmt::Display) -> Violation {
    Violation::Backend {
        what: what.to_string(),
        message: e.to_string(),
    }
}

fn check_probability(what: &str, value: f64) -> Result<(), Violation> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(Violation::Probability {
            what: what.to_string(),
            value,
        })
    }
}

pub fn check_generator(backend: &dyn GeneratorBackend, inputs: &[GenerationInput]) -> Vec<Violation> {
    let vocab = backend.vocab();
    let mut out = Vec::new();
    for input in inputs {
        let what = format!("generate `{}`", input.source_id);
        let (a, b) = match (backend.generate(input), backend.generate(input)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                out.push(backend_err(&what, e));
                continue;
            }
        };
        if let Err(v) = check_rows(&vocab, &a.tokens, a.probs.rows()) {
            out.push(v);
        }
        if a.text != a.tokens.join(" ") {
            out.push(Violation::TextMismatch { text: a.text.clone() });
        }
        if a.text != b.text || a.probs.rows() != b.probs.rows() {
            out.push(Violation::Nondeterministic { what });
        }
    }
    out
}

pub fn check_extractor(backend: &dyn ExtractorBackend, inputs: &[ExtractionInput]) -> Vec<Violation> {
    let mut out = Vec::new();
    for input in inputs {
        let what = format!("extract `{}`", input.event_type);
        match (backend.extract(input), backend.extract(input)) {
            (Ok(a), Ok(b)) if a == b => {}
            (Ok(_), Ok(_)) => out.push(Violation::Nondeterministic { what }),
            (Err(e), _) | (_, Err(e)) => out.push(backend_err(&what, e)),
        }
    }
    out
}

pub fn check_policy(backend: &dyn PolicyBackend, inputs: &[PolicyInput]) -> Vec<Violation> {
    let mut out = Vec::new();
    for input in inputs {
        let what = format!("score `{}`", input.rendered);
        match (backend.score(input), backend.score(input)) {
            (Ok(a), Ok(b)) => {
                if let Err(v) = check_probability(&what, a) {
                    out.push(v);
                }
                if a.to_bits() != b.to_bits() {
                    out.push(Violation::Nondeterministic { what });
                }
            }
            (Err(e), _) | (_, Err(e)) => out.push(backend_err(&what, e)),
        }
    }
    out
}

pub fn check_masked_lm(backend: &dyn MaskedLmBackend, sentences: &[Vec<String>]) -> Vec<Violation> {
    let mut out = Vec::new();
    for tokens in sentences {
        for s in 0..tokens.len() {
            let what = format!("token_prob({s}) of `{}`", tokens.join(" "));
            match backend.token_prob(tokens, s) {
                Ok(p) => {
                    if let Err(v) = check_probability(&what, p) {
                        out.push(v);
                    }
                }
                Err(e) => out.push(backend_err(&what, e)),
            }
        }
    }
    out
}
