//! Closed-form masked language models for fluency scoring.

use std::collections::BTreeMap;

use super::{BackendResult, MaskedLmBackend};
use crate::error::BackendError;

fn check_position(tokens: &[String], position: usize) -> BackendResult<()> {
    if position >= tokens.len() {
        return Err(BackendError::failed(
            "masked-lm",
            format!("position {position} outside a {}-token sentence", tokens.len()),
        ));
    }
    Ok(())
}

/// Every token has probability `1/V`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UniformMaskedLm {
    vocab_size: usize,
}

impl UniformMaskedLm {
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size > 0, "vocabulary size must be positive");
        UniformMaskedLm { vocab_size }
    }
}

impl MaskedLmBackend for UniformMaskedLm {
    fn token_prob(&self, tokens: &[String], position: usize) -> BackendResult<f64> {
        check_position(tokens, position)?;
        Ok(1.0 / self.vocab_size as f64)
    }
}

/// Context-free unigram model with add-one smoothing; one extra type is
/// reserved for unseen tokens.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UnigramMaskedLm {
    counts: BTreeMap<String, usize>,
    total: usize,
}

impl UnigramMaskedLm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn types(&self) -> usize {
        self.counts.len()
    }
}

impl MaskedLmBackend for UnigramMaskedLm {
    fn token_prob(&self, tokens: &[String], position: usize) -> BackendResult<f64> {
        check_position(tokens, position)?;
        let c = self.counts.get(&tokens[position]).copied().unwrap_or(0);
        Ok((c + 1) as f64 / (self.total + self.counts.len() + 1) as f64)
    }

    fn fine_tune(&mut self, corpus: &[String]) -> BackendResult<()> {
        for line in corpus {
            for t in line.split_whitespace() {
                *self.counts.entry(t.to_string()).or_default() += 1;
                self.total += 1;
            }
        }
        Ok(())
    }
}
