//! Corpus diagnostics: pseudo-log-likelihood fluency and novel distinct-n diversity.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::backends::MaskedLmBackend;
use crate::error::{Error, Result};
use crate::generation_training::clamped_ln;

/// Mean over positions of `log P(w_s | sentence with s masked)`.
pub fn pll_sentence(backend: &dyn MaskedLmBackend, tokens: &[String]) -> Result<f64> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput("PLL of an empty sentence".into()));
    }
    let mut terms = Vec::with_capacity(tokens.len());
    for s in 0..tokens.len() {
        terms.push(clamped_ln(backend.token_prob(tokens, s)?));
    }
    Ok(running_mean(&terms))
}

/// Incremental mean; a constant sequence yields that constant exactly.
fn running_mean(xs: &[f64]) -> f64 {
    let mut mean = 0.0;
    for (k, x) in xs.iter().enumerate() {
        mean += (x - mean) / (k + 1) as f64;
    }
    mean
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PllReport {
    pub per_sentence: Vec<f64>,
    pub mean: f64,
}

/// Arithmetic mean of sentence PLLs; sentences are whitespace-tokenized.
pub fn corpus_pll<S: AsRef<str>>(backend: &dyn MaskedLmBackend, corpus: &[S]) -> Result<PllReport> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("PLL of an empty corpus".into()));
    }
    let per_sentence = corpus
        .iter()
        .map(|s| {
            let tokens: Vec<String> = s.as_ref().split_whitespace().map(str::to_string).collect();
            pll_sentence(backend, &tokens)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = running_mean(&per_sentence);
    Ok(PllReport { per_sentence, mean })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub n: usize,
    pub novel_distinct: usize,
    pub total_distinct: usize,
    pub ratio: f64,
}

fn ngrams<S: AsRef<str>>(corpus: &[S], n: usize) -> BTreeSet<Vec<String>> {
    let mut out = BTreeSet::new();
    for s in corpus {
        let toks: Vec<&str> = s.as_ref().split_whitespace().collect();
        for w in toks.windows(n) {
            out.insert(w.iter().map(|t| t.to_string()).collect());
        }
    }
    out
}

/// Distinct n-grams of `generated` that never occur in `original`.
pub fn novel_distinct_ngrams<S: AsRef<str>, T: AsRef<str>>(
    generated: &[S],
    original: &[T],
    n: usize,
) -> Result<DiversityReport> {
    if n == 0 {
        return Err(Error::InvalidInput("n-gram order must be at least 1".into()));
    }
    let gen = ngrams(generated, n);
    let orig = ngrams(original, n);
    let novel_distinct = gen.difference(&orig).count();
    let total_distinct = gen.len();
    let ratio = if total_distinct == 0 {
        0.0
    } else {
        novel_distinct as f64 / total_distinct as f64
    };
    Ok(DiversityReport {
        n,
        novel_distinct,
        total_distinct,
        ratio,
    })
}
