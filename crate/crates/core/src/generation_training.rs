//! Argument-aware matching and the generator loss arithmetic.
//!
//! Per-sample quantities (`lm`, `arg`) are stored as log-likelihoods, i.e.
//! sums of `log p`; the batch losses carry the leading minus.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_model::EventRecord;
use crate::serialization::contains_phrase;

/// Floor applied to probabilities before taking logs.
pub const LOG_EPS: f64 = 1e-12;
/// Row-sum tolerance for probability matrices.
pub const ROW_SUM_TOL: f64 = 1e-6;

/// Ordered token list with O(1) lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut out = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in tokens {
            if !out.index.contains_key(&t) {
                out.index.insert(t.clone(), out.tokens.len());
                out.tokens.push(t);
            }
        }
        out
    }

    /// Sorted distinct whitespace tokens of `texts`, plus `extra`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, extra: &[&str]) -> Self {
        let mut all: Vec<String> = texts
            .into_iter()
            .flat_map(str::split_whitespace)
            .map(str::to_string)
            .chain(extra.iter().map(|t| t.to_string()))
            .collect();
        all.sort();
        all.dedup();
        Vocab::new(all)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Per-position distributions over a fixed vocabulary.
#[derive(Debug, Clone)]
pub struct TokenProbMatrix {
    vocab: Arc<Vocab>,
    rows: Vec<Vec<f64>>,
}

impl TokenProbMatrix {
    /// Checks width, non-negativity and unit row sums.
    pub fn new(vocab: Arc<Vocab>, rows: Vec<Vec<f64>>) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if row.len() != vocab.len() {
                return Err(Error::InvalidInput(format!(
                    "row {i} has width {} but the vocabulary has {} tokens",
                    row.len(),
                    vocab.len()
                )));
            }
            if let Some(j) = row.iter().position(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::InvalidInput(format!(
                    "row {i} entry {j} is not a probability ({})",
                    row[j]
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidInput(format!("row {i} sums to {sum}, not 1")));
            }
        }
        Ok(TokenProbMatrix { vocab, rows })
    }

    pub fn vocab(&self) -> &Arc<Vocab> {
        &self.vocab
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn prob(&self, position: usize, token: usize) -> f64 {
        self.rows[position][token]
    }
}

/// A trigger or argument missing from the generated text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UncoveredElement {
    pub text: String,
    pub words: Vec<String>,
    /// Vocabulary index of each word: the hot entry of its one-hot vector.
    pub onehots: Vec<usize>,
}

impl UncoveredElement {
    pub fn new(text: &str, vocab: &Vocab) -> std::result::Result<Self, Vec<String>> {
        let words: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        let missing: Vec<String> = words.iter().filter(|w| vocab.id(w).is_none()).cloned().collect();
        if !missing.is_empty() || words.is_empty() {
            return Err(missing);
        }
        let onehots = words.iter().map(|w| vocab.id(w).expect("checked")).collect();
        Ok(UncoveredElement {
            text: text.to_string(),
            words,
            onehots,
        })
    }

    pub fn width(&self) -> usize {
        self.words.len()
    }

    /// Dense one-hot for word `offset`.
    pub fn onehot(&self, offset: usize, vocab_len: usize) -> Vec<f64> {
        let mut v = vec![0.0; vocab_len];
        v[self.onehots[offset]] = 1.0;
        v
    }
}

/// An uncovered element that cannot be one-hot encoded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnencodableElement {
    pub text: String,
    pub missing_words: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UncoveredReport {
    pub elements: Vec<UncoveredElement>,
    pub unencodable: Vec<UnencodableElement>,
}

/// Trigger and arguments of `record` that do not appear (on word
/// boundaries) in `generated_text`.
pub fn find_uncovered_elements(record: &EventRecord, generated_text: &str, vocab: &Vocab) -> UncoveredReport {
    let mut report = UncoveredReport::default();
    for text in record.element_texts() {
        if contains_phrase(generated_text, text) {
            continue;
        }
        match UncoveredElement::new(text, vocab) {
            Ok(e) => report.elements.push(e),
            Err(missing_words) => report.unencodable.push(UnencodableElement {
                text: text.to_string(),
                missing_words,
            }),
        }
    }
    report
}

/// Inclusive window `[start, end]` over matrix rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    pub fn overlaps(&self, other: &Window) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// All stride-1 windows of `width` rows over `rows` positions.
pub fn candidate_windows(rows: usize, width: usize) -> Vec<Window> {
    if width == 0 || width > rows {
        return Vec::new();
    }
    (0..=rows - width)
        .map(|start| Window {
            start,
            end: start + width - 1,
        })
        .collect()
}

/// Summed L1 distance between the element's one-hots and the rows under the window.
pub fn l1_window_distance(element: &UncoveredElement, probs: &TokenProbMatrix, window: Window) -> f64 {
    debug_assert_eq!(window.end + 1 - window.start, element.width());
    (0..element.width())
        .map(|j| {
            let row = &probs.rows[window.start + j];
            let hot = element.onehots[j];
            row.iter()
                .enumerate()
                .map(|(v, p)| if v == hot { (1.0 - p).abs() } else { p.abs() })
                .sum::<f64>()
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub element: usize,
    pub window: Window,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AssignmentResult {
    pub placements: Vec<Placement>,
    pub unplaced: Vec<usize>,
}

/// Pool every (element, window) score, then repeatedly commit the lowest
/// remaining pair whose element is free and whose window overlaps nothing
/// already committed. Ties go to the lower window start, then the lower
/// element index.
pub fn greedy_assign(elements: &[UncoveredElement], probs: &TokenProbMatrix) -> AssignmentResult {
    let mut pool: Vec<Placement> = elements
        .iter()
        .enumerate()
        .flat_map(|(m, e)| {
            candidate_windows(probs.len(), e.width())
                .into_iter()
                .map(move |w| (m, e, w))
        })
        .map(|(m, e, window)| Placement {
            element: m,
            window,
            score: l1_window_distance(e, probs, window),
        })
        .collect();
    pool.sort_by(|a, b| {
        a.score
            .total_cmp(&b.score)
            .then(a.window.start.cmp(&b.window.start))
            .then(a.element.cmp(&b.element))
    });
    let mut placed = vec![false; elements.len()];
    let mut placements: Vec<Placement> = Vec::new();
    for cand in pool {
        if placed[cand.element] || placements.iter().any(|p| p.window.overlaps(&cand.window)) {
            continue;
        }
        placed[cand.element] = true;
        placements.push(cand);
    }
    let unplaced = (0..elements.len()).filter(|&m| !placed[m]).collect();
    AssignmentResult { placements, unplaced }
}

/// A log-likelihood with a count of clamped (zero-probability) terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LogLik {
    pub value: f64,
    pub clamped: usize,
}

impl LogLik {
    fn add(&mut self, p: f64) {
        if p < LOG_EPS {
            self.clamped += 1;
            self.value += LOG_EPS.ln();
        } else {
            self.value += p.ln();
        }
    }
}

pub fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_EPS).ln()
}

/// Σ_s log p_s(y_s).
pub fn lm_loss(probs: &TokenProbMatrix, target: &[usize]) -> Result<LogLik> {
    if target.len() != probs.len() {
        return Err(Error::InvalidInput(format!(
            "target has {} tokens but the matrix has {} rows",
            target.len(),
            probs.len()
        )));
    }
    let mut ll = LogLik::default();
    for (s, &y) in target.iter().enumerate() {
        ll.add(probs.prob(s, y));
    }
    Ok(ll)
}

/// Σ over placed elements and their window positions of log p_k(word at offset).
pub fn argument_loss(
    probs: &TokenProbMatrix,
    assignment: &AssignmentResult,
    elements: &[UncoveredElement],
) -> Result<LogLik> {
    let mut ll = LogLik::default();
    for p in &assignment.placements {
        let e = elements
            .get(p.element)
            .ok_or_else(|| Error::InvalidInput(format!("placement names element {}", p.element)))?;
        if p.window.end >= probs.len() || p.window.end + 1 - p.window.start != e.width() {
            return Err(Error::InvalidInput(format!(
                "window {:?} does not fit element {} in {} rows",
                p.window,
                p.element,
                probs.len()
            )));
        }
        for (j, k) in (p.window.start..=p.window.end).enumerate() {
            ll.add(probs.prob(k, e.onehots[j]));
        }
    }
    Ok(ll)
}

/// Per-sample log-likelihoods feeding the batch loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleLoss {
    pub lm: f64,
    pub arg: f64,
}

/// `−(1/N) Σ (β·lm + γ·arg)`.
pub fn generation_loss(samples: &[SampleLoss], beta: f64, gamma: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("generation loss over an empty batch".into()));
    }
    let n = samples.len() as f64;
    Ok(-samples.iter().map(|s| beta * s.lm + gamma * s.arg).sum::<f64>() / n)
}

/// `−(1/N) Σ (β·w·lm + γ·w·arg)`.
pub fn weighted_generation_loss(samples: &[SampleLoss], weights: &[f64], beta: f64, gamma: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("generation loss over an empty batch".into()));
    }
    if weights.len() != samples.len() {
        return Err(Error::InvalidInput(format!(
            "{} weights for {} samples",
            weights.len(),
            samples.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::InvalidInput(format!("sample weight {w} is negative")));
    }
    let n = samples.len() as f64;
    Ok(-samples
        .iter()
        .zip(weights)
        .map(|(s, w)| beta * w * s.lm + gamma * w * s.arg)
        .sum::<f64>()
        / n)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenLossReport {
    pub samples: Vec<SampleLoss>,
    pub loss: f64,
    pub weighted_loss: Option<f64>,
    pub beta: f64,
    pub gamma: f64,
    pub clamped: usize,
    pub unencodable: usize,
}

/// Everything the argument loss needs for one generated sample.
#[derive(Debug, Clone)]
pub struct SampleAlignment {
    pub elements: Vec<UncoveredElement>,
    pub assignment: AssignmentResult,
    pub unencodable: Vec<UnencodableElement>,
}

pub fn align_sample(records: &[EventRecord], generated_text: &str, probs: &TokenProbMatrix) -> SampleAlignment {
    let mut elements = Vec::new();
    let mut unencodable = Vec::new();
    for r in records {
        let rep = find_uncovered_elements(r, generated_text, probs.vocab());
        elements.extend(rep.elements);
        unencodable.extend(rep.unencodable);
    }
    let assignment = greedy_assign(&elements, probs);
    SampleAlignment {
        elements,
        assignment,
        unencodable,
    }
}

/// `(lm, arg)` for one sample: the language-model term over the target and
/// the argument term over greedily matched windows of the generated rows.
pub fn sample_loss(
    target_probs: &TokenProbMatrix,
    target: &[usize],
    generated_probs: &TokenProbMatrix,
    alignment: &SampleAlignment,
) -> Result<(SampleLoss, usize)> {
    let lm = lm_loss(target_probs, target)?;
    let arg = argument_loss(generated_probs, &alignment.assignment, &alignment.elements)?;
    Ok((
        SampleLoss {
            lm: lm.value,
            arg: arg.value,
        },
        lm.clamped + arg.clamped,
    ))
}

/// Counts of (covered, total) triggers and arguments.
pub fn coverage_counts(records: &[EventRecord], generated_text: &str) -> (usize, usize) {
    let mut covered = 0;
    let mut total = 0;
    for r in records {
        for t in r.element_texts() {
            total += 1;
            if contains_phrase(generated_text, t) {
                covered += 1;
            }
        }
    }
    (covered, total)
}

/// Fraction of triggers and arguments present in their generated text.
pub fn coverage_rate<'a, I>(instances: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a [EventRecord], &'a str)>,
{
    let (covered, total) = instances
        .into_iter()
        .map(|(records, text)| coverage_counts(records, text))
        .fold((0, 0), |(c, t), (c2, t2)| (c + c2, t + t2));
    if total == 0 {
        return Err(Error::InvalidInput("coverage over zero triggers/arguments".into()));
    }
    Ok(covered as f64 / total as f64)
}
