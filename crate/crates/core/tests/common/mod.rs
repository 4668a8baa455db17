//! Independent oracles and random-instance builders shared by the
//! integration and acceptance targets.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use evaug_core::event_model::{Argument, EventRecord, Span};
use evaug_core::generation_training::{AssignmentResult, Placement, TokenProbMatrix, UncoveredElement, Vocab, Window};
use evaug_core::orchestrator::RunConfig;
use evaug_core::policy::Action;
use rand::Rng;

pub fn toy_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/toy")
}

pub fn toy_config() -> RunConfig {
    RunConfig::toy(&toy_dir())
}

pub fn vocab_of(n: usize) -> Arc<Vocab> {
    Arc::new(Vocab::new((0..n).map(|i| format!("w{i}"))))
}

/// A probability row: one-hot, a coarse grid (to force ties) or continuous.
pub fn random_row<R: Rng>(rng: &mut R, v: usize) -> Vec<f64> {
    match rng.gen_range(0..3) {
        0 => {
            let mut row = vec![0.0; v];
            row[rng.gen_range(0..v)] = 1.0;
            row
        }
        1 => {
            let mut row = vec![0.0; v];
            for _ in 0..4 {
                row[rng.gen_range(0..v)] += 0.25;
            }
            row
        }
        _ => {
            let raw: Vec<f64> = (0..v).map(|_| rng.gen::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / s).collect()
        }
    }
}

pub fn random_matrix<R: Rng>(rng: &mut R, vocab: &Arc<Vocab>, rows: usize) -> TokenProbMatrix {
    let rows = (0..rows).map(|_| random_row(rng, vocab.len())).collect();
    TokenProbMatrix::new(vocab.clone(), rows).expect("rows are distributions")
}

pub fn random_elements<R: Rng>(rng: &mut R, vocab: &Vocab, count: usize, max_width: usize) -> Vec<UncoveredElement> {
    (0..count)
        .map(|_| {
            let w = rng.gen_range(1..=max_width);
            let text: Vec<&str> = (0..w).map(|_| vocab.token(rng.gen_range(0..vocab.len()))).collect();
            UncoveredElement::new(&text.join(" "), vocab).expect("in vocabulary")
        })
        .collect()
}

fn l1(element: &UncoveredElement, rows: &[Vec<f64>], start: usize) -> f64 {
    let mut total = 0.0;
    for j in 0..element.width() {
        let mut d = 0.0;
        for (v, p) in rows[start + j].iter().enumerate() {
            let hot = if v == element.onehots[j] { 1.0 } else { 0.0 };
            d += (hot - p).abs();
        }
        total += d;
    }
    total
}

/// The greedy rule simulated step by step: at every step rescan all
/// admissible (element, window) pairs and commit the smallest by
/// (score, window start, element index).
pub fn greedy_oracle(elements: &[UncoveredElement], probs: &TokenProbMatrix) -> AssignmentResult {
    let rows = probs.rows();
    let mut placements: Vec<Placement> = Vec::new();
    loop {
        let mut best: Option<Placement> = None;
        for (m, e) in elements.iter().enumerate() {
            if placements.iter().any(|p| p.element == m) || e.width() > rows.len() {
                continue;
            }
            for start in 0..=rows.len() - e.width() {
                let end = start + e.width() - 1;
                if placements.iter().any(|p| start <= p.window.end && p.window.start <= end) {
                    continue;
                }
                let score = l1(e, rows, start);
                let better = match &best {
                    None => true,
                    Some(b) => (score, start, m) < (b.score, b.window.start, b.element),
                };
                if better {
                    best = Some(Placement {
                        element: m,
                        window: Window { start, end },
                        score,
                    });
                }
            }
        }
        match best {
            Some(p) => placements.push(p),
            None => break,
        }
    }
    let unplaced = (0..elements.len()).filter(|m| !placements.iter().any(|p| p.element == *m)).collect();
    AssignmentResult { placements, unplaced }
}

pub fn ln_clamped(p: f64) -> f64 {
    if p < 1e-12 {
        1e-12f64.ln()
    } else {
        p.ln()
    }
}

/// Generator loss written out from the raw pieces.
pub fn generation_loss_oracle(lm: &[f64], arg: &[f64], weights: Option<&[f64]>, beta: f64, gamma: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..lm.len() {
        let w = weights.map_or(1.0, |w| w[i]);
        acc += beta * w * lm[i] + gamma * w * arg[i];
    }
    -acc / lm.len() as f64
}

/// Reward-weighted policy loss written out from the raw pieces.
pub fn retrain_loss_oracle(new: &[(Action, f64)], old: &[(Action, f64)], reward: f64) -> f64 {
    let lp = |(a, p): &(Action, f64)| match a {
        Action::Retain => ln_clamped(*p),
        Action::Remove => ln_clamped(1.0 - *p),
    };
    reward * new.iter().map(lp).sum::<f64>() - reward * old.iter().map(lp).sum::<f64>()
}

pub const TYPES: [&str; 2] = ["Attack", "Move"];
pub const ROLES: [&str; 3] = ["Agent", "Place", "Target"];

/// Records over a small offset grid so that coincidences are frequent.
pub fn random_records<R: Rng>(rng: &mut R, max: usize) -> Vec<EventRecord> {
    (0..rng.gen_range(0..=max))
        .map(|_| {
            let span = |rng: &mut R| {
                let s = rng.gen_range(0..6);
                Span::new("x", s, s + rng.gen_range(1..3))
            };
            EventRecord {
                event_type: TYPES[rng.gen_range(0..2)].to_string(),
                trigger: span(rng),
                arguments: (0..rng.gen_range(0..3))
                    .map(|_| Argument::new(ROLES[rng.gen_range(0..3)], span(rng)))
                    .collect(),
            }
        })
        .collect()
}

/// Greedy one-to-one counting with explicit used flags.
pub fn count_oracle<K: PartialEq>(pred: &[K], gold: &[K]) -> (usize, usize, usize) {
    let mut used = vec![false; gold.len()];
    let mut correct = 0;
    for p in pred {
        if let Some(i) = (0..gold.len()).find(|&i| !used[i] && gold[i] == *p) {
            used[i] = true;
            correct += 1;
        }
    }
    (correct, pred.len(), gold.len())
}

pub fn prf_oracle((c, p, g): (usize, usize, usize)) -> (f64, f64, f64) {
    let pr = if p == 0 { 0.0 } else { c as f64 / p as f64 };
    let rc = if g == 0 { 0.0 } else { c as f64 / g as f64 };
    let f = if pr + rc == 0.0 { 0.0 } else { 2.0 * pr * rc / (pr + rc) };
    (pr, rc, f)
}

pub fn trigger_keys(rs: &[EventRecord]) -> Vec<(String, usize, usize)> {
    rs.iter().map(|r| (r.event_type.clone(), r.trigger.start, r.trigger.end)).collect()
}

pub fn argument_keys(rs: &[EventRecord]) -> Vec<(String, String, usize, usize)> {
    rs.iter()
        .flat_map(|r| {
            r.arguments
                .iter()
                .map(move |a| (r.event_type.clone(), a.role.clone(), a.span.start, a.span.end))
        })
        .collect()
}

/// Three small corpora with distinct-2 / distinct-3 novelty counted by hand.
/// Each entry: (generated, original, (novel2, total2), (novel3, total3)).
pub type DiversityFixture = (&'static [&'static str], &'static [&'static str], (usize, usize), (usize, usize));

pub const DIVERSITY_FIXTURES: [DiversityFixture; 3] = [
    // bigrams {the cat, cat sat, the dog, dog sat}, only "the cat" seen before.
    (&["the cat sat", "the dog sat"], &["the cat ran"], (3, 4), (2, 2)),
    // bigrams {a b, b a}, "b a" seen; trigrams {a b a, b a b}, none seen.
    (&["a b a b"], &["b a"], (1, 2), (2, 2)),
    // every generated n-gram occurs in the original.
    (&["x y z", "x y"], &["w x y z"], (0, 2), (0, 1)),
];

use evaug_core::backends::mock_generator::{FrozenSample, Noise, RowKind, TableGenerator, TableGeneratorConfig};

/// One random gradient-check configuration: returns the norm-wise relative
/// error between the analytic gradient and central differences.
pub fn gradient_check_case<R: Rng>(rng: &mut R) -> f64 {
    let v = rng.gen_range(3..=12);
    let vocab = vocab_of(v);
    let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mut gen = TableGenerator::new(
        vocab,
        TableGeneratorConfig {
            initial_mass: 0.5,
            step: 0.0,
            seed: 0,
        },
        Noise::Logits { logits },
    )
    .expect("valid generator");
    let sources: Vec<String> = (0..rng.gen_range(1..=3)).map(|i| format!("s{i}")).collect();
    for s in &sources {
        gen.set_mass(s, rng.gen_range(0.05..0.95));
    }
    let frozen: Vec<FrozenSample> = (0..rng.gen_range(1..=4))
        .map(|_| {
            let len = rng.gen_range(1..=8);
            let rows: Vec<RowKind> = (0..len)
                .map(|_| {
                    let t = rng.gen_range(0..v);
                    if rng.gen_bool(0.6) {
                        RowKind::Mixture { target: t }
                    } else {
                        RowKind::Copy(t)
                    }
                })
                .collect();
            let target = rows
                .iter()
                .map(|k| match *k {
                    RowKind::Copy(t) | RowKind::Mixture { target: t } => t,
                })
                .collect();
            let arg_terms = (0..rng.gen_range(0..=3))
                .filter_map(|_| {
                    let k = rng.gen_range(0..len);
                    matches!(rows[k], RowKind::Mixture { .. }).then(|| (k, rng.gen_range(0..v)))
                })
                .collect();
            FrozenSample {
                source_id: sources[rng.gen_range(0..sources.len())].clone(),
                rows,
                target,
                arg_terms,
                weight: rng.gen_range(0.5..3.0),
            }
        })
        .collect();
    let (beta, gamma) = (rng.gen_range(0.1..1.0), rng.gen_range(0.1..1.0));
    let grad = gen.objective_gradient(&frozen, beta, gamma);

    let h = 1e-6;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for s in &sources {
        let m = gen.mass(s);
        gen.set_mass(s, m + h);
        let up = gen.objective(&frozen, beta, gamma);
        gen.set_mass(s, m - h);
        let down = gen.objective(&frozen, beta, gamma);
        gen.set_mass(s, m);
        numeric.push((up - down) / (2.0 * h));
        analytic.push(grad.masses.get(s).copied().unwrap_or(0.0));
    }
    for j in 0..v {
        let z = gen.noise_logits_mut().expect("logit noise")[j];
        gen.noise_logits_mut().unwrap()[j] = z + h;
        let up = gen.objective(&frozen, beta, gamma);
        gen.noise_logits_mut().unwrap()[j] = z - h;
        let down = gen.objective(&frozen, beta, gamma);
        gen.noise_logits_mut().unwrap()[j] = z;
        numeric.push((up - down) / (2.0 * h));
        analytic.push(grad.noise_logits[j]);
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
pub mod scripted;
