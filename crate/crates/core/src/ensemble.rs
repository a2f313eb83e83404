//! Score-level ensembling: convex combinations of per-model probability
//! vectors, with weights searched on validation accuracy.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{read_jsonl, write_jsonl, DataError};
use crate::model::argmax;
use crate::train::ScoreLine;

const SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("score sets disagree on question ids: only in {left:?}: {only_left:?}; only in {right:?}: {only_right:?}")]
    Alignment {
        left: String,
        right: String,
        only_left: Vec<u64>,
        only_right: Vec<u64>,
    },
    #[error("{tag}: vocabulary fingerprint {found} differs from {expected}")]
    Fingerprint {
        tag: String,
        found: String,
        expected: String,
    },
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error("{tag}: question {qid}: {reason}")]
    Scores {
        tag: String,
        qid: u64,
        reason: String,
    },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Probability vectors of one model, keyed by question id.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSet {
    pub tag: String,
    pub vocab_fingerprint: String,
    pub scores: BTreeMap<u64, Vec<f64>>,
}

impl ScoreSet {
    pub fn from_lines(tag: &str, lines: Vec<ScoreLine>) -> Result<Self, EnsembleError> {
        let first = lines.first().ok_or(EnsembleError::Empty("score set"))?;
        let fingerprint = first.vocab_fingerprint.clone();
        let width = first.scores.len();
        let mut scores = BTreeMap::new();
        for line in lines {
            let bad = |reason: String| EnsembleError::Scores {
                tag: tag.into(),
                qid: line.qid,
                reason,
            };
            if line.vocab_fingerprint != fingerprint {
                return Err(EnsembleError::Fingerprint {
                    tag: tag.into(),
                    found: line.vocab_fingerprint,
                    expected: fingerprint,
                });
            }
            if line.scores.len() != width {
                return Err(bad(format!(
                    "{} scores, expected {width}",
                    line.scores.len()
                )));
            }
            if let Some(v) = line.scores.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(bad(format!("score {v} is not a probability")));
            }
            let total: f64 = line.scores.iter().sum();
            if (total - 1.0).abs() > SUM_TOLERANCE {
                return Err(bad(format!("scores sum to {total}")));
            }
            if scores.insert(line.qid, line.scores).is_some() {
                return Err(bad("duplicate question id".into()));
            }
        }
        Ok(Self {
            tag: tag.into(),
            vocab_fingerprint: fingerprint,
            scores,
        })
    }

    /// Reads a score file; the tag is the file path.
    pub fn read(path: &Path) -> Result<Self, EnsembleError> {
        Self::from_lines(&path.display().to_string(), read_jsonl(path)?)
    }

    pub fn to_lines(&self) -> Vec<ScoreLine> {
        self.scores
            .iter()
            .map(|(&qid, s)| ScoreLine {
                qid,
                scores: s.clone(),
                vocab_fingerprint: self.vocab_fingerprint.clone(),
            })
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<(), EnsembleError> {
        Ok(write_jsonl(path, self.to_lines())?)
    }

    /// Share of `gold` questions whose argmax equals the gold label. `gold`
    /// must cover exactly this set's questions.
    pub fn accuracy(&self, gold: &BTreeMap<u64, usize>) -> Result<f64, EnsembleError> {
        if gold.is_empty() {
            return Err(EnsembleError::Empty("gold labels"));
        }
        check_ids(&self.tag, self.scores.keys(), "gold labels", gold.keys())?;
        let correct = self
            .scores
            .iter()
            .filter(|(q, s)| argmax(s) == gold[q])
            .count();
        Ok(correct as f64 / gold.len() as f64)
    }
}

fn check_ids<'a>(
    left: &str,
    a: impl Iterator<Item = &'a u64>,
    right: &str,
    b: impl Iterator<Item = &'a u64>,
) -> Result<(), EnsembleError> {
    let (a, b): (BTreeSet<u64>, BTreeSet<u64>) = (a.copied().collect(), b.copied().collect());
    if a == b {
        return Ok(());
    }
    Err(EnsembleError::Alignment {
        left: left.into(),
        right: right.into(),
        only_left: a.difference(&b).copied().collect(),
        only_right: b.difference(&a).copied().collect(),
    })
}

fn check_aligned(sets: &[ScoreSet]) -> Result<(), EnsembleError> {
    let first = sets
        .first()
        .ok_or(EnsembleError::Empty("list of score sets"))?;
    for s in &sets[1..] {
        if s.vocab_fingerprint != first.vocab_fingerprint {
            return Err(EnsembleError::Fingerprint {
                tag: s.tag.clone(),
                found: s.vocab_fingerprint.clone(),
                expected: first.vocab_fingerprint.clone(),
            });
        }
        check_ids(&first.tag, first.scores.keys(), &s.tag, s.scores.keys())?;
    }
    Ok(())
}

fn check_weights(w: &[f64], n: usize) -> Result<(), EnsembleError> {
    if w.len() != n {
        return Err(EnsembleError::Weights(format!(
            "{} weights for {n} score sets",
            w.len()
        )));
    }
    if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(EnsembleError::Weights(format!(
            "{w:?} has a negative or non-finite entry"
        )));
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(EnsembleError::Weights(format!(
            "{w:?} sums to {total}, not 1"
        )));
    }
    Ok(())
}

/// Per question, `Σ_k w_k · s_k`.
pub fn combine(sets: &[ScoreSet], w: &[f64]) -> Result<ScoreSet, EnsembleError> {
    check_aligned(sets)?;
    check_weights(w, sets.len())?;
    let first = &sets[0];
    let scores = first
        .scores
        .iter()
        .map(|(q, s0)| {
            let mut out = vec![0.0; s0.len()];
            for (set, &wk) in sets.iter().zip(w) {
                for (o, v) in out.iter_mut().zip(&set.scores[q]) {
                    *o += wk * v;
                }
            }
            (*q, out)
        })
        .collect();
    let tag = format!(
        "ensemble({})",
        sets.iter()
            .map(|s| s.tag.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(ScoreSet {
        tag,
        vocab_fingerprint: first.vocab_fingerprint.clone(),
        scores,
    })
}

pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

pub fn average_ensemble(sets: &[ScoreSet]) -> Result<ScoreSet, EnsembleError> {
    combine(sets, &uniform(sets.len()))
}

/// Every weight vector `k / m` with nonnegative integers `k` summing to `m`,
/// in lexicographic order of `k`.
pub fn lattice(n: usize, m: usize) -> Vec<Vec<usize>> {
    fn fill(prefix: &mut Vec<usize>, left: usize, slots: usize, out: &mut Vec<Vec<usize>>) {
        if slots == 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in 0..=left {
            prefix.push(k);
            fill(prefix, left - k, slots - 1, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if n > 0 {
        fill(&mut Vec::with_capacity(n), m, n, &mut out);
    }
    out
}

/// Beyond this many models the lattice is replaced by coordinate ascent.
pub const MAX_LATTICE_MODELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSearch {
    pub weights: Vec<f64>,
    pub val_accuracy: f64,
    pub uniform_val_accuracy: f64,
    pub method: String,
    pub candidates: usize,
}

struct Evaluator<'a> {
    sets: &'a [ScoreSet],
    qids: Vec<u64>,
    gold: Vec<usize>,
}

impl Evaluator<'_> {
    fn correct(&self, w: &[f64]) -> usize {
        let k = self.sets[0].scores.values().next().map_or(0, Vec::len);
        let mut combined = vec![0.0; k];
        self.qids
            .iter()
            .zip(&self.gold)
            .filter(|(q, &g)| {
                combined.iter_mut().for_each(|c| *c = 0.0);
                for (set, &wk) in self.sets.iter().zip(w) {
                    for (c, v) in combined.iter_mut().zip(&set.scores[q]) {
                        *c += wk * v;
                    }
                }
                argmax(&combined) == g
            })
            .count()
    }
}

/// Searches simplex weights on validation accuracy. Up to
/// [`MAX_LATTICE_MODELS`] sets the whole lattice of resolution `step` plus the
/// uniform point is scored; ties go to the point nearest uniform, then to the
/// lexicographically smallest. Larger ensembles use coordinate ascent from
/// uniform with step halving down to `step`.
pub fn search_weights(
    sets: &[ScoreSet],
    gold: &BTreeMap<u64, usize>,
    step: f64,
) -> Result<WeightSearch, EnsembleError> {
    check_aligned(sets)?;
    if gold.is_empty() {
        return Err(EnsembleError::Empty("validation labels"));
    }
    check_ids(
        &sets[0].tag,
        sets[0].scores.keys(),
        "validation labels",
        gold.keys(),
    )?;
    let m = (1.0 / step).round();
    if !(step > 0.0 && step <= 1.0) || ((m * step) - 1.0).abs() > 1e-9 {
        return Err(EnsembleError::Weights(format!(
            "step {step} does not divide 1"
        )));
    }
    let m = m as usize;
    let n = sets.len();
    let eval = Evaluator {
        sets,
        qids: gold.keys().copied().collect(),
        gold: gold.values().copied().collect(),
    };
    let total = gold.len() as f64;
    let uni = uniform(n);
    let uniform_correct = eval.correct(&uni);
    if n == 1 {
        return Ok(WeightSearch {
            weights: vec![1.0],
            val_accuracy: uniform_correct as f64 / total,
            uniform_val_accuracy: uniform_correct as f64 / total,
            method: "single".into(),
            candidates: 1,
        });
    }
    let (weights, correct, method, candidates) = if n <= MAX_LATTICE_MODELS {
        // Candidates carry (correct, distance key, weights); the uniform point
        // has distance key 0, lattice points Σ (n·k_i − m)².
        let mut best = (uniform_correct, 0u64, uni.clone());
        let points = lattice(n, m);
        for k in &points {
            let dist: u64 = k
                .iter()
                .map(|&ki| ((n * ki) as i64 - m as i64).pow(2) as u64)
                .sum();
            if dist == 0 {
                continue;
            }
            let w: Vec<f64> = k.iter().map(|&ki| ki as f64 / m as f64).collect();
            let c = eval.correct(&w);
            let better = c > best.0
                || (c == best.0 && (dist < best.1 || (dist == best.1 && lex_less(&w, &best.2))));
            if better {
                best = (c, dist, w);
            }
        }
        (
            best.2,
            best.0,
            "lattice",
            points.len() + usize::from(!m.is_multiple_of(n)),
        )
    } else {
        coordinate_ascent(&eval, uni, uniform_correct, step)
    };
    Ok(WeightSearch {
        weights,
        val_accuracy: correct as f64 / total,
        uniform_val_accuracy: uniform_correct as f64 / total,
        method: method.into(),
        candidates,
    })
}

fn lex_less(a: &[f64], b: &[f64]) -> bool {
    a.iter()
        .zip(b)
        .find(|(x, y)| x != y)
        .is_some_and(|(x, y)| x < y)
}

fn coordinate_ascent(
    eval: &Evaluator,
    start: Vec<f64>,
    start_correct: usize,
    step: f64,
) -> (Vec<f64>, usize, &'static str, usize) {
    let n = start.len();
    let (mut w, mut best) = (start, start_correct);
    let mut delta = 0.5;
    let mut tried = 1;
    while delta >= step - 1e-12 {
        let mut improved = true;
        while improved {
            improved = false;
            for i in 0..n {
                for j in 0..n {
                    if i == j || w[j] < delta - 1e-12 {
                        continue;
                    }
                    let mut cand = w.clone();
                    cand[i] += delta;
                    cand[j] = (cand[j] - delta).max(0.0);
                    let total: f64 = cand.iter().sum();
                    cand.iter_mut().for_each(|c| *c /= total);
                    tried += 1;
                    let c = eval.correct(&cand);
                    if c > best {
                        (w, best, improved) = (cand, c, true);
                    }
                }
            }
        }
        delta /= 2.0;
    }
    (w, best, "coordinate ascent", tried)
}
