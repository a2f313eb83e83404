//! Adam training with early stopping, evaluation reports and score files.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::data::{write_jsonl, DataError};
use crate::layers::{Mode, ParamStore};
use crate::model::{argmax, Item, ModelConfig, ModelError, ReasonModel, Traces};
use crate::program::{answers, vocab_fingerprint, Template, NUM_ANSWERS};
use crate::seed::rng_for;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty {0} split")]
    Empty(&'static str),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (max |grad| {max_grad})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        loss: f64,
        max_grad: f64,
    },
    #[error("score vector for item {index} has {found} entries, expected {expected}")]
    ScoreWidth {
        index: usize,
        found: usize,
        expected: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub patience: usize,
    /// Drives shuffling and dropout.
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            max_epochs: 30,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patience: 5,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!(
                "learning rate {} must be finite and non-negative",
                self.lr
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("Adam moments must lie in (0, 1)".into());
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("eps must be positive".into());
        }
        self.model.check()?;
        Ok(())
    }
}

/// Adam state over every tensor of a [`ParamStore`].
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.len()])
            .collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((x, &g), m), v) in p
                .values_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *x -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation accuracy.
    pub model: ReasonModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// What an observer sees after each training step's forward pass.
pub struct StepView<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub tape: &'a Tape,
    pub traces: &'a Traces,
    pub items: &'a [&'a Item<'a>],
}

pub fn accuracy(model: &ReasonModel, items: &[Item]) -> Result<f64, TrainError> {
    if items.is_empty() {
        return Err(TrainError::Empty("evaluation"));
    }
    let scores = model.predict(items)?;
    let correct = scores
        .iter()
        .zip(items)
        .filter(|(s, i)| argmax(s) == i.answer)
        .count();
    Ok(correct as f64 / items.len() as f64)
}

pub fn train(train: &[Item], val: &[Item], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_observed(train, val, cfg, None)
}

/// Trains from fresh parameters. Epoch `e` shuffles with stream
/// `shuffle`/`e`; step `s` draws dropout masks from `dropout`/`s`.
pub fn train_observed(
    train: &[Item],
    val: &[Item],
    cfg: &TrainConfig,
    mut observer: Option<&mut dyn FnMut(&StepView)>,
) -> Result<TrainOutcome, TrainError> {
    cfg.check()?;
    if train.is_empty() {
        return Err(TrainError::Empty("train"));
    }
    if val.is_empty() {
        return Err(TrainError::Empty("validation"));
    }
    let mut model = ReasonModel::new(cfg.model.clone())?;
    let mut adam = Adam::new(&model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let mut history = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0u64;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng_for(cfg.seed, "shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<&Item> = idx.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let bindings = model.params.bind(&mut tape);
            let mut traces = Traces::default();
            let mut rng = rng_for(cfg.seed, "dropout", step);
            let loss = model.loss(
                &mut tape,
                &bindings,
                &items,
                Mode::Train,
                &mut rng,
                Some(&mut traces),
            )?;
            if let Some(obs) = observer.as_deref_mut() {
                obs(&StepView {
                    epoch,
                    batch,
                    tape: &tape,
                    traces: &traces,
                    items: &items,
                });
            }
            let value = tape.value(loss).item();
            tape.backward(loss).map_err(ModelError::from)?;
            let grads = model.params.collect_grads(&tape, &bindings);
            let max_grad = grads.iter().flatten().fold(0.0f64, |m, g| {
                if g.is_nan() {
                    f64::NAN
                } else {
                    m.max(g.abs())
                }
            });
            if !value.is_finite() || !max_grad.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch,
                    loss: value,
                    max_grad,
                });
            }
            adam.step(&mut model.params, &grads);
            loss_sum += value * items.len() as f64;
            step += 1;
        }
        let val_accuracy = accuracy(&model, val)?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_accuracy,
        });
        match &best {
            Some((_, acc, _)) if val_accuracy <= *acc => {}
            _ => best = Some((epoch, val_accuracy, model.params.clone())),
        }
        let (best_epoch, ..) = best.as_ref().expect("set above");
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    let (best_epoch, best_val_accuracy, params) = best.expect("at least one epoch");
    model.params = params;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        best_val_accuracy,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TemplateStats {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_template: BTreeMap<String, TemplateStats>,
    pub labels: Vec<String>,
    /// `confusion[gold][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    /// Accuracy over the items of `templates` only.
    pub fn subset_accuracy(&self, templates: &[Template]) -> f64 {
        let (c, t) = templates
            .iter()
            .filter_map(|t| self.per_template.get(t.name()))
            .fold((0, 0), |(c, t), s| (c + s.correct, t + s.total));
        if t == 0 {
            0.0
        } else {
            c as f64 / t as f64
        }
    }
}

/// Scores every `(template, gold)` pair by argmax of its score vector.
pub fn evaluate_scores(
    scores: &[Vec<f64>],
    gold: &[(Template, usize)],
) -> Result<EvalReport, TrainError> {
    if gold.is_empty() {
        return Err(TrainError::Empty("evaluation"));
    }
    if scores.len() != gold.len() {
        return Err(TrainError::Config(format!(
            "{} score vectors for {} items",
            scores.len(),
            gold.len()
        )));
    }
    let mut confusion = vec![vec![0usize; NUM_ANSWERS]; NUM_ANSWERS];
    let mut per_template: BTreeMap<String, TemplateStats> = BTreeMap::new();
    let mut correct = 0;
    for (i, (s, &(template, answer))) in scores.iter().zip(gold).enumerate() {
        if s.len() != NUM_ANSWERS {
            return Err(TrainError::ScoreWidth {
                index: i,
                found: s.len(),
                expected: NUM_ANSWERS,
            });
        }
        let pred = argmax(s);
        confusion[answer][pred] += 1;
        let entry = per_template.entry(template.name().to_string()).or_default();
        entry.total += 1;
        if pred == answer {
            entry.correct += 1;
            correct += 1;
        }
    }
    for s in per_template.values_mut() {
        s.accuracy = s.correct as f64 / s.total as f64;
    }
    Ok(EvalReport {
        accuracy: correct as f64 / gold.len() as f64,
        correct,
        total: gold.len(),
        per_template,
        labels: answers().to_vec(),
        confusion,
    })
}

pub fn evaluate(model: &ReasonModel, items: &[Item]) -> Result<EvalReport, TrainError> {
    if items.is_empty() {
        return Err(TrainError::Empty("evaluation"));
    }
    let scores = model.predict(items)?;
    let gold: Vec<(Template, usize)> = items.iter().map(|i| (i.template, i.answer)).collect();
    evaluate_scores(&scores, &gold)
}

/// Share of the most frequent gold answer.
pub fn majority_share(gold: &[usize]) -> f64 {
    let mut counts = [0usize; NUM_ANSWERS];
    for &g in gold {
        counts[g] += 1;
    }
    counts.iter().copied().max().unwrap_or(0) as f64 / gold.len().max(1) as f64
}

/// One line of a score file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub qid: u64,
    pub scores: Vec<f64>,
    pub vocab_fingerprint: String,
}

pub fn predict_lines(model: &ReasonModel, items: &[Item]) -> Result<Vec<ScoreLine>, TrainError> {
    if items.is_empty() {
        return Err(TrainError::Empty("prediction"));
    }
    let scores = model.predict(items)?;
    Ok(items
        .iter()
        .zip(scores)
        .map(|(i, scores)| ScoreLine {
            qid: i.qid,
            scores,
            vocab_fingerprint: vocab_fingerprint().to_string(),
        })
        .collect())
}

/// Writes eval-mode probabilities for `items`, one JSON line each.
pub fn predict_to_file(
    model: &ReasonModel,
    items: &[Item],
    path: &Path,
) -> Result<usize, TrainError> {
    let lines = predict_lines(model, items)?;
    write_jsonl(path, &lines)?;
    Ok(lines.len())
}
