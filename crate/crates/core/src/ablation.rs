//! The ablation grid: named model variants trained over shared seeds on
//! datasets that differ only in feature quality.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GenConfig, Split};
use crate::model::{items_for, EncoderKind, Item, ModelConfig, ReasonModel};
use crate::program::Template;
use crate::train::{evaluate, train, EpochRecord, EvalReport, TrainConfig, TrainError};
use crate::world::Quality;

pub const SPATIAL_TEMPLATES: [Template; 2] = [Template::T3, Template::T4];
pub const MULTI_STEP_TEMPLATES: [Template; 2] = [Template::T4, Template::T5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub group: String,
    pub name: String,
    pub quality: Quality,
    pub model: ModelConfig,
}

fn row(group: &str, name: &str, quality: Quality, model: ModelConfig) -> AblationRow {
    AblationRow {
        group: group.into(),
        name: name.into(),
        quality,
        model,
    }
}

/// The twelve standard rows, each a variation of `base`.
pub fn standard_rows(base: &ModelConfig) -> Vec<AblationRow> {
    let no_bbox = ModelConfig {
        use_bbox_position: false,
        use_bbox_size: false,
        ..base.clone()
    };
    let det_only = ModelConfig {
        use_spatial: false,
        ..no_bbox.clone()
    };
    let mut rows: Vec<AblationRow> = Quality::ALL
        .iter()
        .map(|&q| row("feature quality", &format!("quality {q}"), q, base.clone()))
        .collect();
    rows.extend([
        row(
            "pipelines",
            "detection only",
            Quality::High,
            det_only.clone(),
        ),
        row("pipelines", "detection + spatial", Quality::High, no_bbox),
        row("bbox features", "no bbox", Quality::High, det_only.clone()),
        row(
            "bbox features",
            "bbox position",
            Quality::High,
            ModelConfig {
                use_bbox_position: true,
                ..det_only.clone()
            },
        ),
        row(
            "bbox features",
            "bbox position + size",
            Quality::High,
            ModelConfig {
                use_bbox_position: true,
                use_bbox_size: true,
                ..det_only
            },
        ),
        row(
            "question encoder",
            "gru",
            Quality::High,
            ModelConfig {
                encoder: EncoderKind::Gru,
                ..base.clone()
            },
        ),
        row(
            "question encoder",
            "bayesian gru",
            Quality::High,
            ModelConfig {
                encoder: EncoderKind::BayesianGru,
                ..base.clone()
            },
        ),
        row(
            "program channel",
            "program off",
            Quality::High,
            ModelConfig {
                use_program: false,
                ..base.clone()
            },
        ),
        row(
            "program channel",
            "program on",
            Quality::High,
            ModelConfig {
                use_program: true,
                ..base.clone()
            },
        ),
    ]);
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteSettings {
    /// Generation settings; `quality` is replaced per row.
    pub data: GenConfig,
    /// Optimizer settings; `model` and `seed` are replaced per run.
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Truncate the train and validation splits to these sizes.
    pub max_train: Option<usize>,
    pub max_val: Option<usize>,
}

impl Default for SuiteSettings {
    fn default() -> Self {
        Self {
            data: GenConfig::default(),
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2],
            max_train: None,
            max_val: None,
        }
    }
}

/// One trained `(quality, model config, seed)` combination.
pub struct Run {
    pub quality: Quality,
    pub config: ModelConfig,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub val: EvalReport,
    pub model: ReasonModel,
}

#[derive(Clone, Debug, Hash, PartialEq, Eq, PartialOrd, Ord)]
struct RunKey(Quality, String, u64);

fn key(quality: Quality, config: &ModelConfig, seed: u64) -> RunKey {
    RunKey(
        quality,
        serde_json::to_string(&seeded(config, seed)).expect("config serializes"),
        seed,
    )
}

fn seeded(config: &ModelConfig, seed: u64) -> ModelConfig {
    ModelConfig {
        seed,
        ..config.clone()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub group: String,
    pub name: String,
    pub quality: Quality,
    pub seeds: Vec<u64>,
    pub accuracy: Vec<f64>,
    pub spatial: Vec<f64>,
    pub multi_step: Vec<f64>,
    pub median_accuracy: f64,
    pub median_spatial: f64,
    pub median_multi_step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub split_hash: String,
    pub train_items: usize,
    pub val_items: usize,
    pub rows: Vec<RowResult>,
}

/// Median; the mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Trains and caches runs. Configurations shared between rows are trained
/// once per seed.
pub struct Suite {
    pub settings: SuiteSettings,
    datasets: BTreeMap<Quality, Dataset>,
    runs: BTreeMap<RunKey, Run>,
}

impl Suite {
    pub fn new(settings: SuiteSettings) -> Result<Self, TrainError> {
        settings.data.check()?;
        settings.train.check()?;
        if settings.seeds.is_empty() {
            return Err(TrainError::Config(
                "ablation needs at least one seed".into(),
            ));
        }
        Ok(Self {
            settings,
            datasets: BTreeMap::new(),
            runs: BTreeMap::new(),
        })
    }

    pub fn dataset(&mut self, quality: Quality) -> Result<&Dataset, TrainError> {
        if !self.datasets.contains_key(&quality) {
            let d = Dataset::generate(&GenConfig {
                quality,
                ..self.settings.data.clone()
            })?;
            if let Some(other) = self.datasets.values().next() {
                if other.split_hash() != d.split_hash() {
                    return Err(TrainError::Config(
                        "datasets of different quality have different splits".into(),
                    ));
                }
            }
            self.datasets.insert(quality, d);
        }
        Ok(&self.datasets[&quality])
    }

    fn split_items<'a>(&self, d: &'a Dataset, split: Split) -> Result<Vec<Item<'a>>, TrainError> {
        let mut items = items_for(d, split)?;
        let limit = match split {
            Split::Train => self.settings.max_train,
            _ => self.settings.max_val,
        };
        if let Some(n) = limit {
            items.truncate(n);
        }
        Ok(items)
    }

    /// Items of `split` at `quality`, truncated as configured.
    pub fn items(&mut self, quality: Quality, split: Split) -> Result<Vec<Item<'_>>, TrainError> {
        self.dataset(quality)?;
        let d = &self.datasets[&quality];
        self.split_items(d, split)
    }

    /// Number of distinct trained runs held.
    pub fn run_count(&self) -> usize {
        self.runs.len()
    }

    pub fn get(&self, quality: Quality, config: &ModelConfig, seed: u64) -> Option<&Run> {
        self.runs.get(&key(quality, config, seed))
    }

    /// Trains every missing `(quality, config, seed)` triple, `jobs` at a time.
    pub fn ensure(
        &mut self,
        wanted: &[(Quality, ModelConfig, u64)],
        jobs: usize,
    ) -> Result<(), TrainError> {
        let mut todo: BTreeMap<RunKey, (Quality, ModelConfig, u64)> = BTreeMap::new();
        for (q, c, s) in wanted {
            let k = key(*q, c, *s);
            if !self.runs.contains_key(&k) {
                todo.insert(k, (*q, seeded(c, *s), *s));
            }
        }
        for (q, ..) in todo.values() {
            self.dataset(*q)?;
        }
        let mut splits = BTreeMap::new();
        for (&q, d) in &self.datasets {
            splits.insert(
                q,
                (
                    self.split_items(d, Split::Train)?,
                    self.split_items(d, Split::Val)?,
                ),
            );
        }
        let queue = Mutex::new(todo.into_iter().collect::<Vec<_>>());
        let done = Mutex::new(Vec::new());
        let first_error = Mutex::new(None);
        let base = &self.settings.train;
        std::thread::scope(|scope| {
            for _ in 0..jobs.max(1) {
                scope.spawn(|| loop {
                    let Some((k, (q, config, seed))) = queue.lock().expect("queue").pop() else {
                        break;
                    };
                    let (tr, va) = &splits[&q];
                    let cfg = TrainConfig {
                        seed,
                        model: config.clone(),
                        ..base.clone()
                    };
                    let result = train(tr, va, &cfg).and_then(|out| {
                        let val = evaluate(&out.model, va)?;
                        Ok(Run {
                            quality: q,
                            config,
                            seed,
                            history: out.history,
                            best_epoch: out.best_epoch,
                            val,
                            model: out.model,
                        })
                    });
                    match result {
                        Ok(run) => done.lock().expect("done").push((k, run)),
                        Err(e) => {
                            first_error.lock().expect("error").get_or_insert(e);
                            break;
                        }
                    }
                });
            }
        });
        self.runs.extend(done.into_inner().expect("done"));
        match first_error.into_inner().expect("error") {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Trains (or reuses) every row over every seed and summarizes.
    pub fn run_rows(
        &mut self,
        rows: &[AblationRow],
        jobs: usize,
    ) -> Result<SuiteReport, TrainError> {
        let seeds = self.settings.seeds.clone();
        let wanted: Vec<_> = rows
            .iter()
            .flat_map(|r| seeds.iter().map(move |&s| (r.quality, r.model.clone(), s)))
            .collect();
        self.ensure(&wanted, jobs)?;
        let mut out = Vec::with_capacity(rows.len());
        for r in rows {
            let runs: Vec<&Run> = seeds
                .iter()
                .map(|&s| self.get(r.quality, &r.model, s).expect("trained"))
                .collect();
            let accuracy: Vec<f64> = runs.iter().map(|x| x.val.accuracy).collect();
            let spatial: Vec<f64> = runs
                .iter()
                .map(|x| x.val.subset_accuracy(&SPATIAL_TEMPLATES))
                .collect();
            let multi_step: Vec<f64> = runs
                .iter()
                .map(|x| x.val.subset_accuracy(&MULTI_STEP_TEMPLATES))
                .collect();
            out.push(RowResult {
                group: r.group.clone(),
                name: r.name.clone(),
                quality: r.quality,
                seeds: seeds.clone(),
                median_accuracy: median(&accuracy),
                median_spatial: median(&spatial),
                median_multi_step: median(&multi_step),
                accuracy,
                spatial,
                multi_step,
            });
        }
        let split_hash = self.dataset(Quality::High)?.split_hash();
        let train_items = self.items(Quality::High, Split::Train)?.len();
        let val_items = self.items(Quality::High, Split::Val)?.len();
        Ok(SuiteReport {
            split_hash,
            train_items,
            val_items,
            rows: out,
        })
    }
}

impl SuiteReport {
    pub fn row(&self, name: &str) -> Option<&RowResult> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Aligned plain-text table of medians, in percent.
    pub fn to_table(&self) -> String {
        let header = [
            "Group",
            "Model",
            "Validation",
            "Spatial (T3,T4)",
            "Multi-step (T4,T5)",
        ];
        let cells: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.group.clone(),
                    r.name.clone(),
                    format!("{:.2}", 100.0 * r.median_accuracy),
                    format!("{:.2}", 100.0 * r.median_spatial),
                    format!("{:.2}", 100.0 * r.median_multi_step),
                ]
            })
            .collect();
        let mut width = header.map(str::len);
        for c in &cells {
            for (w, s) in width.iter_mut().zip(c) {
                *w = (*w).max(s.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, c: &[&str]| {
            let mut s = String::new();
            for (i, (cell, w)) in c.iter().zip(&width).enumerate() {
                if i < 2 {
                    let _ = write!(s, "{cell:<w$}  ");
                } else {
                    let _ = write!(s, "{cell:>w$}  ");
                }
            }
            out.push_str(s.trim_end());
            out.push('\n');
        };
        line(&mut out, &header);
        let rule: Vec<String> = width.iter().map(|&w| "-".repeat(w)).collect();
        line(
            &mut out,
            &rule.iter().map(String::as_str).collect::<Vec<_>>(),
        );
        for c in &cells {
            line(&mut out, &c.iter().map(String::as_str).collect::<Vec<_>>());
        }
        let _ = writeln!(
            out,
            "\nmedian over seeds; {} train / {} val items; split {}",
            self.train_items,
            self.val_items,
            &self.split_hash[..12]
        );
        out
    }
}
