mod manifest;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use vqa_fusion::ablation::{standard_rows, Suite, SuiteSettings};
use vqa_fusion::data::{Dataset, GenConfig, QAItem, Split};
use vqa_fusion::ensemble::{average_ensemble, combine, search_weights, ScoreSet};
use vqa_fusion::gradcheck::{audit, GRAD_TOLERANCE};
use vqa_fusion::model::{EncoderKind, Item, ReasonModel};
use vqa_fusion::program::{answer_index, Template};
use vqa_fusion::train::{evaluate_scores, predict_to_file, train, TrainConfig};
use vqa_fusion::world::Quality;

use manifest::Manifest;

const CHECKPOINT_FILE: &str = "checkpoint.json";
const HISTORY_FILE: &str = "history.json";
const SCORES_FILE: &str = "scores.jsonl";
const REPORT_FILE: &str = "report.json";
const TABLE_FILE: &str = "table.txt";

#[derive(Parser)]
#[command(
    name = "vqa-fusion",
    version,
    about = "Synthetic VQA: generate data, train, evaluate, ablate, ensemble"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Write probability vectors for one split.
    Predict(PredictArgs),
    /// Score a checkpoint or a score file against gold answers.
    Eval(EvalArgs),
    /// Search ensemble weights on validation scores and apply them to test.
    Ensemble(EnsembleArgs),
    /// Run the ablation suite and write a results table.
    Ablate(AblateArgs),
    /// Finite-difference audit of all layer and model gradients.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Clone)]
struct DataFlags {
    #[arg(long)]
    num_images: Option<usize>,
    #[arg(long)]
    questions_per_image: Option<usize>,
    /// Master seed for scenes, questions, features and splits.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    quality: Option<Quality>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    data: DataFlags,
    /// Generation config JSON; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Seeds initialization, shuffling and dropout.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    spatial: Option<bool>,
    #[arg(long)]
    bbox_position: Option<bool>,
    #[arg(long)]
    bbox_size: Option<bool>,
    #[arg(long)]
    program: Option<bool>,
    /// gru | bayesian_gru
    #[arg(long)]
    encoder: Option<EncoderKind>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    max_train: Option<usize>,
    #[arg(long)]
    max_val: Option<usize>,
    /// Training config JSON (may be partial); explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Val => Some(Split::Val),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint file, or a training output directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, conflicts_with = "scores", required_unless_present = "scores")]
    checkpoint: Option<PathBuf>,
    /// Score file, or a directory holding scores.jsonl.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Defaults to val for checkpoints and to the file's questions for scores.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EnsembleArgs {
    #[arg(long)]
    data: PathBuf,
    /// Validation score files, one per model.
    #[arg(long, num_args = 1.., required = true)]
    val: Vec<PathBuf>,
    /// Test score files in the same model order.
    #[arg(long, num_args = 1..)]
    test: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    step: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteKind {
    Full,
    Quick,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    out: PathBuf,
    /// quick: one seed and three epochs unless overridden.
    #[arg(long, value_enum, default_value = "full")]
    suite: SuiteKind,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Training seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_train: Option<usize>,
    #[arg(long)]
    max_val: Option<usize>,
    #[command(flatten)]
    data: DataFlags,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seeds 0..N are audited.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Entries perturbed per model tensor.
    #[arg(long, default_value_t = 6)]
    per_tensor: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Bad invocation: exit code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<Usage>()) {
        2
    } else if err.chain().any(|e| e.is::<std::io::Error>()) {
        3
    } else {
        1
    }
}

/// One line; causes already quoted by their parent are skipped.
fn diagnostic(err: &anyhow::Error) -> String {
    let mut line = String::new();
    for cause in err.chain() {
        let msg = cause.to_string();
        if !line.ends_with(&msg) {
            if !line.is_empty() {
                line.push_str(": ");
            }
            line.push_str(&msg);
        }
    }
    line
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {}", diagnostic(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(command: Command) -> Result<Value> {
    match command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Ensemble(a) => ensemble(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

/// Overlays `patch` onto `base`, recursing into objects.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// Defaults overlaid with an optional, possibly partial, JSON file.
fn load_config<T: Serialize + DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let patch: Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut v = serde_json::to_value(T::default())?;
    merge(&mut v, patch);
    serde_json::from_value(v).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn apply_data_flags(cfg: &mut GenConfig, f: &DataFlags) {
    if let Some(v) = f.num_images {
        cfg.num_images = v;
    }
    if let Some(v) = f.questions_per_image {
        cfg.questions_per_image = v;
    }
    if let Some(v) = f.seed {
        cfg.seed = v;
    }
    if let Some(v) = f.quality {
        cfg.quality = v;
    }
}

fn read_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::read(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

fn split_items<'a>(data: &'a Dataset, split: Option<Split>) -> Result<Vec<Item<'a>>> {
    data.questions
        .iter()
        .filter(|q| split.is_none_or(|s| data.split_of(q) == s))
        .map(|q| Ok(Item::new(&data.scenes[q.image_id as usize].features, q)?))
        .collect()
}

fn resolve(path: &Path, default_file: &str) -> PathBuf {
    if path.is_dir() {
        path.join(default_file)
    } else {
        path.to_path_buf()
    }
}

fn load_model(path: &Path) -> Result<ReasonModel> {
    let path = resolve(path, CHECKPOINT_FILE);
    ReasonModel::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn gen(a: GenArgs) -> Result<Value> {
    let mut cfg: GenConfig = load_config(a.config.as_deref())?;
    apply_data_flags(&mut cfg, &a.data);
    cfg.check().map_err(|e| usage(e.to_string()))?;
    let inputs: Vec<PathBuf> = a.config.iter().cloned().collect();
    let manifest = Manifest::new(Some(cfg.seed), &cfg, &inputs)?;
    let data = Dataset::generate(&cfg)?;
    create_dir(&a.out)?;
    data.write(&a.out)?;
    manifest.finish(&a.out, std::slice::from_ref(&a.out))?;
    Ok(json!({
        "command": "gen",
        "out": a.out,
        "images": data.scenes.len(),
        "questions": data.questions.len(),
        "split_hash": data.split_hash(),
    }))
}

fn train_cmd(a: TrainArgs) -> Result<Value> {
    let mut cfg: TrainConfig = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.model.seed = s;
    }
    if let Some(v) = a.epochs {
        cfg.max_epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.patience {
        cfg.patience = v;
    }
    let m = &mut cfg.model;
    if let Some(v) = a.spatial {
        m.use_spatial = v;
    }
    if let Some(v) = a.bbox_position {
        m.use_bbox_position = v;
    }
    if let Some(v) = a.bbox_size {
        m.use_bbox_size = v;
    }
    if let Some(v) = a.program {
        m.use_program = v;
    }
    if let Some(v) = a.encoder {
        m.encoder = v;
    }
    if let Some(v) = a.dropout {
        m.dropout = v;
    }

    let data = read_dataset(&a.data)?;
    cfg.model.detection_dim = data.config.detection_dim;
    cfg.model.grid = data.config.grid;
    cfg.model.channels = data.config.channels;
    cfg.check().map_err(|e| usage(e.to_string()))?;

    let mut train_items = split_items(&data, Some(Split::Train))?;
    let mut val_items = split_items(&data, Some(Split::Val))?;
    if let Some(n) = a.max_train {
        train_items.truncate(n);
    }
    if let Some(n) = a.max_val {
        val_items.truncate(n);
    }
    let effective = json!({
        "train": &cfg,
        "max_train": a.max_train,
        "max_val": a.max_val,
    });
    let manifest = Manifest::new(Some(cfg.seed), &effective, std::slice::from_ref(&a.data))?;
    let outcome = train(&train_items, &val_items, &cfg)?;

    create_dir(&a.out)?;
    let ckpt = a.out.join(CHECKPOINT_FILE);
    let history = a.out.join(HISTORY_FILE);
    outcome.model.save(&ckpt)?;
    write_json(
        &history,
        &json!({
            "config": effective,
            "train_items": train_items.len(),
            "val_items": val_items.len(),
            "best_epoch": outcome.best_epoch,
            "best_val_accuracy": outcome.best_val_accuracy,
            "epochs": outcome.history,
        }),
    )?;
    manifest.finish(&a.out, &[ckpt.clone(), history])?;
    Ok(json!({
        "command": "train",
        "checkpoint": ckpt,
        "epochs_run": outcome.history.len(),
        "best_epoch": outcome.best_epoch,
        "best_val_accuracy": outcome.best_val_accuracy,
    }))
}

fn predict(a: PredictArgs) -> Result<Value> {
    let data = read_dataset(&a.data)?;
    let model = load_model(&a.checkpoint)?;
    let items = split_items(&data, a.split.split())?;
    if items.is_empty() {
        bail!("the requested split has no questions");
    }
    let ckpt = resolve(&a.checkpoint, CHECKPOINT_FILE);
    let manifest = Manifest::new(None, &model.config, &[a.data.clone(), ckpt])?;
    create_dir(&a.out)?;
    let path = a.out.join(SCORES_FILE);
    let n = predict_to_file(&model, &items, &path)?;
    manifest.finish(&a.out, std::slice::from_ref(&path))?;
    Ok(json!({ "command": "predict", "scores": path, "questions": n }))
}

fn gold_of(q: &QAItem) -> Result<(Template, usize)> {
    let a = answer_index(&q.answer)
        .with_context(|| format!("question {} has unknown answer {:?}", q.qid, q.answer))?;
    Ok((q.template, a))
}

fn qids_of(data: &Dataset, split: Option<Split>) -> BTreeSet<u64> {
    data.questions
        .iter()
        .filter(|q| split.is_none_or(|s| data.split_of(q) == s))
        .map(|q| q.qid)
        .collect()
}

/// Gold answers for exactly the questions of `set`.
fn gold_for(data: &Dataset, set: &ScoreSet) -> Result<BTreeMap<u64, usize>> {
    let by_qid: BTreeMap<u64, &QAItem> = data.questions.iter().map(|q| (q.qid, q)).collect();
    set.scores
        .keys()
        .map(|qid| {
            let q = by_qid
                .get(qid)
                .with_context(|| format!("{}: question {qid} is not in the dataset", set.tag))?;
            Ok((*qid, gold_of(q)?.1))
        })
        .collect()
}

fn eval(a: EvalArgs) -> Result<Value> {
    let data = read_dataset(&a.data)?;
    let by_qid: BTreeMap<u64, &QAItem> = data.questions.iter().map(|q| (q.qid, q)).collect();
    let (source, scores, qids): (PathBuf, BTreeMap<u64, Vec<f64>>, BTreeSet<u64>) =
        if let Some(path) = &a.scores {
            let path = resolve(path, SCORES_FILE);
            let set = ScoreSet::read(&path)?;
            let qids = match a.split {
                Some(s) => {
                    let want = qids_of(&data, s.split());
                    let have: BTreeSet<u64> = set.scores.keys().copied().collect();
                    if want != have {
                        bail!(
                            "{} covers {} questions, the split has {}",
                            path.display(),
                            have.len(),
                            want.len()
                        );
                    }
                    want
                }
                None => set.scores.keys().copied().collect(),
            };
            (path, set.scores, qids)
        } else {
            let path = resolve(
                a.checkpoint.as_deref().expect("clap enforces"),
                CHECKPOINT_FILE,
            );
            let model = load_model(&path)?;
            let split = a.split.unwrap_or(SplitArg::Val).split();
            let items = split_items(&data, split)?;
            if items.is_empty() {
                bail!("the requested split has no questions");
            }
            let probs = model.predict(&items)?;
            let scores = items.iter().map(|i| i.qid).zip(probs).collect();
            (path, scores, qids_of(&data, split))
        };
    let mut vectors = Vec::with_capacity(qids.len());
    let mut gold = Vec::with_capacity(qids.len());
    for qid in &qids {
        let q = by_qid
            .get(qid)
            .with_context(|| format!("question {qid} is not in the dataset"))?;
        gold.push(gold_of(q)?);
        vectors.push(scores[qid].clone());
    }
    let report = evaluate_scores(&vectors, &gold)?;
    if let Some(out) = &a.out {
        let manifest = Manifest::new(
            None,
            &json!({ "split": a.split.map(|s| s.split()) }),
            &[a.data.clone(), source.clone()],
        )?;
        create_dir(out)?;
        let path = out.join(REPORT_FILE);
        write_json(&path, &report)?;
        manifest.finish(out, &[path])?;
    }
    let per_template: BTreeMap<&String, f64> = report
        .per_template
        .iter()
        .map(|(k, v)| (k, v.accuracy))
        .collect();
    Ok(json!({
        "command": "eval",
        "source": source,
        "accuracy": report.accuracy,
        "correct": report.correct,
        "total": report.total,
        "per_template": per_template,
    }))
}

fn read_sets(paths: &[PathBuf]) -> Result<Vec<ScoreSet>> {
    paths
        .iter()
        .map(|p| Ok(ScoreSet::read(&resolve(p, SCORES_FILE))?))
        .collect()
}

fn ensemble(a: EnsembleArgs) -> Result<Value> {
    if !(a.step > 0.0 && a.step <= 1.0) {
        return Err(usage(format!("step {} must lie in (0, 1]", a.step)));
    }
    if !a.test.is_empty() && a.test.len() != a.val.len() {
        return Err(usage(format!(
            "{} validation files but {} test files",
            a.val.len(),
            a.test.len()
        )));
    }
    let data = read_dataset(&a.data)?;
    let val = read_sets(&a.val)?;
    let val_gold = gold_for(&data, &val[0])?;
    let search = search_weights(&val, &val_gold, a.step)?;
    let val_avg = average_ensemble(&val)?.accuracy(&val_gold)?;
    let models: Vec<Value> = val
        .iter()
        .map(|s| Ok(json!({ "tag": s.tag, "val_accuracy": s.accuracy(&val_gold)? })))
        .collect::<Result<_>>()?;

    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.val.iter().map(|p| resolve(p, SCORES_FILE)));
    inputs.extend(a.test.iter().map(|p| resolve(p, SCORES_FILE)));
    let manifest = Manifest::new(None, &json!({ "step": a.step }), &inputs)?;
    create_dir(&a.out)?;
    let val_out = a.out.join("val_scores.jsonl");
    combine(&val, &search.weights)?.write(&val_out)?;
    let mut outputs = vec![val_out];

    let mut test_report = Value::Null;
    if !a.test.is_empty() {
        let test = read_sets(&a.test)?;
        let gold = gold_for(&data, &test[0])?;
        let weighted = combine(&test, &search.weights)?;
        let test_out = a.out.join("test_scores.jsonl");
        weighted.write(&test_out)?;
        outputs.push(test_out);
        let singles: Vec<f64> = test
            .iter()
            .map(|s| s.accuracy(&gold))
            .collect::<Result<_, _>>()?;
        test_report = json!({
            "weighted_accuracy": weighted.accuracy(&gold)?,
            "average_accuracy": average_ensemble(&test)?.accuracy(&gold)?,
            "model_accuracy": singles,
        });
    }
    let report = json!({
        "weights": search.weights,
        "method": search.method,
        "candidates": search.candidates,
        "val_accuracy": search.val_accuracy,
        "val_average_accuracy": val_avg,
        "models": models,
        "test": test_report,
    });
    let path = a.out.join(REPORT_FILE);
    write_json(&path, &report)?;
    outputs.push(path);
    manifest.finish(&a.out, &outputs)?;
    Ok(json!({ "command": "ensemble", "report": report }))
}

fn ablate(a: AblateArgs) -> Result<Value> {
    if a.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let mut settings = SuiteSettings::default();
    if let SuiteKind::Quick = a.suite {
        settings.seeds = vec![0];
        settings.train.max_epochs = 3;
    }
    apply_data_flags(&mut settings.data, &a.data);
    if let Some(s) = a.seeds.clone() {
        settings.seeds = s;
    }
    if let Some(e) = a.epochs {
        settings.train.max_epochs = e;
    }
    settings.max_train = a.max_train;
    settings.max_val = a.max_val;
    settings.data.check().map_err(|e| usage(e.to_string()))?;
    if settings.seeds.is_empty() {
        return Err(usage("at least one seed is required"));
    }

    let manifest = Manifest::new(Some(settings.data.seed), &settings, &[])?;
    let rows = standard_rows(&settings.train.model);
    let mut suite = Suite::new(settings)?;
    let report = suite.run_rows(&rows, a.jobs)?;
    create_dir(&a.out)?;
    let table = a.out.join(TABLE_FILE);
    std::fs::write(&table, report.to_table())
        .with_context(|| format!("writing {}", table.display()))?;
    let path = a.out.join(REPORT_FILE);
    write_json(&path, &report)?;
    manifest.finish(&a.out, &[table.clone(), path])?;
    Ok(json!({
        "command": "ablate",
        "table": table,
        "rows": report.rows.len(),
        "runs": suite.run_count(),
    }))
}

fn gradcheck(a: GradcheckArgs) -> Result<Value> {
    if a.seeds == 0 || a.per_tensor == 0 {
        return Err(usage("--seeds and --per-tensor must be positive"));
    }
    let result = audit(0..a.seeds, a.per_tensor)?;
    if let Some(out) = &a.out {
        let manifest = Manifest::new(
            None,
            &json!({ "seeds": a.seeds, "per_tensor": a.per_tensor }),
            &[],
        )?;
        create_dir(out)?;
        let path = out.join(REPORT_FILE);
        write_json(&path, &result)?;
        manifest.finish(out, &[path])?;
    }
    let worst = result
        .cases
        .iter()
        .max_by(|x, y| x.max_rel_error.total_cmp(&y.max_rel_error))
        .map(|c| json!({ "name": c.name, "seed": c.seed }));
    if !result.passed {
        bail!(
            "gradient check failed: max relative error {:e} (tolerance {GRAD_TOLERANCE:e}) at {}",
            result.max_rel_error,
            worst.unwrap_or_default()
        );
    }
    Ok(json!({
        "command": "gradcheck",
        "cases": result.cases.len(),
        "max_rel_error": result.max_rel_error,
        "tolerance": result.tolerance,
        "worst": worst,
        "passed": true,
    }))
}
