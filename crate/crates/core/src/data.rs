//! Generated datasets and their on-disk form.
//!
//! A dataset directory holds `dataset.json` (generation settings),
//! `scenes.jsonl` (one scene with its raw features per line) and
//! `questions.jsonl` (one question per line). Feature values are stored at
//! nine significant digits, which is also their in-memory precision.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::program::{gen_question, Program, ProgramError, Template};
use crate::seed::rng_for;
use crate::world::{
    gen_scene, FeatureSpace, Quality, RawFeatures, SceneGraph, WorldConfig, WorldError,
};

pub const SCENES_FILE: &str = "scenes.jsonl";
pub const QUESTIONS_FILE: &str = "questions.jsonl";
pub const META_FILE: &str = "dataset.json";

/// How often a question slot may resample its template before giving up.
const TEMPLATE_RETRIES: usize = 32;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Program(#[from] ProgramError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub num_images: usize,
    pub questions_per_image: usize,
    pub quality: Quality,
    pub world: WorldConfig,
    pub detection_dim: usize,
    pub grid: usize,
    pub channels: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_images: 100,
            questions_per_image: 5,
            quality: Quality::High,
            world: WorldConfig::default(),
            detection_dim: 64,
            grid: 7,
            channels: 32,
            val_fraction: 0.15,
            test_fraction: 0.15,
        }
    }
}

impl GenConfig {
    pub fn check(&self) -> Result<(), DataError> {
        if self.num_images == 0 || self.questions_per_image == 0 {
            return Err(DataError::Invalid(
                "num_images and questions_per_image must be positive".into(),
            ));
        }
        let f = self.val_fraction + self.test_fraction;
        if !(0.0..1.0).contains(&self.val_fraction)
            || !(0.0..1.0).contains(&self.test_fraction)
            || f >= 1.0
        {
            return Err(DataError::Invalid(format!(
                "split fractions val={} test={} leave no training data",
                self.val_fraction, self.test_fraction
            )));
        }
        self.world.check()?;
        Ok(())
    }
}

/// One question with its program and oracle answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QAItem {
    pub qid: u64,
    pub image_id: u32,
    pub template: Template,
    pub question: Vec<String>,
    pub program: Program,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneEntry {
    pub scene: SceneGraph,
    pub split: Split,
    pub features: RawFeatures,
}

/// Line format of `scenes.jsonl`.
#[derive(Serialize, Deserialize)]
struct SceneLine {
    image_id: u32,
    width: u32,
    height: u32,
    split: Split,
    objects: Vec<crate::world::SceneObject>,
    detection: Vec<Vec<f64>>,
    spatial: Vec<Vec<Vec<f64>>>,
    bbox: Vec<Vec<f64>>,
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = *t.shape().last().expect("rank ≥ 1");
    t.values().chunks(cols).map(<[f64]>::to_vec).collect()
}

fn matrix(rows: &[Vec<f64>], what: &str, image_id: u32) -> Result<Tensor, DataError> {
    Tensor::from_rows(rows)
        .map_err(|e| DataError::Invalid(format!("image {image_id}: {what}: {e}")))
}

impl SceneEntry {
    fn to_line(&self) -> SceneLine {
        let sp = &self.features.spatial;
        let (g, c) = (sp.shape()[0], sp.shape()[2]);
        let spatial = sp
            .values()
            .chunks(g * c)
            .map(|r| r.chunks(c).map(<[f64]>::to_vec).collect())
            .collect();
        SceneLine {
            image_id: self.scene.image_id,
            width: self.scene.width,
            height: self.scene.height,
            split: self.split,
            objects: self.scene.objects.clone(),
            detection: rows(&self.features.detection),
            spatial,
            bbox: rows(&self.features.bbox),
        }
    }

    fn from_line(line: SceneLine) -> Result<Self, DataError> {
        let id = line.image_id;
        let n = line.objects.len();
        let detection = matrix(&line.detection, "detection", id)?;
        let bbox = matrix(&line.bbox, "bbox", id)?;
        if detection.shape()[0] != n || bbox.shape() != [n, 4] {
            return Err(DataError::Invalid(format!(
                "image {id}: feature rows do not match {n} objects"
            )));
        }
        let g = line.spatial.len();
        let c = line
            .spatial
            .first()
            .and_then(|r| r.first())
            .map_or(0, Vec::len);
        if g == 0
            || c == 0
            || line
                .spatial
                .iter()
                .any(|r| r.len() != g || r.iter().any(|cell| cell.len() != c))
        {
            return Err(DataError::Invalid(format!(
                "image {id}: spatial grid is not G×G×C"
            )));
        }
        let values = line.spatial.into_iter().flatten().flatten().collect();
        let spatial =
            Tensor::new(vec![g, g, c], values).map_err(|e| DataError::Invalid(e.to_string()))?;
        Ok(Self {
            scene: SceneGraph {
                image_id: id,
                width: line.width,
                height: line.height,
                objects: line.objects,
            },
            split: line.split,
            features: RawFeatures {
                detection,
                spatial,
                bbox,
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    /// Indexed by image id.
    pub scenes: Vec<SceneEntry>,
    pub questions: Vec<QAItem>,
}

/// Image ids shuffled with the `split` stream; the last fractions go to
/// validation and test.
pub fn assign_splits(
    seed: u64,
    num_images: usize,
    val_fraction: f64,
    test_fraction: f64,
) -> Vec<Split> {
    let mut order: Vec<usize> = (0..num_images).collect();
    order.shuffle(&mut rng_for(seed, "split", 0));
    let n_val = (num_images as f64 * val_fraction).round() as usize;
    let n_test = (num_images as f64 * test_fraction).round() as usize;
    let n_train = num_images.saturating_sub(n_val + n_test);
    let mut splits = vec![Split::Train; num_images];
    for (rank, &img) in order.iter().enumerate() {
        splits[img] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

fn questions_for<R: Rng>(
    scene: &SceneGraph,
    count: usize,
    first_qid: u64,
    rng: &mut R,
) -> Result<Vec<QAItem>, DataError> {
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let mut made = None;
        for _ in 0..TEMPLATE_RETRIES {
            let template = *Template::ALL.choose(rng).expect("templates");
            match gen_question(scene, template, rng) {
                Ok(q) => {
                    made = Some(q);
                    break;
                }
                Err(ProgramError::Skip { .. }) => continue,
                Err(e) => return Err(e.into()),
            }
        }
        let q = made.ok_or_else(|| {
            DataError::Invalid(format!(
                "no template instantiable on image {} after {TEMPLATE_RETRIES} tries",
                scene.image_id
            ))
        })?;
        out.push(QAItem {
            qid: first_qid + k as u64,
            image_id: scene.image_id,
            template: q.template,
            question: q.question,
            program: q.program,
            answer: q.answer,
        });
    }
    Ok(out)
}

impl Dataset {
    /// Deterministic in `cfg`. Scenes, questions and splits do not depend on
    /// the quality level, so datasets differing only in quality are aligned.
    pub fn generate(cfg: &GenConfig) -> Result<Self, DataError> {
        cfg.check()?;
        let space = FeatureSpace::new(cfg.seed, cfg.detection_dim, cfg.grid, cfg.channels)?;
        let splits = assign_splits(
            cfg.seed,
            cfg.num_images,
            cfg.val_fraction,
            cfg.test_fraction,
        );
        let mut scenes = Vec::with_capacity(cfg.num_images);
        let mut questions = Vec::with_capacity(cfg.num_images * cfg.questions_per_image);
        for (i, split) in splits.into_iter().enumerate() {
            let id = u32::try_from(i).map_err(|_| DataError::Invalid("too many images".into()))?;
            let scene = gen_scene(&mut rng_for(cfg.seed, "scene", i as u64), &cfg.world, id)?;
            let mut qrng = rng_for(cfg.seed, "questions", i as u64);
            let first = (i * cfg.questions_per_image) as u64;
            questions.extend(questions_for(
                &scene,
                cfg.questions_per_image,
                first,
                &mut qrng,
            )?);
            let features = RawFeatures::synthesize(&space, &scene, cfg.quality, cfg.seed);
            scenes.push(SceneEntry {
                scene,
                split,
                features,
            });
        }
        Ok(Self {
            config: cfg.clone(),
            scenes,
            questions,
        })
    }

    pub fn scene(&self, image_id: u32) -> Option<&SceneEntry> {
        self.scenes
            .get(image_id as usize)
            .filter(|s| s.scene.image_id == image_id)
    }

    pub fn split_of(&self, q: &QAItem) -> Split {
        self.scenes[q.image_id as usize].split
    }

    pub fn questions_in(&self, split: Split) -> Vec<&QAItem> {
        self.questions
            .iter()
            .filter(|q| self.split_of(q) == split)
            .collect()
    }

    /// Hex sha256 over every `(qid, image_id, split)` triple; equal for
    /// datasets with identical question splits.
    pub fn split_hash(&self) -> String {
        let mut h = Sha256::new();
        for q in &self.questions {
            h.update(q.qid.to_le_bytes());
            h.update(q.image_id.to_le_bytes());
            h.update(self.split_of(q).name().as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn write(&self, dir: &Path) -> Result<(), DataError> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let meta = dir.join(META_FILE);
        let text = serde_json::to_string_pretty(&self.config).expect("config serializes");
        std::fs::write(&meta, text + "\n").map_err(io_err(&meta))?;
        write_jsonl(
            &dir.join(SCENES_FILE),
            self.scenes.iter().map(SceneEntry::to_line),
        )?;
        write_jsonl(&dir.join(QUESTIONS_FILE), self.questions.iter())?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, DataError> {
        let meta = dir.join(META_FILE);
        let text = std::fs::read_to_string(&meta).map_err(io_err(&meta))?;
        let config: GenConfig = serde_json::from_str(&text).map_err(|source| DataError::Json {
            path: meta.clone(),
            line: 1,
            source,
        })?;
        let lines: Vec<SceneLine> = read_jsonl(&dir.join(SCENES_FILE))?;
        let mut scenes = lines
            .into_iter()
            .map(SceneEntry::from_line)
            .collect::<Result<Vec<_>, _>>()?;
        scenes.sort_by_key(|s| s.scene.image_id);
        if scenes
            .iter()
            .enumerate()
            .any(|(i, s)| s.scene.image_id as usize != i)
        {
            return Err(DataError::Invalid(
                "image ids must be 0..n without gaps".into(),
            ));
        }
        let questions: Vec<QAItem> = read_jsonl(&dir.join(QUESTIONS_FILE))?;
        if let Some(q) = questions
            .iter()
            .find(|q| q.image_id as usize >= scenes.len())
        {
            return Err(DataError::Invalid(format!(
                "question {} refers to missing image {}",
                q.qid, q.image_id
            )));
        }
        let mut seen = HashMap::new();
        if let Some(q) = questions.iter().find(|q| seen.insert(q.qid, ()).is_some()) {
            return Err(DataError::Invalid(format!("duplicate qid {}", q.qid)));
        }
        Ok(Self {
            config,
            scenes,
            questions,
        })
    }
}

pub fn write_jsonl<T: Serialize, I: IntoIterator<Item = T>>(
    path: &Path,
    items: I,
) -> Result<(), DataError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|source| DataError::Json {
            path: path.into(),
            line: 0,
            source,
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| DataError::Json {
                path: path.into(),
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

/// Hex sha256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
