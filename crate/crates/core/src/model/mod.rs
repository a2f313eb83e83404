//! The full question-answering network.
//!
//! Question and program tokens run through separate encoders (plain or
//! Bayesian GRU). Their final states are concatenated and projected to the
//! query `joint`, which drives additive attention over the padded object
//! slots and, optionally, over the spatial grid cells. The pooled vectors and
//! `joint` are concatenated and classified by a one-hidden-layer MLP.

mod checkpoint;

pub use checkpoint::{CheckpointError, CHECKPOINT_VERSION};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{softmax_values, Tape, Tensor, TensorError, Var};
use crate::data::{Dataset, QAItem, Split};
use crate::layers::{
    attention_pool_batch, gru_encode_batch, AttentionParams, BatchMasks, Bindings, GruParams,
    LayerError, Linear, MaskTrace, Mode, ParamId, ParamStore,
};
use crate::program::{answer_index, program_vocab, question_vocab, NUM_ANSWERS};
use crate::seed::rng_for;
use crate::world::RawFeatures;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input does not fit the model: {0}")]
    Input(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Gru,
    BayesianGru,
}

impl std::str::FromStr for EncoderKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gru" => Ok(EncoderKind::Gru),
            "bayesian_gru" | "bayesian" => Ok(EncoderKind::BayesianGru),
            other => Err(ModelError::Config(format!(
                "unknown encoder {other:?} (expected gru|bayesian_gru)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed: usize,
    pub hidden: usize,
    pub query: usize,
    pub attn: usize,
    pub detection_dim: usize,
    pub grid: usize,
    pub channels: usize,
    pub answers: usize,
    pub mlp_hidden: usize,
    /// Object slots per scene; unused slots hold zero rows.
    pub max_objects: usize,
    pub question_vocab: usize,
    pub program_vocab: usize,
    pub use_spatial: bool,
    pub use_bbox_position: bool,
    pub use_bbox_size: bool,
    pub use_program: bool,
    pub encoder: EncoderKind,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed: 32,
            hidden: 64,
            query: 64,
            attn: 64,
            detection_dim: 64,
            grid: 7,
            channels: 32,
            answers: NUM_ANSWERS,
            mlp_hidden: 128,
            max_objects: 8,
            question_vocab: question_vocab().len(),
            program_vocab: program_vocab().len(),
            use_spatial: true,
            use_bbox_position: true,
            use_bbox_size: true,
            use_program: true,
            encoder: EncoderKind::BayesianGru,
            dropout: 0.25,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn check(&self) -> Result<(), ModelError> {
        let dims = [
            self.embed,
            self.hidden,
            self.query,
            self.attn,
            self.detection_dim,
            self.grid,
            self.channels,
            self.mlp_hidden,
            self.max_objects,
        ];
        if dims.contains(&0) {
            return Err(ModelError::Config("all dimensions must be positive".into()));
        }
        if self.answers != NUM_ANSWERS {
            return Err(ModelError::Config(format!(
                "answers = {}, vocabulary has {NUM_ANSWERS}",
                self.answers
            )));
        }
        if self.question_vocab != question_vocab().len()
            || self.program_vocab != program_vocab().len()
        {
            return Err(ModelError::Config(
                "token vocabulary sizes do not match the grammar".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn bbox_columns(&self) -> usize {
        2 * usize::from(self.use_bbox_position) + 2 * usize::from(self.use_bbox_size)
    }

    /// Width of each object slot row.
    pub fn object_width(&self) -> usize {
        self.detection_dim + self.bbox_columns()
    }

    /// Width of the classifier input.
    pub fn classifier_width(&self) -> usize {
        self.object_width() + if self.use_spatial { self.channels } else { 0 } + self.query
    }
}

/// One question ready for the network.
#[derive(Clone, Debug)]
pub struct Item<'a> {
    pub qid: u64,
    pub template: crate::program::Template,
    pub features: &'a RawFeatures,
    pub question: Vec<usize>,
    pub program: Vec<usize>,
    pub answer: usize,
}

impl<'a> Item<'a> {
    pub fn new(features: &'a RawFeatures, q: &QAItem) -> Result<Self, ModelError> {
        let enc = |e: crate::program::ProgramError| ModelError::Input(e.to_string());
        Ok(Self {
            qid: q.qid,
            template: q.template,
            features,
            question: question_vocab().encode(&q.question).map_err(enc)?,
            program: program_vocab()
                .encode(&q.program.serialize())
                .map_err(enc)?,
            answer: answer_index(&q.answer)
                .ok_or_else(|| ModelError::Input(format!("answer {:?}", q.answer)))?,
        })
    }
}

/// Encodes every question of `split`, in file order.
pub fn items_for(data: &Dataset, split: Split) -> Result<Vec<Item<'_>>, ModelError> {
    data.questions_in(split)
        .into_iter()
        .map(|q| Item::new(&data.scenes[q.image_id as usize].features, q))
        .collect()
}

struct Encoder {
    embed: ParamId,
    gru: GruParams,
}

struct Layout {
    question: Encoder,
    program: Option<Encoder>,
    joint: Linear,
    det_att: AttentionParams,
    spatial: Option<(ParamId, AttentionParams)>,
    hidden: Linear,
    out: Linear,
}

/// Tape handles of one forward pass.
pub struct Forward {
    pub logits: Var,
    pub f_q: Var,
    pub f_p: Var,
    pub joint: Var,
    pub det_weights: Var,
    pub spatial_weights: Option<Var>,
}

/// Dropout masks drawn for one batch, per encoder.
#[derive(Debug, Default)]
pub struct Traces {
    pub question: MaskTrace,
    pub program: MaskTrace,
}

pub struct ReasonModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

fn init_rng(seed: u64, name: &str) -> rand_chacha::ChaCha8Rng {
    rng_for(seed, &format!("init/{name}"), 0)
}

impl ReasonModel {
    /// Fresh parameters. Each layer draws from its own seed stream, so a flag
    /// change leaves the values of every layer it does not govern untouched.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.check()?;
        let c = &config;
        let s = c.seed;
        let mut store = ParamStore::new();
        let encoder = |store: &mut ParamStore, name: &str, vocab: usize| Encoder {
            embed: store.xavier(
                format!("{name}.embed"),
                vocab,
                c.embed,
                &mut init_rng(s, &format!("{name}.embed")),
            ),
            gru: GruParams::init(
                store,
                &format!("{name}.gru"),
                c.embed,
                c.hidden,
                &mut init_rng(s, &format!("{name}.gru")),
            ),
        };
        let question = encoder(&mut store, "question", c.question_vocab);
        let program = c
            .use_program
            .then(|| encoder(&mut store, "program", c.program_vocab));
        let joint = Linear::init(
            &mut store,
            "joint",
            2 * c.hidden,
            c.query,
            &mut init_rng(s, "joint"),
        );
        let det_att = AttentionParams::init(
            &mut store,
            "det_att",
            c.object_width(),
            c.query,
            c.attn,
            &mut init_rng(s, "det_att"),
        );
        let spatial = c.use_spatial.then(|| {
            let cells = c.grid * c.grid;
            let pos = store.xavier(
                "spatial_pos",
                cells,
                c.channels,
                &mut init_rng(s, "spatial_pos"),
            );
            let att = AttentionParams::init(
                &mut store,
                "sp_att",
                c.channels,
                c.query,
                c.attn,
                &mut init_rng(s, "sp_att"),
            );
            (pos, att)
        });
        let hidden = Linear::init(
            &mut store,
            "mlp.hidden",
            c.classifier_width(),
            c.mlp_hidden,
            &mut init_rng(s, "mlp.hidden"),
        );
        let out = Linear::init(
            &mut store,
            "mlp.out",
            c.mlp_hidden,
            c.answers,
            &mut init_rng(s, "mlp.out"),
        );
        let layout = Layout {
            question,
            program,
            joint,
            det_att,
            spatial,
            hidden,
            out,
        };
        Ok(Self {
            config,
            params: store,
            layout,
        })
    }

    fn check_item(&self, item: &Item) -> Result<(), ModelError> {
        let c = &self.config;
        let f = item.features;
        let (n, d) = f
            .detection
            .dims2()
            .ok_or_else(|| ModelError::Input("detection must be N×D".into()))?;
        if d != c.detection_dim {
            return Err(ModelError::Input(format!(
                "detection width {d}, model expects {}",
                c.detection_dim
            )));
        }
        if n > c.max_objects {
            return Err(ModelError::Input(format!(
                "{n} objects exceed {} slots",
                c.max_objects
            )));
        }
        if f.bbox.shape() != [n, 4] {
            return Err(ModelError::Input("bbox must be N×4".into()));
        }
        if c.use_spatial && f.spatial.shape() != [c.grid, c.grid, c.channels] {
            return Err(ModelError::Input(format!(
                "spatial grid {:?}, model expects {}×{}×{}",
                f.spatial.shape(),
                c.grid,
                c.grid,
                c.channels
            )));
        }
        if item.question.is_empty() || item.program.is_empty() {
            return Err(ModelError::Input(format!(
                "question {} has an empty token sequence",
                item.qid
            )));
        }
        Ok(())
    }

    fn object_slots(&self, items: &[&Item]) -> Tensor {
        let c = &self.config;
        let w = c.object_width();
        let mut values = vec![0.0; items.len() * c.max_objects * w];
        for (b, item) in items.iter().enumerate() {
            let f = item.features;
            for i in 0..f.detection.shape()[0] {
                let row = &mut values[(b * c.max_objects + i) * w..][..w];
                let d = c.detection_dim;
                row[..d].copy_from_slice(f.detection.row_slice(i));
                let bb = f.bbox.row_slice(i);
                let mut k = d;
                if c.use_bbox_position {
                    row[k..k + 2].copy_from_slice(&bb[..2]);
                    k += 2;
                }
                if c.use_bbox_size {
                    row[k..k + 2].copy_from_slice(&bb[2..]);
                }
            }
        }
        Tensor::new(vec![items.len() * c.max_objects, w], values).expect("slot layout")
    }

    #[allow(clippy::too_many_arguments)]
    fn encode_tokens<R: Rng>(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        enc: &Encoder,
        seqs: &[&[usize]],
        mode: Mode,
        rng: &mut R,
        trace: Option<&mut MaskTrace>,
    ) -> Result<Var, ModelError> {
        let c = &self.config;
        let table = b.var(enc.embed);
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let steps = lengths.iter().copied().max().unwrap_or(0);
        let mut inputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let ids: Vec<usize> = seqs
                .iter()
                .map(|s| s.get(t).copied().unwrap_or(0))
                .collect();
            inputs.push(tape.gather_rows(table, &ids)?);
        }
        let masks = match (c.encoder, mode) {
            (EncoderKind::BayesianGru, Mode::Train) => Some(BatchMasks::sample(
                tape,
                seqs.len(),
                c.embed,
                c.hidden,
                c.dropout,
                rng,
            )?),
            _ => None,
        };
        let gru = enc.gru.bind(b);
        Ok(gru_encode_batch(
            tape, &gru, c.hidden, &inputs, &lengths, masks, trace,
        )?)
    }

    /// Builds the network on `tape` for a batch. `rng` drives dropout masks in
    /// train mode; `traces` receives the masks applied at every step.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        items: &[&Item],
        mode: Mode,
        rng: &mut R,
        mut traces: Option<&mut Traces>,
    ) -> Result<Forward, ModelError> {
        if items.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        for item in items {
            self.check_item(item)?;
        }
        let c = &self.config;
        let l = &self.layout;
        let batch = items.len();

        let qs: Vec<&[usize]> = items.iter().map(|i| i.question.as_slice()).collect();
        let f_q = self.encode_tokens(
            tape,
            b,
            &l.question,
            &qs,
            mode,
            rng,
            traces.as_deref_mut().map(|t| &mut t.question),
        )?;
        let f_p = match &l.program {
            Some(enc) => {
                let ps: Vec<&[usize]> = items.iter().map(|i| i.program.as_slice()).collect();
                self.encode_tokens(tape, b, enc, &ps, mode, rng, traces.map(|t| &mut t.program))?
            }
            None => tape.constant(Tensor::zeros(&[batch, c.hidden])),
        };
        let fused = tape.concat(&[f_q, f_p], 1)?;
        let joint = l.joint.forward(tape, b, fused)?;

        let slots = tape.constant(self.object_slots(items));
        let det = attention_pool_batch(tape, &l.det_att.bind(b), slots, joint, c.max_objects)?;
        let mut parts = vec![det.pooled];
        let mut spatial_weights = None;
        if let Some((pos, att)) = &l.spatial {
            let cells = c.grid * c.grid;
            let mut values = Vec::with_capacity(batch * cells * c.channels);
            for item in items {
                values.extend_from_slice(item.features.spatial.values());
            }
            let grid = tape.constant(Tensor::new(vec![batch * cells, c.channels], values)?);
            let spread: Vec<usize> = (0..batch).flat_map(|_| 0..cells).collect();
            let pos = tape.gather_rows(b.var(*pos), &spread)?;
            let grid = tape.add(grid, pos)?;
            let sp = attention_pool_batch(tape, &att.bind(b), grid, joint, cells)?;
            parts.push(sp.pooled);
            spatial_weights = Some(sp.weights);
        }
        parts.push(joint);
        let x = tape.concat(&parts, 1)?;
        let h = l.hidden.forward(tape, b, x)?;
        let h = tape.relu(h);
        let logits = l.out.forward(tape, b, h)?;
        Ok(Forward {
            logits,
            f_q,
            f_p,
            joint,
            det_weights: det.weights,
            spatial_weights,
        })
    }

    /// Mean cross-entropy over the batch.
    pub fn loss<R: Rng>(
        &self,
        tape: &mut Tape,
        b: &Bindings,
        items: &[&Item],
        mode: Mode,
        rng: &mut R,
        traces: Option<&mut Traces>,
    ) -> Result<Var, ModelError> {
        let fwd = self.forward(tape, b, items, mode, rng, traces)?;
        let targets: Vec<usize> = items.iter().map(|i| i.answer).collect();
        Ok(tape.cross_entropy(fwd.logits, &targets)?)
    }

    /// Eval-mode answer probabilities, one `K`-vector per item.
    pub fn predict(&self, items: &[Item]) -> Result<Vec<Vec<f64>>, ModelError> {
        const CHUNK: usize = 128;
        let mut out = Vec::with_capacity(items.len());
        let mut unused = rng_for(0, "eval", 0);
        for chunk in items.chunks(CHUNK) {
            let refs: Vec<&Item> = chunk.iter().collect();
            let mut tape = Tape::new();
            let b = self.params.bind_frozen(&mut tape);
            let fwd = self.forward(&mut tape, &b, &refs, Mode::Eval, &mut unused, None)?;
            let logits = tape.value(fwd.logits);
            let probs = softmax_values(logits.values(), logits.shape(), 1);
            out.extend(probs.chunks(self.config.answers).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Parameter names with their shapes, in store order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect()
    }
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}
