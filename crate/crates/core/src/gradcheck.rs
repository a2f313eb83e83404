//! Finite-difference audit of every layer and of the assembled model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{check_gradients, Tape, Tensor, TensorError, Var};
use crate::data::{Dataset, GenConfig, Split};
use crate::layers::{
    attention_pool, bayesian_gru_encode, embed, gru_cell, gru_encode, AttentionParams, Bindings,
    GruParams, Linear, Mode, ParamStore,
};
use crate::model::{items_for, EncoderKind, ModelConfig, ModelError, ReasonModel};

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCase {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradAudit {
    pub cases: Vec<GradCase>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .expect("shape")
}

fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for t in store.tensors_mut() {
        t.values_mut()
            .iter_mut()
            .for_each(|v| *v += rng.gen_range(-0.5..0.5));
    }
}

/// Scalar `Σ out ⊙ W` with a fixed random `W`, so every output entry matters.
fn probe(tape: &mut Tape, out: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = tape.constant(uniform_tensor(&mut rng, tape.shape(out)));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn layer_err(e: crate::layers::LayerError) -> TensorError {
    TensorError::Contract(e.to_string())
}

type LayerCase = fn(u64) -> Result<(f64, usize), TensorError>;

fn with_store<L>(
    seed: u64,
    build: impl FnOnce(&mut ParamStore, &mut ChaCha8Rng) -> (L, Vec<Tensor>),
    forward: impl Fn(&L, &mut Tape, &Bindings, &[Var]) -> Result<Var, TensorError>,
) -> Result<(f64, usize), TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let (layer, extra) = build(&mut store, &mut rng);
    jitter(&mut store, &mut rng);
    let n = store.len();
    let mut inputs = store.tensors().to_vec();
    inputs.extend(extra);
    let r = check_gradients(&inputs, GRAD_STEP, None, |tape, vars| {
        let b = Bindings::from_vars(&vars[..n]);
        let out = forward(&layer, tape, &b, &vars[n..])?;
        probe(tape, out, seed)
    })?;
    Ok((r.max_rel_error, r.checked))
}

fn linear_case(seed: u64) -> Result<(f64, usize), TensorError> {
    with_store(
        seed,
        |s, rng| {
            (
                Linear::init(s, "lin", 5, 3, rng),
                vec![uniform_tensor(rng, &[4, 5])],
            )
        },
        |layer, tape, b, x| layer.forward(tape, b, x[0]).map_err(layer_err),
    )
}

fn embedding_case(seed: u64) -> Result<(f64, usize), TensorError> {
    with_store(
        seed,
        |s, rng| (s.add("embed", uniform_tensor(rng, &[6, 4])), vec![]),
        |id, tape, b, _| embed(tape, b.var(*id), &[0, 3, 3, 5]).map_err(layer_err),
    )
}

fn attention_case(seed: u64) -> Result<(f64, usize), TensorError> {
    with_store(
        seed,
        |s, rng| {
            (
                AttentionParams::init(s, "att", 4, 3, 5, rng),
                vec![uniform_tensor(rng, &[6, 4]), uniform_tensor(rng, &[1, 3])],
            )
        },
        |p, tape, b, x| {
            let pooled = attention_pool(tape, &p.bind(b), x[0], x[1]).map_err(layer_err)?;
            let both = tape.concat(&[pooled.pooled, pooled.weights], 1)?;
            Ok(both)
        },
    )
}

fn gru_cell_case(seed: u64) -> Result<(f64, usize), TensorError> {
    with_store(
        seed,
        |s, rng| {
            (
                GruParams::init(s, "gru", 3, 4, rng),
                vec![uniform_tensor(rng, &[2, 3]), uniform_tensor(rng, &[2, 4])],
            )
        },
        |p, tape, b, x| gru_cell(tape, &p.bind(b), x[0], x[1]).map_err(layer_err),
    )
}

fn gru_encode_case(seed: u64) -> Result<(f64, usize), TensorError> {
    with_store(
        seed,
        |s, rng| {
            (
                GruParams::init(s, "gru", 3, 4, rng),
                vec![uniform_tensor(rng, &[5, 3])],
            )
        },
        |p, tape, b, x| gru_encode(tape, &p.bind(b), 4, x[0]).map_err(layer_err),
    )
}

fn bayesian_gru_case(seed: u64) -> Result<(f64, usize), TensorError> {
    with_store(
        seed,
        |s, rng| {
            (
                GruParams::init(s, "gru", 3, 4, rng),
                vec![uniform_tensor(rng, &[5, 3])],
            )
        },
        |p, tape, b, x| {
            // Same stream on every evaluation, hence the same locked masks.
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17));
            let p = p.bind(b);
            bayesian_gru_encode(tape, &p, (3, 4), x[0], 0.25, &mut rng, Mode::Train, None)
                .map_err(layer_err)
        },
    )
}

const LAYER_CASES: [(&str, LayerCase); 6] = [
    ("linear", linear_case),
    ("embedding", embedding_case),
    ("attention_pool", attention_case),
    ("gru_cell", gru_cell_case),
    ("gru_encode", gru_encode_case),
    ("bayesian_gru_encode", bayesian_gru_case),
];

fn model_configs() -> Vec<(&'static str, ModelConfig)> {
    let base = ModelConfig::default();
    vec![
        ("model: full", base.clone()),
        (
            "model: detection only",
            ModelConfig {
                use_spatial: false,
                use_bbox_position: false,
                use_bbox_size: false,
                ..base.clone()
            },
        ),
        (
            "model: plain gru, no program",
            ModelConfig {
                encoder: EncoderKind::Gru,
                use_program: false,
                ..base
            },
        ),
    ]
}

/// Up to `per_tensor` evenly strided entries of each model tensor are
/// perturbed; layer cases are checked exhaustively.
pub fn audit(seeds: std::ops::Range<u64>, per_tensor: usize) -> Result<GradAudit, ModelError> {
    let mut cases = Vec::new();
    for seed in seeds {
        for (name, case) in LAYER_CASES {
            let (err, checked) = case(seed)?;
            cases.push(GradCase {
                name: name.into(),
                seed,
                max_rel_error: err,
                checked,
            });
        }
        let data = Dataset::generate(&GenConfig {
            seed,
            num_images: 6,
            questions_per_image: 2,
            ..Default::default()
        })
        .map_err(|e| ModelError::Input(e.to_string()))?;
        let items = items_for(&data, Split::Train)?;
        let item = &items[seed as usize % items.len()];
        for (name, cfg) in model_configs() {
            let model = ReasonModel::new(ModelConfig { seed, ..cfg })?;
            let inputs = model.params.tensors().to_vec();
            let r = check_gradients(&inputs, GRAD_STEP, Some(per_tensor), |tape, vars| {
                let b = Bindings::from_vars(vars);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                model
                    .loss(tape, &b, &[item], Mode::Train, &mut rng, None)
                    .map_err(|e| TensorError::Contract(e.to_string()))
            })?;
            cases.push(GradCase {
                name: name.into(),
                seed,
                max_rel_error: r.max_rel_error,
                checked: r.checked,
            });
        }
    }
    let max_rel_error = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradAudit {
        cases,
        max_rel_error,
        tolerance: GRAD_TOLERANCE,
        passed: max_rel_error < GRAD_TOLERANCE,
    })
}
