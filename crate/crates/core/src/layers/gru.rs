use rand::Rng;

use super::{Bindings, LayerError, ParamId, ParamStore};
use crate::autodiff::{Tape, Tensor, Var};

/// GRU weights: `w_*` map input→hidden (E×H), `u_*` hidden→hidden (H×H).
#[derive(Clone, Debug)]
pub struct GruParams {
    pub input: usize,
    pub hidden: usize,
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
}

/// Tape handles of a [`GruParams`] set.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

impl GruParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let w_z = store.xavier(format!("{prefix}.w_z"), input, hidden, rng);
        let w_r = store.xavier(format!("{prefix}.w_r"), input, hidden, rng);
        let w_h = store.xavier(format!("{prefix}.w_h"), input, hidden, rng);
        let u_z = store.xavier(format!("{prefix}.u_z"), hidden, hidden, rng);
        let u_r = store.xavier(format!("{prefix}.u_r"), hidden, hidden, rng);
        let u_h = store.xavier(format!("{prefix}.u_h"), hidden, hidden, rng);
        let b_z = store.zeros(format!("{prefix}.b_z"), &[1, hidden]);
        let b_r = store.zeros(format!("{prefix}.b_r"), &[1, hidden]);
        let b_h = store.zeros(format!("{prefix}.b_h"), &[1, hidden]);
        Self {
            input,
            hidden,
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z,
            b_r,
            b_h,
        }
    }

    pub fn bind(&self, b: &Bindings) -> GruVars {
        GruVars {
            w_z: b.var(self.w_z),
            w_r: b.var(self.w_r),
            w_h: b.var(self.w_h),
            u_z: b.var(self.u_z),
            u_r: b.var(self.u_r),
            u_h: b.var(self.u_h),
            b_z: b.var(self.b_z),
            b_r: b.var(self.b_r),
            b_h: b.var(self.b_h),
        }
    }
}

fn affine(tape: &mut Tape, x: Var, w: Var, h: Var, u: Var, b: Var) -> Result<Var, LayerError> {
    let xw = tape.matmul(x, w)?;
    let hu = tape.matmul(h, u)?;
    let s = tape.add(xw, hu)?;
    Ok(tape.add_row(s, b)?)
}

/// Gate pre-activations read `h_gate`; the carried state is `h_carry`. The
/// two differ only when a recurrent dropout mask is applied.
fn gru_step(
    tape: &mut Tape,
    p: &GruVars,
    x: Var,
    h_gate: Var,
    h_carry: Var,
    active: Option<Var>,
) -> Result<Var, LayerError> {
    let z = affine(tape, x, p.w_z, h_gate, p.u_z, p.b_z)?;
    let z = tape.sigmoid(z);
    let r = affine(tape, x, p.w_r, h_gate, p.u_r, p.b_r)?;
    let r = tape.sigmoid(r);
    let rh = tape.mul(r, h_gate)?;
    let cand = affine(tape, x, p.w_h, rh, p.u_h, p.b_h)?;
    let cand = tape.tanh(cand);
    // (1 - z) ⊙ h + z ⊙ h̃  ==  h + z ⊙ (h̃ - h)
    let delta = tape.sub(cand, h_carry)?;
    let mut step = tape.mul(z, delta)?;
    if let Some(active) = active {
        step = tape.row_scale(step, active)?;
    }
    Ok(tape.add(h_carry, step)?)
}

/// One GRU update for a batch of rows: `x: B×E`, `h: B×H`.
pub fn gru_cell(tape: &mut Tape, p: &GruVars, x: Var, h: Var) -> Result<Var, LayerError> {
    gru_step(tape, p, x, h, h, None)
}

/// Locked (variational) dropout masks for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct LockedMasks {
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
    pub rate: f64,
}

fn check_rate(rate: f64) -> Result<(), LayerError> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(LayerError::Rate(rate))
    }
}

fn sample_mask<R: Rng>(n: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Entries are 0 with probability `rate`, else `1 / (1 - rate)`.
pub fn sample_locked_masks<R: Rng>(
    input: usize,
    hidden: usize,
    rate: f64,
    rng: &mut R,
) -> Result<LockedMasks, LayerError> {
    check_rate(rate)?;
    let input_mask = sample_mask(input, rate, rng);
    let hidden_mask = sample_mask(hidden, rate, rng);
    Ok(LockedMasks {
        input: input_mask,
        hidden: hidden_mask,
        rate,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-row masks of a batch: row `b` holds the masks of sequence `b`.
#[derive(Clone, Copy, Debug)]
pub struct BatchMasks {
    pub input: Var,
    pub hidden: Var,
}

impl BatchMasks {
    pub fn sample<R: Rng>(
        tape: &mut Tape,
        batch: usize,
        input: usize,
        hidden: usize,
        rate: f64,
        rng: &mut R,
    ) -> Result<Self, LayerError> {
        let mut xs = Vec::with_capacity(batch * input);
        let mut hs = Vec::with_capacity(batch * hidden);
        for _ in 0..batch {
            let m = sample_locked_masks(input, hidden, rate, rng)?;
            xs.extend(m.input);
            hs.extend(m.hidden);
        }
        let input = tape.constant(Tensor::new(vec![batch, input], xs)?);
        let hidden = tape.constant(Tensor::new(vec![batch, hidden], hs)?);
        Ok(Self { input, hidden })
    }
}

/// Gate inputs of one timestep before and after dropout, with the masks.
#[derive(Clone, Copy, Debug)]
pub struct StepTrace {
    pub input_mask: Var,
    pub hidden_mask: Var,
    pub input: Var,
    pub dropped_input: Var,
    pub state: Var,
    pub dropped_state: Var,
}

/// Per-timestep record of the dropout a GRU applied, for inspection.
#[derive(Debug, Default)]
pub struct MaskTrace {
    pub steps: Vec<StepTrace>,
}

impl MaskTrace {
    /// True when every step used bitwise the same masks and each dropped
    /// tensor is exactly its raw tensor times those masks.
    pub fn is_locked(&self, tape: &Tape) -> bool {
        let Some(first) = self.steps.first() else {
            return true;
        };
        let bits = |v: Var| {
            tape.value(v)
                .values()
                .iter()
                .map(|x| x.to_bits())
                .collect::<Vec<_>>()
        };
        let (mi, mh) = (bits(first.input_mask), bits(first.hidden_mask));
        let applied = |raw: Var, mask: Var, out: Var| {
            let (r, m, o) = (
                tape.value(raw).values(),
                tape.value(mask).values(),
                tape.value(out).values(),
            );
            r.len() == m.len()
                && r.iter()
                    .zip(m)
                    .zip(o)
                    .all(|((r, m), o)| (r * m).to_bits() == o.to_bits())
        };
        self.steps.iter().all(|s| {
            bits(s.input_mask) == mi
                && bits(s.hidden_mask) == mh
                && applied(s.input, s.input_mask, s.dropped_input)
                && applied(s.state, s.hidden_mask, s.dropped_state)
        })
    }
}

/// Runs a GRU over a padded batch. `inputs[t]` is the `B×E` slice at step
/// `t`; rows whose `lengths[b] <= t` keep their state unchanged so the result
/// holds each sequence's own final state. With `masks`, dropout is applied to
/// the input and to the recurrent input of every gate, reusing the same mask
/// pair at every step.
pub fn gru_encode_batch(
    tape: &mut Tape,
    p: &GruVars,
    hidden: usize,
    inputs: &[Var],
    lengths: &[usize],
    masks: Option<BatchMasks>,
    mut trace: Option<&mut MaskTrace>,
) -> Result<Var, LayerError> {
    let batch = lengths.len();
    if inputs.is_empty() || batch == 0 || lengths.contains(&0) {
        return Err(LayerError::EmptyInput("sequence"));
    }
    if lengths.iter().any(|&l| l > inputs.len()) {
        return Err(LayerError::EmptyInput(
            "sequence shorter than declared length",
        ));
    }
    let mut h = tape.constant(Tensor::zeros(&[batch, hidden]));
    for (t, &x) in inputs.iter().enumerate() {
        let active = if lengths.iter().all(|&l| l > t) {
            None
        } else {
            let flags = lengths
                .iter()
                .map(|&l| if l > t { 1.0 } else { 0.0 })
                .collect();
            Some(tape.constant(Tensor::new(vec![batch, 1], flags)?))
        };
        let (x_in, h_gate) = match masks {
            Some(m) => {
                let (xd, hd) = (
                    tape.dropout_with_mask(x, m.input)?,
                    tape.dropout_with_mask(h, m.hidden)?,
                );
                if let Some(tr) = trace.as_deref_mut() {
                    tr.steps.push(StepTrace {
                        input_mask: m.input,
                        hidden_mask: m.hidden,
                        input: x,
                        dropped_input: xd,
                        state: h,
                        dropped_state: hd,
                    });
                }
                (xd, hd)
            }
            // Exact identity node: gate gradients reach `h` grouped as in the
            // masked path, so rate 0 trains bitwise like the plain encoder.
            None => (x, tape.scale(h, 1.0)),
        };
        h = gru_step(tape, p, x_in, h_gate, h, active)?;
    }
    Ok(h)
}

/// Plain GRU over one embedded sequence `T×E`; returns the `1×H` final state.
pub fn gru_encode(
    tape: &mut Tape,
    p: &GruVars,
    hidden: usize,
    tokens: Var,
) -> Result<Var, LayerError> {
    encode_rows(tape, p, hidden, tokens, None)
}

/// Bayesian GRU over one embedded sequence `T×E`: in train mode one locked
/// mask pair is drawn for the sequence; in eval mode the masks are identity.
#[allow(clippy::too_many_arguments)]
pub fn bayesian_gru_encode<R: Rng>(
    tape: &mut Tape,
    p: &GruVars,
    dims: (usize, usize),
    tokens: Var,
    rate: f64,
    rng: &mut R,
    mode: Mode,
    trace: Option<&mut MaskTrace>,
) -> Result<Var, LayerError> {
    check_rate(rate)?;
    let (input, hidden) = dims;
    let masks = match mode {
        Mode::Train => Some(BatchMasks::sample(tape, 1, input, hidden, rate, rng)?),
        Mode::Eval => None,
    };
    let steps = time_steps(tape, tokens)?;
    gru_encode_batch(tape, p, hidden, &steps, &[steps.len()], masks, trace)
}

fn time_steps(tape: &mut Tape, tokens: Var) -> Result<Vec<Var>, LayerError> {
    let (t, _) = tape
        .value(tokens)
        .dims2()
        .ok_or(LayerError::EmptyInput("sequence"))?;
    (0..t).map(|i| Ok(tape.slice(tokens, 0, i, 1)?)).collect()
}

fn encode_rows(
    tape: &mut Tape,
    p: &GruVars,
    hidden: usize,
    tokens: Var,
    masks: Option<BatchMasks>,
) -> Result<Var, LayerError> {
    let steps = time_steps(tape, tokens)?;
    gru_encode_batch(tape, p, hidden, &steps, &[steps.len()], masks, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_store(e: usize, h: usize) -> (ParamStore, GruParams) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = GruParams::init(&mut store, "gru", e, h, &mut rng);
        for t in store.tensors_mut() {
            t.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        (store, p)
    }

    #[test]
    fn zero_params_zero_state_stays_zero() {
        let (store, p) = zero_store(3, 4);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let vars = p.bind(&b);
        let x = tape.constant(Tensor::row(vec![0.3, -1.0, 2.0]));
        let h = tape.constant(Tensor::zeros(&[1, 4]));
        let out = gru_cell(&mut tape, &vars, x, h).unwrap();
        assert!(tape.value(out).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn closed_update_gate_carries_state() {
        let (mut store, p) = zero_store(3, 4);
        store
            .get_mut(p.b_z)
            .values_mut()
            .iter_mut()
            .for_each(|v| *v = -100.0);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let vars = p.bind(&b);
        let x = tape.constant(Tensor::row(vec![0.3, -1.0, 2.0]));
        let h0 = vec![0.5, -0.25, 0.9, -0.7];
        let h = tape.constant(Tensor::row(h0.clone()));
        let out = gru_cell(&mut tape, &vars, x, h).unwrap();
        for (a, b) in tape.value(out).values().iter().zip(h0) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_sampling_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = sample_locked_masks(5, 6, 0.0, &mut rng).unwrap();
        assert!(m.input.iter().chain(&m.hidden).all(|&v| v == 1.0));
        assert!(matches!(
            sample_locked_masks(2, 2, 1.0, &mut rng),
            Err(LayerError::Rate(_))
        ));
        assert!(matches!(
            sample_locked_masks(2, 2, -0.1, &mut rng),
            Err(LayerError::Rate(_))
        ));

        let a = sample_locked_masks(8, 8, 0.3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_locked_masks(8, 8, 0.3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);

        let m = sample_locked_masks(5_000, 5_000, 0.5, &mut rng).unwrap();
        let zeros = m
            .input
            .iter()
            .chain(&m.hidden)
            .filter(|&&v| v == 0.0)
            .count();
        let frac = zeros as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&frac), "zero fraction {frac}");
        assert!(m.input.iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn empty_batch_is_input_error() {
        let (store, p) = zero_store(2, 2);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let vars = p.bind(&b);
        assert!(matches!(
            gru_encode_batch(&mut tape, &vars, 2, &[], &[], None, None),
            Err(LayerError::EmptyInput(_))
        ));
    }
}
