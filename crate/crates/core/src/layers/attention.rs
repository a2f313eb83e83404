use rand::Rng;

use super::{Bindings, LayerError, ParamId, ParamStore};
use crate::autodiff::{Tape, Var};

/// Additive attention: `score_i = w · tanh(W_vᵀ v_i + W_qᵀ q)`.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub value_dim: usize,
    pub query_dim: usize,
    pub attn_dim: usize,
    pub w_v: ParamId,
    pub w_q: ParamId,
    pub w: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_v: Var,
    pub w_q: Var,
    pub w: Var,
}

impl AttentionParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        value_dim: usize,
        query_dim: usize,
        attn_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w_v = store.xavier(format!("{prefix}.w_v"), value_dim, attn_dim, rng);
        let w_q = store.xavier(format!("{prefix}.w_q"), query_dim, attn_dim, rng);
        let w = store.xavier(format!("{prefix}.w"), attn_dim, 1, rng);
        Self {
            value_dim,
            query_dim,
            attn_dim,
            w_v,
            w_q,
            w,
        }
    }

    pub fn bind(&self, b: &Bindings) -> AttentionVars {
        AttentionVars {
            w_v: b.var(self.w_v),
            w_q: b.var(self.w_q),
            w: b.var(self.w),
        }
    }
}

/// Output of [`attention_pool_batch`].
#[derive(Clone, Copy, Debug)]
pub struct Pooled {
    /// `B×D` convex combinations of the value rows.
    pub pooled: Var,
    /// `B×N` attention distributions.
    pub weights: Var,
}

/// Attention pooling over `B` groups of `n` value rows each.
/// `values: (B·n)×D`, `query: B×Q`.
pub fn attention_pool_batch(
    tape: &mut Tape,
    p: &AttentionVars,
    values: Var,
    query: Var,
    n: usize,
) -> Result<Pooled, LayerError> {
    if n == 0 {
        return Err(LayerError::EmptyInput("attention values"));
    }
    let (rows, _) = tape
        .value(values)
        .dims2()
        .ok_or(LayerError::EmptyInput("attention values"))?;
    let (batch, _) = tape
        .value(query)
        .dims2()
        .ok_or(LayerError::EmptyInput("attention query"))?;
    if rows != batch * n {
        return Err(LayerError::Shape(format!(
            "attention: {rows} value rows for batch {batch} × {n} slots"
        )));
    }
    let pv = tape.matmul(values, p.w_v)?;
    let pq = tape.matmul(query, p.w_q)?;
    let spread: Vec<usize> = (0..batch).flat_map(|b| std::iter::repeat_n(b, n)).collect();
    let pq = tape.gather_rows(pq, &spread)?;
    let hidden = tape.add(pv, pq)?;
    let hidden = tape.tanh(hidden);
    let scores = tape.matmul(hidden, p.w)?;
    let scores = tape.reshape(scores, vec![batch, n])?;
    let weights = tape.softmax(scores, 1)?;
    let column = tape.reshape(weights, vec![batch * n, 1])?;
    let weighted = tape.row_scale(values, column)?;
    let pooled = tape.group_sum(weighted, n)?;
    Ok(Pooled { pooled, weights })
}

/// Attention pooling of one `N×D` value set against a `1×Q` query.
pub fn attention_pool(
    tape: &mut Tape,
    p: &AttentionVars,
    values: Var,
    query: Var,
) -> Result<Pooled, LayerError> {
    let n = tape.value(values).dims2().map_or(0, |d| d.0);
    attention_pool_batch(tape, p, values, query, n)
}

/// Affine layer `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.xavier(format!("{prefix}.w"), input, output, rng);
        let b = store.zeros(format!("{prefix}.b"), &[1, output]);
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bindings, x: Var) -> Result<Var, LayerError> {
        let y = tape.matmul(x, b.var(self.w))?;
        Ok(tape.add_row(y, b.var(self.b))?)
    }
}

/// Embedding lookup `ids → T×E`; an id out of range is an index error.
pub fn embed(tape: &mut Tape, table: Var, ids: &[usize]) -> Result<Var, LayerError> {
    if ids.is_empty() {
        return Err(LayerError::EmptyInput("token sequence"));
    }
    Ok(tape.gather_rows(table, ids)?)
}
