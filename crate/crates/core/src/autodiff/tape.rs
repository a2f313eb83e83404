//! Wengert tape: every op appends a node, `backward` replays the list in
//! reverse. Nodes are only ever appended, so the tape is topologically ordered
//! by construction.

use super::{Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    Softmax {
        src: Var,
        axis: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    GatherRows {
        src: Var,
        rows: Vec<usize>,
    },
    Reshape(Var),
    RowScale(Var, Var),
    GroupSum {
        src: Var,
        group: usize,
    },
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-use record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    t.dims2().ok_or_else(|| TensorError::Rank {
        op,
        shape: t.shape().to_vec(),
        expected: 2,
    })
}

/// `c (+)= op(a) · op(b)` for row-major slices; `m×k · k×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: bounds asserted above, strides describe the row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// (outer, axis_len, inner) strides of `axis` in `shape`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, tensor: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, tensor: Tensor, src: Var, op: Op) -> Var {
        let ng = self.nodes[src.0].needs_grad;
        self.push(tensor, op, ng)
    }

    fn binary(&mut self, tensor: Tensor, a: Var, b: Var, op: Op) -> Var {
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(tensor, op, ng)
    }

    /// Registers an input; gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let ng = tensor.requires_grad();
        self.push(tensor, Op::Leaf, ng)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(true), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    /// Gradient populated by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2("matmul", ta)?;
        let (k2, n) = dims2("matmul", tb)?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            ta.values(),
            false,
            tb.values(),
            false,
            &mut out,
            false,
        );
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.binary(t, a, b, Op::MatMul(a, b)))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta, tb));
        }
        let out = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(ta.shape().to_vec(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.binary(t, a, b, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.binary(t, a, b, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.binary(t, a, b, Op::Mul(a, b)))
    }

    /// Dropout expressed as multiplication by an externally sampled mask.
    pub fn dropout_with_mask(&mut self, x: Var, mask: Var) -> Result<Var, TensorError> {
        self.mul(x, mask)
    }

    /// `a[i, j] + bias[j]` for `a: m×n` and a bias of `n` values.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let (m, n) = dims2("add_row", ta)?;
        if tb.len() != n {
            return Err(shape_err("add_row", ta, tb));
        }
        let mut out = ta.values().to_vec();
        for row in out.chunks_exact_mut(n) {
            row.iter_mut().zip(tb.values()).for_each(|(x, b)| *x += b);
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.binary(t, a, bias, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let out = ta.values().iter().map(|x| x * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        self.unary(t, a, Op::Scale(a, c))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let out = ta.values().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        self.unary(t, a, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| if x <= 0.0 { 0.0 } else { x }, Op::Relu(a))
    }

    /// Concatenates rank-2 tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        if axis > 1 {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                rank: 2,
            });
        }
        let (r0, c0) = dims2("concat", self.value(first))?;
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2("concat", self.value(p))?;
            if (axis == 1 && r != r0) || (axis == 0 && c != c0) {
                return Err(shape_err("concat", self.value(first), self.value(p)));
            }
            dims.push((r, c));
        }
        let t = if axis == 0 {
            let rows = dims.iter().map(|d| d.0).sum();
            let mut out = Vec::with_capacity(rows * c0);
            for &p in parts {
                out.extend_from_slice(self.value(p).values());
            }
            Tensor::new(vec![rows, c0], out)?
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for &p in parts {
                    out.extend_from_slice(self.value(p).row_slice(i));
                }
            }
            Tensor::new(vec![r0, cols], out)?
        };
        let ng = parts.iter().any(|p| self.nodes[p.0].needs_grad);
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(
        &mut self,
        a: Var,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let (r, c) = dims2("slice", ta)?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 {
            return Err(TensorError::Axis {
                op: "slice",
                axis,
                rank: 2,
            });
        }
        if len == 0 || start + len > extent {
            return Err(TensorError::Index {
                op: "slice",
                index: start + len,
                extent,
            });
        }
        let t = if axis == 0 {
            Tensor::new(
                vec![len, c],
                ta.values()[start * c..(start + len) * c].to_vec(),
            )?
        } else {
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&ta.row_slice(i)[start..start + len]);
            }
            Tensor::new(vec![r, len], out)?
        };
        Ok(self.unary(
            t,
            a,
            Op::Slice {
                src: a,
                axis,
                start,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).values().iter().sum();
        self.unary(Tensor::scalar(s), a, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let s = ta.values().iter().sum::<f64>() / ta.len() as f64;
        self.unary(Tensor::scalar(s), a, Op::Mean(a))
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if axis >= ta.shape().len() {
            return Err(TensorError::Axis {
                op: "softmax",
                axis,
                rank: ta.shape().len(),
            });
        }
        let out = softmax_values(ta.values(), ta.shape(), axis);
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.unary(t, a, Op::Softmax { src: a, axis }))
    }

    /// Mean over the batch of `-log softmax(logits)[target]`, fused in log space.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let tl = self.value(logits);
        let (b, k) = dims2("cross_entropy", tl)?;
        if targets.len() != b {
            return Err(TensorError::Contract(format!(
                "cross_entropy: {} targets for batch of {b}",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: bad,
                extent: k,
            });
        }
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for (i, &target) in targets.iter().enumerate() {
            let row = tl.row_slice(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[target];
            for (p, x) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let t = Tensor::scalar(loss / b as f64);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.unary(t, logits, op))
    }

    /// Row lookup `out[i] = src[rows[i]]`; the backward pass scatters into
    /// the looked-up rows only.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let ts = self.value(src);
        let (v, e) = dims2("gather_rows", ts)?;
        if rows.is_empty() {
            return Err(TensorError::Contract(
                "gather_rows: empty index list".into(),
            ));
        }
        let mut out = Vec::with_capacity(rows.len() * e);
        for &r in rows {
            if r >= v {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: r,
                    extent: v,
                });
            }
            out.extend_from_slice(ts.row_slice(r));
        }
        let t = Tensor::new(vec![rows.len(), e], out)?;
        Ok(self.unary(
            t,
            src,
            Op::GatherRows {
                src,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let t = self.value(a).reshaped(shape)?;
        Ok(self.unary(t, a, Op::Reshape(a)))
    }

    /// `a[i, j] * s[i]` for `a: m×n`, `s: m×1`.
    pub fn row_scale(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        let (ta, ts) = (self.value(a), self.value(s));
        let (m, n) = dims2("row_scale", ta)?;
        if ts.len() != m {
            return Err(shape_err("row_scale", ta, ts));
        }
        let mut out = ta.values().to_vec();
        for (row, f) in out.chunks_exact_mut(n).zip(ts.values()) {
            row.iter_mut().for_each(|x| *x *= f);
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.binary(t, a, s, Op::RowScale(a, s)))
    }

    /// Sums consecutive blocks of `group` rows: `(B·group)×D → B×D`.
    pub fn group_sum(&mut self, a: Var, group: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let (m, n) = dims2("group_sum", ta)?;
        if group == 0 || m % group != 0 {
            return Err(TensorError::Contract(format!(
                "group_sum: {m} rows not divisible into groups of {group}"
            )));
        }
        let b = m / group;
        let mut out = vec![0.0; b * n];
        for (i, row) in ta.values().chunks_exact(n).enumerate() {
            let dst = &mut out[(i / group) * n..(i / group + 1) * n];
            dst.iter_mut().zip(row).for_each(|(d, x)| *d += x);
        }
        let t = Tensor::new(vec![b, n], out)?;
        Ok(self.unary(t, a, Op::GroupSum { src: a, group }))
    }

    /// Reverse sweep from a scalar `loss`. The tape is single-use: a second
    /// call is a contract error.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::Contract(
                "backward already ran on this tape; record a fresh forward pass".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| {
                if n.needs_grad {
                    vec![0.0; n.tensor.len()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0][0] = 1.0;
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let g = &upper[0];
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            self.backward_node(i, g, lower);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.needs_grad {
                node.tensor.set_grad(g);
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], lower: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        let out = node.tensor.values();
        let ng = |v: &Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2().unwrap();
                let n = tb.dims2().unwrap().1;
                if ng(a) {
                    gemm(m, n, k, g, false, tb.values(), true, &mut lower[a.0], true);
                }
                if ng(b) {
                    gemm(k, m, n, ta.values(), true, g, false, &mut lower[b.0], true);
                }
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    if ng(p) {
                        lower[p.0].iter_mut().zip(g).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::Sub(a, b) => {
                if ng(a) {
                    lower[a.0].iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if ng(b) {
                    lower[b.0].iter_mut().zip(g).for_each(|(d, x)| *d -= x);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).values(), self.value(*b).values());
                if ng(a) {
                    for ((d, x), y) in lower[a.0].iter_mut().zip(g).zip(vb) {
                        *d += x * y;
                    }
                }
                if ng(b) {
                    for ((d, x), y) in lower[b.0].iter_mut().zip(g).zip(va) {
                        *d += x * y;
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if ng(a) {
                    lower[a.0].iter_mut().zip(g).for_each(|(d, x)| *d += x);
                }
                if ng(bias) {
                    let n = self.value(*bias).len();
                    let db = &mut lower[bias.0];
                    for row in g.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::Scale(a, c) => {
                lower[a.0].iter_mut().zip(g).for_each(|(d, x)| *d += x * c);
            }
            Op::Sigmoid(a) => {
                for ((d, x), y) in lower[a.0].iter_mut().zip(g).zip(out) {
                    *d += x * y * (1.0 - y);
                }
            }
            Op::Tanh(a) => {
                for ((d, x), y) in lower[a.0].iter_mut().zip(g).zip(out) {
                    *d += x * (1.0 - y * y);
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a).values();
                for ((d, x), y) in lower[a.0].iter_mut().zip(g).zip(va) {
                    if *y > 0.0 {
                        *d += x;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (rows, cols) = node.tensor.dims2().unwrap();
                if *axis == 0 {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(*p).len();
                        if ng(p) {
                            let src = &g[offset..offset + len];
                            lower[p.0].iter_mut().zip(src).for_each(|(d, x)| *d += x);
                        }
                        offset += len;
                    }
                } else {
                    let mut col = 0;
                    for p in parts {
                        let w = self.value(*p).dims2().unwrap().1;
                        if ng(p) {
                            let dst = &mut lower[p.0];
                            for r in 0..rows {
                                let src = &g[r * cols + col..r * cols + col + w];
                                dst[r * w..(r + 1) * w]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(d, x)| *d += x);
                            }
                        }
                        col += w;
                    }
                }
            }
            Op::Slice { src, axis, start } => {
                let (_, c) = self.value(*src).dims2().unwrap();
                let dst = &mut lower[src.0];
                if *axis == 0 {
                    let off = start * c;
                    dst[off..off + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, x)| *d += x);
                } else {
                    let w = node.tensor.dims2().unwrap().1;
                    for (r, row) in g.chunks_exact(w).enumerate() {
                        let off = r * c + start;
                        dst[off..off + w]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(d, x)| *d += x);
                    }
                }
            }
            Op::Sum(a) => {
                lower[a.0].iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                lower[a.0].iter_mut().for_each(|d| *d += g[0] / n);
            }
            Op::Softmax { src, axis } => {
                let (outer, len, inner) = axis_split(node.tensor.shape(), *axis);
                let dst = &mut lower[src.0];
                for o in 0..outer {
                    for inn in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + inn;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * out[idx(j)]).sum();
                        for j in 0..len {
                            dst[idx(j)] += out[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = self.value(*logits).dims2().unwrap().1;
                let scale = g[0] / targets.len() as f64;
                let dst = &mut lower[logits.0];
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..k {
                        let indicator = if j == t { 1.0 } else { 0.0 };
                        dst[i * k + j] += scale * (probs[i * k + j] - indicator);
                    }
                }
            }
            Op::GatherRows { src, rows } => {
                let e = self.value(*src).dims2().unwrap().1;
                let dst = &mut lower[src.0];
                for (i, &r) in rows.iter().enumerate() {
                    let row = &g[i * e..(i + 1) * e];
                    dst[r * e..(r + 1) * e]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(d, x)| *d += x);
                }
            }
            Op::Reshape(a) => {
                lower[a.0].iter_mut().zip(g).for_each(|(d, x)| *d += x);
            }
            Op::RowScale(a, s) => {
                let (ta, ts) = (self.value(*a), self.value(*s));
                let n = ta.dims2().unwrap().1;
                if ng(a) {
                    let dst = &mut lower[a.0];
                    for (i, f) in ts.values().iter().enumerate() {
                        for j in 0..n {
                            dst[i * n + j] += g[i * n + j] * f;
                        }
                    }
                }
                if ng(s) {
                    let dst = &mut lower[s.0];
                    for (i, d) in dst.iter_mut().enumerate() {
                        let row = &g[i * n..(i + 1) * n];
                        *d += row
                            .iter()
                            .zip(ta.row_slice(i))
                            .map(|(x, y)| x * y)
                            .sum::<f64>();
                    }
                }
            }
            Op::GroupSum { src, group } => {
                let n = node.tensor.dims2().unwrap().1;
                let dst = &mut lower[src.0];
                for (i, row) in dst.chunks_exact_mut(n).enumerate() {
                    let up = &g[(i / group) * n..(i / group + 1) * n];
                    row.iter_mut().zip(up).for_each(|(d, x)| *d += x);
                }
            }
        }
    }
}

/// Softmax of a flat row-major buffer along `axis` of `shape`.
pub fn softmax_values(values: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; values.len()];
    for o in 0..outer {
        for inn in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + inn;
            let max = (0..len)
                .map(|j| values[idx(j)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for j in 0..len {
                let e = (values[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    out
}
