//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order. Because a node can
//! only reference nodes recorded before it, the recording order is already a
//! topological order and [`Graph::backward`] simply walks it in reverse,
//! visiting each node once.
//!
//! Leaves created with [`Graph::leaf`] keep their own gradient buffer; calling
//! `backward` twice accumulates into it, matching the usual `zero_grad`
//! contract of training loops.

pub mod kernels;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Softplus(Var),
    RmsNorm {
        x: Var,
        gamma: Var,
        inv_rms: Vec<T>,
    },
    Softmax(Var),
    KeepTopK(Var),
    Transpose(Var),
    Reshape(Var),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        rows: Vec<usize>,
    },
    Pick {
        x: Var,
        coords: Vec<(usize, usize)>,
    },
    ScaleRows(Var, Var),
    Sum(Var),
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Rope {
        x: Var,
        seq_len: usize,
        heads: usize,
        base: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq_len: usize,
        heads: usize,
        probs: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a = *a + d),
        None => *slot = Some(delta),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are tracked iff the tensor is trainable.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.is_trainable();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn values(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.values()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    // ---- operations -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.values(a), self.values(b), m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a), out)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a), out)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.values(a).iter().map(|&x| x * c).collect();
        let t = Tensor::new(self.shape(a), out).expect("same shape");
        self.push(t, Op::Scale(a, c), &[a])
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.values(a).iter().map(|&x| f(x)).collect();
        let t = Tensor::new(self.shape(a), out).expect("same shape");
        self.push(t, op, &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, kernels::silu, Op::Silu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, kernels::softplus, Op::Softplus(a))
    }

    /// Normalizes each row (last axis) to unit root-mean-square and scales by
    /// `gamma`, which holds either one shared coefficient or one per column.
    pub fn rmsnorm(&mut self, x: Var, gamma: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        let g_len = self.value(gamma).numel();
        if g_len != 1 && g_len != cols {
            return Err(Error::dim("rmsnorm", self.shape(x), self.shape(gamma)));
        }
        if eps < 0.0 {
            return Err(Error::Argument(format!("rmsnorm eps must be >= 0, got {eps}")));
        }
        let eps = T::of(eps);
        let n = T::of(cols as f64);
        let xs = self.values(x);
        let gs = self.values(gamma);
        let mut out = Vec::with_capacity(xs.len());
        let mut inv_rms = Vec::with_capacity(rows);
        for row in xs.chunks(cols) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / n;
            let denom = (ms + eps).sqrt();
            // all-zero row with eps = 0: the row is a fixed point
            let r = if denom > T::zero() {
                T::one() / denom
            } else {
                T::zero()
            };
            inv_rms.push(r);
            for (j, &v) in row.iter().enumerate() {
                let g = if g_len == 1 { gs[0] } else { gs[j] };
                out.push(g * v * r);
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.push(t, Op::RmsNorm { x, gamma, inv_rms }, &[x, gamma]))
    }

    /// Row-wise softmax; `-inf` entries become exactly zero.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = self.dims(x);
        let out = kernels::softmax_rows(self.values(x), cols).ok_or(Error::EmptySupport)?;
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.push(t, Op::Softmax(x), &[x]))
    }

    /// Keeps the `k` largest entries of every row and sets the rest to `-inf`.
    /// The selection itself is treated as a constant during backward.
    pub fn keep_topk(&mut self, x: Var, k: usize) -> Result<Var> {
        let (_, cols) = self.dims(x);
        if k == 0 || k > cols {
            return Err(Error::Argument(format!(
                "keep_topk needs 1 <= k <= {cols}, got k = {k}"
            )));
        }
        let xs = self.values(x);
        let mut out = vec![T::neg_infinity(); xs.len()];
        for (row, o) in xs.chunks(cols).zip(out.chunks_mut(cols)) {
            for i in kernels::topk_indices(row, k) {
                o[i] = row[i];
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.push(t, Op::KeepTopK(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let xs = self.values(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xs[i * c + j];
            }
        }
        let t = Tensor::new(&[c, r], out).expect("transpose");
        self.push(t, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if rows.is_empty() {
            return Err(Error::Argument("gather_rows needs at least one row".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Argument(format!("row {bad} out of range for {r} rows")));
        }
        let xs = self.values(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&xs[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(&[rows.len(), c], out)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Looks up one table row per id.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, _) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Data(format!("token id {bad} >= vocab size {vocab}")));
        }
        self.gather_rows(table, ids)
    }

    /// Places row `i` of `x` at row `rows[i]` of a zero `[out_rows × c]` tensor,
    /// adding when a target row repeats.
    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], out_rows: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if rows.len() != r {
            return Err(Error::dim("scatter_rows", self.shape(x), &[rows.len()]));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= out_rows) {
            return Err(Error::Argument(format!(
                "target row {bad} out of range for {out_rows} rows"
            )));
        }
        let xs = self.values(x);
        let mut out = vec![T::zero(); out_rows * c];
        for (src, &dst) in rows.iter().enumerate() {
            for j in 0..c {
                out[dst * c + j] = out[dst * c + j] + xs[src * c + j];
            }
        }
        let t = Tensor::new(&[out_rows, c], out)?;
        Ok(self.push(
            t,
            Op::ScatterRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Collects `x[r, c]` for each coordinate into a vector.
    pub fn pick(&mut self, x: Var, coords: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if coords.is_empty() {
            return Err(Error::Argument("pick needs at least one coordinate".into()));
        }
        if let Some(&bad) = coords.iter().find(|&&(i, j)| i >= r || j >= c) {
            return Err(Error::Argument(format!("coordinate {bad:?} out of range")));
        }
        let xs = self.values(x);
        let out = coords.iter().map(|&(i, j)| xs[i * c + j]).collect();
        let t = Tensor::vector(out);
        Ok(self.push(
            t,
            Op::Pick {
                x,
                coords: coords.to_vec(),
            },
            &[x],
        ))
    }

    /// Multiplies row `i` of `x` by `w[i]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.value(w).numel() != r {
            return Err(Error::dim("scale_rows", self.shape(x), self.shape(w)));
        }
        let xs = self.values(x);
        let ws = self.values(w);
        let out = xs
            .chunks(c)
            .zip(ws)
            .flat_map(|(row, &wi)| row.iter().map(move |&v| v * wi))
            .collect();
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.push(t, Op::ScaleRows(x, w), &[x, w]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values(x).iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Column means of a 2-D tensor: `[m×n] -> [n]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let mut out = vec![T::zero(); c];
        for row in self.values(x).chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        let inv = T::one() / T::of(r as f64);
        out.iter_mut().for_each(|v| *v = *v * inv);
        self.push(Tensor::vector(out), Op::MeanRows(x), &[x])
    }

    /// Mean next-token cross-entropy of `logits[m×V]` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, v) = self.dims(logits);
        if targets.len() != m {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Data(format!("target {bad} >= vocab size {v}")));
        }
        let probs = kernels::softmax_rows(self.values(logits), v).ok_or(Error::EmptySupport)?;
        let total = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -probs[i * v + t].ln())
            .sum::<T>();
        let loss = total / T::of(m as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Per-row losses of a node created by [`Graph::cross_entropy`].
    pub fn token_losses(&self, ce: Var) -> Option<Vec<T>> {
        match &self.nodes[ce.0].op {
            Op::CrossEntropy {
                logits,
                targets,
                probs: _,
            } => {
                let (_, v) = self.dims(*logits);
                let row_losses = self
                    .values(*logits)
                    .chunks(v)
                    .zip(targets)
                    .map(|(row, &t)| {
                        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                        let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
                        lse - row[t]
                    })
                    .collect();
                Some(row_losses)
            }
            _ => None,
        }
    }

    /// Rotary position embedding over `x[rows × d]`, where rows are
    /// `seq_len`-long sequences stacked back to back and `d` splits into
    /// `heads` equal heads. Each head rotates the pair `(j, j + dh/2)`.
    pub fn rope(&mut self, x: Var, seq_len: usize, heads: usize, base: f64) -> Result<Var> {
        let (rows, d) = self.dims(x);
        let dh = check_heads(d, heads)?;
        if dh % 2 != 0 || seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::Argument(format!(
                "rope needs even head size and rows divisible by seq_len (d={d}, heads={heads}, rows={rows}, seq_len={seq_len})"
            )));
        }
        let out = rope_apply(self.values(x), rows, d, seq_len, heads, base, false);
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            t,
            Op::Rope {
                x,
                seq_len,
                heads,
                base,
            },
            &[x],
        ))
    }

    /// Causal multi-head self-attention on packed `[batch·seq × d]` inputs.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq_len: usize,
        heads: usize,
    ) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (rows, d) = self.dims(q);
        let dh = check_heads(d, heads)?;
        if rows != batch * seq_len {
            return Err(Error::dim("attention", self.shape(q), &[batch, seq_len]));
        }
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qs, ks, vs) = (self.values(q), self.values(k), self.values(v));
        let mut out = vec![T::zero(); rows * d];
        let mut probs = vec![T::zero(); batch * heads * seq_len * seq_len];
        let mut scores = vec![T::zero(); seq_len];
        for b in 0..batch {
            for h in 0..heads {
                let p_base = (b * heads + h) * seq_len * seq_len;
                for i in 0..seq_len {
                    let qi = &qs[(b * seq_len + i) * d + h * dh..][..dh];
                    let mut max = T::neg_infinity();
                    for j in 0..=i {
                        let kj = &ks[(b * seq_len + j) * d + h * dh..][..dh];
                        let s = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<T>() * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut total = T::zero();
                    for s in scores.iter_mut().take(i + 1) {
                        *s = (*s - max).exp();
                        total = total + *s;
                    }
                    let prow = &mut probs[p_base + i * seq_len..][..seq_len];
                    let oi = &mut out[(b * seq_len + i) * d + h * dh..][..dh];
                    for j in 0..=i {
                        let p = scores[j] / total;
                        prow[j] = p;
                        let vj = &vs[(b * seq_len + j) * d + h * dh..][..dh];
                        for (o, &vv) in oi.iter_mut().zip(vj) {
                            *o = *o + p * vv;
                        }
                    }
                }
            }
        }
        let t = Tensor::new(&[rows, d], out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq_len,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            for (parent, delta) in self.local_grads(i, &g) {
                if self.nodes[parent.0].needs_grad {
                    add_into(&mut adj[parent.0], delta);
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let y = node.value.values();
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                if self.wants(*a) {
                    out.push((*a, kernels::matmul_nt(g, self.values(*b), m, n, k)));
                }
                if self.wants(*b) {
                    out.push((*b, kernels::matmul_tn(self.values(*a), g, m, k, n)));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.values(*a), self.values(*b));
                out.push((*a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect()));
                out.push((*b, g.iter().zip(av).map(|(&g, &a)| g * a).collect()));
            }
            Op::Scale(a, c) => out.push((*a, g.iter().map(|&g| g * *c).collect())),
            Op::Silu(a) => {
                let d = self
                    .values(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| {
                        let s = kernels::sigmoid(x);
                        g * s * (T::one() + x * (T::one() - s))
                    })
                    .collect();
                out.push((*a, d));
            }
            Op::Softplus(a) => {
                let d = self
                    .values(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| g * kernels::sigmoid(x))
                    .collect();
                out.push((*a, d));
            }
            Op::RmsNorm { x, gamma, inv_rms } => {
                let (_, cols) = self.dims(*x);
                let xs = self.values(*x);
                let gs = self.values(*gamma);
                let shared = gs.len() == 1;
                let n = T::of(cols as f64);
                let mut dx = vec![T::zero(); xs.len()];
                let mut dg = vec![T::zero(); gs.len()];
                for (r, &ir) in inv_rms.iter().enumerate() {
                    let xr = &xs[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mut dot = T::zero();
                    for j in 0..cols {
                        let u = xr[j] * ir;
                        let gamma_j = if shared { gs[0] } else { gs[j] };
                        dot = dot + gr[j] * gamma_j * u;
                        let slot = if shared { 0 } else { j };
                        dg[slot] = dg[slot] + gr[j] * u;
                    }
                    let mean = dot / n;
                    for j in 0..cols {
                        let u = xr[j] * ir;
                        let gamma_j = if shared { gs[0] } else { gs[j] };
                        dx[r * cols + j] = ir * (gr[j] * gamma_j - u * mean);
                    }
                }
                out.push((*x, dx));
                out.push((*gamma, dg));
            }
            Op::Softmax(a) => {
                let (_, cols) = self.dims(*a);
                let mut d = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(d.chunks_mut(cols)) {
                    let dot = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum::<T>();
                    for ((o, &yj), &gj) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yj * (gj - dot);
                    }
                }
                out.push((*a, d));
            }
            Op::KeepTopK(a) => {
                let d = y
                    .iter()
                    .zip(g)
                    .map(|(&y, &g)| if y == T::neg_infinity() { T::zero() } else { g })
                    .collect();
                out.push((*a, d));
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a);
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g[j * r + i];
                    }
                }
                out.push((*a, d));
            }
            Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::GatherRows { x, rows } => {
                let (r, c) = self.dims(*x);
                let mut d = vec![T::zero(); r * c];
                for (src, &dst) in rows.iter().enumerate() {
                    for j in 0..c {
                        d[dst * c + j] = d[dst * c + j] + g[src * c + j];
                    }
                }
                out.push((*x, d));
            }
            Op::ScatterRows { x, rows } => {
                let (_, c) = self.dims(*x);
                let mut d = Vec::with_capacity(rows.len() * c);
                for &r in rows {
                    d.extend_from_slice(&g[r * c..(r + 1) * c]);
                }
                out.push((*x, d));
            }
            Op::Pick { x, coords } => {
                let (r, c) = self.dims(*x);
                let mut d = vec![T::zero(); r * c];
                for (&(i, j), &gv) in coords.iter().zip(g) {
                    d[i * c + j] = d[i * c + j] + gv;
                }
                out.push((*x, d));
            }
            Op::ScaleRows(x, w) => {
                let (_, c) = self.dims(*x);
                let xs = self.values(*x);
                let ws = self.values(*w);
                let mut dx = vec![T::zero(); xs.len()];
                let mut dw = vec![T::zero(); ws.len()];
                for (r, &wr) in ws.iter().enumerate() {
                    let mut acc = T::zero();
                    for j in 0..c {
                        let idx = r * c + j;
                        dx[idx] = g[idx] * wr;
                        acc = acc + g[idx] * xs[idx];
                    }
                    dw[r] = acc;
                }
                out.push((*x, dx));
                out.push((*w, dw));
            }
            Op::Sum(a) => out.push((*a, vec![g[0]; self.value(*a).numel()])),
            Op::MeanRows(a) => {
                let (r, c) = self.dims(*a);
                let inv = T::one() / T::of(r as f64);
                let mut d = Vec::with_capacity(r * c);
                for _ in 0..r {
                    d.extend(g.iter().map(|&gv| gv * inv));
                }
                out.push((*a, d));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (m, v) = self.dims(*logits);
                let scale = g[0] / T::of(m as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * v + t] = d[r * v + t] - scale;
                }
                out.push((*logits, d));
            }
            Op::Rope {
                x,
                seq_len,
                heads,
                base,
            } => {
                let (rows, d) = self.dims(*x);
                out.push((*x, rope_apply(g, rows, d, *seq_len, *heads, *base, true)));
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq_len,
                heads,
                probs,
            } => {
                let (dq, dk, dv) = attention_backward(
                    self.values(*q),
                    self.values(*k),
                    self.values(*v),
                    probs,
                    g,
                    *batch,
                    *seq_len,
                    *heads,
                    self.dims(*q).1,
                );
                out.push((*q, dq));
                out.push((*k, dk));
                out.push((*v, dv));
            }
        }
        out
    }
}

fn check_heads(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::Argument(format!(
            "model width {d} is not divisible by {heads} heads"
        )));
    }
    Ok(d / heads)
}

/// Rotates each head's `(j, j + dh/2)` pairs by `pos · base^(-2j/dh)`;
/// `inverse` rotates by the negative angle (the transpose of the rotation).
fn rope_apply<T: Real>(
    x: &[T],
    rows: usize,
    d: usize,
    seq_len: usize,
    heads: usize,
    base: f64,
    inverse: bool,
) -> Vec<T> {
    let dh = d / heads;
    let half = dh / 2;
    let mut out = x.to_vec();
    for r in 0..rows {
        let pos = (r % seq_len) as f64;
        for j in 0..half {
            let theta = pos * base.powf(-2.0 * j as f64 / dh as f64);
            let (s, c) = theta.sin_cos();
            let (s, c) = (T::of(if inverse { -s } else { s }), T::of(c));
            for h in 0..heads {
                let i1 = r * d + h * dh + j;
                let i2 = i1 + half;
                let (a, b) = (x[i1], x[i2]);
                out[i1] = a * c - b * s;
                out[i2] = a * s + b * c;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    g: &[T],
    batch: usize,
    seq_len: usize,
    heads: usize,
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); seq_len];
    for b in 0..batch {
        for h in 0..heads {
            let p_base = (b * heads + h) * seq_len * seq_len;
            let off = |t: usize| (b * seq_len + t) * d + h * dh;
            for i in 0..seq_len {
                let prow = &probs[p_base + i * seq_len..][..seq_len];
                let gi = &g[off(i)..][..dh];
                let mut dot = T::zero();
                for j in 0..=i {
                    let vj = &v[off(j)..][..dh];
                    dp[j] = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum::<T>();
                    dot = dot + prow[j] * dp[j];
                    let dvj = &mut dv[off(j)..][..dh];
                    for (o, &gv) in dvj.iter_mut().zip(gi) {
                        *o = *o + prow[j] * gv;
                    }
                }
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for t in 0..dh {
                        dq[off(i) + t] = dq[off(i) + t] + ds * k[off(j) + t];
                        dk[off(j) + t] = dk[off(j) + t] + ds * q[off(i) + t];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
