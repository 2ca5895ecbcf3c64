//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every kernel appends a node holding its output value and whatever the
//! backward pass needs; [`Graph::backward`] walks the tape in reverse. All
//! kernels treat a tensor as a `[rows, cols]` matrix whose `cols` is the last
//! axis.

use std::sync::Arc;

use super::tensor::gemm_strided;
use super::{NumericsError, Scalar, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-row rotation angles for rotary position encoding.
///
/// Row `r` of the operand uses table row `r % rows`; pair `i` of every head
/// (elements `2i`, `2i+1`) is rotated by the angle whose cosine and sine are
/// stored at `[r, i]`.
#[derive(Clone, Debug)]
pub struct Rotary<S> {
    pub rows: usize,
    pub pairs: usize,
    pub cos: Vec<S>,
    pub sin: Vec<S>,
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, S),
    Gelu(Var),
    Silu(Var),
    LayerNorm { x: Var, rstd: Vec<S> },
    Softmax(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, batch: usize, scale: S, probs: Vec<S> },
    Rope { x: Var, heads: usize, table: Arc<Rotary<S>> },
    GatherRows { src: Var, idx: Arc<Vec<usize>> },
    ConcatRows(Vec<Var>),
    SliceRows { src: Var, start: usize },
    SliceCols { src: Var, start: usize },
    Mse { pred: Var, target: Var, weights: Option<Arc<Vec<S>>>, denom: S },
    Sum(Var),
    Mean(Var),
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Reverse-mode tape.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::Shape { op, detail }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op: &'static str, value: Tensor<S>, kind: Op<S>, inputs: &[Var]) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op: kind, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if self.value(a).len() != self.value(b).len() || sa != sb {
            return Err(shape_err(op, format!("lhs {:?} vs rhs {:?}", sa, sb)));
        }
        Ok(())
    }

    /// `[m,k] @ [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        if tb.shape().len() != 2 || tb.shape()[0] != k {
            return Err(shape_err("matmul", format!("lhs {:?} vs rhs {:?}", ta.shape(), tb.shape())));
        }
        let n = tb.shape()[1];
        let mut out = vec![S::zero(); m * n];
        gemm_strided(m, k, n, ta.data(), (k, 1), tb.data(), (n, 1), S::zero(), &mut out, (n, 1));
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push("matmul", Tensor::new(&shape, out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (ta, tr) = (self.value(a), self.value(row));
        let c = ta.cols();
        if tr.len() != c {
            return Err(shape_err("add_row", format!("lhs {:?} vs row {:?}", ta.shape(), tr.shape())));
        }
        let mut out = ta.clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (x, y) in chunk.iter_mut().zip(tr.data()) {
                *x += *y;
            }
        }
        self.push("add_row", out, Op::AddRow(a, row), &[a, row])
    }

    /// `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| x * c);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (c, k) = (S::of(GELU_C), S::of(GELU_A));
        let half = S::of(0.5);
        let out = self.value(a).map(|x| half * x * (S::one() + (c * (x + k * x * x * x)).tanh()));
        self.push("gelu", out, Op::Gelu(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).map(|x| x / (S::one() + (-x).exp()));
        self.push("silu", out, Op::Silu(a), &[a])
    }

    /// Normalizes each row to zero mean and unit variance (no affine terms).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        let c = ta.cols();
        let eps = S::of(LAYER_NORM_EPS);
        let inv_c = S::one() / S::of(c as f64);
        let mut out = ta.clone();
        let mut rstd = Vec::with_capacity(ta.rows());
        for row in out.data_mut().chunks_mut(c) {
            let mean = row.iter().copied().sum::<S>() * inv_c;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() * inv_c;
            let r = S::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            rstd.push(r);
        }
        self.push("layer_norm", out, Op::LayerNorm { x: a, rstd }, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = ta.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row)?;
        }
        self.push("softmax", out, Op::Softmax(a), &[a])
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[batch*lq, d]`, `k` and `v` are `[batch*lk, d]` with
    /// `d = heads * head_dim`; samples never attend across the batch. `mask`
    /// is an additive `[lq, lk]` bias shared by all samples and heads
    /// (use `-inf` to forbid a position).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: usize,
        mask: Option<&Tensor<S>>,
    ) -> Result<Var, NumericsError> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if tk.cols() != d || tv.cols() != d || tk.rows() != tv.rows() {
            return Err(shape_err(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", tq.shape(), tk.shape(), tv.shape()),
            ));
        }
        if heads == 0 || d % heads != 0 || batch == 0 || tq.rows() % batch != 0 || tk.rows() % batch != 0 {
            return Err(shape_err(
                "attention",
                format!("width {} not divisible into {} heads / rows not divisible by batch {}", d, heads, batch),
            ));
        }
        let (lq, lk, dh) = (tq.rows() / batch, tk.rows() / batch, d / heads);
        if let Some(m) = mask {
            if m.len() != lq * lk {
                return Err(shape_err("attention", format!("mask {:?} vs [{}, {}]", m.shape(), lq, lk)));
            }
        }
        let scale = S::one() / S::of(dh as f64).sqrt();
        let mut probs = vec![S::zero(); batch * heads * lq * lk];
        let mut out = vec![S::zero(); batch * lq * d];
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * lq * lk..][..lq * lk];
                let qo = b * lq * d + h * dh;
                let ko = b * lk * d + h * dh;
                gemm_strided(lq, dh, lk, &tq.data()[qo..], (d, 1), &tk.data()[ko..], (1, d), S::zero(), p, (lk, 1));
                for (i, row) in p.chunks_mut(lk).enumerate() {
                    for (j, x) in row.iter_mut().enumerate() {
                        *x *= scale;
                        if let Some(m) = mask {
                            *x += m.data()[i * lk + j];
                        }
                    }
                    softmax_in_place(row)?;
                }
                gemm_strided(lq, lk, dh, p, (lk, 1), &tv.data()[ko..], (d, 1), S::zero(), &mut out[qo..], (d, 1));
            }
        }
        let mut shape = tq.shape().to_vec();
        *shape.last_mut().unwrap() = d;
        let value = Tensor::new(&shape, out)?;
        self.push("attention", value, Op::Attention { q, k, v, heads, batch, scale, probs }, &[q, k, v])
    }

    /// Rotates consecutive element pairs of every head by per-row angles.
    pub fn rope(&mut self, x: Var, heads: usize, table: &Arc<Rotary<S>>) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let d = tx.cols();
        if heads == 0 || !d.is_multiple_of(heads) || (d / heads) < 2 * table.pairs || table.rows == 0 {
            return Err(shape_err(
                "rope",
                format!("width {} / {} heads cannot hold {} rotary pairs", d, heads, table.pairs),
            ));
        }
        let mut out = tx.clone();
        rotate(out.data_mut(), d, heads, table, false);
        self.push("rope", out, Op::Rope { x, heads, table: Arc::clone(table) }, &[x])
    }

    /// Row lookup: output row `i` is `src[idx[i]]` (embedding lookup / permutation).
    pub fn gather_rows(&mut self, src: Var, idx: Arc<Vec<usize>>) -> Result<Var, NumericsError> {
        let ts = self.value(src);
        let (rows, c) = (ts.rows(), ts.cols());
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= rows {
                return Err(NumericsError::Index { op: "gather_rows", index: i, len: rows });
            }
            out.extend_from_slice(ts.row(i));
        }
        let value = Tensor::new(&[idx.len(), c], out)?;
        self.push("gather_rows", value, Op::GatherRows { src, idx }, &[src])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let c = parts.first().map(|&p| self.value(p).cols()).unwrap_or(0);
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(shape_err("concat_rows", format!("part {:?} vs width {}", t.shape(), c)));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let value = Tensor::new(&[rows, c], out)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let t = self.value(src);
        let c = t.cols();
        if start + len > t.rows() {
            return Err(shape_err("slice_rows", format!("rows {}..{} of {:?}", start, start + len, t.shape())));
        }
        let value = Tensor::new(&[len, c], t.data()[start * c..(start + len) * c].to_vec())?;
        self.push("slice_rows", value, Op::SliceRows { src, start }, &[src])
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let t = self.value(src);
        let c = t.cols();
        if start + len > c {
            return Err(shape_err("slice_cols", format!("cols {}..{} of {:?}", start, start + len, t.shape())));
        }
        let mut out = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let value = Tensor::new(&[t.rows(), len], out)?;
        self.push("slice_cols", value, Op::SliceCols { src, start }, &[src])
    }

    /// Mean squared error `sum(w * (pred - target)^2) / sum(w)`.
    ///
    /// `weights` (same length as `pred`) selects supervised elements; when
    /// every weight is zero the loss is zero.
    pub fn mse(&mut self, pred: Var, target: Var, weights: Option<Arc<Vec<S>>>) -> Result<Var, NumericsError> {
        self.same_shape("mse", pred, target)?;
        let (tp, tt) = (self.value(pred), self.value(target));
        if let Some(w) = &weights {
            if w.len() != tp.len() {
                return Err(shape_err("mse", format!("weights {} vs pred {:?}", w.len(), tp.shape())));
            }
        }
        let (mut acc, mut denom) = (S::zero(), S::zero());
        for (i, (&p, &t)) in tp.data().iter().zip(tt.data()).enumerate() {
            let w = weights.as_ref().map_or(S::one(), |w| w[i]);
            acc += w * (p - t) * (p - t);
            denom += w;
        }
        let loss = if denom > S::zero() { acc / denom } else { S::zero() };
        let denom = if denom > S::zero() { denom } else { S::one() };
        self.push("mse", Tensor::scalar(loss), Op::Mse { pred, target, weights, denom }, &[pred, target])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.value(a);
        let s = t.sum() / S::of(t.len().max(1) as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>, NumericsError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(shape_err("backward", format!("loss must hold one value, got {:?}", lt.shape())));
        }
        if !lt.is_finite() {
            return Err(NumericsError::NonFinite { op: "backward" });
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(lt.shape(), vec![S::one()])?);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[1]);
                if self.wants(*a) {
                    let da = acc_slot(grads, *a, ta.shape());
                    // da += g @ b^T
                    gemm_strided(m, n, k, g.data(), (n, 1), tb.data(), (1, n), S::one(), da.data_mut(), (k, 1));
                }
                if self.wants(*b) {
                    let db = acc_slot(grads, *b, tb.shape());
                    // db += a^T @ g
                    gemm_strided(k, m, n, ta.data(), (1, k), g.data(), (n, 1), S::one(), db.data_mut(), (n, 1));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        acc_slot(grads, v, g.shape()).add_assign(g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc_slot(grads, *a, g.shape()).add_assign(g);
                }
                if self.wants(*b) {
                    let d = acc_slot(grads, *b, g.shape());
                    for (x, &gi) in d.data_mut().iter_mut().zip(g.data()) {
                        *x -= gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = acc_slot(grads, *a, g.shape());
                    for ((x, &gi), &bi) in d.data_mut().iter_mut().zip(g.data()).zip(tb.data()) {
                        *x += gi * bi;
                    }
                }
                if self.wants(*b) {
                    let d = acc_slot(grads, *b, g.shape());
                    for ((x, &gi), &ai) in d.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                        *x += gi * ai;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    acc_slot(grads, *a, g.shape()).add_assign(g);
                }
                if self.wants(*row) {
                    let shape = self.value(*row).shape().to_vec();
                    let c = g.cols();
                    let d = acc_slot(grads, *row, &shape);
                    for chunk in g.data().chunks(c) {
                        for (x, &gi) in d.data_mut().iter_mut().zip(chunk) {
                            *x += gi;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    let d = acc_slot(grads, *a, g.shape());
                    for (x, &gi) in d.data_mut().iter_mut().zip(g.data()) {
                        *x += gi * *c;
                    }
                }
            }
            Op::Gelu(a) => {
                let (c, k) = (S::of(GELU_C), S::of(GELU_A));
                let (half, three) = (S::of(0.5), S::of(3.0));
                let ta = self.value(*a);
                let d = acc_slot(grads, *a, g.shape());
                for ((dx, &gi), &x) in d.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                    let t = (c * (x + k * x * x * x)).tanh();
                    let dt = c * (S::one() + three * k * x * x);
                    *dx += gi * (half * (S::one() + t) + half * x * (S::one() - t * t) * dt);
                }
            }
            Op::Silu(a) => {
                let ta = self.value(*a);
                let d = acc_slot(grads, *a, g.shape());
                for ((dx, &gi), &x) in d.data_mut().iter_mut().zip(g.data()).zip(ta.data()) {
                    let s = S::one() / (S::one() + (-x).exp());
                    *dx += gi * s * (S::one() + x * (S::one() - s));
                }
            }
            Op::LayerNorm { x, rstd } => {
                let c = g.cols();
                let inv_c = S::one() / S::of(c as f64);
                let d = acc_slot(grads, *x, g.shape());
                for (r, ((dx, gr), yr)) in
                    d.data_mut().chunks_mut(c).zip(g.data().chunks(c)).zip(y.data().chunks(c)).enumerate()
                {
                    let mg = gr.iter().copied().sum::<S>() * inv_c;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<S>() * inv_c;
                    for ((o, &gi), &yi) in dx.iter_mut().zip(gr).zip(yr) {
                        *o += rstd[r] * (gi - mg - yi * mgy);
                    }
                }
            }
            Op::Softmax(a) => {
                let c = g.cols();
                let d = acc_slot(grads, *a, g.shape());
                for ((dx, gr), yr) in d.data_mut().chunks_mut(c).zip(g.data().chunks(c)).zip(y.data().chunks(c)) {
                    let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<S>();
                    for ((o, &gi), &yi) in dx.iter_mut().zip(gr).zip(yr) {
                        *o += yi * (gi - dot);
                    }
                }
            }
            Op::Attention { q, k, v, heads, batch, scale, probs } => {
                self.attention_backward(*q, *k, *v, *heads, *batch, *scale, probs, g, grads);
            }
            Op::Rope { x, heads, table } => {
                let mut dx = g.clone();
                rotate(dx.data_mut(), g.cols(), *heads, table, true);
                acc_slot(grads, *x, g.shape()).add_assign(&dx);
            }
            Op::GatherRows { src, idx } => {
                let shape = self.value(*src).shape().to_vec();
                let c = g.cols();
                let d = acc_slot(grads, *src, &shape);
                for (o, &i) in idx.iter().enumerate() {
                    let dst = &mut d.data_mut()[i * c..(i + 1) * c];
                    for (x, &gi) in dst.iter_mut().zip(&g.data()[o * c..(o + 1) * c]) {
                        *x += gi;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let n = self.value(p).len();
                    if self.wants(p) {
                        let d = acc_slot(grads, p, &shape);
                        for (x, &gi) in d.data_mut().iter_mut().zip(&g.data()[off..off + n]) {
                            *x += gi;
                        }
                    }
                    off += n;
                }
            }
            Op::SliceRows { src, start } => {
                let shape = self.value(*src).shape().to_vec();
                let c = g.cols();
                let d = acc_slot(grads, *src, &shape);
                for (x, &gi) in d.data_mut()[start * c..].iter_mut().zip(g.data()) {
                    *x += gi;
                }
            }
            Op::SliceCols { src, start } => {
                let shape = self.value(*src).shape().to_vec();
                let (c, len) = (self.value(*src).cols(), g.cols());
                let d = acc_slot(grads, *src, &shape);
                for (r, gr) in g.data().chunks(len).enumerate() {
                    for (x, &gi) in d.data_mut()[r * c + start..r * c + start + len].iter_mut().zip(gr) {
                        *x += gi;
                    }
                }
            }
            Op::Mse { pred, target, weights, denom } => {
                let (tp, tt) = (self.value(*pred), self.value(*target));
                let g0 = g.data()[0];
                let two = S::of(2.0);
                let grad: Vec<S> = tp
                    .data()
                    .iter()
                    .zip(tt.data())
                    .enumerate()
                    .map(|(i, (&p, &t))| {
                        let w = weights.as_ref().map_or(S::one(), |w| w[i]);
                        g0 * two * w * (p - t) / *denom
                    })
                    .collect();
                if self.wants(*pred) {
                    let d = acc_slot(grads, *pred, tp.shape());
                    for (x, &gi) in d.data_mut().iter_mut().zip(&grad) {
                        *x += gi;
                    }
                }
                if self.wants(*target) {
                    let d = acc_slot(grads, *target, tt.shape());
                    for (x, &gi) in d.data_mut().iter_mut().zip(&grad) {
                        *x -= gi;
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let ta = self.value(*a);
                let mut g0 = g.data()[0];
                if matches!(node.op, Op::Mean(_)) {
                    g0 /= S::of(ta.len().max(1) as f64);
                }
                let d = acc_slot(grads, *a, ta.shape());
                for x in d.data_mut() {
                    *x += g0;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        batch: usize,
        scale: S,
        probs: &[S],
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let (lq, lk, dh) = (tq.rows() / batch, tk.rows() / batch, d / heads);
        let mut dq = Tensor::zeros(tq.shape());
        let mut dk = Tensor::zeros(tk.shape());
        let mut dv = Tensor::zeros(tv.shape());
        let mut ds = vec![S::zero(); lq * lk];
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * lq * lk..][..lq * lk];
                let qo = b * lq * d + h * dh;
                let ko = b * lk * d + h * dh;
                // dP = dO @ V^T
                gemm_strided(lq, dh, lk, &g.data()[qo..], (d, 1), &tv.data()[ko..], (1, d), S::zero(), &mut ds, (lk, 1));
                for (dsr, pr) in ds.chunks_mut(lk).zip(p.chunks(lk)) {
                    let dot = dsr.iter().zip(pr).map(|(&a, &b)| a * b).sum::<S>();
                    for (x, &pi) in dsr.iter_mut().zip(pr) {
                        *x = pi * (*x - dot) * scale;
                    }
                }
                gemm_strided(lq, lk, dh, &ds, (lk, 1), &tk.data()[ko..], (d, 1), S::one(), &mut dq.data_mut()[qo..], (d, 1));
                gemm_strided(lk, lq, dh, &ds, (1, lk), &tq.data()[qo..], (d, 1), S::one(), &mut dk.data_mut()[ko..], (d, 1));
                gemm_strided(lk, lq, dh, p, (1, lk), &g.data()[qo..], (d, 1), S::one(), &mut dv.data_mut()[ko..], (d, 1));
            }
        }
        for (var, t) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(var) {
                acc_slot(grads, var, t.shape()).add_assign(&t);
            }
        }
    }
}

fn acc_slot<'a, S: Scalar>(grads: &'a mut [Option<Tensor<S>>], v: Var, shape: &[usize]) -> &'a mut Tensor<S> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

fn softmax_in_place<S: Scalar>(row: &mut [S]) -> Result<(), NumericsError> {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    if !max.is_finite() {
        return Err(NumericsError::NonFinite { op: "softmax" });
    }
    let mut total = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
    Ok(())
}

fn rotate<S: Scalar>(data: &mut [S], d: usize, heads: usize, table: &Rotary<S>, inverse: bool) {
    let dh = d / heads;
    for (r, row) in data.chunks_mut(d).enumerate() {
        let t = r % table.rows;
        let (cs, sn) = (&table.cos[t * table.pairs..][..table.pairs], &table.sin[t * table.pairs..][..table.pairs]);
        for h in 0..heads {
            let head = &mut row[h * dh..(h + 1) * dh];
            for i in 0..table.pairs {
                let (c, s) = (cs[i], if inverse { -sn[i] } else { sn[i] });
                let (x0, x1) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = x0 * c - x1 * s;
                head[2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
}
