//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every value in the graph is a 2-D array; sequences of tokens are flattened
//! to `(batch * seq, hidden)` and the fused attention op recovers the batch
//! structure from its metadata. Nodes are appended in evaluation order, so a
//! single reverse sweep over the tape is a valid topological traversal.

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};
use rand::Rng;

use super::params::{ParamId, ParamStore};
use crate::error::{DamError, Result};

/// Element type accepted by the graph. Models run in `f32`; gradient checks
/// run the same ops in `f64`.
pub trait Real:
    LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + 'static
{
    /// Hyperbolic tangent; `f32` trades a few ulps for speed.
    fn tanh_fast(self) -> Self {
        self.tanh()
    }
}

impl Real for f32 {
    #[inline]
    fn tanh_fast(self) -> Self {
        if self.abs() < 0.125 {
            // Taylor series; the exp form cancels badly near zero.
            let x2 = self * self;
            self * (1.0 - x2 * (1.0 / 3.0 - x2 * (2.0 / 15.0 - x2 * (17.0 / 315.0))))
        } else {
            1.0 - 2.0 / ((2.0 * self).exp() + 1.0)
        }
    }
}
impl Real for f64 {}

#[inline]
fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("literal representable")
}

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Cached state of a multi-head self-attention forward pass.
#[derive(Debug)]
struct AttentionCache<T> {
    batch: usize,
    seq: usize,
    heads: usize,
    lens: Vec<usize>,
    scale: T,
    // one (seq x len_b) probability matrix per (example, head)
    probs: Vec<Array2<T>>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<T>,
        inv_std: Array1<T>,
    },
    Dropout {
        x: Var,
        mask: Array2<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SelfAttention {
        q: Var,
        k: Var,
        v: Var,
        cache: AttentionCache<T>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    GradReverse {
        x: Var,
        gamma: T,
    },
    RowDot(Var, Var),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    MixRows {
        weights: Var,
        values: Vec<Var>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Array2<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single forward computation and its reverse sweep.
#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Array2<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> DamError {
    DamError::Shape(format!("{op}: {a:?} vs {b:?}"))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is accumulated for it.
    pub fn input(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is accumulated and readable after `backward`.
    pub fn leaf(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let out = va.dot(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Adds a `1 x n` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.nrows() != 1 || vr.ncols() != va.ncols() {
            return Err(shape_err("add_row", va.shape(), vr.shape()));
        }
        let out = va + vr;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// `x * w + b` for a weight stored as `(in, out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let h = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(h, b),
            None => Ok(h),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(shape_err("add", va.shape(), vb.shape()));
        }
        let out = va + vb;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Sum of several equally shaped nodes.
    pub fn sum(&mut self, vars: &[Var]) -> Result<Var> {
        let (first, rest) = vars
            .split_first()
            .ok_or_else(|| DamError::Shape("sum of zero terms".into()))?;
        let mut acc = *first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(shape_err("mul", va.shape(), vb.shape()));
        }
        let out = va * vb;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a) * c;
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.tanh_fast());
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c: T = lit(0.797_884_560_802_865_4);
        let k: T = lit(0.044715);
        let half: T = lit(0.5);
        let out = self
            .value(a)
            .mapv(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh_fast()));
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Layer normalization over the columns of each row.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let n = vx.ncols();
        for p in [gamma, beta] {
            let vp = self.value(p);
            if vp.dim() != (1, n) {
                return Err(shape_err("layer_norm", vx.shape(), vp.shape()));
            }
        }
        let nf = T::from_usize(n).unwrap();
        let mut xhat = vx.to_owned();
        let mut inv_std = Array1::zeros(vx.nrows());
        for (mut row, istd) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.iter().copied().sum::<T>() / nf;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * is);
            *istd = is;
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep: T = lit(1.0 / (1.0 - p));
        let (r, c) = self.value(x).dim();
        let threshold = (p * 4_294_967_296.0) as u64;
        let mask = Array2::from_shape_simple_fn((r, c), || {
            if u64::from(rng.next_u32()) < threshold {
                T::zero()
            } else {
                keep
            }
        });
        let out = self.value(x) * &mask;
        let rg = self.rg(x);
        self.push(out, Op::Dropout { x, mask }, rg)
    }

    /// Row lookup into an embedding table.
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        let vt = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vt.nrows()) {
            return Err(DamError::Input(format!(
                "index {bad} out of range for table with {} rows",
                vt.nrows()
            )));
        }
        let out = vt.select(Axis(0), &ids);
        let rg = self.rg(table);
        Ok(self.push(out, Op::Gather { table, ids }, rg))
    }

    /// Multi-head scaled dot-product self-attention over flattened sequences.
    ///
    /// `q`, `k` and `v` are `(batch * seq, hidden)`. Keys at positions
    /// `>= lens[b]` are masked out for example `b`; a zero length is treated
    /// as one so that every query row has a well-defined distribution.
    pub fn self_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        lens: &[usize],
    ) -> Result<Var> {
        let (rows, hidden) = self.value(q).dim();
        for x in [k, v] {
            if self.value(x).dim() != (rows, hidden) {
                return Err(shape_err(
                    "self_attention",
                    self.value(q).shape(),
                    self.value(x).shape(),
                ));
            }
        }
        if batch == 0 || rows % batch != 0 || lens.len() != batch {
            return Err(DamError::Shape(format!(
                "self_attention: {rows} rows for batch {batch} with {} lengths",
                lens.len()
            )));
        }
        if heads == 0 || hidden % heads != 0 {
            return Err(DamError::Shape(format!(
                "hidden {hidden} not divisible by {heads} heads"
            )));
        }
        let seq = rows / batch;
        let dh = hidden / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let lens: Vec<usize> = lens.iter().map(|&l| l.clamp(1, seq)).collect();
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Array2::<T>::zeros((rows, hidden));
        let mut probs = Vec::with_capacity(batch * heads);
        for (b, &len) in lens.iter().enumerate() {
            let r0 = b * seq;
            for h in 0..heads {
                let (c0, c1) = (h * dh, (h + 1) * dh);
                let qb = vq.slice(s![r0..r0 + seq, c0..c1]);
                let kb = vk.slice(s![r0..r0 + len, c0..c1]);
                let vb = vv.slice(s![r0..r0 + len, c0..c1]);
                let mut p = qb.dot(&kb.t());
                p.mapv_inplace(|x| x * scale);
                softmax_rows_inplace(&mut p);
                out.slice_mut(s![r0..r0 + seq, c0..c1]).assign(&p.dot(&vb));
                probs.push(p);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let cache = AttentionCache {
            batch,
            seq,
            heads,
            lens,
            scale,
            probs,
        };
        Ok(self.push(out, Op::SelfAttention { q, k, v, cache }, rg))
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let vx = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= vx.nrows()) {
            return Err(DamError::Shape(format!(
                "select_rows: row {bad} out of {}",
                vx.nrows()
            )));
        }
        let out = vx.select(Axis(0), &rows);
        let rg = self.rg(x);
        Ok(self.push(out, Op::SelectRows { x, rows }, rg))
    }

    /// Gradient reversal: identity forward, gradient times `-gamma` backward.
    pub fn grad_reverse(&mut self, x: Var, gamma: T) -> Result<Var> {
        if gamma < T::zero() || !gamma.is_finite() {
            return Err(DamError::Config(format!(
                "gradient reversal factor must be a finite non-negative number, got {gamma}"
            )));
        }
        let out = self.value(x).clone();
        let rg = self.rg(x);
        Ok(self.push(out, Op::GradReverse { x, gamma }, rg))
    }

    /// Per-row dot product, producing an `(n, 1)` column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(shape_err("row_dot", va.shape(), vb.shape()));
        }
        let out = (va * vb).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::RowDot(a, b), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(DamError::Shape("concat of zero parts".into()));
        }
        let views: Vec<ArrayView2<T>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| DamError::Shape(format!("concat_cols: {e}")))?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        softmax_rows_inplace(&mut out);
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// `sum_j weights[:, j] * values[j]`, row by row.
    pub fn mix_rows(&mut self, weights: Var, values: &[Var]) -> Result<Var> {
        let vw = self.value(weights);
        if values.is_empty() || vw.ncols() != values.len() {
            return Err(DamError::Shape(format!(
                "mix_rows: {} weight columns for {} values",
                vw.ncols(),
                values.len()
            )));
        }
        let dim = self.value(values[0]).dim();
        if vw.nrows() != dim.0 {
            return Err(shape_err("mix_rows", vw.shape(), self.value(values[0]).shape()));
        }
        let mut out = Array2::<T>::zeros(dim);
        for (j, &val) in values.iter().enumerate() {
            let vv = self.value(val);
            if vv.dim() != dim {
                return Err(shape_err("mix_rows", &[dim.0, dim.1], vv.shape()));
            }
            let wj = vw.column(j);
            Zip::from(out.rows_mut())
                .and(vv.rows())
                .and(&wj)
                .for_each(|mut o, v, &w| o.scaled_add(w, &v));
        }
        let rg = self.rg(weights) || values.iter().any(|&v| self.rg(v));
        Ok(self.push(
            out,
            Op::MixRows {
                weights,
                values: values.to_vec(),
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy over the rows of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let (n, c) = vl.dim();
        if n != labels.len() || n == 0 {
            return Err(DamError::Shape(format!(
                "cross_entropy: {n} rows for {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(DamError::Input(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = vl.clone();
        softmax_rows_inplace(&mut probs);
        let mut total = T::zero();
        for (row, &y) in vl.rows().into_iter().zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            total += lse - row[y];
        }
        let loss = total / T::from_usize(n).unwrap();
        let rg = self.rg(logits);
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a `1 x 1` node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).dim() != (1, 1) {
            return Err(shape_err("backward", self.value(loss).shape(), &[1, 1]));
        }
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn backward_node(&self, i: usize, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        let nodes = &self.nodes;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if rg(*a) {
                    accum(grads, *a, g.dot(&val(*b).t()));
                }
                if rg(*b) {
                    accum(grads, *b, val(*a).t().dot(g));
                }
            }
            Op::AddRow(a, r) => {
                if rg(*a) {
                    accum(grads, *a, g.clone());
                }
                if rg(*r) {
                    accum(grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    if rg(x) {
                        accum(grads, x, g.clone());
                    }
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    accum(grads, *a, g * val(*b));
                }
                if rg(*b) {
                    accum(grads, *b, g * val(*a));
                }
            }
            Op::Scale(a, c) => {
                if rg(*a) {
                    accum(grads, *a, g * *c);
                }
            }
            Op::Tanh(a) => {
                if rg(*a) {
                    let y = &nodes[i].value;
                    let mut d = g.clone();
                    Zip::from(&mut d).and(y).for_each(|d, &y| *d = *d * (T::one() - y * y));
                    accum(grads, *a, d);
                }
            }
            Op::Gelu(a) => {
                if rg(*a) {
                    let c: T = lit(0.797_884_560_802_865_4);
                    let k: T = lit(0.044715);
                    let half: T = lit(0.5);
                    let three: T = lit(3.0);
                    let mut d = g.clone();
                    Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                        let t = (c * (x + k * x * x * x)).tanh_fast();
                        let dx = half * (T::one() + t)
                            + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x);
                        *d = *d * dx;
                    });
                    accum(grads, *a, d);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if rg(*gamma) {
                    accum(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if rg(*beta) {
                    accum(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if rg(*x) {
                    let n = T::from_usize(xhat.ncols()).unwrap();
                    let dxhat = g * val(*gamma);
                    let mut dx = Array2::<T>::zeros(xhat.dim());
                    Zip::from(dx.rows_mut())
                        .and(dxhat.rows())
                        .and(xhat.rows())
                        .and(inv_std)
                        .for_each(|mut dxr, dh, xh, &is| {
                            let s1 = dh.iter().copied().sum::<T>();
                            let s2 = dh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>();
                            Zip::from(&mut dxr).and(&dh).and(&xh).for_each(|o, &d, &h| {
                                *o = is / n * (n * d - s1 - h * s2);
                            });
                        });
                    accum(grads, *x, dx);
                }
            }
            Op::Dropout { x, mask } => {
                if rg(*x) {
                    accum(grads, *x, g * mask);
                }
            }
            Op::Gather { table, ids } => {
                if rg(*table) {
                    let mut d = Array2::<T>::zeros(val(*table).dim());
                    for (row, &id) in g.rows().into_iter().zip(ids) {
                        let mut dst = d.row_mut(id);
                        dst += &row;
                    }
                    accum(grads, *table, d);
                }
            }
            Op::SelfAttention { q, k, v, cache } => {
                let (dq, dk, dv) = attention_backward(val(*q), val(*k), val(*v), g, cache);
                if rg(*q) {
                    accum(grads, *q, dq);
                }
                if rg(*k) {
                    accum(grads, *k, dk);
                }
                if rg(*v) {
                    accum(grads, *v, dv);
                }
            }
            Op::SelectRows { x, rows } => {
                if rg(*x) {
                    let mut d = Array2::<T>::zeros(val(*x).dim());
                    for (row, &r) in g.rows().into_iter().zip(rows) {
                        let mut dst = d.row_mut(r);
                        dst += &row;
                    }
                    accum(grads, *x, d);
                }
            }
            Op::GradReverse { x, gamma } => {
                if rg(*x) {
                    accum(grads, *x, g * (-*gamma));
                }
            }
            Op::RowDot(a, b) => {
                if rg(*a) {
                    accum(grads, *a, val(*b) * g);
                }
                if rg(*b) {
                    accum(grads, *b, val(*a) * g);
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let w = val(p).ncols();
                    if rg(p) {
                        accum(grads, p, g.slice(s![.., c0..c0 + w]).to_owned());
                    }
                    c0 += w;
                }
            }
            Op::SoftmaxRows(x) => {
                if rg(*x) {
                    let y = &nodes[i].value;
                    accum(grads, *x, softmax_backward(y, g));
                }
            }
            Op::MixRows { weights, values } => {
                let vw = val(*weights);
                if rg(*weights) {
                    let mut dw = Array2::<T>::zeros(vw.dim());
                    for (j, &vj) in values.iter().enumerate() {
                        let col = (g * val(vj)).sum_axis(Axis(1));
                        dw.column_mut(j).assign(&col);
                    }
                    accum(grads, *weights, dw);
                }
                for (j, &vj) in values.iter().enumerate() {
                    if rg(vj) {
                        let wj = vw.column(j).insert_axis(Axis(1));
                        accum(grads, vj, g * &wj);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if rg(*logits) {
                    let n = T::from_usize(labels.len()).unwrap();
                    let up = g[[0, 0]] / n;
                    let mut d = probs.clone();
                    for (mut row, &y) in d.rows_mut().into_iter().zip(labels) {
                        row[y] = row[y] - T::one();
                        row.mapv_inplace(|x| x * up);
                    }
                    accum(grads, *logits, d);
                }
            }
        }
    }
}

impl Graph<f32> {
    /// Brings a stored parameter onto the tape. Repeated requests for the same
    /// parameter return the same node; gradients are only tracked when the
    /// parameter's group is trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let trainable = store.is_trainable(id);
        let v = self.push(store.get(id).clone(), Op::Leaf, trainable);
        self.params.insert(id, v);
        v
    }

    /// Gradients of every trainable parameter that took part in the last
    /// backward pass, in a stable order.
    pub fn param_grads(&self) -> Vec<(ParamId, &Array2<f32>)> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn accum<T: Real>(grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn softmax_rows_inplace<T: Real>(x: &mut Array2<T>) {
    for mut row in x.rows_mut() {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.iter().copied().sum::<T>();
        row.mapv_inplace(|v| v / s);
    }
}

fn softmax_backward<T: Real>(y: &Array2<T>, g: &Array2<T>) -> Array2<T> {
    let mut d = Array2::<T>::zeros(y.dim());
    Zip::from(d.rows_mut())
        .and(y.rows())
        .and(g.rows())
        .for_each(|mut dr, yr, gr| {
            let dot = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum::<T>();
            Zip::from(&mut dr)
                .and(&yr)
                .and(&gr)
                .for_each(|o, &y, &g| *o = y * (g - dot));
        });
    d
}

fn attention_backward<T: Real>(
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    g: &Array2<T>,
    cache: &AttentionCache<T>,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let mut dq = Array2::<T>::zeros(q.dim());
    let mut dk = Array2::<T>::zeros(k.dim());
    let mut dv = Array2::<T>::zeros(v.dim());
    let dh = q.ncols() / cache.heads;
    let seq = cache.seq;
    for b in 0..cache.batch {
        let r0 = b * seq;
        let len = cache.lens[b];
        for h in 0..cache.heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let p = &cache.probs[b * cache.heads + h];
            let go = g.slice(s![r0..r0 + seq, c0..c1]);
            let qb = q.slice(s![r0..r0 + seq, c0..c1]);
            let kb = k.slice(s![r0..r0 + len, c0..c1]);
            let vb = v.slice(s![r0..r0 + len, c0..c1]);
            dv.slice_mut(s![r0..r0 + len, c0..c1]).assign(&p.t().dot(&go));
            let dp = go.dot(&vb.t());
            let mut ds = softmax_backward(p, &dp);
            ds.mapv_inplace(|x| x * cache.scale);
            dq.slice_mut(s![r0..r0 + seq, c0..c1]).assign(&ds.dot(&kb));
            dk.slice_mut(s![r0..r0 + len, c0..c1]).assign(&ds.t().dot(&qb));
        }
    }
    (dq, dk, dv)
}
