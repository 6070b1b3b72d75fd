use std::collections::HashMap;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::{ParamId, ParamStore, Real};
use crate::error::{McrError, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Pooling over the token axis of each sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Max,
    Mean,
}

impl std::str::FromStr for Aggregation {
    type Err = McrError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "max" => Ok(Aggregation::Max),
            "mean" => Ok(Aggregation::Mean),
            other => Err(McrError::config("agg", format!("unknown aggregation `{other}`"))),
        }
    }
}

struct AttentionSaved<T> {
    q: Var,
    k: Var,
    v: Var,
    seq_len: usize,
    heads: usize,
    /// Softmax weights per (sequence, head), each `seq_len x seq_len`.
    probs: Vec<Array2<T>>,
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu {
        x: Var,
        /// `tanh` of the inner polynomial, reused by the backward pass.
        th: Array2<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        xhat: Array2<T>,
        inv_std: Array1<T>,
        beta: Var,
    },
    Attention(Box<AttentionSaved<T>>),
    Gather {
        src: Var,
        idx: Vec<usize>,
    },
    Concat(Vec<Var>),
    MaxPool {
        x: Var,
        /// Source row of each output element, row-major `segments x cols`.
        argmax: Vec<usize>,
    },
    MeanPool {
        x: Var,
        seq_len: usize,
        valid: Option<Vec<bool>>,
        counts: Vec<usize>,
    },
    Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Loss {
        inputs: Vec<Var>,
        grads: Vec<Array2<T>>,
    },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    /// Whether any parameter is upstream of this node.
    needs_grad: bool,
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Gelu { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Attention(a) => vec![a.q, a.k, a.v],
            Op::Gather { src, .. } => vec![*src],
            Op::Concat(parts) => parts.clone(),
            Op::MaxPool { x, .. } | Op::MeanPool { x, .. } | Op::Normalize { x, .. } => vec![*x],
            Op::Loss { inputs, .. } => inputs.clone(),
            Op::WeightedSum(terms) => terms.iter().map(|t| t.0).collect(),
        }
    }
}

/// Tape of 2-D tensor operations supporting reverse-mode differentiation.
///
/// Sequences are batched row-wise: a batch of `B` sequences of length `T`
/// occupies `B * T` rows, and the attention/pool ops take `T` explicitly.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar root with respect to every node.
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Array2<T>> {
        self.grads[v.0].as_ref()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> Var {
        let needs_grad = match op {
            Op::Leaf => false,
            Op::Param => true,
            _ => op.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Bytes held by non-parameter tensors on the tape, including saved
    /// attention weights.
    pub fn activation_bytes(&self) -> usize {
        let elems: usize = self
            .nodes
            .iter()
            .map(|n| match &n.op {
                Op::Param => 0,
                Op::Attention(a) => n.value.len() + a.probs.iter().map(Array2::len).sum::<usize>(),
                Op::LayerNorm { xhat, .. } => n.value.len() + xhat.len(),
                Op::Gelu { th, .. } => n.value.len() + th.len(),
                _ => n.value.len(),
            })
            .sum();
        elems * T::BYTES
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "not a scalar node");
        val[[0, 0]]
    }

    /// Constant input; no gradient is propagated past it.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Parameter leaf. Repeated calls with the same id share one node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(
            av.ncols(),
            bv.nrows(),
            "matmul {:?} x {:?}",
            av.dim(),
            bv.dim()
        );
        let out = av.dot(bv);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.dim(), bv.dim(), "add shape");
        let out = av + bv;
        self.push(out, Op::Add(a, b))
    }

    /// `x + row`, broadcasting a `1 x d` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!(rv.nrows(), 1, "add_row expects a single row");
        assert_eq!(xv.ncols(), rv.ncols(), "add_row width");
        let out = xv + rv;
        self.push(out, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x) * c;
        self.push(out, Op::Scale(x, c))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let th = xv.mapv(gelu_tanh);
        let mut out = xv.clone();
        Zip::from(&mut out)
            .and(&th)
            .for_each(|o, &t| *o = T::of(0.5) * *o * (T::one() + t));
        self.push(out, Op::Gelu { x, th })
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.ncols();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        assert_eq!(gv.dim(), (1, d), "layer_norm gamma");
        assert_eq!(bv.dim(), (1, d), "layer_norm beta");
        let n = T::of(d as f64);
        let mut xhat = xv.clone();
        let mut inv_std = Array1::zeros(xv.nrows());
        for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|a| a - mean);
            let var = row.iter().map(|&a| a * a).sum::<T>() / n;
            let inv = T::one() / (var + T::of(eps)).sqrt();
            row.mapv_inplace(|a| a * inv);
            *is = inv;
        }
        let out = &xhat * gv + bv;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Multi-head scaled dot-product self-attention core over batched sequences.
    ///
    /// `q`, `k`, `v` are `(B * seq_len) x d`. Keys whose `key_valid` entry is
    /// false receive zero attention weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        key_valid: Option<&[bool]>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.dim();
        assert_eq!(kv.dim(), (rows, d), "attention k shape");
        assert_eq!(vv.dim(), (rows, d), "attention v shape");
        assert!(seq_len > 0 && rows % seq_len == 0, "attention rows");
        assert!(heads > 0 && d % heads == 0, "attention heads");
        if let Some(m) = key_valid {
            assert_eq!(m.len(), rows, "attention key mask length");
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let batch = rows / seq_len;
        let mut out = Array2::zeros((rows, d));
        let mut probs = Vec::with_capacity(batch * heads);
        for b in 0..batch {
            let r = b * seq_len..(b + 1) * seq_len;
            for h in 0..heads {
                let c = h * dh..(h + 1) * dh;
                let qs = qv.slice(s![r.clone(), c.clone()]);
                let ks = kv.slice(s![r.clone(), c.clone()]);
                let vs = vv.slice(s![r.clone(), c.clone()]);
                let mut sc = qs.dot(&ks.t()) * scale;
                if let Some(m) = key_valid {
                    for (j, &ok) in m[r.clone()].iter().enumerate() {
                        if !ok {
                            sc.column_mut(j).fill(T::neg_infinity());
                        }
                    }
                }
                softmax_rows_inplace(&mut sc);
                out.slice_mut(s![r.clone(), c]).assign(&sc.dot(&vs));
                probs.push(sc);
            }
        }
        self.push(
            out,
            Op::Attention(Box::new(AttentionSaved {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            })),
        )
    }

    /// Row gather: output row `i` is `src[idx[i]]`.
    pub fn gather(&mut self, src: Var, idx: Vec<usize>) -> Var {
        let sv = self.value(src);
        let n = sv.nrows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            panic!("gather index {bad} out of range for {n} rows");
        }
        let out = sv.select(Axis(0), &idx);
        self.push(out, Op::Gather { src, idx })
    }

    /// Vertical concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<ArrayView2<T>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat widths");
        self.push(out, Op::Concat(parts.to_vec()))
    }

    /// Pools each length-`seq_len` segment of rows into one row.
    ///
    /// Rows with `valid[row] == false` are skipped. Max ties resolve to the
    /// lowest row index.
    pub fn pool(
        &mut self,
        x: Var,
        seq_len: usize,
        mode: Aggregation,
        valid: Option<&[bool]>,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = xv.dim();
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(McrError::Shape(format!(
                "pool: {rows} rows not divisible into segments of {seq_len}"
            )));
        }
        if let Some(m) = valid {
            if m.len() != rows {
                return Err(McrError::Shape("pool mask length".into()));
            }
        }
        let segs = rows / seq_len;
        let is_valid = |r: usize| valid.is_none_or(|m| m[r]);
        let mut out = Array2::zeros((segs, d));
        match mode {
            Aggregation::Max => {
                let mut argmax = vec![0usize; segs * d];
                for b in 0..segs {
                    let mut any = false;
                    for r in b * seq_len..(b + 1) * seq_len {
                        if !is_valid(r) {
                            continue;
                        }
                        for c in 0..d {
                            let val = xv[[r, c]];
                            if !any || val > out[[b, c]] {
                                out[[b, c]] = val;
                                argmax[b * d + c] = r;
                            }
                        }
                        any = true;
                    }
                    if !any {
                        return Err(McrError::Empty("pooling segment has no valid tokens"));
                    }
                }
                Ok(self.push(out, Op::MaxPool { x, argmax }))
            }
            Aggregation::Mean => {
                let mut counts = vec![0usize; segs];
                for b in 0..segs {
                    for r in b * seq_len..(b + 1) * seq_len {
                        if is_valid(r) {
                            let mut o = out.row_mut(b);
                            o += &xv.row(r);
                            counts[b] += 1;
                        }
                    }
                    if counts[b] == 0 {
                        return Err(McrError::Empty("pooling segment has no valid tokens"));
                    }
                    let inv = T::one() / T::of(counts[b] as f64);
                    out.row_mut(b).mapv_inplace(|a| a * inv);
                }
                Ok(self.push(
                    out,
                    Op::MeanPool {
                        x,
                        seq_len,
                        valid: valid.map(|m| m.to_vec()),
                        counts,
                    },
                ))
            }
        }
    }

    /// Scales every row to unit L2 norm. Fails on rows with norm below 1e-12.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.nrows());
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let n = row.iter().map(|&a| a * a).sum::<T>().sqrt();
            if !(n.as_f64() >= 1e-12) {
                return Err(McrError::Numerical(format!(
                    "cannot normalize row {i}: norm {n}"
                )));
            }
            row.mapv_inplace(|a| a / n);
            norms.push(n);
        }
        Ok(self.push(out, Op::Normalize { x, norms }))
    }

    /// Scalar node whose value and input gradients were computed externally.
    pub fn custom_loss(&mut self, inputs: Vec<Var>, value: T, grads: Vec<Array2<T>>) -> Var {
        assert_eq!(inputs.len(), grads.len(), "one gradient per input");
        for (v, g) in inputs.iter().zip(&grads) {
            assert_eq!(self.value(*v).dim(), g.dim(), "loss gradient shape");
        }
        self.push(Array2::from_elem((1, 1), value), Op::Loss { inputs, grads })
    }

    /// `sum_i w_i * x_i` over same-shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let mut out = Array2::zeros(self.value(terms[0].0).dim());
        for &(v, w) in terms {
            out.scaled_add(w, self.value(v));
        }
        self.push(out, Op::WeightedSum(terms.to_vec()))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[i] = Some(g);
                continue;
            }
            let wants = |v: &Var| self.nodes[v.0].needs_grad;
            let mut accumulate = |v: Var, delta: Array2<T>| {
                if self.nodes[v.0].needs_grad {
                    accumulate_into(&mut grads, v, delta);
                }
            };
            match &node.op {
                Op::Leaf | Op::Param => unreachable!(),
                Op::MatMul(a, b) => {
                    if wants(a) {
                        accumulate(*a, g.dot(&self.value(*b).t()));
                    }
                    if wants(b) {
                        accumulate(*b, self.value(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    accumulate(*b, g.clone());
                    accumulate(*a, g);
                }
                Op::AddRow(x, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(*row, dr);
                    accumulate(*x, g);
                }
                Op::Scale(x, c) => accumulate(*x, &g * *c),
                Op::Gelu { x, th } => {
                    let mut dx = g;
                    Zip::from(&mut dx)
                        .and(self.value(*x))
                        .and(th)
                        .for_each(|d, &xv, &t| *d *= gelu_grad(xv, t));
                    accumulate(*x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    let dgamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * gv;
                    let n = T::of(xhat.ncols() as f64);
                    let mut dx = Array2::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_xh = dh.dot(&xh);
                        let inv = inv_std[r];
                        let mut out = dx.row_mut(r);
                        Zip::from(&mut out).and(&dh).and(&xh).for_each(|o, &a, &b| {
                            *o = inv * (n * a - sum_dh - b * sum_dh_xh) / n;
                        });
                    }
                    accumulate(*gamma, dgamma);
                    accumulate(*beta, dbeta);
                    accumulate(*x, dx);
                }
                Op::Attention(saved) => {
                    let (dq, dk, dv) = self.attention_backward(saved, &g);
                    accumulate(saved.q, dq);
                    accumulate(saved.k, dk);
                    accumulate(saved.v, dv);
                }
                Op::Gather { src, idx } => {
                    let mut ds = Array2::zeros(self.value(*src).dim());
                    for (o, &si) in idx.iter().enumerate() {
                        let mut row = ds.row_mut(si);
                        row += &g.row(o);
                    }
                    accumulate(*src, ds);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        accumulate(p, g.slice(s![start..start + n, ..]).to_owned());
                        start += n;
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let d = g.ncols();
                    let mut dx = Array2::zeros(self.value(*x).dim());
                    for ((b, c), &gv) in g.indexed_iter() {
                        dx[[argmax[b * d + c], c]] += gv;
                    }
                    accumulate(*x, dx);
                }
                Op::MeanPool {
                    x,
                    seq_len,
                    valid,
                    counts,
                } => {
                    let mut dx = Array2::zeros(self.value(*x).dim());
                    for (b, &cnt) in counts.iter().enumerate() {
                        let inv = T::one() / T::of(cnt as f64);
                        for r in b * seq_len..(b + 1) * seq_len {
                            if valid.as_ref().is_none_or(|m| m[r]) {
                                let mut row = dx.row_mut(r);
                                row.scaled_add(inv, &g.row(b));
                            }
                        }
                    }
                    accumulate(*x, dx);
                }
                Op::Normalize { x, norms } => {
                    let y = &node.value;
                    let mut dx = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let proj = yr.dot(&gr);
                        let inv = T::one() / norms[r];
                        Zip::from(dx.row_mut(r))
                            .and(&gr)
                            .and(&yr)
                            .for_each(|o, &gv, &yv| *o = (gv - yv * proj) * inv);
                    }
                    accumulate(*x, dx);
                }
                Op::Loss { inputs, grads: lg } => {
                    let up = g[[0, 0]];
                    for (&v, lgv) in inputs.iter().zip(lg) {
                        accumulate(v, lgv * up);
                    }
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        accumulate(v, &g * w);
                    }
                }
            }
        }
        Gradients { grads }
    }

    fn attention_backward(
        &self,
        saved: &AttentionSaved<T>,
        g: &Array2<T>,
    ) -> (Array2<T>, Array2<T>, Array2<T>) {
        let (qv, kv, vv) = (self.value(saved.q), self.value(saved.k), self.value(saved.v));
        let (rows, d) = qv.dim();
        let (t, heads) = (saved.seq_len, saved.heads);
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut dq = Array2::zeros((rows, d));
        let mut dk = Array2::zeros((rows, d));
        let mut dv = Array2::zeros((rows, d));
        for b in 0..rows / t {
            let r = b * t..(b + 1) * t;
            for h in 0..heads {
                let c = h * dh..(h + 1) * dh;
                let p = &saved.probs[b * heads + h];
                let go = g.slice(s![r.clone(), c.clone()]);
                let qs = qv.slice(s![r.clone(), c.clone()]);
                let ks = kv.slice(s![r.clone(), c.clone()]);
                let vs = vv.slice(s![r.clone(), c.clone()]);
                dv.slice_mut(s![r.clone(), c.clone()]).assign(&p.t().dot(&go));
                let dp = go.dot(&vs.t());
                let mut ds = &dp * p;
                for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot = row.sum();
                    Zip::from(&mut row).and(&prow).for_each(|x, &pv| *x -= pv * dot);
                }
                ds.mapv_inplace(|x| x * scale);
                dq.slice_mut(s![r.clone(), c.clone()]).assign(&ds.dot(&ks));
                dk.slice_mut(s![r.clone(), c]).assign(&ds.t().dot(&qs));
            }
        }
        (dq, dk, dv)
    }

    /// Gradients of parameter leaves reached by `grads`.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Array2<T>)> {
        let mut out: Vec<(ParamId, Array2<T>)> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads.wrt(v).map(|g| (id, g.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn accumulate_into<T: Real>(grads: &mut [Option<Array2<T>>], v: Var, delta: Array2<T>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(delta),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `tanh(sqrt(2/pi) * (x + a x^3))`, via `exp` which is several times cheaper
/// than `tanh` in libm.
fn gelu_tanh<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::one() - T::of(2.0) / ((u + u).exp() + T::one())
}

fn gelu_grad<T: Real>(x: T, th: T) -> T {
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    T::of(0.5) * (T::one() + th) + T::of(0.5) * x * (T::one() - th * th) * du
}

/// Numerically stable in-place softmax over each row; `-inf` entries get weight 0.
pub fn softmax_rows_inplace<T: Real>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        let mx = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        if mx == T::neg_infinity() {
            row.fill(T::zero());
            continue;
        }
        let mut sum = T::zero();
        row.mapv_inplace(|a| {
            let e = (a - mx).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|a| a / sum);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn max_pool_breaks_ties_to_lowest_row() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(array![[1.0, 2.0], [1.0, 3.0], [0.5, 3.0]]);
        let p = g.pool(x, 3, Aggregation::Max, None).unwrap();
        assert_eq!(g.value(p), &array![[1.0, 3.0]]);
        let Op::MaxPool { argmax, .. } = &g.nodes[p.0].op else {
            unreachable!()
        };
        assert_eq!(argmax, &vec![0, 1]);
    }

    #[test]
    fn pool_skips_invalid_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(array![[1.0], [9.0], [3.0], [5.0]]);
        let valid = [true, false, true, true];
        let mx = g.pool(x, 2, Aggregation::Max, Some(&valid)).unwrap();
        let mn = g.pool(x, 2, Aggregation::Mean, Some(&valid)).unwrap();
        assert_eq!(g.value(mx), &array![[1.0], [5.0]]);
        assert_eq!(g.value(mn), &array![[1.0], [4.0]]);
        let none = [false, false, true, true];
        assert!(g.pool(x, 2, Aggregation::Max, Some(&none)).is_err());
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(array![[1.0, 0.0], [0.0, 1.0]]);
        let v = g.constant(array![[1.0, 2.0], [100.0, 200.0]]);
        let out = g.attention(q, q, v, 2, 1, Some(&[true, false]));
        assert_eq!(g.value(out), &array![[1.0, 2.0], [1.0, 2.0]]);
    }

    #[test]
    fn normalize_rejects_zero_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Array2::zeros((1, 3)));
        assert!(matches!(g.l2_normalize(x), Err(McrError::Numerical(_))));
    }

    #[test]
    fn shared_param_gradient_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", array![[2.0]], super::super::LrGroup::Rest, false);
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let y = g.matmul(a, b);
        let grads = g.backward(y);
        let pg = g.param_grads(&grads);
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].1[[0, 0]], 4.0);
    }
}
