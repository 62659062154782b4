//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order, so the tape is
//! already topologically sorted and [`Graph::backward`] is a single reverse
//! sweep. Parameters enter as borrowed leaves; nothing is copied until an
//! operation produces a new value. A graph is confined to one thread; run
//! independent utterances on independent graphs.

use std::borrow::Cow;
use std::collections::btree_map::Entry;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, Rng, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
///
/// `parents` holds the forward values of the inputs in the order they were
/// passed to [`Graph::custom`]. Return one gradient per parent; `None` skips
/// a parent.
pub trait CustomOp<S: Scalar> {
    fn backward(&self, out_grad: &[S], parents: &[&[S]]) -> Vec<Option<Vec<S>>>;
}

enum Op<S: Scalar> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        a_batched: bool,
        b_batched: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Identity(Var),
    MulConst(Var, Vec<S>),
    Relu(Var),
    LogSoftmax(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    TransposeLast2(Var),
    SwapAxes01(Var),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    Sum(Var),
    Custom(Vec<Var>, Box<dyn CustomOp<S>>),
}

struct Node<'a, S: Scalar> {
    value: Cow<'a, [S]>,
    shape: Vec<usize>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Graph<'a, S: Scalar> {
    nodes: Vec<Node<'a, S>>,
    leaf_grads: BTreeMap<usize, Vec<S>>,
    tracking: bool,
}

impl<S: Scalar> Default for Graph<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let n = shape.last().copied().unwrap_or(1);
    (numel(shape) / n.max(1), n)
}

/// `c += a · b` for `a: [m,k]`, `b: [k,n]`; `c: [m,n]`.
fn gemm_nn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    S::gemm(m, k, n, a, (k, 1), b, (n, 1), c, (n, 1));
}

/// `c += a · bᵀ` for `a: [m,n]`, `b: [k,n]`; `c: [m,k]`.
fn gemm_nt<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, n: usize, k: usize) {
    S::gemm(m, n, k, a, (n, 1), b, (1, n), c, (k, 1));
}

/// `c += aᵀ · b` for `a: [m,k]`, `b: [m,n]`; `c: [k,n]`.
fn gemm_tn<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    S::gemm(k, m, n, a, (1, k), b, (n, 1), c, (n, 1));
}

fn accumulate<S: Scalar>(adj: &mut [Option<Vec<S>>], target: Var, len: usize, f: impl FnOnce(&mut [S])) {
    let buf = adj[target.0].get_or_insert_with(|| vec![S::zero(); len]);
    f(buf);
}

impl<'a, S: Scalar> Graph<'a, S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: BTreeMap::new(),
            tracking: true,
        }
    }

    /// A graph for inference: no leaf is ever tracked.
    pub fn no_grad() -> Self {
        Graph {
            tracking: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [S]>, shape: Vec<usize>, op: Op<S>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> S {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.to_vec())
            .unwrap_or_else(|_| Tensor::scalar(node.value[0]))
    }

    /// Borrows a tensor as a leaf. It is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &'a Tensor<S>) -> Var {
        self.push(
            Cow::Borrowed(t.data()),
            t.shape().to_vec(),
            Op::Leaf,
            self.tracking && t.requires_grad(),
        )
    }

    /// Owned leaf; `track` decides whether gradients are collected for it.
    pub fn input(&mut self, shape: impl Into<Vec<usize>>, data: Vec<S>, track: bool) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(Error::shape("input", &shape, &[data.len()]));
        }
        Ok(self.push(Cow::Owned(data), shape, Op::Leaf, self.tracking && track))
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Var> {
        self.input(shape, data, false)
    }

    /// Gradient collected for a tracked leaf by the calls to [`Graph::backward`] so far.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    /// Moves a leaf's gradient out of the graph.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<S>> {
        self.leaf_grads.remove(&v.0)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Batched matrix product `[.., m, k] × [.., k, n]`. Either side may be
    /// a plain matrix, in which case it is shared across the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        if k != k2 || !(ba == bb || ba.is_empty() || bb.is_empty()) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch_shape = if ba.is_empty() { bb.to_vec() } else { ba.to_vec() };
        let batch = numel(&batch_shape);
        let (a_batched, b_batched) = (!ba.is_empty(), !bb.is_empty());
        let mut out = vec![S::zero(); batch * m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for t in 0..batch {
                let ao = if a_batched { t * m * k } else { 0 };
                let bo = if b_batched { t * k * n } else { 0 };
                gemm_nn(
                    &av[ao..ao + m * k],
                    &bv[bo..bo + k * n],
                    &mut out[t * m * n..(t + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = batch_shape;
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Cow::Owned(out),
            shape,
            Op::MatMul {
                a,
                b,
                batch,
                a_batched,
                b_batched,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect::<Vec<_>>();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Add(a, b), rg))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias rows, masks).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", sa, sb));
        }
        let bn = numel(sb);
        let bv = self.value(b);
        let out = self
            .value(a)
            .chunks(bn)
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect::<Vec<_>>();
        let rg = self.rg(a) || self.rg(b);
        let shape = sa.to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::AddBroadcast(a, b), rg))
    }

    /// Adds an untracked constant whose shape is a suffix of `a`'s.
    pub fn add_const(&mut self, a: Var, c: &[S]) -> Result<Var> {
        if c.is_empty() || !self.value(a).len().is_multiple_of(c.len()) {
            return Err(Error::shape("add_const", self.shape(a), &[c.len()]));
        }
        let out = self
            .value(a)
            .chunks(c.len())
            .flat_map(|chunk| chunk.iter().zip(c).map(|(&x, &y)| x + y))
            .collect::<Vec<_>>();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Identity(a), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect::<Vec<_>>();
        let rg = self.rg(a) || self.rg(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect::<Vec<_>>();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(Cow::Owned(out), shape, Op::Scale(a, c), rg)
    }

    /// Element-wise product with an untracked same-shape factor.
    pub fn mul_const(&mut self, a: Var, factor: Vec<S>) -> Result<Var> {
        if factor.len() != self.value(a).len() {
            return Err(Error::shape("mul_const", self.shape(a), &[factor.len()]));
        }
        let out = self
            .value(a)
            .iter()
            .zip(&factor)
            .map(|(&x, &y)| x * y)
            .collect::<Vec<_>>();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::MulConst(a, factor), rg))
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        let keep = S::of(1.0 / (1.0 - rate));
        let mask = (0..self.value(a).len())
            .map(|_| if rng.bernoulli(rate) { S::zero() } else { keep })
            .collect();
        self.mul_const(a, mask)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&x| x.max(S::zero()))
            .collect::<Vec<_>>();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(Cow::Owned(out), shape, Op::Relu(a), rg)
    }

    /// Log-softmax over the last dimension, with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (_, n) = split_last(self.shape(a));
        let v = self.value(a);
        if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("log_softmax input contains {bad}")));
        }
        let mut out = Vec::with_capacity(v.len());
        for row in v.chunks(n) {
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|&x| x - lse));
        }
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::LogSoftmax(a), rg))
    }

    /// Softmax over the last dimension. Rows may contain `-inf` (masked
    /// entries) as long as one entry is finite.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, n) = split_last(self.shape(a));
        let v = self.value(a);
        let mut out = Vec::with_capacity(v.len());
        for row in v.chunks(n) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            if !max.is_finite() {
                return Err(Error::Numeric(format!("softmax row maximum is {max}")));
            }
            let start = out.len();
            let mut total = S::zero();
            for &x in row {
                let e = (x - max).exp();
                total += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= total);
        }
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Softmax(a), rg))
    }

    /// Normalizes each last-dimension slice to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, d) = split_last(self.shape(x));
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let eps = S::of(eps);
        let dn = S::from_usize(d).unwrap();
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(d) {
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let is = S::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Cow::Owned(out),
            shape,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), &shape));
        }
        let rg = self.rg(a);
        let value = self.nodes[a.0].value.clone();
        Ok(self.push(value, shape, Op::Identity(a), rg))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose_last2", &s, &[]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let v = self.value(a);
        let mut out = vec![S::zero(); v.len()];
        for (b, block) in v.chunks(r * c).enumerate() {
            let o = &mut out[b * r * c..(b + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    o[j * r + i] = block[i * c + j];
                }
            }
        }
        let mut shape = s;
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        let rg = self.rg(a);
        Ok(self.push(Cow::Owned(out), shape, Op::TransposeLast2(a), rg))
    }

    /// `[x, y, z] -> [y, x, z]`.
    pub fn swap_axes01(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("swap_axes01", &s, &[]));
        }
        let (x, y, z) = (s[0], s[1], s[2]);
        let v = self.value(a);
        let mut out = vec![S::zero(); v.len()];
        for i in 0..x {
            for j in 0..y {
                out[(j * x + i) * z..(j * x + i + 1) * z]
                    .copy_from_slice(&v[(i * y + j) * z..(i * y + j + 1) * z]);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Cow::Owned(out), vec![y, x, z], Op::SwapAxes01(a), rg))
    }

    /// Row lookup into a `[rows, d]` table (embeddings).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 || ids.iter().any(|&i| i >= s[0]) || ids.is_empty() {
            return Err(Error::shape("gather_rows", s, &[ids.len()]));
        }
        let d = s[1];
        let v = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&v[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Cow::Owned(out),
            vec![ids.len(), d],
            Op::GatherRows(table, ids.to_vec()),
            rg,
        ))
    }

    /// Selects flat elements into a 1-D tensor.
    pub fn pick(&mut self, a: Var, flat: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if flat.is_empty() || flat.iter().any(|&i| i >= v.len()) {
            return Err(Error::shape("pick", self.shape(a), &[flat.len()]));
        }
        let out = flat.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let rg = self.rg(a);
        Ok(self.push(
            Cow::Owned(out),
            vec![flat.len()],
            Op::Pick(a, flat.to_vec()),
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: S = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push(Cow::Owned(vec![total]), Vec::new(), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = S::from_usize(self.value(a).len()).unwrap();
        let s = self.sum(a);
        self.scale(s, S::one() / n)
    }

    /// Records an externally computed value with its own backward rule.
    pub fn custom(
        &mut self,
        parents: &[Var],
        shape: impl Into<Vec<usize>>,
        value: Vec<S>,
        op: Box<dyn CustomOp<S>>,
    ) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != value.len() {
            return Err(Error::shape("custom", &shape, &[value.len()]));
        }
        let rg = parents.iter().any(|&p| self.rg(p));
        Ok(self.push(Cow::Owned(value), shape, Op::Custom(parents.to_vec(), op), rg))
    }

    /// Reverse sweep from a scalar `loss`. Gradients are added to the
    /// per-leaf buffers, so repeated calls accumulate until
    /// [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let len_of = |v: Var| self.nodes[v.0].value.len();
            let tracked = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => match self.leaf_grads.entry(i) {
                    Entry::Vacant(e) => {
                        e.insert(g);
                    }
                    Entry::Occupied(mut e) => e.get_mut().iter_mut().zip(&g).for_each(|(b, &x)| *b += x),
                },
                &Op::MatMul {
                    a,
                    b,
                    batch,
                    a_batched,
                    b_batched,
                    m,
                    k,
                    n,
                } => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    if tracked(a) {
                        accumulate(&mut adj, a, len_of(a), |da| {
                            for t in 0..batch {
                                let ao = if a_batched { t * m * k } else { 0 };
                                let bo = if b_batched { t * k * n } else { 0 };
                                gemm_nt(
                                    &g[t * m * n..(t + 1) * m * n],
                                    &bv[bo..bo + k * n],
                                    &mut da[ao..ao + m * k],
                                    m,
                                    n,
                                    k,
                                );
                            }
                        });
                    }
                    if tracked(b) {
                        accumulate(&mut adj, b, len_of(b), |db| {
                            for t in 0..batch {
                                let ao = if a_batched { t * m * k } else { 0 };
                                let bo = if b_batched { t * k * n } else { 0 };
                                gemm_tn(
                                    &av[ao..ao + m * k],
                                    &g[t * m * n..(t + 1) * m * n],
                                    &mut db[bo..bo + k * n],
                                    m,
                                    k,
                                    n,
                                );
                            }
                        });
                    }
                }
                &Op::Add(a, b) => {
                    for p in [a, b] {
                        if tracked(p) {
                            accumulate(&mut adj, p, g.len(), |d| {
                                d.iter_mut().zip(&g).for_each(|(x, &y)| *x += y)
                            });
                        }
                    }
                }
                &Op::AddBroadcast(a, b) => {
                    if tracked(a) {
                        accumulate(&mut adj, a, g.len(), |d| {
                            d.iter_mut().zip(&g).for_each(|(x, &y)| *x += y)
                        });
                    }
                    if tracked(b) {
                        let bn = len_of(b);
                        accumulate(&mut adj, b, bn, |d| {
                            for chunk in g.chunks(bn) {
                                d.iter_mut().zip(chunk).for_each(|(x, &y)| *x += y);
                            }
                        });
                    }
                }
                &Op::Mul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    if tracked(a) {
                        accumulate(&mut adj, a, g.len(), |d| {
                            for ((x, &gy), &o) in d.iter_mut().zip(&g).zip(bv.iter()) {
                                *x += gy * o;
                            }
                        });
                    }
                    if tracked(b) {
                        accumulate(&mut adj, b, g.len(), |d| {
                            for ((x, &gy), &o) in d.iter_mut().zip(&g).zip(av.iter()) {
                                *x += gy * o;
                            }
                        });
                    }
                }
                &Op::Scale(a, c) => {
                    if tracked(a) {
                        accumulate(&mut adj, a, g.len(), |d| {
                            d.iter_mut().zip(&g).for_each(|(x, &y)| *x += y * c)
                        });
                    }
                }
                &Op::Identity(a) => {
                    if tracked(a) {
                        accumulate(&mut adj, a, g.len(), |d| {
                            d.iter_mut().zip(&g).for_each(|(x, &y)| *x += y)
                        });
                    }
                }
                Op::MulConst(a, factor) => {
                    let a = *a;
                    if tracked(a) {
                        accumulate(&mut adj, a, g.len(), |d| {
                            for ((x, &gy), &f) in d.iter_mut().zip(&g).zip(factor) {
                                *x += gy * f;
                            }
                        });
                    }
                }
                &Op::Relu(a) => {
                    if tracked(a) {
                        let av = &self.nodes[a.0].value;
                        accumulate(&mut adj, a, g.len(), |d| {
                            for ((x, &gy), &v) in d.iter_mut().zip(&g).zip(av.iter()) {
                                if v > S::zero() {
                                    *x += gy;
                                }
                            }
                        });
                    }
                }
                &Op::LogSoftmax(a) => {
                    if tracked(a) {
                        let (_, n) = split_last(&node.shape);
                        let y = &node.value;
                        accumulate(&mut adj, a, g.len(), |d| {
                            for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                                let gs: S = gr.iter().copied().sum();
                                for ((x, &gy), &yy) in dr.iter_mut().zip(gr).zip(yr) {
                                    *x += gy - yy.exp() * gs;
                                }
                            }
                        });
                    }
                }
                &Op::Softmax(a) => {
                    if tracked(a) {
                        let (_, n) = split_last(&node.shape);
                        let y = &node.value;
                        accumulate(&mut adj, a, g.len(), |d| {
                            for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                                let dot: S = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                                for ((x, &gy), &yy) in dr.iter_mut().zip(gr).zip(yr) {
                                    *x += yy * (gy - dot);
                                }
                            }
                        });
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let d = node.shape.last().copied().unwrap_or(1);
                    let dn = S::from_usize(d).unwrap();
                    let gv = &self.nodes[gain.0].value;
                    if tracked(x) {
                        accumulate(&mut adj, x, g.len(), |dx| {
                            for (r, ((dxr, gr), hr)) in dx
                                .chunks_mut(d)
                                .zip(g.chunks(d))
                                .zip(xhat.chunks(d))
                                .enumerate()
                            {
                                let mut m1 = S::zero();
                                let mut m2 = S::zero();
                                for j in 0..d {
                                    let dh = gr[j] * gv[j];
                                    m1 += dh;
                                    m2 += dh * hr[j];
                                }
                                m1 /= dn;
                                m2 /= dn;
                                for j in 0..d {
                                    let dh = gr[j] * gv[j];
                                    dxr[j] += inv_std[r] * (dh - m1 - hr[j] * m2);
                                }
                            }
                        });
                    }
                    if tracked(gain) {
                        accumulate(&mut adj, gain, d, |dg| {
                            for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                                for j in 0..d {
                                    dg[j] += gr[j] * hr[j];
                                }
                            }
                        });
                    }
                    if tracked(bias) {
                        accumulate(&mut adj, bias, d, |db| {
                            for gr in g.chunks(d) {
                                db.iter_mut().zip(gr).for_each(|(x, &y)| *x += y);
                            }
                        });
                    }
                }
                &Op::TransposeLast2(a) => {
                    if tracked(a) {
                        // node shape is [.., c, r]; parent is [.., r, c]
                        let s = &node.shape;
                        let (c, r) = (s[s.len() - 2], s[s.len() - 1]);
                        accumulate(&mut adj, a, g.len(), |d| {
                            for (b, block) in g.chunks(r * c).enumerate() {
                                let o = &mut d[b * r * c..(b + 1) * r * c];
                                for j in 0..c {
                                    for i in 0..r {
                                        o[i * c + j] += block[j * r + i];
                                    }
                                }
                            }
                        });
                    }
                }
                &Op::SwapAxes01(a) => {
                    if tracked(a) {
                        // node is [y, x, z]
                        let (y, x, z) = (node.shape[0], node.shape[1], node.shape[2]);
                        accumulate(&mut adj, a, g.len(), |d| {
                            for j in 0..y {
                                for i in 0..x {
                                    let src = &g[(j * x + i) * z..(j * x + i + 1) * z];
                                    let dst = &mut d[(i * y + j) * z..(i * y + j + 1) * z];
                                    dst.iter_mut().zip(src).for_each(|(p, &q)| *p += q);
                                }
                            }
                        });
                    }
                }
                Op::GatherRows(table, ids) => {
                    let table = *table;
                    if tracked(table) {
                        let dim = self.nodes[table.0].shape[1];
                        accumulate(&mut adj, table, len_of(table), |d| {
                            for (row, &id) in g.chunks(dim).zip(ids) {
                                d[id * dim..(id + 1) * dim]
                                    .iter_mut()
                                    .zip(row)
                                    .for_each(|(p, &q)| *p += q);
                            }
                        });
                    }
                }
                Op::Pick(a, flat) => {
                    let a = *a;
                    if tracked(a) {
                        accumulate(&mut adj, a, len_of(a), |d| {
                            for (&gy, &i) in g.iter().zip(flat) {
                                d[i] += gy;
                            }
                        });
                    }
                }
                &Op::Sum(a) => {
                    if tracked(a) {
                        let g0 = g[0];
                        accumulate(&mut adj, a, len_of(a), |d| {
                            d.iter_mut().for_each(|x| *x += g0)
                        });
                    }
                }
                Op::Custom(parents, op) => {
                    let values: Vec<&[S]> = parents
                        .iter()
                        .map(|p| &*self.nodes[p.0].value)
                        .collect();
                    let grads = op.backward(&g, &values);
                    for (&p, pg) in parents.iter().zip(grads) {
                        if let (true, Some(pg)) = (tracked(p), pg) {
                            accumulate(&mut adj, p, len_of(p), |d| {
                                d.iter_mut().zip(&pg).for_each(|(x, &y)| *x += y)
                            });
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let a = g.constant([2, 2], vec![1., 0., 0., 1.]).unwrap();
        let b = g.constant([2, 2], vec![3., 4., 5., 6.]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[3., 4., 5., 6.]);
    }

    #[test]
    fn matmul_row_by_column() {
        let mut g = Graph::<f64>::new();
        let a = g.constant([1, 2], vec![1., 2.]).unwrap();
        let b = g.constant([2, 1], vec![3., 4.]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[1, 1]);
        assert_eq!(g.value(c), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant([2, 3], vec![0.; 6]).unwrap();
        let b = g.constant([2, 2], vec![0.; 4]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn log_softmax_symmetric_and_stable() {
        let mut g = Graph::<f64>::new();
        let a = g.constant([2], vec![0., 0.]).unwrap();
        let y = g.log_softmax(a).unwrap();
        assert!(close(g.value(y), &[0.5f64.ln(), 0.5f64.ln()], 1e-12));

        let b = g.constant([2], vec![1000., 0.]).unwrap();
        let y = g.log_softmax(b).unwrap();
        assert!(g.value(y)[0].abs() < 1e-12);
        assert!((g.value(y)[1] + 1000.).abs() < 1e-9);
    }

    #[test]
    fn log_softmax_rejects_non_finite() {
        let mut g = Graph::<f32>::new();
        let a = g.constant([2], vec![f32::NAN, 0.]).unwrap();
        assert!(matches!(g.log_softmax(a), Err(Error::Numeric(_))));
        let b = g.constant([2], vec![f32::INFINITY, 0.]).unwrap();
        assert!(matches!(g.log_softmax(b), Err(Error::Numeric(_))));
    }

    #[test]
    fn layer_norm_constant_and_normalized_rows() {
        let mut g = Graph::<f64>::new();
        let gain = g.constant([3], vec![1.; 3]).unwrap();
        let bias = g.constant([3], vec![0.; 3]).unwrap();
        let x = g.constant([3], vec![5., 5., 5.]).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        assert_eq!(g.value(y), &[0., 0., 0.]);

        let gain = g.constant([2], vec![1.; 2]).unwrap();
        let bias = g.constant([2], vec![0.; 2]).unwrap();
        let x = g.constant([2], vec![1., -1.]).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        assert!(close(g.value(y), &[1., -1.], 1e-9));
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let w = Tensor::new([3], vec![1.0f64, 2., 3.]).unwrap().with_grad();
        let mut g = Graph::new();
        let wv = g.leaf(&w);
        let s = g.sum(wv);
        g.backward(s).unwrap();
        assert_eq!(g.grad(wv).unwrap(), &[1., 1., 1.]);

        let mut g = Graph::new();
        let wv = g.leaf(&w);
        let sq = g.mul(wv, wv).unwrap();
        let s = g.sum(sq);
        let half = g.scale(s, 0.5);
        g.backward(half).unwrap();
        assert_eq!(g.grad(wv).unwrap(), &[1., 2., 3.]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let w = Tensor::new([2], vec![1.0f64, 2.]).unwrap().with_grad();
        let mut g = Graph::new();
        let wv = g.leaf(&w);
        let s = g.sum(wv);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(wv).unwrap(), &[2., 2.]);
        g.zero_grad();
        assert!(g.grad(wv).is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let w = Tensor::new([2], vec![1.0f64, 2.]).unwrap().with_grad();
        let mut g = Graph::new();
        let wv = g.leaf(&w);
        assert!(matches!(g.backward(wv), Err(Error::Contract(_))));
    }

    #[test]
    fn untracked_leaves_get_no_grad() {
        let w = Tensor::new([2], vec![1.0f64, 2.]).unwrap();
        let mut g = Graph::new();
        let wv = g.leaf(&w);
        let s = g.sum(wv);
        g.backward(s).unwrap();
        assert!(g.grad(wv).is_none());
    }
}
