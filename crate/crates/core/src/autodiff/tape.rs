//! Operation recording and reverse-mode gradient propagation.
//!
//! A [`Tape`] borrows a [`ParamStore`] read-only, records every operation of
//! one forward pass as a node, and is consumed by [`Tape::backward`], which
//! walks the nodes in reverse and returns a [`Gradients`] map. Parameter
//! gradients are applied to the store afterwards with
//! [`ParamStore::accumulate`], so many tapes can read one store concurrently.

use std::collections::BTreeMap;

use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Tanh,
    Exp,
}

/// Deliberate corruption of a backward rule, used to prove that the
/// gradient checker catches broken derivatives.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Scales the local derivative of `tanh` by 1.5.
    TanhBackward,
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    Row { param: ParamId, row: usize },
    Linear { w: ParamId, x: Var, b: Option<ParamId> },
    Unary { kind: UnaryKind, x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Concat(Vec<Var>),
    Mean(Vec<Var>),
    Stack(Vec<Var>),
    Softmax(Var),
    WeightedSum { weights: Var, items: Vec<Var> },
    MatVec { m: Var, x: Var, rows: usize, cols: usize },
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Dot(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradient of one parameter: a dense part from whole-tensor uses and a
/// sparse part from row lookups.
#[derive(Debug, Clone, Default)]
pub struct ParamGrad {
    pub dense: Option<Vec<f64>>,
    pub rows: BTreeMap<usize, Vec<f64>>,
}

impl ParamGrad {
    fn dense_mut(&mut self, len: usize) -> &mut [f64] {
        self.dense.get_or_insert_with(|| vec![0.0; len])
    }

    fn row_mut(&mut self, row: usize, len: usize) -> &mut [f64] {
        self.rows.entry(row).or_insert_with(|| vec![0.0; len])
    }

    /// Materialises the gradient as a tensor of the parameter's shape.
    pub fn to_dense(&self, like: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(like.shape());
        if let Some(d) = &self.dense {
            out.data_mut().copy_from_slice(d);
        }
        for (&r, vals) in &self.rows {
            for (o, v) in out.row_mut(r).iter_mut().zip(vals) {
                *o += v;
            }
        }
        out
    }
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: BTreeMap<ParamId, ParamGrad>,
}

impl Gradients {
    /// Gradient of the loss with respect to a node, if the node influenced it.
    pub fn node(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&ParamGrad> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &ParamGrad)> {
        self.params.iter().map(|(&id, g)| (id, g))
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(|g| {
            g.dense.iter().flatten().all(|v| v.is_finite())
                && g.rows.values().flatten().all(|v| v.is_finite())
        })
    }
}

/// One forward pass worth of recorded operations.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    track_kinks: bool,
    kink_signature: Vec<i8>,
    zero_relu_inputs: usize,
    fault: Option<Fault>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            track_kinks: false,
            kink_signature: Vec::new(),
            zero_relu_inputs: 0,
            fault: None,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    /// Records which side of every relu/clamp kink each input fell on.
    pub(crate) fn track_kinks(&mut self) {
        self.track_kinks = true;
    }

    pub(crate) fn kink_signature(&self) -> &[i8] {
        &self.kink_signature
    }

    /// Number of relu inputs that were exactly zero.
    pub fn zero_relu_inputs(&self) -> usize {
        self.zero_relu_inputs
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check(&self, v: Var) -> Result<&Tensor> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or_else(|| Error::contract(format!("node {} is not on this tape", v.0)))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant, "constant")
    }

    pub fn vector(&mut self, data: Vec<f64>) -> Result<Var> {
        self.constant(Tensor::vector(data))
    }

    /// The whole parameter tensor as a node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let value = self.params.value(id).clone();
        self.push(value, Op::Param(id), "param")
    }

    /// Row `row` of a 2-D parameter (embedding lookup).
    pub fn row(&mut self, id: ParamId, row: usize) -> Result<Var> {
        let p = self.params.get(id);
        let (rows, _) = p.value.dims2();
        if row >= rows {
            return Err(Error::Lookup {
                kind: "embedding row",
                id: format!("{}[{row}] (table has {rows} rows)", p.name),
            });
        }
        let value = Tensor::vector(p.value.row(row).to_vec());
        self.push(value, Op::Row { param: id, row }, "row")
    }

    /// `W·x (+ b)` with `W` an `m×n` parameter.
    pub fn linear(&mut self, w: ParamId, x: Var, b: Option<ParamId>) -> Result<Var> {
        let wt = self.params.value(w);
        let xt = self.check(x)?;
        let (m, n) = wt.dims2();
        if wt.shape().len() != 2 || xt.len() != n {
            return Err(shape_err("linear", wt, xt));
        }
        let mut out = match b {
            Some(b) => {
                let bt = self.params.value(b);
                if bt.len() != m {
                    return Err(shape_err("linear bias", wt, bt));
                }
                bt.data().to_vec()
            }
            None => vec![0.0; m],
        };
        let xs = xt.data();
        for (i, o) in out.iter_mut().enumerate() {
            *o += wt.row(i).iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
        }
        self.push(Tensor::vector(out), Op::Linear { w, x, b }, "linear")
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let xt = self.check(x)?;
        let shape = xt.shape().to_vec();
        if !xt.is_finite() {
            return Err(Error::NonFinite("unary input".into()));
        }
        let out: Vec<f64> = match kind {
            UnaryKind::Relu => xt.data().iter().map(|&v| v.max(0.0)).collect(),
            UnaryKind::Tanh => xt.data().iter().map(|v| v.tanh()).collect(),
            UnaryKind::Exp => xt.data().iter().map(|v| v.exp()).collect(),
        };
        if kind == UnaryKind::Relu {
            let zeros = xt.data().iter().filter(|&&v| v == 0.0).count();
            let sig: Option<Vec<i8>> = self.track_kinks.then(|| xt.data().iter().map(|v| sign(*v)).collect());
            self.zero_relu_inputs += zeros;
            if let Some(sig) = sig {
                self.kink_signature.extend(sig);
            }
        }
        let name = match kind {
            UnaryKind::Relu => "relu",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Exp => "exp",
        };
        self.push(Tensor::new(shape, out)?, Op::Unary { kind, x }, name)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let at = self.check(a)?;
        let bt = self.check(b)?;
        if at.shape() != bt.shape() {
            return Err(shape_err(name, at, bt));
        }
        Ok(at.data().iter().zip(bt.data()).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(Tensor::vector(out), Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(Tensor::vector(out), Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(Tensor::vector(out), Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.check(x)?.data().iter().map(|v| v * c).collect();
        self.push(Tensor::vector(out), Op::Scale(x, c), "scale")
    }

    /// Adds the constant `c` to every element.
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.check(x)?.data().iter().map(|v| v + c).collect();
        self.push(Tensor::vector(out), Op::Offset(x), "offset")
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat of zero nodes"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.check(p)?.data());
        }
        self.push(Tensor::vector(out), Op::Concat(parts.to_vec()), "concat")
    }

    /// Elementwise mean of equally shaped nodes.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("mean of zero nodes"))?;
        let len = self.check(first)?.len();
        let mut out = vec![0.0; len];
        for &p in parts {
            let t = self.check(p)?;
            if t.len() != len {
                return Err(shape_err("mean", self.value(first), t));
            }
            for (o, v) in out.iter_mut().zip(t.data()) {
                *o += v;
            }
        }
        let n = parts.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        self.push(Tensor::vector(out), Op::Mean(parts.to_vec()), "mean")
    }

    /// Stacks scalar nodes into one vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        if scalars.is_empty() {
            return Err(Error::contract("stack of zero nodes"));
        }
        let mut out = Vec::with_capacity(scalars.len());
        for &s in scalars {
            let t = self.check(s)?;
            if !t.is_scalar() {
                return Err(shape_err("stack", t, &Tensor::scalar(0.0)));
            }
            out.push(t.item());
        }
        self.push(Tensor::vector(out), Op::Stack(scalars.to_vec()), "stack")
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.check(x)?.data();
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xs.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let out = exps.into_iter().map(|e| e / total).collect();
        self.push(Tensor::vector(out), Op::Softmax(x), "softmax")
    }

    /// `Σ_k weights[k] · items[k]`.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        let wt = self.check(weights)?.clone();
        if wt.len() != items.len() || items.is_empty() {
            return Err(Error::Shape {
                op: "weighted_sum",
                left: wt.shape().to_vec(),
                right: vec![items.len()],
            });
        }
        let len = self.check(items[0])?.len();
        let mut out = vec![0.0; len];
        for (&w, &it) in wt.data().iter().zip(items) {
            let t = self.check(it)?;
            if t.len() != len {
                return Err(shape_err("weighted_sum", self.value(items[0]), t));
            }
            for (o, v) in out.iter_mut().zip(t.data()) {
                *o += w * v;
            }
        }
        let op = Op::WeightedSum {
            weights,
            items: items.to_vec(),
        };
        self.push(Tensor::vector(out), op, "weighted_sum")
    }

    /// Reads node `m` as a row-major `rows×cols` matrix and multiplies `x`.
    pub fn matvec(&mut self, m: Var, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let mt = self.check(m)?;
        let xt = self.check(x)?;
        if mt.len() != rows * cols || xt.len() != cols {
            return Err(Error::Shape {
                op: "matvec",
                left: vec![rows, cols, mt.len()],
                right: xt.shape().to_vec(),
            });
        }
        let (md, xd) = (mt.data(), xt.data());
        let out: Vec<f64> = (0..rows)
            .map(|i| md[i * cols..(i + 1) * cols].iter().zip(xd).map(|(a, b)| a * b).sum())
            .collect();
        self.push(Tensor::vector(out), Op::MatVec { m, x, rows, cols }, "matvec")
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let xt = self.check(x)?;
        let out: Vec<f64> = xt.data().iter().map(|v| v.clamp(lo, hi)).collect();
        if self.track_kinks {
            let sig: Vec<i8> = xt
                .data()
                .iter()
                .map(|&v| if v < lo { -1 } else if v > hi { 1 } else { 0 })
                .collect();
            self.kink_signature.extend(sig);
        }
        self.push(Tensor::vector(out), Op::Clamp { x, lo, hi }, "clamp")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.check(x)?.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let s: f64 = self.binary(a, b, "dot", |x, y| x * y)?.into_iter().sum();
        self.push(Tensor::scalar(s), Op::Dot(a, b), "dot")
    }

    /// Reverse pass from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lt = self.check(loss)?;
        if !lt.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut pgrads: BTreeMap<ParamId, ParamGrad> = BTreeMap::new();
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let dst = pgrads.entry(*id).or_default().dense_mut(g.len());
                    for (d, v) in dst.iter_mut().zip(&g) {
                        *d += v;
                    }
                }
                Op::Row { param, row } => {
                    let dst = pgrads.entry(*param).or_default().row_mut(*row, g.len());
                    for (d, v) in dst.iter_mut().zip(&g) {
                        *d += v;
                    }
                }
                Op::Linear { w, x, b } => {
                    let wt = self.params.value(*w);
                    let xv = self.nodes[x.0].value.data();
                    let (m, ncols) = wt.dims2();
                    {
                        let dw = pgrads.entry(*w).or_default().dense_mut(m * ncols);
                        for i in 0..m {
                            let gi = g[i];
                            if gi != 0.0 {
                                for (d, xj) in dw[i * ncols..(i + 1) * ncols].iter_mut().zip(xv) {
                                    *d += gi * xj;
                                }
                            }
                        }
                    }
                    if let Some(b) = b {
                        let db = pgrads.entry(*b).or_default().dense_mut(m);
                        for (d, v) in db.iter_mut().zip(&g) {
                            *d += v;
                        }
                    }
                    let dx = acc(&mut grads, *x, ncols);
                    for i in 0..m {
                        let gi = g[i];
                        if gi != 0.0 {
                            for (d, wij) in dx.iter_mut().zip(wt.row(i)) {
                                *d += gi * wij;
                            }
                        }
                    }
                }
                Op::Unary { kind, x } => {
                    let y = node.value.data();
                    let xin = self.nodes[x.0].value.data();
                    let fault = if self.fault == Some(Fault::TanhBackward) { 1.5 } else { 1.0 };
                    let dx = acc(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        let local = match kind {
                            UnaryKind::Relu => {
                                if xin[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Tanh => (1.0 - y[i] * y[i]) * fault,
                            UnaryKind::Exp => y[i],
                        };
                        dx[i] += g[i] * local;
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g, 1.0);
                    add_into(acc(&mut grads, *b, g.len()), &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g, 1.0);
                    add_into(acc(&mut grads, *b, g.len()), &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let ga: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                    let gb: Vec<f64> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                    add_into(acc(&mut grads, *a, g.len()), &ga, 1.0);
                    add_into(acc(&mut grads, *b, g.len()), &gb, 1.0);
                }
                Op::Scale(x, c) => add_into(acc(&mut grads, *x, g.len()), &g, *c),
                Op::Offset(x) => add_into(acc(&mut grads, *x, g.len()), &g, 1.0),
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        add_into(acc(&mut grads, *p, len), &g[off..off + len], 1.0);
                        off += len;
                    }
                }
                Op::Mean(parts) => {
                    let inv = 1.0 / parts.len() as f64;
                    for p in parts {
                        add_into(acc(&mut grads, *p, g.len()), &g, inv);
                    }
                }
                Op::Stack(parts) => {
                    for (p, gi) in parts.iter().zip(&g) {
                        acc(&mut grads, *p, 1)[0] += gi;
                    }
                }
                Op::Softmax(x) => {
                    let y = node.value.data();
                    let gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                    let dx = acc(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        dx[i] += y[i] * (g[i] - gy);
                    }
                }
                Op::WeightedSum { weights, items } => {
                    let wv = self.nodes[weights.0].value.data().to_vec();
                    let dw: Vec<f64> = items
                        .iter()
                        .map(|it| {
                            self.nodes[it.0]
                                .value
                                .data()
                                .iter()
                                .zip(&g)
                                .map(|(a, b)| a * b)
                                .sum()
                        })
                        .collect();
                    add_into(acc(&mut grads, *weights, wv.len()), &dw, 1.0);
                    for (it, w) in items.iter().zip(&wv) {
                        add_into(acc(&mut grads, *it, g.len()), &g, *w);
                    }
                }
                Op::MatVec { m, x, rows, cols } => {
                    let (rows, cols) = (*rows, *cols);
                    let mv = self.nodes[m.0].value.data();
                    let xv = self.nodes[x.0].value.data();
                    let mut dm = vec![0.0; rows * cols];
                    let mut dx = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            dm[i * cols + j] = g[i] * xv[j];
                            dx[j] += mv[i * cols + j] * g[i];
                        }
                    }
                    add_into(acc(&mut grads, *m, rows * cols), &dm, 1.0);
                    add_into(acc(&mut grads, *x, cols), &dx, 1.0);
                }
                Op::Clamp { x, lo, hi } => {
                    let xin = self.nodes[x.0].value.data();
                    let dx = acc(&mut grads, *x, g.len());
                    for i in 0..g.len() {
                        if xin[i] >= *lo && xin[i] <= *hi {
                            dx[i] += g[i];
                        }
                    }
                }
                Op::Sum(x) => {
                    let len = self.nodes[x.0].value.len();
                    let dx = acc(&mut grads, *x, len);
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
                Op::Dot(a, b) => {
                    let av = self.nodes[a.0].value.data();
                    let bv = self.nodes[b.0].value.data();
                    let ga: Vec<f64> = bv.iter().map(|v| v * g[0]).collect();
                    let gb: Vec<f64> = av.iter().map(|v| v * g[0]).collect();
                    add_into(acc(&mut grads, *a, ga.len()), &ga, 1.0);
                    add_into(acc(&mut grads, *b, gb.len()), &gb, 1.0);
                }
            }
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            nodes: grads,
            params: pgrads,
        })
    }
}

fn add_into(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}
