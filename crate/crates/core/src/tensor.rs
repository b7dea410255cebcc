//! Dense row-major tensors and a define-by-run reverse-mode tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op appends a node
//! holding its value and enough context to run its backward rule; [`Graph::backward`]
//! walks the nodes once in reverse append order. Leaves created from a
//! [`ParamStore`](crate::params::ParamStore) remember their [`ParamId`] so the
//! optimizer can pick their gradients up afterwards.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros: positive dims")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new([1], vec![value]).expect("scalar")
    }

    /// Builds a 2-D tensor from nested rows. Panics on ragged input; meant for
    /// literals in tests and small fixtures.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new([rows.len(), cols], data).expect("from_rows")
    }

    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Self::new(shape, data).expect("randn")
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing dimension; 1-D tensors report their length.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("non-empty shape")
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    fn check_matrix(&self, op: &'static str) -> Result<()> {
        if self.shape.len() == 2 {
            Ok(())
        } else {
            Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            })
        }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias(usize, usize),
    Gelu(usize),
    LayerNorm { x: usize, rstd: Vec<f64> },
    Softmax(usize),
    Transpose(usize),
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows { table: usize, ids: Vec<usize> },
    ExpandCols { x: usize, times: usize, scale: f64 },
    Sum(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    backward_done: bool,
}

/// `c = beta * c + op(a) · op(b)` where `op(a)` is m×k and `op(b)` is k×n.
/// With `trans_a` the storage of `a` is k×m; with `trans_b` the storage of `b` is n×k.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths are checked above against the strides handed to dgemm.
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

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: Vec<usize>, data: Vec<f64>, parents: &[usize], op: Op) -> Var {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].value.requires_grad);
        let value = Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        };
        self.push(value, op)
    }

    /// Records a leaf. Its `requires_grad` flag decides whether backward fills a gradient.
    pub fn input(&mut self, mut tensor: Tensor) -> Var {
        tensor.grad = None;
        self.push(tensor, Op::Leaf)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.input(tensor.with_requires_grad(false))
    }

    /// Leaf backed by a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let entry = store.entry(id);
        let tensor = entry.tensor.clone().with_requires_grad(entry.trainable);
        let v = self.input(tensor);
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Gradients of every parameter leaf that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.nodes.iter().filter_map(|n| match (n.param, n.value.grad.as_deref()) {
            (Some(id), Some(g)) => Some((id, g)),
            _ => None,
        })
    }

    /// Parameters touched by this graph, in first-use order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.nodes.iter().filter_map(|n| n.param).collect()
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.nodes[a.0].value.shape.clone(),
            rhs: self.nodes[b.0].value.shape.clone(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(self.shape_err("matmul", a, b));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &ta.data, false, &tb.data, false, &mut out, 0.0);
        Ok(self.derived(vec![m, n], out, &[a.0, b.0], Op::MatMul(a.0, b.0)))
    }

    fn elementwise(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let f = |x: f64, y: f64| if mul { x * y } else { x + y };
        let (shape, data) = if ta.shape == tb.shape {
            let d = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
            (ta.shape.clone(), d)
        } else if ta.is_scalar() {
            let s = ta.data[0];
            (tb.shape.clone(), tb.data.iter().map(|&y| f(s, y)).collect())
        } else if tb.is_scalar() {
            let s = tb.data[0];
            (ta.shape.clone(), ta.data.iter().map(|&x| f(x, s)).collect())
        } else {
            return Err(self.shape_err(if mul { "mul" } else { "add" }, a, b));
        };
        let op = if mul { Op::Mul(a.0, b.0) } else { Op::Add(a.0, b.0) };
        Ok(self.derived(shape, data, &[a.0, b.0], op))
    }

    /// Pointwise sum; a one-element operand is broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, false)
    }

    /// Pointwise product; a one-element operand is broadcast.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, true)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = &self.nodes[a.0].value;
        let data = t.data.iter().map(|&x| x * factor).collect();
        self.derived(t.shape.clone(), data, &[a.0], Op::Scale(a.0, factor))
    }

    /// Adds a length-n bias to every row of an m×n matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if tx.shape.len() != 2 || tb.numel() != tx.shape[1] {
            return Err(self.shape_err("add_bias", x, bias));
        }
        let n = tx.shape[1];
        let data = tx
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data[i % n])
            .collect();
        Ok(self.derived(tx.shape.clone(), data, &[x.0, bias.0], Op::AddBias(x.0, bias.0)))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let data = t.data.iter().map(|&x| gelu_scalar(x)).collect();
        self.derived(t.shape.clone(), data, &[a.0], Op::Gelu(a.0))
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        t.check_matrix("layer_norm")?;
        let (m, n) = (t.shape[0], t.shape[1]);
        let mut out = vec![0.0; m * n];
        let mut rstd = Vec::with_capacity(m);
        for i in 0..m {
            let row = &t.data[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            rstd.push(r);
        }
        Ok(self.derived(vec![m, n], out, &[a.0], Op::LayerNorm { x: a.0, rstd }))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        t.check_matrix("softmax_rows")?;
        let n = t.shape[1];
        let mut out = t.data.clone();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        Ok(self.derived(t.shape.clone(), out, &[a.0], Op::Softmax(a.0)))
    }

    /// Row-wise softmax where row i only sees columns `0..=i + offset`; the rest are exactly zero.
    pub fn causal_softmax(&mut self, a: Var, offset: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        t.check_matrix("causal_softmax")?;
        let n = t.shape[1];
        let mut out = t.data.clone();
        for (i, row) in out.chunks_mut(n).enumerate() {
            let visible = (i + offset + 1).min(n);
            softmax_in_place(&mut row[..visible]);
            row[visible..].iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(self.derived(t.shape.clone(), out, &[a.0], Op::Softmax(a.0)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        t.check_matrix("transpose")?;
        let (m, n) = (t.shape[0], t.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data[i * n + j];
            }
        }
        Ok(self.derived(vec![n, m], out, &[a.0], Op::Transpose(a.0)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        t.check_matrix("slice_cols")?;
        let (m, n) = (t.shape[0], t.shape[1]);
        if len == 0 || start + len > n {
            return Err(Error::OutOfRange {
                what: "column slice",
                index: start + len,
                len: n,
            });
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&t.data[i * n + start..i * n + start + len]);
        }
        Ok(self.derived(vec![m, len], out, &[a.0], Op::SliceCols { x: a.0, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Config("concat of nothing".into()))?;
        let m = self.nodes[first.0].value.shape[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape.len() != 2 || t.shape[0] != m {
                return Err(self.shape_err("concat_cols", *first, p));
            }
            widths.push(t.shape[1]);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.0].value.data[i * w..(i + 1) * w]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.derived(vec![m, n], out, &ids, Op::ConcatCols(ids.clone())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Config("concat of nothing".into()))?;
        let n = self.nodes[first.0].value.cols();
        let mut m = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape.len() != 2 || t.shape[1] != n {
                return Err(self.shape_err("concat_rows", *first, p));
            }
            m += t.shape[0];
            out.extend_from_slice(&t.data);
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.derived(vec![m, n], out, &ids, Op::ConcatRows(ids.clone())))
    }

    /// Selects rows `ids` of a table (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        t.check_matrix("gather_rows")?;
        let (rows, n) = (t.shape[0], t.shape[1]);
        if ids.is_empty() {
            return Err(Error::Config("gather of no rows".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= rows {
                return Err(Error::OutOfRange {
                    what: "table row",
                    index: id,
                    len: rows,
                });
            }
            out.extend_from_slice(&t.data[id * n..(id + 1) * n]);
        }
        let op = Op::GatherRows {
            table: table.0,
            ids: ids.to_vec(),
        };
        Ok(self.derived(vec![ids.len(), n], out, &[table.0], op))
    }

    /// Replicates every column `times` times in place (`[a, b] -> [a, a, b, b]` for 2)
    /// and multiplies by `scale`.
    pub fn expand_cols(&mut self, a: Var, times: usize, scale: f64) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        t.check_matrix("expand_cols")?;
        if times == 0 {
            return Err(Error::Config("expansion factor must be positive".into()));
        }
        let (m, n) = (t.shape[0], t.shape[1]);
        let mut out = Vec::with_capacity(m * n * times);
        for &v in &t.data {
            let s = v * scale;
            out.extend(std::iter::repeat_n(s, times));
        }
        let op = Op::ExpandCols {
            x: a.0,
            times,
            scale,
        };
        Ok(self.derived(vec![m, n * times], out, &[a.0], op))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        self.derived(vec![1], vec![s], &[a.0], Op::Sum(a.0))
    }

    /// Mean negative log-likelihood over rows whose mask is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        t.check_matrix("cross_entropy")?;
        let (m, v) = (t.shape[0], t.shape[1]);
        if targets.len() != m || mask.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: t.shape.clone(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let mut probs = vec![0.0; m * v];
        let mut total = 0.0;
        for i in 0..m {
            if !mask[i] {
                continue;
            }
            if targets[i] >= v {
                return Err(Error::Vocabulary {
                    target: targets[i],
                    vocab: v,
                });
            }
            let row = &t.data[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[i]];
            for (p, x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let op = Op::CrossEntropy {
            logits: logits.0,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            probs,
            count,
        };
        Ok(self.derived(vec![1], vec![total / count as f64], &[logits.0], op))
    }

    /// Reverse sweep from a scalar loss. Every leaf with `requires_grad` that the
    /// loss depends on ends up with a gradient; unrelated leaves stay empty.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = &self.nodes[loss.0].value.shape;
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::NonScalarLoss(shape.clone()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            if matches!(self.nodes[idx].op, Op::Leaf) {
                self.nodes[idx].value.grad = Some(g);
            }
        }
        Ok(())
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].value.requires_grad
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if self.needs(*a) {
                    let ga = accumulate(&mut grads[*a], m * k);
                    gemm(m, n, k, g, false, &tb.data, true, ga, 1.0);
                }
                if self.needs(*b) {
                    let gb = accumulate(&mut grads[*b], k * n);
                    gemm(k, m, n, &ta.data, true, g, false, gb, 1.0);
                }
            }
            Op::Add(a, b) => {
                for &p in [a, b] {
                    if !self.needs(p) {
                        continue;
                    }
                    let len = val(p).numel();
                    let gp = accumulate(&mut grads[p], len);
                    if len == g.len() {
                        gp.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    } else {
                        gp[0] += g.iter().sum::<f64>();
                    }
                }
            }
            Op::Mul(a, b) => {
                for (p, q) in [(*a, *b), (*b, *a)] {
                    if !self.needs(p) {
                        continue;
                    }
                    let (tp, tq) = (val(p), val(q));
                    let gp = accumulate(&mut grads[p], tp.numel());
                    if tp.numel() == g.len() {
                        if tq.numel() == g.len() {
                            for ((x, gy), o) in gp.iter_mut().zip(g).zip(&tq.data) {
                                *x += gy * o;
                            }
                        } else {
                            let s = tq.data[0];
                            gp.iter_mut().zip(g).for_each(|(x, gy)| *x += gy * s);
                        }
                    } else {
                        gp[0] += g.iter().zip(&tq.data).map(|(gy, o)| gy * o).sum::<f64>();
                    }
                }
            }
            Op::Scale(a, f) => {
                if self.needs(*a) {
                    let ga = accumulate(&mut grads[*a], g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += f * y);
                }
            }
            Op::AddBias(x, b) => {
                if self.needs(*x) {
                    let gx = accumulate(&mut grads[*x], g.len());
                    gx.iter_mut().zip(g).for_each(|(a, y)| *a += y);
                }
                if self.needs(*b) {
                    let n = val(*b).numel();
                    let gb = accumulate(&mut grads[*b], n);
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, y)| *a += y);
                    }
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let xs = &val(*a).data;
                    let ga = accumulate(&mut grads[*a], g.len());
                    for ((o, gy), x) in ga.iter_mut().zip(g).zip(xs) {
                        *o += gy * gelu_grad(*x);
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                if self.needs(*x) {
                    let y = &node.value.data;
                    let n = node.value.shape[1];
                    let gx = accumulate(&mut grads[*x], g.len());
                    for (i, r) in rstd.iter().enumerate() {
                        let (gr, yr) = (&g[i * n..(i + 1) * n], &y[i * n..(i + 1) * n]);
                        let mean_g = gr.iter().sum::<f64>() / n as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gx[i * n + j] += r * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if self.needs(*a) {
                    let y = &node.value.data;
                    let n = node.value.shape[1];
                    let ga = accumulate(&mut grads[*a], g.len());
                    for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let (m, n) = (val(*a).shape[0], val(*a).shape[1]);
                    let ga = accumulate(&mut grads[*a], m * n);
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let n = val(*x).shape[1];
                    let len = node.value.shape[1];
                    let gx = accumulate(&mut grads[*x], val(*x).numel());
                    for (i, row) in g.chunks(len).enumerate() {
                        let dst = &mut gx[i * n + start..i * n + start + len];
                        dst.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = node.value.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = val(p).shape[1];
                    if self.needs(p) {
                        let gp = accumulate(&mut grads[p], val(p).numel());
                        for (i, row) in g.chunks(n).enumerate() {
                            let dst = &mut gp[i * w..(i + 1) * w];
                            dst.iter_mut().zip(&row[off..off + w]).for_each(|(a, b)| *a += b);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).numel();
                    if self.needs(p) {
                        let gp = accumulate(&mut grads[p], len);
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(a, b)| *a += b);
                    }
                    off += len;
                }
            }
            Op::GatherRows { table, ids } => {
                if self.needs(*table) {
                    let n = val(*table).shape[1];
                    let gt = accumulate(&mut grads[*table], val(*table).numel());
                    for (row, &id) in g.chunks(n).zip(ids) {
                        let dst = &mut gt[id * n..(id + 1) * n];
                        dst.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::ExpandCols { x, times, scale } => {
                if self.needs(*x) {
                    let gx = accumulate(&mut grads[*x], val(*x).numel());
                    for (o, chunk) in gx.iter_mut().zip(g.chunks(*times)) {
                        *o += scale * chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    let len = val(*a).numel();
                    let ga = accumulate(&mut grads[*a], len);
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                if self.needs(*logits) {
                    let v = val(*logits).shape[1];
                    let gl = accumulate(&mut grads[*logits], probs.len());
                    let s = g[0] / *count as f64;
                    for (i, (&t, &on)) in targets.iter().zip(mask).enumerate() {
                        if !on {
                            continue;
                        }
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[i * v + j] += s * (probs[i * v + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}
