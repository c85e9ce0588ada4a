//! Reverse-mode gradient tape.
//!
//! Every op appends a node holding its output value and enough information
//! to run its backward rule. [`Tape::backward`] walks the nodes in exact
//! reverse execution order, accumulating gradients per node.

use std::sync::Arc;

use super::tensor::{matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Probability clamp used by [`Tape::bce_loss`].
pub const BCE_EPS: f64 = 1e-7;

/// Denominator floor for raw-ratio normalisation.
pub const RATIO_FLOOR: f64 = 1e-8;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Sigmoid,
    LeakyRelu(f64),
    /// ELU with alpha = 1.
    Elu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    MaskedSoftmax(Var, Arc<Vec<bool>>),
    SoftmaxAxis0(Var),
    RatioAxis0 {
        x: Var,
        active: Option<Arc<Vec<bool>>>,
        denom: Vec<f64>,
        guarded: Vec<bool>,
    },
    SumAxis0(Var),
    SumAll(Var),
    Reshape(Var),
    Transpose(Var),
    StackRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    OuterAdd(Var, Var),
    Gather(Var, Arc<Vec<usize>>),
    RowDot(Var, Var),
    RowCosine(Var, Var),
    Segment {
        x: Var,
        offsets: Arc<Vec<usize>>,
        kind: Reduce,
        argmax: Vec<Option<usize>>,
    },
    Bce(Var, Arc<Vec<f64>>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`cols` bias to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let c = ta.cols();
        if tb.numel() != c {
            return Err(Error::shape("add_row", ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(tb.data()).map(|(x, y)| x + y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(a, bias), &[a, bias]))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        if let Activation::LeakyRelu(s) = kind {
            if !(s > 0.0 && s < 1.0) {
                return Err(Error::Contract(format!(
                    "leaky_relu slope must be in (0,1), got {s}"
                )));
            }
        }
        let tx = self.value(x);
        check_finite(tx, "activation input")?;
        let data = tx.data().iter().map(|&v| kind.apply(v)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Act(x, kind), &[x]))
    }

    /// Row-wise softmax restricted to `mask`; masked entries are exactly zero.
    pub fn masked_softmax(&mut self, scores: Var, mask: Arc<Vec<bool>>) -> Result<Var> {
        let ts = self.value(scores);
        if mask.len() != ts.numel() {
            return Err(Error::shape("masked_softmax", ts.shape(), &[mask.len()]));
        }
        let c = ts.cols();
        let mut out = vec![0.0; ts.numel()];
        for (r, (row, orow)) in ts.data().chunks(c).zip(out.chunks_mut(c)).enumerate() {
            let m = &mask[r * c..(r + 1) * c];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(format!(
                    "masked_softmax row {r} has no unmasked entry"
                )));
            }
            let mut sum = 0.0;
            for ((o, &v), &keep) in orow.iter_mut().zip(row).zip(m) {
                if keep {
                    *o = (v - max).exp();
                    sum += *o;
                }
            }
            orow.iter_mut().for_each(|o| *o /= sum);
        }
        let out = Tensor::new(ts.shape().to_vec(), out)?;
        check_finite(&out, "masked_softmax")?;
        Ok(self.push(out, Op::MaskedSoftmax(scores, mask), &[scores]))
    }

    /// Softmax down each column, over the rows marked active (all rows when
    /// `active` is `None`). Inactive rows are exactly zero.
    pub fn softmax_axis0(&mut self, x: Var, active: Option<Arc<Vec<bool>>>) -> Result<Var> {
        let tx = self.value(x);
        let (k, m) = (tx.rows(), tx.cols());
        let is_on = |j: usize| active.as_ref().is_none_or(|a| a[j]);
        if let Some(a) = &active {
            if a.len() != k {
                return Err(Error::shape("softmax_axis0", tx.shape(), &[a.len()]));
            }
            if !a.iter().any(|&b| b) {
                return Err(Error::Contract("softmax_axis0 with every row masked".into()));
            }
        }
        let d = tx.data();
        let mut out = vec![0.0; k * m];
        for z in 0..m {
            let max = (0..k)
                .filter(|&j| is_on(j))
                .map(|j| d[j * m + z])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in (0..k).filter(|&j| is_on(j)) {
                let e = (d[j * m + z] - max).exp();
                out[j * m + z] = e;
                sum += e;
            }
            for j in (0..k).filter(|&j| is_on(j)) {
                out[j * m + z] /= sum;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        check_finite(&out, "softmax_axis0")?;
        Ok(self.push(out, Op::SoftmaxAxis0(x), &[x]))
    }

    /// Divides each active entry by its column's active sum; the sum's
    /// magnitude is floored at [`RATIO_FLOOR`].
    pub fn ratio_axis0(&mut self, x: Var, active: Option<Arc<Vec<bool>>>) -> Result<Var> {
        let tx = self.value(x);
        let (k, m) = (tx.rows(), tx.cols());
        let is_on = |j: usize| active.as_ref().is_none_or(|a| a[j]);
        if let Some(a) = &active {
            if a.len() != k {
                return Err(Error::shape("ratio_axis0", tx.shape(), &[a.len()]));
            }
        }
        let d = tx.data();
        let mut out = vec![0.0; k * m];
        let mut denom = vec![0.0; m];
        let mut guarded = vec![false; m];
        for z in 0..m {
            let s: f64 = (0..k).filter(|&j| is_on(j)).map(|j| d[j * m + z]).sum();
            let s = if s.abs() < RATIO_FLOOR {
                guarded[z] = true;
                if s < 0.0 {
                    -RATIO_FLOOR
                } else {
                    RATIO_FLOOR
                }
            } else {
                s
            };
            denom[z] = s;
            for j in (0..k).filter(|&j| is_on(j)) {
                out[j * m + z] = d[j * m + z] / s;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        check_finite(&out, "ratio_axis0")?;
        Ok(self.push(
            out,
            Op::RatioAxis0 {
                x,
                active,
                denom,
                guarded,
            },
            &[x],
        ))
    }

    /// Column sums: `k x m -> 1 x m`.
    pub fn sum_axis0(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let m = tx.cols();
        let mut out = vec![0.0; m];
        for row in tx.data().chunks(m) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        let out = Tensor::matrix(1, m, out).expect("positive");
        self.push(out, Op::SumAxis0(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x), &[x])
    }

    /// Flattens each input into one row of the output.
    pub fn stack_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or(Error::Empty("stack_rows inputs"))?;
        let len = self.value(*first).numel();
        let mut data = Vec::with_capacity(len * xs.len());
        for &x in xs {
            let t = self.value(x);
            if t.numel() != len {
                return Err(Error::shape("stack_rows", self.value(*first).shape(), t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(xs.len(), len, data)?;
        Ok(self.push(out, Op::StackRows(xs.to_vec()), xs))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or(Error::Empty("concat_cols inputs"))?;
        let rows = self.value(*first).rows();
        for &x in xs {
            if self.value(x).rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    self.value(*first).shape(),
                    self.value(x).shape(),
                ));
            }
        }
        let total: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(r));
            }
        }
        let out = Tensor::matrix(rows, total, data)?;
        Ok(self.push(out, Op::ConcatCols(xs.to_vec()), xs))
    }

    /// `out[i][j] = a[i] + b[j]`.
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != 1 || tb.cols() != 1 {
            return Err(Error::shape("outer_add", ta.shape(), tb.shape()));
        }
        let (n, m) = (ta.numel(), tb.numel());
        let mut out = Vec::with_capacity(n * m);
        for &x in ta.data() {
            out.extend(tb.data().iter().map(|y| x + y));
        }
        let out = Tensor::matrix(n, m, out)?;
        Ok(self.push(out, Op::OuterAdd(a, b), &[a, b]))
    }

    /// Row lookup; the backward pass scatters into the touched rows only.
    pub fn gather_rows(&mut self, table: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let t = self.value(table);
        let (v, c) = (t.rows(), t.cols());
        if idx.is_empty() {
            return Err(Error::Empty("gather_rows indices"));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= v {
                return Err(Error::Contract(format!("row {i} out of range for {v} rows")));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(idx.len(), c, data)?;
        Ok(self.push(out, Op::Gather(table, idx), &[table]))
    }

    /// Row-wise dot products: `m x c, m x c -> m x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("row_dot", ta.shape(), tb.shape()));
        }
        let c = ta.cols();
        let data = ta
            .data()
            .chunks(c)
            .zip(tb.data().chunks(c))
            .map(|(x, y)| dot(x, y))
            .collect();
        let out = Tensor::matrix(ta.rows(), 1, data)?;
        Ok(self.push(out, Op::RowDot(a, b), &[a, b]))
    }

    /// Row-wise cosine similarity; rows with a zero vector give 0.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("row_cosine", ta.shape(), tb.shape()));
        }
        let c = ta.cols();
        let data = ta
            .data()
            .chunks(c)
            .zip(tb.data().chunks(c))
            .map(|(x, y)| cosine(x, y))
            .collect();
        let out = Tensor::matrix(ta.rows(), 1, data)?;
        Ok(self.push(out, Op::RowCosine(a, b), &[a, b]))
    }

    /// Reduces consecutive segments of an `M x 1` column. `offsets` has one
    /// entry per segment plus a final `M`; empty segments reduce to 0.
    pub fn segment_reduce(&mut self, x: Var, offsets: Arc<Vec<usize>>, kind: Reduce) -> Result<Var> {
        let tx = self.value(x);
        if tx.cols() != 1 || offsets.last() != Some(&tx.numel()) || offsets.first() != Some(&0) {
            return Err(Error::shape("segment_reduce", tx.shape(), &[offsets.len()]));
        }
        let d = tx.data();
        let nseg = offsets.len() - 1;
        let mut out = vec![0.0; nseg];
        let mut argmax = vec![None; nseg];
        for s in 0..nseg {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            if hi < lo {
                return Err(Error::Contract("segment offsets must be non-decreasing".into()));
            }
            if hi == lo {
                continue;
            }
            let seg = &d[lo..hi];
            out[s] = match kind {
                Reduce::Sum => seg.iter().sum(),
                Reduce::Mean => seg.iter().sum::<f64>() / seg.len() as f64,
                Reduce::Max => {
                    let mut best = 0;
                    for (i, &v) in seg.iter().enumerate() {
                        if v > seg[best] {
                            best = i;
                        }
                    }
                    argmax[s] = Some(lo + best);
                    seg[best]
                }
            };
        }
        let out = Tensor::matrix(nseg, 1, out)?;
        Ok(self.push(
            out,
            Op::Segment {
                x,
                offsets,
                kind,
                argmax,
            },
            &[x],
        ))
    }

    /// Mean binary cross-entropy with probabilities clamped to
    /// `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce_loss(&mut self, p: Var, labels: Arc<Vec<f64>>) -> Result<Var> {
        let tp = self.value(p);
        if tp.numel() != labels.len() {
            return Err(Error::shape("bce_loss", tp.shape(), &[labels.len()]));
        }
        check_finite(tp, "bce_loss input")?;
        let n = labels.len() as f64;
        let loss = tp
            .data()
            .iter()
            .zip(labels.iter())
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        Ok(self.push(Tensor::scalar(loss), Op::Bce(p, labels), &[p]))
    }

    /// Backpropagates from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let t = self.value(output);
        if t.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                t.shape()
            )));
        }
        self.backward_with(output, vec![1.0])
    }

    pub fn backward_with(&self, output: Var, seed: Vec<f64>) -> Result<Gradients> {
        if seed.len() != self.value(output).numel() {
            return Err(Error::shape("backward seed", self.shape(output), &[seed.len()]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        // Accumulates into the gradient buffer of `v`, allocating on first use.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(buf);
        };
        let add_into = |buf: &mut [f64], src: &[f64]| {
            buf.iter_mut().zip(src).for_each(|(b, s)| *b += s);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if needs(*a) {
                    let da = matmul_nt(g, tb.data(), m, n, k);
                    acc(*a, &mut |buf| add_into(buf, &da));
                }
                if needs(*b) {
                    let db = matmul_tn(ta.data(), g, m, k, n);
                    acc(*b, &mut |buf| add_into(buf, &db));
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::AddRow(a, bias) => {
                acc(*a, &mut |buf| add_into(buf, g));
                let c = val(*bias).numel();
                acc(*bias, &mut |buf| {
                    for row in g.chunks(c) {
                        add_into(buf, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &mut |buf| {
                    for ((o, gi), y) in buf.iter_mut().zip(g).zip(tb.data()) {
                        *o += gi * y;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, gi), x) in buf.iter_mut().zip(g).zip(ta.data()) {
                        *o += gi * x;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |buf| {
                buf.iter_mut().zip(g).for_each(|(o, gi)| *o += gi * c);
            }),
            Op::Act(x, kind) => {
                let tx = val(*x);
                let y = node.value.data();
                acc(*x, &mut |buf| {
                    for (i, o) in buf.iter_mut().enumerate() {
                        *o += g[i] * kind.derivative(tx.data()[i], y[i]);
                    }
                });
            }
            Op::MaskedSoftmax(x, mask) => {
                let y = node.value.data();
                let c = node.value.cols();
                acc(*x, &mut |buf| {
                    for r in 0..node.value.rows() {
                        let span = r * c..(r + 1) * c;
                        let inner: f64 = y[span.clone()]
                            .iter()
                            .zip(&g[span.clone()])
                            .map(|(a, b)| a * b)
                            .sum();
                        for i in span {
                            if mask[i] {
                                buf[i] += y[i] * (g[i] - inner);
                            }
                        }
                    }
                });
            }
            Op::SoftmaxAxis0(x) => {
                // Inactive rows have y = 0, so they drop out of the rule.
                let y = node.value.data();
                let (k, m) = (node.value.rows(), node.value.cols());
                acc(*x, &mut |buf| {
                    for z in 0..m {
                        let inner: f64 = (0..k).map(|j| y[j * m + z] * g[j * m + z]).sum();
                        for j in 0..k {
                            let i = j * m + z;
                            buf[i] += y[i] * (g[i] - inner);
                        }
                    }
                });
            }
            Op::RatioAxis0 {
                x,
                active,
                denom,
                guarded,
            } => {
                let y = node.value.data();
                let (k, m) = (node.value.rows(), node.value.cols());
                let is_on = |j: usize| active.as_ref().is_none_or(|a| a[j]);
                acc(*x, &mut |buf| {
                    for z in 0..m {
                        let d = denom[z];
                        let inner: f64 = if guarded[z] {
                            0.0
                        } else {
                            (0..k).filter(|&j| is_on(j)).map(|j| g[j * m + z] * y[j * m + z]).sum()
                        };
                        for j in (0..k).filter(|&j| is_on(j)) {
                            buf[j * m + z] += (g[j * m + z] - inner) / d;
                        }
                    }
                });
            }
            Op::SumAxis0(x) => {
                let m = node.value.cols();
                acc(*x, &mut |buf| {
                    for row in buf.chunks_mut(m) {
                        add_into(row, g);
                    }
                });
            }
            Op::SumAll(x) => acc(*x, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            Op::Reshape(x) => acc(*x, &mut |buf| add_into(buf, g)),
            Op::Transpose(x) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                acc(*x, &mut |buf| {
                    // buf is c x r
                    for i in 0..r {
                        for j in 0..c {
                            buf[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::StackRows(xs) => {
                let len = node.value.cols();
                for (j, x) in xs.iter().enumerate() {
                    acc(*x, &mut |buf| add_into(buf, &g[j * len..(j + 1) * len]));
                }
            }
            Op::ConcatCols(xs) => {
                let total = node.value.cols();
                let mut start = 0;
                for x in xs {
                    let c = val(*x).cols();
                    acc(*x, &mut |buf| {
                        for (r, row) in buf.chunks_mut(c).enumerate() {
                            add_into(row, &g[r * total + start..r * total + start + c]);
                        }
                    });
                    start += c;
                }
            }
            Op::OuterAdd(a, b) => {
                let m = node.value.cols();
                acc(*a, &mut |buf| {
                    for (i, o) in buf.iter_mut().enumerate() {
                        *o += g[i * m..(i + 1) * m].iter().sum::<f64>();
                    }
                });
                acc(*b, &mut |buf| {
                    for row in g.chunks(m) {
                        add_into(buf, row);
                    }
                });
            }
            Op::Gather(table, idx) => {
                let c = node.value.cols();
                acc(*table, &mut |buf| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut buf[i * c..(i + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let c = ta.cols();
                acc(*a, &mut |buf| {
                    for (r, row) in buf.chunks_mut(c).enumerate() {
                        row.iter_mut().zip(tb.row(r)).for_each(|(o, y)| *o += g[r] * y);
                    }
                });
                acc(*b, &mut |buf| {
                    for (r, row) in buf.chunks_mut(c).enumerate() {
                        row.iter_mut().zip(ta.row(r)).for_each(|(o, x)| *o += g[r] * x);
                    }
                });
            }
            Op::RowCosine(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let c = ta.cols();
                let y = node.value.data();
                // d cos / dx = y_vec / (|x||y|) - cos * x / |x|^2
                let grad_side = |x: &[f64], other: &[f64], cos: f64, out: &mut [f64], gr: f64| {
                    let nx = dot(x, x).sqrt();
                    let no = dot(other, other).sqrt();
                    if nx == 0.0 || no == 0.0 {
                        return;
                    }
                    for ((o, xi), oi) in out.iter_mut().zip(x).zip(other) {
                        *o += gr * (oi / (nx * no) - cos * xi / (nx * nx));
                    }
                };
                acc(*a, &mut |buf| {
                    for (r, row) in buf.chunks_mut(c).enumerate() {
                        grad_side(ta.row(r), tb.row(r), y[r], row, g[r]);
                    }
                });
                acc(*b, &mut |buf| {
                    for (r, row) in buf.chunks_mut(c).enumerate() {
                        grad_side(tb.row(r), ta.row(r), y[r], row, g[r]);
                    }
                });
            }
            Op::Segment {
                x,
                offsets,
                kind,
                argmax,
            } => acc(*x, &mut |buf| {
                for s in 0..offsets.len() - 1 {
                    let (lo, hi) = (offsets[s], offsets[s + 1]);
                    match kind {
                        Reduce::Sum => buf[lo..hi].iter_mut().for_each(|o| *o += g[s]),
                        Reduce::Mean => {
                            let w = g[s] / (hi - lo).max(1) as f64;
                            buf[lo..hi].iter_mut().for_each(|o| *o += w);
                        }
                        Reduce::Max => {
                            if let Some(i) = argmax[s] {
                                buf[i] += g[s];
                            }
                        }
                    }
                }
            }),
            Op::Bce(p, labels) => {
                let tp = val(*p);
                let n = labels.len() as f64;
                acc(*p, &mut |buf| {
                    for ((o, &pv), &y) in buf.iter_mut().zip(tp.data()).zip(labels.iter()) {
                        if (BCE_EPS..=1.0 - BCE_EPS).contains(&pv) {
                            *o += g[0] * (-y / pv + (1.0 - y) / (1.0 - pv)) / n;
                        }
                    }
                });
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let den = dot(a, a).sqrt() * dot(b, b).sqrt();
    if den == 0.0 {
        0.0
    } else {
        dot(a, b) / den
    }
}
