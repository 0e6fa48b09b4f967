//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! are methods on the tape that take and return [`Var`] handles; each records
//! the inputs and whatever it saved for its backward rule. Calling
//! [`Tape::backward`] on a scalar walks the nodes in reverse creation order,
//! which is a valid reverse topological order because a node can only refer
//! to nodes created before it.
//!
//! ```
//! use emonet_core::autodiff::Tape;
//! use emonet_core::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap().with_grad());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
//! ```

mod conv;
pub(crate) mod linalg;
mod lstm;
mod norm;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

pub use lstm::{lstm_cell, LstmCellVars};
pub use norm::BatchNormStats;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::Tensor;
use linalg::gemm;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(0);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.id
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Sum(usize),
    Reshape(usize),
    SliceLast {
        input: usize,
        start: usize,
    },
    ConcatLast {
        a: usize,
        b: usize,
    },
    MapsToFrames(usize),
    SelectStep {
        input: usize,
        t: usize,
    },
    StackSteps(Vec<usize>),
    WeightedSum {
        weights: usize,
        seq: usize,
    },
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softmax {
        input: usize,
        axis: usize,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: Option<usize>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        pad: usize,
    },
    MaxPool2d {
        input: usize,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Dropout {
        input: usize,
        mask: Vec<f64>,
    },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

/// Recorded computation graph plus the gradient buffers filled by
/// [`Tape::backward`].
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, rg, Op::Leaf)
    }

    /// Records a copy of a learnable parameter.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), true, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "Var belongs to a different tape");
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient of the last `backward` call with respect to `v`, if `v`
    /// requires grad and was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        assert_eq!(v.tape, self.id, "Var belongs to a different tape");
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// The value of `v` with its gradient attached.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let mut t = self.value(v).clone();
        t.set_requires_grad(self.nodes[v.id].requires_grad);
        if let Some(g) = self.grad(v) {
            t.set_grad(g.to_vec())
                .expect("gradient shape tracks value shape");
        }
        t
    }

    /// FNV-1a hash of every discrete branch taken in the recorded graph:
    /// the sign of each relu input and each max-pool argmax. Two tapes built
    /// from nearby inputs share a signature iff they lie in the same
    /// piecewise-smooth region, which is what finite-difference checks need.
    pub fn branch_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                &Op::Relu(x) => {
                    for v in self.nodes[x].value.data() {
                        feed((*v > 0.0) as u64);
                    }
                }
                Op::MaxPool2d { argmax, .. } => argmax.iter().for_each(|&i| feed(i as u64)),
                _ => {}
            }
        }
        h
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn check(&self, op: &'static str, v: Var) -> Result<()> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(arg_err(op, "variable is not on this tape"));
        }
        Ok(())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.id].value.data()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check("add", a)?;
        self.check("add", b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Add(a.id, b.id)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check("mul", a)?;
        self.check("mul", b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(
                "mul",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::Mul(a.id, b.id)))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x.id))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check("reshape", x)?;
        let out = Tensor::new(shape, self.data(x).to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Reshape(x.id)))
    }

    /// `x[..., start..start + len]` along the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check("slice_last", x)?;
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| shape_err("slice_last", "scalar input"))?;
        if start + len > n {
            return Err(shape_err(
                "slice_last",
                format!("{start}+{len} exceeds {n}"),
            ));
        }
        let data = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let out = Tensor::new(&out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::SliceLast { input: x.id, start }))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check("concat_last", a)?;
        self.check("concat_last", b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(shape_err("concat_last", format!("{sa:?} vs {sb:?}")));
        }
        let (na, nb) = (*sa.last().unwrap(), *sb.last().unwrap());
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = na + nb;
        let mut data = Vec::with_capacity(self.value(a).numel() + self.value(b).numel());
        for (ra, rb) in self
            .data(a)
            .chunks(na.max(1))
            .zip(self.data(b).chunks(nb.max(1)))
        {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, rg, Op::ConcatLast { a: a.id, b: b.id }))
    }

    /// `[B, C, H, W]` feature maps to a `[B, W, C*H]` sequence: one frame per
    /// time column, channel-major within the frame.
    pub fn maps_to_frames(&mut self, x: Var) -> Result<Var> {
        self.check("maps_to_frames", x)?;
        let &[b, c, h, w] = self.shape(x) else {
            return Err(shape_err("maps_to_frames", "expected rank-4 input"));
        };
        let src = self.data(x);
        let mut data = vec![0.0; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                for hi in 0..h {
                    let row = &src[((bi * c + ci) * h + hi) * w..][..w];
                    for (wi, v) in row.iter().enumerate() {
                        data[(bi * w + wi) * c * h + ci * h + hi] = *v;
                    }
                }
            }
        }
        let out = Tensor::new(&[b, w, c * h], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::MapsToFrames(x.id)))
    }

    /// Step `t` of a `[B, T, F]` sequence as `[B, F]`.
    pub fn select_step(&mut self, x: Var, t: usize) -> Result<Var> {
        self.check("select_step", x)?;
        let &[b, steps, f] = self.shape(x) else {
            return Err(shape_err("select_step", "expected rank-3 input"));
        };
        if t >= steps {
            return Err(shape_err("select_step", format!("step {t} of {steps}")));
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(b * f);
        for bi in 0..b {
            data.extend_from_slice(&src[(bi * steps + t) * f..][..f]);
        }
        let out = Tensor::new(&[b, f], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::SelectStep { input: x.id, t }))
    }

    /// Stacks `T` tensors of shape `[B, F]` into `[B, T, F]`.
    pub fn stack_steps(&mut self, steps: &[Var]) -> Result<Var> {
        let first = *steps.first().ok_or(Error::Empty("stack_steps"))?;
        for &s in steps {
            self.check("stack_steps", s)?;
        }
        let &[b, f] = self.shape(first) else {
            return Err(shape_err("stack_steps", "expected rank-2 steps"));
        };
        if steps.iter().any(|&s| self.shape(s) != [b, f]) {
            return Err(shape_err("stack_steps", "steps differ in shape"));
        }
        let n = steps.len();
        let mut data = vec![0.0; b * n * f];
        for (t, &s) in steps.iter().enumerate() {
            for (bi, row) in self.data(s).chunks(f.max(1)).enumerate() {
                data[(bi * n + t) * f..][..f].copy_from_slice(row);
            }
        }
        let out = Tensor::new(&[b, n, f], data)?;
        let rg = steps.iter().any(|&s| self.rg(s));
        Ok(self.push(
            out,
            rg,
            Op::StackSteps(steps.iter().map(|s| s.id).collect()),
        ))
    }

    /// `out[b, :] = sum_t weights[b, t] * seq[b, t, :]`.
    pub fn weighted_sum(&mut self, weights: Var, seq: Var) -> Result<Var> {
        self.check("weighted_sum", weights)?;
        self.check("weighted_sum", seq)?;
        let &[b, t, d] = self.shape(seq) else {
            return Err(shape_err("weighted_sum", "sequence must be rank 3"));
        };
        if self.shape(weights) != [b, t] {
            return Err(shape_err(
                "weighted_sum",
                format!(
                    "weights {:?} vs sequence [{b}, {t}, {d}]",
                    self.shape(weights)
                ),
            ));
        }
        let (w, s) = (self.data(weights), self.data(seq));
        let mut data = vec![0.0; b * d];
        for bi in 0..b {
            let out = &mut data[bi * d..][..d];
            for ti in 0..t {
                let a = w[bi * t + ti];
                for (o, v) in out.iter_mut().zip(&s[(bi * t + ti) * d..][..d]) {
                    *o += a * v;
                }
            }
        }
        let out = Tensor::new(&[b, d], data)?;
        let rg = self.rg(weights) || self.rg(seq);
        Ok(self.push(
            out,
            rg,
            Op::WeightedSum {
                weights: weights.id,
                seq: seq.id,
            },
        ))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out =
            Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(out, rg, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x.id))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, libm::tanh, Op::Tanh(x.id))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x.id))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check("softmax", x)?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(arg_err(
                "softmax",
                format!("axis {axis} invalid for shape {shape:?}"),
            ));
        }
        let src = self.data(x);
        if src.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax"));
        }
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut m = f64::NEG_INFINITY;
                for k in 0..n {
                    m = m.max(src[base + k * inner]);
                }
                let mut z = 0.0;
                for k in 0..n {
                    let e = libm::exp(src[base + k * inner] - m);
                    data[base + k * inner] = e;
                    z += e;
                }
                for k in 0..n {
                    data[base + k * inner] /= z;
                }
            }
        }
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Softmax { input: x.id, axis }))
    }

    /// `input[N, n] * weight[m, n]^T + bias[m]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        self.check("linear", input)?;
        self.check("linear", weight)?;
        let &[rows, n] = self.shape(input) else {
            return Err(shape_err("linear", "input must be rank 2"));
        };
        let &[m, wn] = self.shape(weight) else {
            return Err(shape_err("linear", "weight must be rank 2"));
        };
        if wn != n {
            return Err(shape_err(
                "linear",
                format!("input width {n} vs weight width {wn}"),
            ));
        }
        let mut data = vec![0.0; rows * m];
        if let Some(b) = bias {
            self.check("linear", b)?;
            if self.shape(b) != [m] {
                return Err(shape_err(
                    "linear",
                    format!("bias {:?} vs {m} outputs", self.shape(b)),
                ));
            }
            let bd = self.data(b);
            for row in data.chunks_mut(m.max(1)) {
                row.copy_from_slice(bd);
            }
        }
        gemm(
            rows,
            n,
            m,
            self.data(input),
            false,
            self.data(weight),
            true,
            1.0,
            &mut data,
        );
        let out = Tensor::new(&[rows, m], data)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            rg,
            Op::Linear {
                input: input.id,
                weight: weight.id,
                bias: bias.map(|b| b.id),
            },
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check("cross_entropy", logits)?;
        let &[b, c] = self.shape(logits) else {
            return Err(shape_err("cross_entropy", "logits must be rank 2"));
        };
        if labels.len() != b {
            return Err(shape_err(
                "cross_entropy",
                format!("{} labels for batch of {b}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(arg_err(
                "cross_entropy",
                format!("label {bad} out of range for {c} classes"),
            ));
        }
        if b == 0 {
            return Err(Error::Empty("cross_entropy"));
        }
        let src = self.data(logits);
        let mut probs = vec![0.0; b * c];
        let mut total = 0.0;
        for (bi, row) in src.chunks(c).enumerate() {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, v) in probs[bi * c..][..c].iter_mut().zip(row) {
                *p = libm::exp(v - m);
                z += *p;
            }
            for p in &mut probs[bi * c..][..c] {
                *p /= z;
            }
            total += m + libm::log(z) - row[labels[bi]];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / b as f64),
            rg,
            Op::CrossEntropy {
                logits: logits.id,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate additively
    /// over every use of a value; buffers from an earlier call are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.tape != self.id || loss.id >= self.nodes.len() {
            return Err(Error::Backward("loss is not on this tape".into()));
        }
        if self.nodes[loss.id].value.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.id].value.shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.id].requires_grad {
            return Ok(());
        }
        self.grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            backprop(&self.nodes, &mut self.grads, id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

/// Gradient slot for `id`, allocated on first touch; `None` when `id` does
/// not require grad.
pub(crate) fn slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    let node = &nodes[id];
    let val = |i: usize| nodes[i].value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::Add(a, b) => {
            for i in [a, b] {
                if let Some(s) = slot(nodes, grads, i) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
        }
        &Op::Mul(a, b) => {
            if let Some(s) = slot(nodes, grads, a) {
                for ((s, g), y) in s.iter_mut().zip(g).zip(val(b)) {
                    *s += g * y;
                }
            }
            if let Some(s) = slot(nodes, grads, b) {
                for ((s, g), x) in s.iter_mut().zip(g).zip(val(a)) {
                    *s += g * x;
                }
            }
        }
        &Op::Sum(x) => {
            if let Some(s) = slot(nodes, grads, x) {
                s.iter_mut().for_each(|s| *s += g[0]);
            }
        }
        &Op::Reshape(x) => {
            if let Some(s) = slot(nodes, grads, x) {
                s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }
        }
        &Op::SliceLast { input, start } => {
            let n = *nodes[input].value.shape().last().unwrap();
            let len = *node.value.shape().last().unwrap();
            if let Some(s) = slot(nodes, grads, input) {
                if len > 0 {
                    for (row, grow) in s.chunks_mut(n).zip(g.chunks(len)) {
                        row[start..start + len]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(s, g)| *s += g);
                    }
                }
            }
        }
        &Op::ConcatLast { a, b } => {
            let na = *nodes[a].value.shape().last().unwrap();
            let nb = *nodes[b].value.shape().last().unwrap();
            let w = (na + nb).max(1);
            if let Some(s) = slot(nodes, grads, a) {
                if na > 0 {
                    for (row, grow) in s.chunks_mut(na).zip(g.chunks(w)) {
                        row.iter_mut().zip(&grow[..na]).for_each(|(s, g)| *s += g);
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, b) {
                if nb > 0 {
                    for (row, grow) in s.chunks_mut(nb).zip(g.chunks(w)) {
                        row.iter_mut().zip(&grow[na..]).for_each(|(s, g)| *s += g);
                    }
                }
            }
        }
        &Op::MapsToFrames(x) => {
            let &[b, c, h, w] = nodes[x].value.shape() else {
                unreachable!()
            };
            if let Some(s) = slot(nodes, grads, x) {
                for bi in 0..b {
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                s[((bi * c + ci) * h + hi) * w + wi] +=
                                    g[(bi * w + wi) * c * h + ci * h + hi];
                            }
                        }
                    }
                }
            }
        }
        &Op::SelectStep { input, t } => {
            let &[b, steps, f] = nodes[input].value.shape() else {
                unreachable!()
            };
            if let Some(s) = slot(nodes, grads, input) {
                for bi in 0..b {
                    s[(bi * steps + t) * f..][..f]
                        .iter_mut()
                        .zip(&g[bi * f..][..f])
                        .for_each(|(s, g)| *s += g);
                }
            }
        }
        Op::StackSteps(inputs) => {
            let &[b, n, f] = node.value.shape() else {
                unreachable!()
            };
            for (t, &i) in inputs.iter().enumerate() {
                if let Some(s) = slot(nodes, grads, i) {
                    for bi in 0..b {
                        s[bi * f..][..f]
                            .iter_mut()
                            .zip(&g[(bi * n + t) * f..][..f])
                            .for_each(|(s, g)| *s += g);
                    }
                }
            }
        }
        &Op::WeightedSum { weights, seq } => {
            let &[b, t, d] = nodes[seq].value.shape() else {
                unreachable!()
            };
            let (w, sq) = (val(weights), val(seq));
            if let Some(s) = slot(nodes, grads, weights) {
                for bi in 0..b {
                    for ti in 0..t {
                        let row = &sq[(bi * t + ti) * d..][..d];
                        s[bi * t + ti] += row
                            .iter()
                            .zip(&g[bi * d..][..d])
                            .map(|(x, g)| x * g)
                            .sum::<f64>();
                    }
                }
            }
            if let Some(s) = slot(nodes, grads, seq) {
                for bi in 0..b {
                    for ti in 0..t {
                        let a = w[bi * t + ti];
                        s[(bi * t + ti) * d..][..d]
                            .iter_mut()
                            .zip(&g[bi * d..][..d])
                            .for_each(|(s, g)| *s += a * g);
                    }
                }
            }
        }
        &Op::Relu(x) => {
            let xv = val(x);
            if let Some(s) = slot(nodes, grads, x) {
                for ((s, g), x) in s.iter_mut().zip(g).zip(xv) {
                    if *x > 0.0 {
                        *s += g;
                    }
                }
            }
        }
        &Op::Tanh(x) => {
            let y = node.value.data();
            if let Some(s) = slot(nodes, grads, x) {
                for ((s, g), y) in s.iter_mut().zip(g).zip(y) {
                    *s += g * (1.0 - y * y);
                }
            }
        }
        &Op::Sigmoid(x) => {
            let y = node.value.data();
            if let Some(s) = slot(nodes, grads, x) {
                for ((s, g), y) in s.iter_mut().zip(g).zip(y) {
                    *s += g * y * (1.0 - y);
                }
            }
        }
        &Op::Softmax { input, axis } => {
            let shape = node.value.shape();
            let n = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let outer: usize = shape[..axis].iter().product();
            let y = node.value.data();
            if let Some(s) = slot(nodes, grads, input) {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let dot: f64 = (0..n)
                            .map(|k| y[base + k * inner] * g[base + k * inner])
                            .sum();
                        for k in 0..n {
                            let j = base + k * inner;
                            s[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            }
        }
        &Op::Linear {
            input,
            weight,
            bias,
        } => {
            let &[rows, n] = nodes[input].value.shape() else {
                unreachable!()
            };
            let m = nodes[weight].value.shape()[0];
            if let Some(s) = slot(nodes, grads, input) {
                gemm(rows, m, n, g, false, val(weight), false, 1.0, s);
            }
            if let Some(s) = slot(nodes, grads, weight) {
                gemm(m, rows, n, g, true, val(input), false, 1.0, s);
            }
            if let Some(b) = bias {
                if let Some(s) = slot(nodes, grads, b) {
                    for row in g.chunks(m.max(1)) {
                        s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let c = nodes[*logits].value.shape()[1];
            let scale = g[0] / labels.len() as f64;
            if let Some(s) = slot(nodes, grads, *logits) {
                for (bi, &l) in labels.iter().enumerate() {
                    for k in 0..c {
                        let onehot = if k == l { 1.0 } else { 0.0 };
                        s[bi * c + k] += scale * (probs[bi * c + k] - onehot);
                    }
                }
            }
        }
        &Op::Conv2d {
            input,
            weight,
            bias,
            pad,
        } => conv::conv2d_backward(nodes, grads, input, weight, bias, pad, g),
        Op::MaxPool2d { input, argmax } => {
            if let Some(s) = slot(nodes, grads, *input) {
                for (&src, g) in argmax.iter().zip(g) {
                    s[src] += g;
                }
            }
        }
        Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            training,
        } => norm::batchnorm_backward(
            nodes, grads, *input, *gamma, *beta, xhat, inv_std, *training, g,
        ),
        Op::Dropout { input, mask } => {
            if let Some(s) = slot(nodes, grads, *input) {
                for ((s, g), m) in s.iter_mut().zip(g).zip(mask) {
                    *s += g * m;
                }
            }
        }
    }
}
