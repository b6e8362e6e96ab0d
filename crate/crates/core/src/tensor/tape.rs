//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every differentiable operation appends one node holding its output value and enough
//! bookkeeping to push gradients back to its inputs. Nodes are recorded in execution order,
//! so a reverse sweep over the node list is a valid topological order for backpropagation.

use std::cell::RefCell;
use std::fmt;

use super::dense::{gemm, patch_permute, Tensor};
use crate::error::{Error, Result};

/// Recording of one forward computation.
///
/// A tape is confined to a single thread. Independent graphs belong on independent tapes.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only leaves keep one across `backward` calls.
    grad: Option<Vec<f64>>,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: usize,
        rows: usize,
        cols: usize,
    },
    AddBias {
        x: usize,
        bias: usize,
    },
    ScaleBy {
        x: usize,
        s: usize,
    },
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Sqrt {
        x: usize,
        eps: f64,
    },
    ClampMin {
        x: usize,
        min: f64,
    },
    Softmax {
        x: usize,
        axis: usize,
    },
    MaskFill {
        x: usize,
        keep: Vec<bool>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    SumAxis {
        x: usize,
        axis: usize,
        mean: bool,
    },
    Expand(usize),
    Index {
        x: usize,
        i: usize,
    },
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    Upsample {
        x: usize,
        factor: usize,
    },
    Patchify {
        x: usize,
        patch: usize,
    },
    ExpandChannels {
        x: usize,
        channels: usize,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives gradients.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients (data, frozen weights, routing inputs).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Accumulated gradient of a leaf, if any has been propagated to it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Clears every leaf gradient.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Propagates d(loss)/d(leaf) into every gradient-tracking leaf, adding to what is there.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut leaf_updates: Vec<(usize, Vec<f64>)> = Vec::new();
        {
            let nodes = self.nodes.borrow();
            let root = &nodes[loss.id];
            if root.value.len() != 1 {
                return Err(Error::Contract(format!(
                    "backward needs a scalar loss, got shape {:?}",
                    root.value.shape()
                )));
            }
            if !root.requires_grad {
                return Ok(());
            }
            let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
            adj[loss.id] = Some(vec![1.0]);
            for id in (0..=loss.id).rev() {
                let Some(g) = adj[id].take() else { continue };
                let node = &nodes[id];
                if !node.requires_grad {
                    continue;
                }
                if let Op::Leaf = node.op {
                    leaf_updates.push((id, g));
                } else {
                    propagate(&nodes, id, &g, &mut adj);
                }
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in leaf_updates {
            match &mut nodes[id].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn unary(&self, x: Var<'_>, value: Tensor, op: Op) -> Var<'_> {
        let rg = self.requires_grad(x.id);
        self.push(value, op, rg)
    }
}

/// Gradient buffer for `id`, created on first use; `None` when `id` does not track gradients.
fn slot<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f64>>], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(adj[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]))
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let out = nodes[id].value.data();
    let val = |i: usize| nodes[i].value.data();
    match &nodes[id].op {
        Op::Leaf => unreachable!(),
        Op::Add(a, b) => {
            for &i in &[*a, *b] {
                if let Some(d) = slot(nodes, adj, i) {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(d) = slot(nodes, adj, *a) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = slot(nodes, adj, *b) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d -= g);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(d) = slot(nodes, adj, *a) {
                for j in 0..g.len() {
                    d[j] += g[j] * bv[j];
                }
            }
            if let Some(d) = slot(nodes, adj, *b) {
                for j in 0..g.len() {
                    d[j] += g[j] * av[j];
                }
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(d) = slot(nodes, adj, *a) {
                for j in 0..g.len() {
                    d[j] += g[j] / bv[j];
                }
            }
            if let Some(d) = slot(nodes, adj, *b) {
                for j in 0..g.len() {
                    d[j] -= g[j] * av[j] / (bv[j] * bv[j]);
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(d) = slot(nodes, adj, *x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
            }
        }
        Op::Shift(x) | Op::Reshape(x) => {
            if let Some(d) = slot(nodes, adj, *x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }
        &Op::MatMul { a, b, m, k, n } => {
            let (av, bv) = (val(a).to_vec(), val(b).to_vec());
            if let Some(d) = slot(nodes, adj, a) {
                gemm(m, n, k, g, false, &bv, true, 1.0, d);
            }
            if let Some(d) = slot(nodes, adj, b) {
                gemm(k, m, n, &av, true, g, false, 1.0, d);
            }
        }
        &Op::Transpose { x, rows, cols } => {
            if let Some(d) = slot(nodes, adj, x) {
                for i in 0..rows {
                    for j in 0..cols {
                        d[i * cols + j] += g[j * rows + i];
                    }
                }
            }
        }
        &Op::AddBias { x, bias } => {
            if let Some(d) = slot(nodes, adj, x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            if let Some(d) = slot(nodes, adj, bias) {
                let n = d.len();
                for row in g.chunks(n) {
                    d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            }
        }
        &Op::ScaleBy { x, s } => {
            let sv = val(s)[0];
            let xv = val(x).to_vec();
            if let Some(d) = slot(nodes, adj, x) {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g * sv);
            }
            if let Some(d) = slot(nodes, adj, s) {
                d[0] += g.iter().zip(&xv).map(|(g, x)| g * x).sum::<f64>();
            }
        }
        Op::Relu(x) => {
            let xv = val(*x).to_vec();
            if let Some(d) = slot(nodes, adj, *x) {
                for j in 0..g.len() {
                    if xv[j] > 0.0 {
                        d[j] += g[j];
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(d) = slot(nodes, adj, *x) {
                for j in 0..g.len() {
                    d[j] += g[j] * out[j] * (1.0 - out[j]);
                }
            }
        }
        Op::Exp(x) => {
            if let Some(d) = slot(nodes, adj, *x) {
                for j in 0..g.len() {
                    d[j] += g[j] * out[j];
                }
            }
        }
        &Op::Sqrt { x, eps } => {
            let xv = val(x).to_vec();
            if let Some(d) = slot(nodes, adj, x) {
                for j in 0..g.len() {
                    d[j] += g[j] * 0.5 / (xv[j] + eps).sqrt();
                }
            }
        }
        &Op::ClampMin { x, min } => {
            let xv = val(x).to_vec();
            if let Some(d) = slot(nodes, adj, x) {
                for j in 0..g.len() {
                    if xv[j] > min {
                        d[j] += g[j];
                    }
                }
            }
        }
        &Op::Softmax { x, axis } => {
            let (outer, len, inner) = split_axis(nodes[id].value.shape(), axis);
            if let Some(d) = slot(nodes, adj, x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| out[at(j)] * g[at(j)]).sum();
                        for j in 0..len {
                            d[at(j)] += out[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::MaskFill { x, keep } => {
            if let Some(d) = slot(nodes, adj, *x) {
                for j in 0..g.len() {
                    if keep[j] {
                        d[j] += g[j];
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(nodes[id].value.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.shape()[*axis];
                if let Some(d) = slot(nodes, adj, p) {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        for j in 0..len * inner {
                            d[dst + j] += g[src + j];
                        }
                    }
                }
                offset += len;
            }
        }
        &Op::Narrow { x, axis, start } => {
            let in_shape = nodes[x].value.shape().to_vec();
            let (outer, total, inner) = split_axis(&in_shape, axis);
            let len = nodes[id].value.shape()[axis];
            if let Some(d) = slot(nodes, adj, x) {
                for o in 0..outer {
                    let dst = (o * total + start) * inner;
                    let src = o * len * inner;
                    for j in 0..len * inner {
                        d[dst + j] += g[src + j];
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(d) = slot(nodes, adj, *x) {
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Expand(x) => {
            if let Some(d) = slot(nodes, adj, *x) {
                d[0] += g.iter().sum::<f64>();
            }
        }
        Op::Mean(x) => {
            let n = nodes[*x].value.len() as f64;
            if let Some(d) = slot(nodes, adj, *x) {
                d.iter_mut().for_each(|d| *d += g[0] / n);
            }
        }
        &Op::SumAxis { x, axis, mean } => {
            let (outer, len, inner) = split_axis(nodes[x].value.shape(), axis);
            let scale = if mean { 1.0 / len as f64 } else { 1.0 };
            if let Some(d) = slot(nodes, adj, x) {
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            d[(o * len + j) * inner + i] += g[o * inner + i] * scale;
                        }
                    }
                }
            }
        }
        &Op::Index { x, i } => {
            if let Some(d) = slot(nodes, adj, x) {
                d[i] += g[0];
            }
        }
        Op::GatherRows { table, ids } => {
            let width = nodes[*table].value.shape()[1];
            if let Some(d) = slot(nodes, adj, *table) {
                for (r, &t) in ids.iter().enumerate() {
                    for j in 0..width {
                        d[t * width + j] += g[r * width + j];
                    }
                }
            }
        }
        &Op::Upsample { x, factor } => {
            let (gh, gw) = {
                let s = nodes[x].value.shape();
                (s[0], s[1])
            };
            let w = gw * factor;
            if let Some(d) = slot(nodes, adj, x) {
                for y in 0..gh * factor {
                    for xx in 0..w {
                        d[(y / factor) * gw + xx / factor] += g[y * w + xx];
                    }
                }
            }
        }
        &Op::Patchify { x, patch } => {
            let s = nodes[x].value.shape().to_vec();
            if let Some(d) = slot(nodes, adj, x) {
                patch_permute(s[0], s[1], s[2], patch, |src, dst| d[src] += g[dst]);
            }
        }
        &Op::ExpandChannels { x, channels } => {
            if let Some(d) = slot(nodes, adj, x) {
                for (p, dp) in d.iter_mut().enumerate() {
                    *dp += g[p * channels..(p + 1) * channels].iter().sum::<f64>();
                }
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let classes = nodes[*logits].value.shape()[1];
            let scale = g[0] / labels.len() as f64;
            if let Some(d) = slot(nodes, adj, *logits) {
                for (r, &label) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let onehot = if c == label { 1.0 } else { 0.0 };
                        d[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                    }
                }
            }
        }
    }
}

// Arithmetic methods return `Result` for shape errors, so they cannot be the std operator traits.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn item(&self) -> f64 {
        self.with_value(|t| t.item())
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            if a.shape() != b.shape() {
                return Err(Error::dim(name, a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(value, op(self.id, other.id), rg))
    }

    fn map(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let value = self.with_value(|t| t.map(f));
        self.tape.unary(self, value, op)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.map(|x| c * x, Op::Scale(self.id, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.map(|x| x + c, Op::Shift(self.id))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self).expect("same shape")
    }

    /// ReLU; the derivative at exactly zero is taken as zero.
    pub fn relu(self) -> Var<'t> {
        self.map(|x| if x > 0.0 { x } else { 0.0 }, Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.map(
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(self.id),
        )
    }

    pub fn exp(self) -> Var<'t> {
        self.map(f64::exp, Op::Exp(self.id))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.map(f64::sqrt, Op::Sqrt { x: self.id, eps: 0.0 })
    }

    /// Square root whose derivative is evaluated at `x + eps`, keeping it finite at zero
    /// while the forward value stays exact.
    pub fn guarded_sqrt(self, eps: f64) -> Var<'t> {
        self.map(f64::sqrt, Op::Sqrt { x: self.id, eps })
    }

    pub fn clamp_min(self, min: f64) -> Var<'t> {
        self.map(move |x| x.max(min), Op::ClampMin { x: self.id, min })
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (value, m, k, n) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let (m, k, k2, n) = match (a.shape(), b.shape()) {
                (&[m, k], &[k2, n]) => (m, k, k2, n),
                (sa, sb) => return Err(Error::dim("matmul", sa, sb)),
            };
            if k != k2 {
                return Err(Error::dim("matmul", a.shape(), b.shape()));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
            (Tensor::new(vec![m, n], out)?, m, k, n)
        };
        let rg = self.requires_grad() || other.requires_grad();
        let op = Op::MatMul {
            a: self.id,
            b: other.id,
            m,
            k,
            n,
        };
        Ok(self.tape.push(value, op, rg))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let (value, rows, cols) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let (rows, cols) = match *x.shape() {
                [r, c] => (r, c),
                ref s => return Err(Error::dim("transpose", s, &[0, 0])),
            };
            let d = x.data();
            let mut out = vec![0.0; rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    out[j * rows + i] = d[i * cols + j];
                }
            }
            (Tensor::new(vec![cols, rows], out)?, rows, cols)
        };
        let op = Op::Transpose { x: self.id, rows, cols };
        Ok(self.tape.unary(self, value, op))
    }

    /// Adds a `[n]` bias to every row of a `[..., n]` tensor.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (x, b) = (&nodes[self.id].value, &nodes[bias.id].value);
            if b.rank() != 1 || x.shape().last() != Some(&b.len()) {
                return Err(Error::dim("add_bias", x.shape(), b.shape()));
            }
            let mut out = x.data().to_vec();
            for row in out.chunks_mut(b.len()) {
                row.iter_mut().zip(b.data()).for_each(|(o, b)| *o += b);
            }
            Tensor::new(x.shape().to_vec(), out)?
        };
        let rg = self.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            value,
            Op::AddBias {
                x: self.id,
                bias: bias.id,
            },
            rg,
        ))
    }

    /// Multiplies every element by the single element of `s`.
    pub fn scale_by(self, s: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (x, sv) = (&nodes[self.id].value, &nodes[s.id].value);
            if sv.len() != 1 {
                return Err(Error::dim("scale_by", x.shape(), sv.shape()));
            }
            let c = sv.item();
            x.map(|v| v * c)
        };
        let rg = self.requires_grad() || s.requires_grad();
        Ok(self.tape.push(value, Op::ScaleBy { x: self.id, s: s.id }, rg))
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::dim(op, &shape, &[axis]));
        }
        Ok(shape)
    }

    /// Softmax along `axis`, computed after subtracting each slice's maximum.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let shape = self.check_axis(axis, "softmax")?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let value = self.with_value(|x| {
            let d = x.data();
            let mut out = vec![0.0; d.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let max = (0..len).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for j in 0..len {
                        let e = (d[at(j)] - max).exp();
                        out[at(j)] = e;
                        total += e;
                    }
                    for j in 0..len {
                        out[at(j)] /= total;
                    }
                }
            }
            Tensor::new(shape.clone(), out).expect("softmax shape")
        });
        Ok(self.tape.unary(self, value, Op::Softmax { x: self.id, axis }))
    }

    /// Replaces entries whose `keep` flag is false with negative infinity.
    pub fn mask_fill(self, keep: &[bool]) -> Result<Var<'t>> {
        let value = self.with_value(|x| {
            if keep.len() != x.len() {
                return Err(Error::dim("mask_fill", x.shape(), &[keep.len()]));
            }
            let data = x
                .data()
                .iter()
                .zip(keep)
                .map(|(&v, &k)| if k { v } else { f64::NEG_INFINITY })
                .collect();
            Tensor::new(x.shape().to_vec(), data)
        })?;
        let op = Op::MaskFill {
            x: self.id,
            keep: keep.to_vec(),
        };
        Ok(self.tape.unary(self, value, op))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tape = first.tape;
        let value = {
            let nodes = tape.nodes.borrow();
            let base = nodes[first.id].value.shape().to_vec();
            if axis >= base.len() {
                return Err(Error::dim("concat", &base, &[axis]));
            }
            let mut total = 0;
            for p in parts {
                let s = nodes[p.id].value.shape();
                let compatible =
                    s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::dim("concat", &base, s));
                }
                total += s[axis];
            }
            let mut shape = base.clone();
            shape[axis] = total;
            let (outer, _, inner) = split_axis(&shape, axis);
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.id].value;
                    let chunk = v.shape()[axis] * inner;
                    out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(shape, out)?
        };
        let rg = parts.iter().any(|p| p.requires_grad());
        let op = Op::Concat {
            parts: parts.iter().map(|p| p.id).collect(),
            axis,
        };
        Ok(tape.push(value, op, rg))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.check_axis(axis, "narrow")?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::dim("narrow", &shape, &[start, len]));
        }
        let (outer, total, inner) = split_axis(&shape, axis);
        let value = self.with_value(|x| {
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let from = (o * total + start) * inner;
                out.extend_from_slice(&x.data()[from..from + len * inner]);
            }
            let mut s = shape.clone();
            s[axis] = len;
            Tensor::new(s, out).expect("narrow shape")
        });
        let op = Op::Narrow {
            x: self.id,
            axis,
            start,
        };
        Ok(self.tape.unary(self, value, op))
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'t>>> {
        let shape = self.check_axis(axis, "split")?;
        if sizes.iter().sum::<usize>() != shape[axis] {
            return Err(Error::dim("split", &shape, sizes));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let part = self.narrow(axis, start, len);
                start += len;
                part
            })
            .collect()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        Ok(self.tape.unary(self, value, Op::Reshape(self.id)))
    }

    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.with_value(|x| x.data().iter().sum()));
        self.tape.unary(self, value, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let value = Tensor::scalar(self.with_value(|x| x.data().iter().sum::<f64>() / x.len() as f64));
        self.tape.unary(self, value, Op::Mean(self.id))
    }

    fn reduce_axis(self, axis: usize, mean: bool, name: &'static str) -> Result<Var<'t>> {
        let shape = self.check_axis(axis, name)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let value = self.with_value(|x| {
            let d = x.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += d[(o * len + j) * inner + i];
                    }
                }
            }
            if mean {
                out.iter_mut().for_each(|v| *v /= len as f64);
            }
            let mut s = shape.clone();
            s.remove(axis);
            Tensor::new(s, out).expect("reduce shape")
        });
        Ok(self.tape.unary(self, value, Op::SumAxis { x: self.id, axis, mean }))
    }

    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, false, "sum_axis")
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        self.reduce_axis(axis, true, "mean_axis")
    }

    /// Broadcasts a single-element tensor to `shape`.
    pub fn expand(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.with_value(|x| {
            if x.len() != 1 {
                return Err(Error::dim("expand", x.shape(), shape));
            }
            Ok(x.item())
        })?;
        let value = Tensor::full(shape, v);
        Ok(self.tape.unary(self, value, Op::Expand(self.id)))
    }

    /// Element at flat index `i`, as a scalar.
    pub fn index(self, i: usize) -> Result<Var<'t>> {
        let v = self.with_value(|x| {
            x.data()
                .get(i)
                .copied()
                .ok_or_else(|| Error::dim("index", x.shape(), &[i]))
        })?;
        Ok(self.tape.unary(self, Tensor::scalar(v), Op::Index { x: self.id, i }))
    }

    /// Rows of a `[v, d]` table selected by `ids`, giving `[ids.len(), d]`.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t>> {
        let value = self.with_value(|t| {
            let (rows, width) = match *t.shape() {
                [r, w] => (r, w),
                ref s => return Err(Error::dim("gather_rows", s, &[0, 0])),
            };
            if ids.is_empty() {
                return Err(Error::Contract("gather_rows with no ids".into()));
            }
            let mut out = Vec::with_capacity(ids.len() * width);
            for &id in ids {
                if id >= rows {
                    return Err(Error::dim("gather_rows", t.shape(), &[id]));
                }
                out.extend_from_slice(t.row(id));
            }
            Tensor::new(vec![ids.len(), width], out)
        })?;
        let op = Op::GatherRows {
            table: self.id,
            ids: ids.to_vec(),
        };
        Ok(self.tape.unary(self, value, op))
    }

    /// Nearest-neighbour upsampling of a `[gh, gw]` grid by an integer factor.
    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'t>> {
        let value = self.with_value(|x| {
            let (gh, gw) = match *x.shape() {
                [a, b] => (a, b),
                ref s => return Err(Error::dim("upsample_nearest", s, &[0, 0])),
            };
            if factor == 0 {
                return Err(Error::Config("upsample factor must be positive".into()));
            }
            let (h, w) = (gh * factor, gw * factor);
            let d = x.data();
            let out = (0..h * w)
                .map(|p| d[(p / w / factor) * gw + (p % w) / factor])
                .collect();
            Tensor::new(vec![h, w], out)
        })?;
        Ok(self.tape.unary(self, value, Op::Upsample { x: self.id, factor }))
    }

    /// Differentiable counterpart of [`super::patchify`].
    pub fn patchify(self, patch: usize) -> Result<Var<'t>> {
        let value = self.with_value(|x| super::dense::patchify(x, patch))?;
        Ok(self.tape.unary(self, value, Op::Patchify { x: self.id, patch }))
    }

    /// Repeats an `[h, w]` map over a trailing channel axis.
    pub fn expand_channels(self, channels: usize) -> Result<Var<'t>> {
        let value = self.with_value(|x| {
            if x.rank() != 2 || channels == 0 {
                return Err(Error::dim("expand_channels", x.shape(), &[channels]));
            }
            let out = x
                .data()
                .iter()
                .flat_map(|&v| std::iter::repeat_n(v, channels))
                .collect();
            Tensor::new(vec![x.shape()[0], x.shape()[1], channels], out)
        })?;
        let op = Op::ExpandChannels { x: self.id, channels };
        Ok(self.tape.unary(self, value, op))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `[n, classes]` logits.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t>> {
        let (loss, probs) = self.with_value(|x| {
            let (n, classes) = match *x.shape() {
                [n, c] => (n, c),
                ref s => return Err(Error::dim("cross_entropy", s, &[labels.len(), 0])),
            };
            if n != labels.len() {
                return Err(Error::dim("cross_entropy", x.shape(), &[labels.len()]));
            }
            let mut probs = vec![0.0; n * classes];
            let mut total = 0.0;
            for (r, &label) in labels.iter().enumerate() {
                if label >= classes {
                    return Err(Error::Contract(format!(
                        "label {label} out of range for {classes} classes"
                    )));
                }
                let row = x.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let lse = max + z.ln();
                total += lse - row[label];
                for c in 0..classes {
                    probs[r * classes + c] = (row[c] - max).exp() / z;
                }
            }
            Ok((total / n as f64, probs))
        })?;
        let op = Op::CrossEntropy {
            logits: self.id,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.tape.unary(self, Tensor::scalar(loss), op))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]));
        tape.backward(x.sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.5, -2.0, 0.25]));
        tape.backward(x.square().sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let loss = x.square().sum();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[4.0, 8.0]);
        tape.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        tape.backward(x.mul(c).unwrap().sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[3.0, 4.0]);
        assert!(c.grad().is_none());
    }

    #[test]
    fn relu_values_and_zero_subgradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = x.relu();
        assert_eq!(y.value().data(), &[0.0, 0.0, 2.0]);
        tape.backward(y.sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_identity_and_annihilator() {
        let tape = Tape::new();
        let m = Tensor::from_fn(&[3, 3], |i| i as f64 * 0.5 - 1.0);
        let i3 = tape.constant(Tensor::identity(3));
        let out = i3.matmul(tape.constant(m.clone())).unwrap();
        assert!(out.value().bitwise_eq(&m));
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let o = tape.constant(Tensor::ones(&[3, 4]));
        assert_eq!(z.matmul(o).unwrap().value(), Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 5]));
        let msg = a.matmul(b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::vector(vec![0.0; 4])).softmax(0).unwrap();
        assert_eq!(s.value().data(), &[0.25; 4]);
        let s = tape.constant(Tensor::vector(vec![1000.0, 0.0])).softmax(0).unwrap();
        let v = s.value();
        assert!(v.data().iter().all(|x| x.is_finite()));
        assert!((v.data()[0] - 1.0).abs() < 1e-12 && v.data()[1] < 1e-300);
        let s = tape.constant(Tensor::vector(vec![3.0, 2.0])).softmax(0).unwrap();
        let oracle = 3f64.exp() / (3f64.exp() + 2f64.exp());
        assert!((oracle - 0.7311).abs() < 1e-4);
        assert!((s.value().data()[0] - oracle).abs() < 1e-15);
        assert!((s.value().data()[1] - (1.0 - oracle)).abs() < 1e-15);
    }

    #[test]
    fn softmax_axis_zero_of_matrix() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap());
        let s = x.softmax(0).unwrap().value();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn concat_and_split_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let b = tape.constant(Tensor::from_fn(&[2, 5], |i| -(i as f64)));
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 8]);
        let parts = c.split(1, &[3, 5]).unwrap();
        assert!(parts[0].value().bitwise_eq(&a.value()));
        assert!(parts[1].value().bitwise_eq(&b.value()));
        assert!(Var::concat(&[a, tape.constant(Tensor::zeros(&[3, 3]))], 1).is_err());
    }

    #[test]
    fn mean_of_constant_tensor() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::full(&[3, 4], 2.5));
        assert_eq!(c.mean().item(), 2.5);
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(a.add(b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(x.cross_entropy(&[3]), Err(Error::Contract(_))));
    }

    #[test]
    fn upsample_repeats_blocks() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let y = x.upsample_nearest(2).unwrap();
        assert_eq!(y.value().data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        tape.backward(y.sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[4.0, 4.0]);
    }
}
