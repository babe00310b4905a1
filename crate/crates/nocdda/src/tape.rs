//! Reverse-mode differentiation on a per-pass recording tape.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value and the identity of its parents. Nodes only ever reference earlier
//! nodes, so the graph is acyclic by construction and a single reverse sweep
//! propagates vector-Jacobian products from a scalar loss back to the leaves.
//!
//! The tape is rebuilt for every forward pass. Leaves snapshot their values at
//! registration, so later mutation of the source buffers cannot corrupt a
//! recorded graph.

use crate::error::{Error, Result};
use crate::tensor;

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// y = W x + b with W row-major `rows x cols`.
    Affine {
        w: NodeId,
        b: NodeId,
        x: NodeId,
        rows: usize,
        cols: usize,
    },
    Relu(NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    /// y_i = ln(max(x_i, floor)); derivative is zero inside the clamp.
    LogClamped {
        x: NodeId,
        floor: f64,
    },
    /// y = -softplus(-x), i.e. ln(sigmoid(x)), evaluated stably.
    LogSigmoid(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale {
        x: NodeId,
        c: f64,
    },
    Neg(NodeId),
    Concat(Vec<NodeId>),
    /// Scalar pick y = x[i].
    Index {
        x: NodeId,
        i: usize,
    },
    /// Scalar y = sum_i x_i^2.
    SquaredNorm(NodeId),
    /// y[i*n + j] = a_i * b_j, flattened row-major.
    Outer(NodeId, NodeId),
}

struct Node {
    value: Vec<f64>,
    op: Op,
    is_param: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a node, if any path reached it.
    pub fn of(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id].as_deref()
    }

    /// Gradient of a leaf, or zeros when the leaf was detached from the loss.
    /// The second value flags the detached case.
    pub fn of_or_zero(&self, id: NodeId, len: usize) -> (Vec<f64>, bool) {
        match &self.grads[id] {
            Some(g) => (g.clone(), false),
            None => (vec![0.0; len], true),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Vec<f64>, op: Op, is_param: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            is_param,
        });
        id
    }

    /// Register an input leaf. Values are snapshotted.
    pub fn leaf(&mut self, values: &[f64]) -> NodeId {
        self.push(values.to_vec(), Op::Leaf, false)
    }

    /// Register a parameter leaf. Values are snapshotted.
    pub fn param(&mut self, values: &[f64]) -> NodeId {
        self.push(values.to_vec(), Op::Leaf, true)
    }

    pub fn affine(&mut self, w: NodeId, b: NodeId, x: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        if self.nodes[w].value.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                context: "tape affine weight",
                expected: rows * cols,
                got: self.nodes[w].value.len(),
            });
        }
        if self.nodes[b].value.len() != rows {
            return Err(Error::ShapeMismatch {
                context: "tape affine bias",
                expected: rows,
                got: self.nodes[b].value.len(),
            });
        }
        if self.nodes[x].value.len() != cols {
            return Err(Error::ShapeMismatch {
                context: "tape affine input",
                expected: cols,
                got: self.nodes[x].value.len(),
            });
        }
        let value = eval_affine(&self.nodes[w].value, &self.nodes[b].value, &self.nodes[x].value, rows, cols);
        Ok(self.push(value, Op::Affine { w, b, x, rows, cols }, false))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.iter().map(|&v| v.max(0.0)).collect();
        self.push(value, Op::Relu(x), false)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.iter().map(|v| v.tanh()).collect();
        self.push(value, Op::Tanh(x), false)
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let mut value = vec![0.0; self.nodes[x].value.len()];
        tensor::softmax(&self.nodes[x].value, &mut value);
        self.push(value, Op::Softmax(x), false)
    }

    pub fn log_clamped(&mut self, x: NodeId, floor: f64) -> NodeId {
        let value = self.nodes[x].value.iter().map(|&v| v.max(floor).ln()).collect();
        self.push(value, Op::LogClamped { x, floor }, false)
    }

    pub fn log_sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.iter().map(|&v| log_sigmoid(v)).collect();
        self.push(value, Op::LogSigmoid(x), false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_len(a, b, "tape add")?;
        let value = self.nodes[a]
            .value
            .iter()
            .zip(self.nodes[b].value.iter())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(value, Op::Add(a, b), false))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_len(a, b, "tape sub")?;
        let value = self.nodes[a]
            .value
            .iter()
            .zip(self.nodes[b].value.iter())
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(value, Op::Sub(a, b), false))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.nodes[x].value.iter().map(|v| v * c).collect();
        self.push(value, Op::Scale { x, c }, false)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x].value.iter().map(|v| -v).collect();
        self.push(value, Op::Neg(x), false)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut value = Vec::new();
        for &p in parts {
            value.extend_from_slice(&self.nodes[p].value);
        }
        self.push(value, Op::Concat(parts.to_vec()), false)
    }

    pub fn index(&mut self, x: NodeId, i: usize) -> Result<NodeId> {
        if i >= self.nodes[x].value.len() {
            return Err(Error::InvalidParameter {
                name: "index",
                reason: format!("{i} out of bounds for length {}", self.nodes[x].value.len()),
            });
        }
        let value = vec![self.nodes[x].value[i]];
        Ok(self.push(value, Op::Index { x, i }, false))
    }

    pub fn squared_norm(&mut self, x: NodeId) -> NodeId {
        let value = vec![self.nodes[x].value.iter().map(|v| v * v).sum()];
        self.push(value, Op::SquaredNorm(x), false)
    }

    pub fn outer(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        let mut value = Vec::with_capacity(av.len() * bv.len());
        for &x in av {
            for &y in bv {
                value.push(x * y);
            }
        }
        self.push(value, Op::Outer(a, b), false)
    }

    fn check_same_len(&self, a: NodeId, b: NodeId, context: &'static str) -> Result<()> {
        let (la, lb) = (self.nodes[a].value.len(), self.nodes[b].value.len());
        if la != lb {
            return Err(Error::ShapeMismatch {
                context,
                expected: la,
                got: lb,
            });
        }
        Ok(())
    }

    /// Reverse sweep from a scalar loss node. Rejects non-scalar losses.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes[loss].value.len() != 1 {
            return Err(Error::NonScalarLoss {
                len: self.nodes[loss].value.len(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let d_out = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_op(id, &d_out, &mut grads);
            grads[id] = Some(d_out);
        }
        Ok(Gradients { grads })
    }

    fn backward_op(&self, id: NodeId, d_out: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Affine { w, b, x, rows, cols } => {
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                {
                    let dw = acc(grads, *w, rows * cols);
                    for r in 0..*rows {
                        let dr = d_out[r];
                        for c in 0..*cols {
                            dw[r * cols + c] += dr * xv[c];
                        }
                    }
                }
                {
                    let db = acc(grads, *b, *rows);
                    for (d, g) in db.iter_mut().zip(d_out.iter()) {
                        *d += g;
                    }
                }
                {
                    let dx = acc(grads, *x, *cols);
                    tensor::matvec_transpose_acc(wv, *rows, *cols, d_out, dx);
                }
            }
            Op::Relu(x) => {
                let xv = &self.nodes[*x].value;
                let dx = acc(grads, *x, xv.len());
                for i in 0..xv.len() {
                    if xv[i] > 0.0 {
                        dx[i] += d_out[i];
                    }
                }
            }
            Op::Tanh(x) => {
                let yv = &node.value;
                let dx = acc(grads, *x, yv.len());
                for i in 0..yv.len() {
                    dx[i] += d_out[i] * (1.0 - yv[i] * yv[i]);
                }
            }
            Op::Softmax(x) => {
                let yv = &node.value;
                let dot: f64 = d_out.iter().zip(yv.iter()).map(|(d, y)| d * y).sum();
                let dx = acc(grads, *x, yv.len());
                for i in 0..yv.len() {
                    dx[i] += yv[i] * (d_out[i] - dot);
                }
            }
            Op::LogClamped { x, floor } => {
                let xv = &self.nodes[*x].value;
                let dx = acc(grads, *x, xv.len());
                for i in 0..xv.len() {
                    if xv[i] > *floor {
                        dx[i] += d_out[i] / xv[i];
                    }
                }
            }
            Op::LogSigmoid(x) => {
                let xv = &self.nodes[*x].value;
                let dx = acc(grads, *x, xv.len());
                for i in 0..xv.len() {
                    // d/dx ln(sigmoid(x)) = 1 - sigmoid(x) = sigmoid(-x)
                    dx[i] += d_out[i] * sigmoid(-xv[i]);
                }
            }
            Op::Add(a, b) => {
                let n = d_out.len();
                {
                    let da = acc(grads, *a, n);
                    for (d, g) in da.iter_mut().zip(d_out.iter()) {
                        *d += g;
                    }
                }
                let db = acc(grads, *b, n);
                for (d, g) in db.iter_mut().zip(d_out.iter()) {
                    *d += g;
                }
            }
            Op::Sub(a, b) => {
                let n = d_out.len();
                {
                    let da = acc(grads, *a, n);
                    for (d, g) in da.iter_mut().zip(d_out.iter()) {
                        *d += g;
                    }
                }
                let db = acc(grads, *b, n);
                for (d, g) in db.iter_mut().zip(d_out.iter()) {
                    *d -= g;
                }
            }
            Op::Scale { x, c } => {
                let dx = acc(grads, *x, d_out.len());
                for (d, g) in dx.iter_mut().zip(d_out.iter()) {
                    *d += c * g;
                }
            }
            Op::Neg(x) => {
                let dx = acc(grads, *x, d_out.len());
                for (d, g) in dx.iter_mut().zip(d_out.iter()) {
                    *d -= g;
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    let dp = acc(grads, p, len);
                    for (d, g) in dp.iter_mut().zip(d_out[offset..offset + len].iter()) {
                        *d += g;
                    }
                    offset += len;
                }
            }
            Op::Index { x, i } => {
                let len = self.nodes[*x].value.len();
                let dx = acc(grads, *x, len);
                dx[*i] += d_out[0];
            }
            Op::SquaredNorm(x) => {
                let xv = &self.nodes[*x].value;
                let dx = acc(grads, *x, xv.len());
                for i in 0..xv.len() {
                    dx[i] += 2.0 * xv[i] * d_out[0];
                }
            }
            Op::Outer(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let (m, n) = (av.len(), bv.len());
                {
                    let da = acc(grads, *a, m);
                    for i in 0..m {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += d_out[i * n + j] * bv[j];
                        }
                        da[i] += s;
                    }
                }
                let db = acc(grads, *b, n);
                for j in 0..n {
                    let mut s = 0.0;
                    for i in 0..m {
                        s += d_out[i * n + j] * av[i];
                    }
                    db[j] += s;
                }
            }
        }
    }

    /// Recomputes every non-leaf node from its parents. The result is
    /// bitwise-identical to the recorded values because the same evaluation
    /// kernels run on the same inputs; exposed so tests can assert graph
    /// integrity.
    pub fn replay_forward(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::Affine { w, b, x, rows, cols } => eval_affine(&out[*w], &out[*b], &out[*x], *rows, *cols),
                Op::Relu(x) => out[*x].iter().map(|&v| v.max(0.0)).collect(),
                Op::Tanh(x) => out[*x].iter().map(|v| v.tanh()).collect(),
                Op::Softmax(x) => {
                    let mut v = vec![0.0; out[*x].len()];
                    tensor::softmax(&out[*x], &mut v);
                    v
                }
                Op::LogClamped { x, floor } => out[*x].iter().map(|&v| v.max(*floor).ln()).collect(),
                Op::LogSigmoid(x) => out[*x].iter().map(|&v| log_sigmoid(v)).collect(),
                Op::Add(a, b) => out[*a].iter().zip(out[*b].iter()).map(|(x, y)| x + y).collect(),
                Op::Sub(a, b) => out[*a].iter().zip(out[*b].iter()).map(|(x, y)| x - y).collect(),
                Op::Scale { x, c } => out[*x].iter().map(|v| v * c).collect(),
                Op::Neg(x) => out[*x].iter().map(|v| -v).collect(),
                Op::Concat(parts) => {
                    let mut v = Vec::new();
                    for &p in parts {
                        v.extend_from_slice(&out[p]);
                    }
                    v
                }
                Op::Index { x, i } => vec![out[*x][*i]],
                Op::SquaredNorm(x) => vec![out[*x].iter().map(|v| v * v).sum()],
                Op::Outer(a, b) => {
                    let mut v = Vec::with_capacity(out[*a].len() * out[*b].len());
                    for &x in &out[*a] {
                        for &y in &out[*b] {
                            v.push(x * y);
                        }
                    }
                    v
                }
            };
            out.push(value);
        }
        out
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        self.nodes[id].is_param
    }
}

fn eval_affine(w: &[f64], b: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    tensor::matvec(w, rows, cols, x, &mut out);
    for (o, bi) in out.iter_mut().zip(b.iter()) {
        *o += bi;
    }
    out
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &'a mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    // ln(sigmoid(x)) = -softplus(-x), split for stability at both tails.
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
