//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation executed on a [`Graph`] appends one node holding its
//! forward value, so the node order is the execution order and a backward
//! pass is a single reverse sweep. Three entry points differentiate a graph:
//!
//! * [`Graph::backward`] fills gradients for every grad-requiring leaf. It may
//!   run once per recording; [`Graph::clear`] starts a new one.
//! * [`Graph::vjp`] computes a vector-Jacobian product for chosen inputs
//!   without touching stored gradients. It is repeatable, which the implicit
//!   backward of the equilibrium layer relies on.
//! * [`Graph::gradients`] with `create_graph = true` records the backward
//!   computation itself as new nodes, so the result can be differentiated
//!   again. The Lyapunov projection uses it for `∇V`.
//!
//! Only two operations are first-order only: softmax cross-entropy and
//! custom nodes (the equilibrium solve). Both sit outside every
//! second-order path in this crate.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A node whose backward pass is supplied by the caller.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the upstream gradient of the output.
    /// `needs[i]` is false for inputs whose gradient nobody asked for; the
    /// implementation may return `None` for those.
    fn vjp(
        &self,
        upstream: &Tensor,
        output: &Tensor,
        inputs: &[&Tensor],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    Matmul,
    MatmulNt,
    MatmulTn,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar,
    Square,
    Relu,
    SmoothRelu(f64),
    SmoothReluGrad(f64),
    Sqrt,
    Recip,
    Sum,
    Mean,
    SumSq,
    MaxAbs,
    SumRows,
    SumCols,
    BroadcastRows,
    BroadcastCols,
    BroadcastScalar,
    Reshape,
    SelectRow(usize),
    ScatterRow(usize),
    SoftmaxXent(Rc<Vec<usize>>),
    Custom(Rc<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul => "matmul",
            Op::MatmulNt => "matmul_nt",
            Op::MatmulTn => "matmul_tn",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Square => "square",
            Op::Relu => "relu",
            Op::SmoothRelu(_) => "smooth_relu",
            Op::SmoothReluGrad(_) => "smooth_relu_grad",
            Op::Sqrt => "sqrt",
            Op::Recip => "recip",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::SumSq => "sum_sq",
            Op::MaxAbs => "max_abs",
            Op::SumRows => "sum_rows",
            Op::SumCols => "sum_cols",
            Op::BroadcastRows => "broadcast_rows",
            Op::BroadcastCols => "broadcast_cols",
            Op::BroadcastScalar => "broadcast_scalar",
            Op::Reshape => "reshape",
            Op::SelectRow(_) => "select_row",
            Op::ScatterRow(_) => "scatter_row",
            Op::SoftmaxXent(_) => "softmax_cross_entropy",
            Op::Custom(c) => c.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    parents: Vec<Var>,
    requires_grad: bool,
    is_leaf: bool,
}

/// An ordered record of executed operations.
pub struct Graph {
    nodes: Vec<Node>,
    recording: bool,
    backward_done: bool,
    leaf_grads: Vec<Option<Tensor>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            backward_done: false,
            leaf_grads: Vec::new(),
        }
    }

    /// A graph that records no parents: values only, nothing differentiable.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    /// Drop every node and stored gradient.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.leaf_grads.clear();
        self.backward_done = false;
    }

    /// Drop every node created after the graph had `len` nodes. Vars from
    /// before the mark stay valid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.leaf_grads.truncate(len);
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            parents: Vec::new(),
            requires_grad: requires_grad && self.recording,
            is_leaf: true,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, parents: &[Var], value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = self.recording && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            parents: if requires_grad { parents.to_vec() } else { Vec::new() },
            requires_grad,
            is_leaf: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- primitive operations -------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        self.push(Op::Matmul, &[a, b], v)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul_nt(self.value(a), self.value(b))?;
        self.push(Op::MatmulNt, &[a, b], v)
    }

    /// `aᵀ · b`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul_tn(self.value(a), self.value(b))?;
        self.push(Op::MatmulTn, &[a, b], v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        self.push(Op::Add, &[a, b], v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        self.push(Op::Sub, &[a, b], v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        self.push(Op::Mul, &[a, b], v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(c), &[a], v)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar, &[a], v)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.push(Op::Square, &[a], v)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(tensor::relu);
        self.push(Op::Relu, &[a], v)
    }

    /// Heaviside step of `a`, recorded as a constant (its derivative is zero
    /// almost everywhere).
    pub fn step_of(&mut self, a: Var) -> Var {
        let v = self.value(a).map(tensor::step);
        self.constant(v)
    }

    pub fn smooth_relu(&mut self, a: Var, d: f64) -> Result<Var> {
        check_smoothing(d)?;
        let v = self.value(a).map(|x| tensor::smooth_relu(x, d));
        self.push(Op::SmoothRelu(d), &[a], v)
    }

    /// Derivative of [`Graph::smooth_relu`], itself differentiable.
    pub fn smooth_relu_grad(&mut self, a: Var, d: f64) -> Result<Var> {
        check_smoothing(d)?;
        let v = self.value(a).map(|x| tensor::smooth_relu_grad(x, d));
        self.push(Op::SmoothReluGrad(d), &[a], v)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::Domain("sqrt of a negative value".into()));
        }
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt, &[a], v)
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(Op::Recip, &[a], v)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum, &[a], v)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::Domain("mean of an empty tensor".into()));
        }
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push(Op::Mean, &[a], v)
    }

    /// Squared L2 norm over all elements.
    pub fn sum_sq(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum_sq());
        self.push(Op::SumSq, &[a], v)
    }

    pub fn max_abs(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).max_abs());
        self.push(Op::MaxAbs, &[a], v)
    }

    /// `[rows×cols] → [rows×1]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let v = tensor::sum_rows(self.value(a));
        self.push(Op::SumRows, &[a], v)
    }

    /// `[rows×cols] → [cols]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let v = tensor::sum_cols(self.value(a));
        self.push(Op::SumCols, &[a], v)
    }

    /// `[n]` or `[1×n]` → `[rows×n]`.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        let v = tensor::broadcast_rows(self.value(a), rows);
        self.push(Op::BroadcastRows, &[a], v)
    }

    /// `[rows×1]` → `[rows×cols]`.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        if self.value(a).cols() != 1 {
            return Err(Error::shape("broadcast_cols", self.shape(a), &[self.value(a).rows(), 1]));
        }
        let v = tensor::broadcast_cols(self.value(a), cols);
        self.push(Op::BroadcastCols, &[a], v)
    }

    /// A single-element tensor repeated into `shape`.
    pub fn broadcast_scalar(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let s = self.value(a).item()?;
        let v = Tensor::full(shape, s);
        self.push(Op::BroadcastScalar, &[a], v)
    }

    /// Multiply every element of `a` by the single-element tensor `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let b = self.broadcast_scalar(s, &shape)?;
        self.mul(a, b)
    }

    /// Scale each row of `a: [rows×cols]` by the matching entry of `s: [rows×1]`.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        let b = self.broadcast_cols(s, cols)?;
        self.mul(a, b)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push(Op::Reshape, &[a], v)
    }

    /// Row `index` of `a: [rows×cols]` as `[1×cols]`.
    pub fn select_row(&mut self, a: Var, index: usize) -> Result<Var> {
        let t = self.value(a);
        if index >= t.rows() {
            return Err(Error::Index(format!("row {index} of {:?}", t.shape())));
        }
        let v = Tensor::new(&[1, t.cols()], t.row(index).to_vec())?;
        self.push(Op::SelectRow(index), &[a], v)
    }

    /// Place `a: [1×cols]` as row `index` of an otherwise zero `[rows×cols]`.
    pub fn scatter_row(&mut self, a: Var, index: usize, rows: usize) -> Result<Var> {
        let t = self.value(a);
        if index >= rows {
            return Err(Error::Index(format!("row {index} of {rows}")));
        }
        let cols = t.numel();
        let mut out = Tensor::zeros(&[rows, cols]);
        out.row_mut(index).copy_from_slice(t.data());
        self.push(Op::ScatterRow(index), &[a], out)
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (b, c) = t.dims2("softmax_cross_entropy")?;
        if labels.len() != b {
            return Err(Error::shape("softmax_cross_entropy", t.shape(), &[labels.len()]));
        }
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Index(format!("label {y} out of range for {c} classes")));
            }
            let row = t.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let v = Tensor::scalar(total / b as f64);
        self.push(Op::SoftmaxXent(Rc::new(labels.to_vec())), &[logits], v)
    }

    /// Record a node computed outside the graph whose backward is `op`.
    pub fn custom(&mut self, op: Rc<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Result<Var> {
        self.push(Op::Custom(op), inputs, output)
    }

    // ---- differentiation -------------------------------------------------

    /// Nodes that lie on a path from one of `targets` and require grad.
    fn depends_on(&self, targets: &[Var], upto: usize) -> Vec<bool> {
        let mut dep = vec![false; upto + 1];
        for t in targets {
            if t.0 <= upto && self.nodes[t.0].requires_grad {
                dep[t.0] = true;
            }
        }
        for i in 0..=upto {
            if dep[i] || !self.nodes[i].requires_grad {
                continue;
            }
            dep[i] = self.nodes[i].parents.iter().any(|p| dep[p.0]);
        }
        dep
    }

    /// Fill gradients of a scalar `loss` for every grad-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this graph; clear it first".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let leaves: Vec<Var> = (0..=loss.0)
            .filter(|&i| self.nodes[i].is_leaf && self.nodes[i].requires_grad)
            .map(Var)
            .collect();
        let seed = Tensor::ones(self.shape(loss));
        let grads = self.backprop_numeric(loss, seed, &leaves)?;
        self.leaf_grads = vec![None; self.nodes.len()];
        for (leaf, g) in leaves.iter().zip(grads) {
            self.leaf_grads[leaf.0] = g;
        }
        self.backward_done = true;
        Ok(())
    }

    /// Gradient stored by [`Graph::backward`]; `None` for constants and
    /// leaves the loss does not depend on.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads.get(v.0).and_then(Option::as_ref)
    }

    /// `seedᵀ · ∂output/∂wrt` for each `wrt`, without storing anything.
    pub fn vjp(&self, output: Var, seed: &Tensor, wrt: &[Var]) -> Result<Vec<Option<Tensor>>> {
        if seed.numel() != self.value(output).numel() {
            return Err(Error::shape("vjp seed", seed.shape(), self.shape(output)));
        }
        let seed = seed.clone().reshape(self.shape(output))?;
        self.backprop_numeric(output, seed, wrt)
    }

    /// Gradients of a scalar `output` with respect to `wrt`, as graph nodes.
    /// With `create_graph` the backward computation is recorded and the
    /// results are differentiable; otherwise they are constants.
    pub fn gradients(&mut self, output: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Option<Var>>> {
        if !self.value(output).is_scalar() {
            return Err(Error::Contract(format!(
                "gradients needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        if create_graph {
            self.backprop_graph(output, wrt)
        } else {
            let seed = Tensor::ones(self.shape(output));
            let grads = self.backprop_numeric(output, seed, wrt)?;
            Ok(grads.into_iter().map(|g| g.map(|t| self.constant(t))).collect())
        }
    }

    fn backprop_numeric(&self, output: Var, seed: Tensor, wrt: &[Var]) -> Result<Vec<Option<Tensor>>> {
        let dep = self.depends_on(wrt, output.0);
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        if dep[output.0] {
            grads[output.0] = Some(seed);
        }
        for i in (0..=output.0).rev() {
            if !dep[i] || self.nodes[i].is_leaf {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let needs: Vec<bool> = node.parents.iter().map(|p| dep[p.0]).collect();
            if !needs.iter().any(|&n| n) {
                grads[i] = Some(g);
                continue;
            }
            let parent_grads = self.numeric_vjp(node, &g, &needs)?;
            for ((p, pg), need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(pg), true) = (pg, *need) else { continue };
                let pg = pg.reshape(self.nodes[p.0].value.shape())?;
                match &mut grads[p.0] {
                    Some(acc) => acc.axpy(1.0, &pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
            // Keep the gradient of requested interior nodes.
            if wrt.contains(&Var(i)) {
                grads[i] = Some(g);
            }
        }
        Ok(wrt
            .iter()
            .map(|w| if w.0 <= output.0 { grads[w.0].take() } else { None })
            .collect())
    }

    fn numeric_vjp(&self, node: &Node, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let pv = |k: usize| &self.nodes[node.parents[k].0].value;
        let one = |t: Tensor| Ok(vec![Some(t)]);
        match &node.op {
            Op::Leaf => Ok(vec![]),
            Op::Matmul => Ok(vec![
                cond(needs[0], || tensor::matmul_nt(g, pv(1)))?,
                cond(needs[1], || tensor::matmul_tn(pv(0), g))?,
            ]),
            Op::MatmulNt => Ok(vec![
                cond(needs[0], || tensor::matmul(g, pv(1)))?,
                cond(needs[1], || tensor::matmul_tn(g, pv(0)))?,
            ]),
            Op::MatmulTn => Ok(vec![
                cond(needs[0], || tensor::matmul_nt(pv(1), g))?,
                cond(needs[1], || tensor::matmul(pv(0), g))?,
            ]),
            Op::Add => Ok(vec![Some(g.clone()), Some(g.clone())]),
            Op::Sub => Ok(vec![Some(g.clone()), Some(g.scale(-1.0))]),
            Op::Mul => Ok(vec![
                cond(needs[0], || g.mul(pv(1)))?,
                cond(needs[1], || g.mul(pv(0)))?,
            ]),
            Op::Scale(c) => one(g.scale(*c)),
            Op::AddScalar | Op::Reshape => one(g.clone()),
            Op::Square => one(g.zip_map(pv(0), "square'", |g, a| 2.0 * a * g)?),
            Op::Relu => one(g.zip_map(pv(0), "relu'", |g, a| g * tensor::step(a))?),
            Op::SmoothRelu(d) => one(g.zip_map(pv(0), "smooth_relu'", |g, a| g * tensor::smooth_relu_grad(a, *d))?),
            Op::SmoothReluGrad(d) => {
                one(g.zip_map(pv(0), "smooth_relu''", |g, a| g * tensor::smooth_relu_second(a, *d))?)
            }
            Op::Sqrt => one(g.zip_map(&node.value, "sqrt'", |g, y| 0.5 * g / y)?),
            Op::Recip => one(g.zip_map(&node.value, "recip'", |g, y| -g * y * y)?),
            Op::Sum => one(Tensor::full(pv(0).shape(), g.item()?)),
            Op::Mean => {
                let n = pv(0).numel() as f64;
                one(Tensor::full(pv(0).shape(), g.item()? / n))
            }
            Op::SumSq => {
                let s = g.item()?;
                one(pv(0).map(|a| 2.0 * a * s))
            }
            Op::MaxAbs => {
                let a = pv(0);
                let m = node.value.item()?;
                let mut out = Tensor::zeros(a.shape());
                if let Some(k) = a.data().iter().position(|v| v.abs() == m) {
                    out.data_mut()[k] = tensor::sign(a.data()[k]) * g.item()?;
                }
                one(out)
            }
            Op::SumRows => one(tensor::broadcast_cols(g, pv(0).cols())),
            Op::SumCols => one(tensor::broadcast_rows(g, pv(0).rows())),
            Op::BroadcastRows => one(tensor::sum_cols(g)),
            Op::BroadcastCols => one(tensor::sum_rows(g)),
            Op::BroadcastScalar => one(Tensor::scalar(g.sum())),
            Op::SelectRow(index) => {
                let a = pv(0);
                let mut out = Tensor::zeros(a.shape());
                out.row_mut(*index).copy_from_slice(g.data());
                one(out)
            }
            Op::ScatterRow(index) => one(Tensor::new(&[1, g.cols()], g.row(*index).to_vec())?),
            Op::SoftmaxXent(labels) => {
                let logits = pv(0);
                let (b, _) = logits.dims2("softmax_cross_entropy")?;
                let s = g.item()? / b as f64;
                let mut out = Tensor::zeros(logits.shape());
                for (i, &y) in labels.iter().enumerate() {
                    let row = logits.row(i);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    let dst = out.row_mut(i);
                    for (j, v) in row.iter().enumerate() {
                        dst[j] = s * ((v - m).exp() / z - if j == y { 1.0 } else { 0.0 });
                    }
                }
                one(out)
            }
            Op::Custom(op) => {
                let inputs: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                op.vjp(g, &node.value, &inputs, needs)
            }
        }
    }

    fn backprop_graph(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Option<Var>>> {
        let dep = self.depends_on(wrt, output.0);
        let mut grads: Vec<Option<Var>> = vec![None; output.0 + 1];
        if dep[output.0] {
            let seed = Tensor::ones(self.shape(output));
            grads[output.0] = Some(self.constant(seed));
        }
        for i in (0..=output.0).rev() {
            if !dep[i] || self.nodes[i].is_leaf {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op.clone();
            let parents = self.nodes[i].parents.clone();
            let needs: Vec<bool> = parents.iter().map(|p| dep[p.0]).collect();
            if !needs.iter().any(|&n| n) {
                continue;
            }
            let parent_grads = self.graph_vjp(&op, Var(i), &parents, g, &needs)?;
            for ((p, pg), need) in parents.iter().zip(parent_grads).zip(&needs) {
                let (Some(pg), true) = (pg, *need) else { continue };
                let pg = self.fit_shape(pg, p)?;
                grads[p.0] = Some(match grads[p.0] {
                    Some(acc) => self.add(acc, pg)?,
                    None => pg,
                });
            }
        }
        Ok(wrt
            .iter()
            .map(|w| if w.0 <= output.0 { grads[w.0] } else { None })
            .collect())
    }

    fn fit_shape(&mut self, v: Var, like: &Var) -> Result<Var> {
        let target = self.nodes[like.0].value.shape().to_vec();
        if self.shape(v) == target.as_slice() {
            Ok(v)
        } else {
            self.reshape(v, &target)
        }
    }

    fn graph_vjp(&mut self, op: &Op, out: Var, p: &[Var], g: Var, needs: &[bool]) -> Result<Vec<Option<Var>>> {
        let some = |v: Var| Ok(vec![Some(v)]);
        match op {
            Op::Leaf => Ok(vec![]),
            Op::Matmul => Ok(vec![
                if needs[0] { Some(self.matmul_nt(g, p[1])?) } else { None },
                if needs[1] { Some(self.matmul_tn(p[0], g)?) } else { None },
            ]),
            Op::MatmulNt => Ok(vec![
                if needs[0] { Some(self.matmul(g, p[1])?) } else { None },
                if needs[1] { Some(self.matmul_tn(g, p[0])?) } else { None },
            ]),
            Op::MatmulTn => Ok(vec![
                if needs[0] { Some(self.matmul_nt(p[1], g)?) } else { None },
                if needs[1] { Some(self.matmul(p[0], g)?) } else { None },
            ]),
            Op::Add => Ok(vec![Some(g), Some(g)]),
            Op::Sub => Ok(vec![Some(g), Some(self.neg(g)?)]),
            Op::Mul => Ok(vec![
                if needs[0] { Some(self.mul(g, p[1])?) } else { None },
                if needs[1] { Some(self.mul(g, p[0])?) } else { None },
            ]),
            Op::Scale(c) => some(self.scale(g, *c)?),
            Op::AddScalar | Op::Reshape => some(g),
            Op::Square => {
                let t = self.mul(g, p[0])?;
                some(self.scale(t, 2.0)?)
            }
            Op::Relu => {
                let mask = self.step_of(p[0]);
                some(self.mul(g, mask)?)
            }
            Op::SmoothRelu(d) => {
                let dv = self.smooth_relu_grad(p[0], *d)?;
                some(self.mul(g, dv)?)
            }
            Op::SmoothReluGrad(d) => {
                let second = self.value(p[0]).map(|x| tensor::smooth_relu_second(x, *d));
                let c = self.constant(second);
                some(self.mul(g, c)?)
            }
            Op::Sqrt => {
                let r = self.recip(out)?;
                let t = self.mul(g, r)?;
                some(self.scale(t, 0.5)?)
            }
            Op::Recip => {
                let sq = self.square(out)?;
                let t = self.mul(g, sq)?;
                some(self.neg(t)?)
            }
            Op::Sum => {
                let shape = self.shape(p[0]).to_vec();
                some(self.broadcast_scalar(g, &shape)?)
            }
            Op::Mean => {
                let shape = self.shape(p[0]).to_vec();
                let n = self.value(p[0]).numel() as f64;
                let b = self.broadcast_scalar(g, &shape)?;
                some(self.scale(b, 1.0 / n)?)
            }
            Op::SumSq => {
                let shape = self.shape(p[0]).to_vec();
                let b = self.broadcast_scalar(g, &shape)?;
                let t = self.mul(b, p[0])?;
                some(self.scale(t, 2.0)?)
            }
            Op::MaxAbs => {
                let a = self.value(p[0]);
                let m = self.value(out).item()?;
                let mut mask = Tensor::zeros(a.shape());
                if let Some(k) = a.data().iter().position(|v| v.abs() == m) {
                    mask.data_mut()[k] = tensor::sign(a.data()[k]);
                }
                let shape = a.shape().to_vec();
                let c = self.constant(mask);
                let b = self.broadcast_scalar(g, &shape)?;
                some(self.mul(b, c)?)
            }
            Op::SumRows => {
                let cols = self.value(p[0]).cols();
                some(self.broadcast_cols(g, cols)?)
            }
            Op::SumCols => {
                let rows = self.value(p[0]).rows();
                some(self.broadcast_rows(g, rows)?)
            }
            Op::BroadcastRows => some(self.sum_cols(g)?),
            Op::BroadcastCols => some(self.sum_rows(g)?),
            Op::BroadcastScalar => some(self.sum(g)?),
            Op::SelectRow(index) => {
                let rows = self.value(p[0]).rows();
                some(self.scatter_row(g, *index, rows)?)
            }
            Op::ScatterRow(index) => some(self.select_row(g, *index)?),
            Op::SoftmaxXent(_) | Op::Custom(_) => Err(Error::Contract(format!(
                "{} has no differentiable backward (create_graph)",
                op.name()
            ))),
        }
    }
}

fn cond(need: bool, f: impl FnOnce() -> Result<Tensor>) -> Result<Option<Tensor>> {
    if need {
        f().map(Some)
    } else {
        Ok(None)
    }
}

fn check_smoothing(d: f64) -> Result<()> {
    if d > 0.0 && d.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("smooth-relu width must be positive, got {d}")))
    }
}
