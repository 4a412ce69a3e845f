//! Parameterized layers.
//!
//! Each layer owns its tensors and can `bind` them into a [`Graph`], which
//! yields a small struct of [`Var`] handles with a differentiable `forward`.
//! `bind` appends the handles to a caller-supplied list in the same order as
//! `visit`, so gradients and optimizer state line up with parameters by
//! position.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const DEFAULT_SMOOTHING: f64 = 0.1;
/// Householder vectors with a squared norm below this are skipped.
pub const MIN_REFLECTOR_NORM_SQ: f64 = 1e-12;

/// Read/write access to a layer's tensors in a fixed order.
pub trait Parameterized {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }
}

fn bind_one(g: &mut Graph, t: &Tensor, trainable: bool, vars: &mut Vec<Var>) -> Var {
    let v = g.leaf(t.clone(), trainable);
    vars.push(v);
    v
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape matches generated length")
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).expect("shape matches generated length")
}

// ---- linear ---------------------------------------------------------------

/// `y = x Wᵀ + b` for row-major batches `x: [batch×in]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (out, _) = weight.dims2("linear weight")?;
        if bias.numel() != out {
            return Err(Error::shape("linear bias", weight.shape(), bias.shape()));
        }
        let bias = bias.reshape(&[out])?;
        Ok(Self { weight, bias })
    }

    /// Weights and bias uniform in `±1/√in`.
    pub fn init(rng: &mut impl Rng, input: usize, output: usize) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: uniform(rng, &[output, input], bound),
            bias: uniform(rng, &[output], bound),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.rows()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool, vars: &mut Vec<Var>) -> LinearVars {
        LinearVars {
            weight: bind_one(g, &self.weight, trainable, vars),
            bias: bind_one(g, &self.bias, trainable, vars),
        }
    }

    /// Graph-free forward pass.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let p = self.bind(&mut g, false, &mut Vec::new());
        let x = g.constant(x.clone());
        let y = p.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}

impl LinearVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let xw = g.matmul_nt(x, self.weight)?;
        let rows = g.value(xw).rows();
        let b = g.broadcast_rows(self.bias, rows)?;
        g.add(xw, b)
    }
}

impl Parameterized for Linear {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("weight", &self.weight);
        f("bias", &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}

/// Linear map from flattened images to the state dimension, then ReLU.
pub fn feature_forward(g: &mut Graph, p: &LinearVars, images: Var) -> Result<Var> {
    let y = p.forward(g, images)?;
    g.relu(y)
}

// ---- normalization ----------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Per-sample statistics over the feature axis.
    #[default]
    Layer,
    /// Per-feature statistics over the batch while training, running
    /// averages at evaluation.
    Batch,
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" => Ok(NormKind::Layer),
            "batch" => Ok(NormKind::Batch),
            other => Err(Error::Config(format!("unknown normalization {other:?} (expected layer or batch)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Norm {
    pub kind: NormKind,
    pub scale: Tensor,
    pub shift: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub kind: NormKind,
    pub scale: Var,
    pub shift: Var,
    /// Running statistics (constants), used by batch norm at evaluation.
    pub running_mean: Var,
    pub running_var: Var,
}

/// Momentum of the running-statistics update for batch normalization.
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

impl Norm {
    pub fn new(kind: NormKind, n: usize) -> Self {
        Self {
            kind,
            scale: Tensor::ones(&[n]),
            shift: Tensor::zeros(&[n]),
            running_mean: Tensor::zeros(&[n]),
            running_var: Tensor::ones(&[n]),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool, vars: &mut Vec<Var>) -> NormVars {
        NormVars {
            kind: self.kind,
            scale: bind_one(g, &self.scale, trainable, vars),
            shift: bind_one(g, &self.shift, trainable, vars),
            running_mean: g.constant(self.running_mean.clone()),
            running_var: g.constant(self.running_var.clone()),
        }
    }

    /// Fold the batch statistics of `x: [batch×n]` into the running averages.
    pub fn update_running(&mut self, x: &Tensor) -> Result<()> {
        let (b, n) = x.dims2("norm running statistics")?;
        if n != self.scale.numel() {
            return Err(Error::shape("norm running statistics", x.shape(), self.scale.shape()));
        }
        if b == 0 {
            return Ok(());
        }
        let mean = crate::tensor::sum_cols(x).scale(1.0 / b as f64);
        let mut var = Tensor::zeros(&[n]);
        for r in 0..b {
            for (j, v) in x.row(r).iter().enumerate() {
                var.data_mut()[j] += (v - mean.data()[j]).powi(2) / b as f64;
            }
        }
        let m = BATCH_NORM_MOMENTUM;
        self.running_mean = self.running_mean.scale(1.0 - m).add(&mean.scale(m))?;
        self.running_var = self.running_var.scale(1.0 - m).add(&var.scale(m))?;
        Ok(())
    }
}

impl NormVars {
    /// Normalize `x: [batch×n]`, then apply the learnable scale and shift.
    /// `training` only matters for batch normalization.
    pub fn forward(&self, g: &mut Graph, x: Var, training: bool) -> Result<Var> {
        let b = g.value(x).dims2("norm")?.0;
        let normalized = match (self.kind, training) {
            (NormKind::Layer, _) => layer_normalize(g, x)?,
            (NormKind::Batch, true) => batch_normalize(g, x)?,
            (NormKind::Batch, false) => {
                let mean = g.broadcast_rows(self.running_mean, b)?;
                let centered = g.sub(x, mean)?;
                let std = g.add_scalar(self.running_var, NORM_EPS)?;
                let std = g.sqrt(std)?;
                let inv = g.recip(std)?;
                let inv = g.broadcast_rows(inv, b)?;
                g.mul(centered, inv)?
            }
        };
        let scale = g.broadcast_rows(self.scale, b)?;
        let shift = g.broadcast_rows(self.shift, b)?;
        let y = g.mul(normalized, scale)?;
        g.add(y, shift)
    }
}

/// `(x − mean) / sqrt(var + eps)` over each row, no affine part.
pub fn layer_normalize(g: &mut Graph, x: Var) -> Result<Var> {
    let n = g.value(x).dims2("layer norm")?.1;
    if n < 2 {
        return Err(Error::Domain(format!("layer normalization needs at least 2 features, got {n}")));
    }
    let inv_n = 1.0 / n as f64;
    let sum = g.sum_rows(x)?;
    let mean = g.scale(sum, inv_n)?;
    let mean = g.broadcast_cols(mean, n)?;
    let centered = g.sub(x, mean)?;
    let sq = g.square(centered)?;
    let ss = g.sum_rows(sq)?;
    let var = g.scale(ss, inv_n)?;
    let var = g.add_scalar(var, NORM_EPS)?;
    let std = g.sqrt(var)?;
    let inv = g.recip(std)?;
    g.mul_rows(centered, inv)
}

/// `(x − mean) / sqrt(var + eps)` over each column (the batch axis).
pub fn batch_normalize(g: &mut Graph, x: Var) -> Result<Var> {
    let b = g.value(x).dims2("batch norm")?.0;
    if b < 1 {
        return Err(Error::Domain("batch normalization needs a non-empty batch".into()));
    }
    let inv_b = 1.0 / b as f64;
    let sum = g.sum_cols(x)?;
    let mean = g.scale(sum, inv_b)?;
    let mean = g.broadcast_rows(mean, b)?;
    let centered = g.sub(x, mean)?;
    let sq = g.square(centered)?;
    let ss = g.sum_cols(sq)?;
    let var = g.scale(ss, inv_b)?;
    let var = g.add_scalar(var, NORM_EPS)?;
    let std = g.sqrt(var)?;
    let inv = g.recip(std)?;
    let inv = g.broadcast_rows(inv, b)?;
    g.mul(centered, inv)
}

impl Parameterized for Norm {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("scale", &self.scale);
        f("shift", &self.shift);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("scale", &mut self.scale);
        f("shift", &mut self.shift);
    }
}

// ---- input-convex network and Lyapunov function -----------------------------

/// Two-layer input-convex network `g: ℝⁿ → ℝ`:
/// `q₁ = σ(W₀ z + b₀)`, `g = σ(ReLU(U) q₁ + W₁ z + b₁)` with `σ` the smooth
/// ReLU of width `d`. Skip weights pass through ReLU at every evaluation, so
/// `g` is convex in `z` for any raw parameter values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Icnn {
    pub w0: Tensor,
    pub b0: Tensor,
    pub u_raw: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub smoothing: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct IcnnVars {
    pub w0: Var,
    pub b0: Var,
    pub u_raw: Var,
    pub w1: Var,
    pub b1: Var,
    pub smoothing: f64,
}

impl Icnn {
    pub fn init(rng: &mut impl Rng, n: usize, hidden: usize, smoothing: f64) -> Result<Self> {
        check_smoothing(smoothing)?;
        let b_in = 1.0 / (n as f64).sqrt();
        let b_h = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w0: uniform(rng, &[hidden, n], b_in),
            b0: uniform(rng, &[hidden], b_in),
            u_raw: normal(rng, &[1, hidden], 0.1),
            w1: uniform(rng, &[1, n], b_in),
            b1: uniform(rng, &[1], b_h),
            smoothing,
        })
    }

    /// Every weight and bias zero, so `g` is the constant `σ(0) = 0`.
    pub fn zeros(n: usize, hidden: usize, smoothing: f64) -> Result<Self> {
        check_smoothing(smoothing)?;
        Ok(Self {
            w0: Tensor::zeros(&[hidden, n]),
            b0: Tensor::zeros(&[hidden]),
            u_raw: Tensor::zeros(&[1, hidden]),
            w1: Tensor::zeros(&[1, n]),
            b1: Tensor::zeros(&[1]),
            smoothing,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.w0.cols()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool, vars: &mut Vec<Var>) -> IcnnVars {
        IcnnVars {
            w0: bind_one(g, &self.w0, trainable, vars),
            b0: bind_one(g, &self.b0, trainable, vars),
            u_raw: bind_one(g, &self.u_raw, trainable, vars),
            w1: bind_one(g, &self.w1, trainable, vars),
            b1: bind_one(g, &self.b1, trainable, vars),
            smoothing: self.smoothing,
        }
    }

    /// `g(z)` for each row of `z`, as `[batch]`.
    pub fn eval_g(&self, z: &Tensor) -> Result<Tensor> {
        self.eval_with(z, |g, p, z| p.g(g, z))
    }

    /// `V(z)` for each row of `z`, as `[batch]`.
    pub fn eval_v(&self, z: &Tensor) -> Result<Tensor> {
        self.eval_with(z, |g, p, z| p.v(g, z))
    }

    /// `∇V(z)` for each row of `z`.
    pub fn grad_v(&self, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false, &mut Vec::new());
        let zv = g.param(z.clone());
        let v = p.v(&mut g, zv)?;
        let total = g.sum(v)?;
        let grad = g.vjp(total, &Tensor::scalar(1.0), &[zv])?.remove(0);
        Ok(grad.unwrap_or_else(|| Tensor::zeros(z.shape())))
    }

    fn eval_with(&self, z: &Tensor, f: impl Fn(&mut Graph, &IcnnVars, Var) -> Result<Var>) -> Result<Tensor> {
        let mut g = Graph::inference();
        let p = self.bind(&mut g, false, &mut Vec::new());
        let z = as_batch(z)?;
        let zv = g.constant(z);
        let out = f(&mut g, &p, zv)?;
        let rows = g.value(out).rows();
        g.value(out).clone().reshape(&[rows])
    }
}

fn check_smoothing(d: f64) -> Result<()> {
    if d > 0.0 && d.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("smoothing width must be positive, got {d}")))
    }
}

fn as_batch(z: &Tensor) -> Result<Tensor> {
    match z.shape().len() {
        1 => z.clone().reshape(&[1, z.numel()]),
        2 => Ok(z.clone()),
        _ => Err(Error::shape("state batch", z.shape(), &[0, 0])),
    }
}

impl IcnnVars {
    /// `g(z)` as `[batch×1]`.
    pub fn g(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let d = self.smoothing;
        let b = g.value(z).dims2("icnn")?.0;
        let h0 = g.matmul_nt(z, self.w0)?;
        let b0 = g.broadcast_rows(self.b0, b)?;
        let h0 = g.add(h0, b0)?;
        let q1 = g.smooth_relu(h0, d)?;
        let u = g.relu(self.u_raw)?;
        let skip = g.matmul_nt(q1, u)?;
        let lin = g.matmul_nt(z, self.w1)?;
        let b1 = g.broadcast_rows(self.b1, b)?;
        let h1 = g.add(skip, lin)?;
        let h1 = g.add(h1, b1)?;
        g.smooth_relu(h1, d)
    }

    /// `g(0)` as `[1×1]`, built from the parameters so it stays
    /// differentiable in them.
    pub fn g_at_origin(&self, g: &mut Graph) -> Result<Var> {
        let d = self.smoothing;
        let h = g.value(self.b0).numel();
        let b0 = g.reshape(self.b0, &[1, h])?;
        let q1 = g.smooth_relu(b0, d)?;
        let u = g.relu(self.u_raw)?;
        let skip = g.matmul_nt(q1, u)?;
        let b1 = g.reshape(self.b1, &[1, 1])?;
        let h1 = g.add(skip, b1)?;
        g.smooth_relu(h1, d)
    }

    /// `V(z) = σ(g(z) − g(0)) + ‖z‖²` as `[batch×1]`.
    pub fn v(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let b = g.value(z).dims2("lyapunov function")?.0;
        let gz = self.g(g, z)?;
        let g0 = self.g_at_origin(g)?;
        let g0 = g.broadcast_rows(g0, b)?;
        let diff = g.sub(gz, g0)?;
        let shaped = g.smooth_relu(diff, self.smoothing)?;
        let sq = g.square(z)?;
        let norm = g.sum_rows(sq)?;
        g.add(shaped, norm)
    }
}

impl Parameterized for Icnn {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("w0", &self.w0);
        f("b0", &self.b0);
        f("u_raw", &self.u_raw);
        f("w1", &self.w1);
        f("b1", &self.b1);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("w0", &mut self.w0);
        f("b0", &mut self.b0);
        f("u_raw", &mut self.u_raw);
        f("w1", &mut self.w1);
        f("b1", &mut self.b1);
    }
}

// ---- semi-orthogonal output layer -------------------------------------------

/// Bias-free `y = z Wᵀ` with `W` the leading `out×in` block of
/// `Q = H₁⋯H_r`, `H_j = I − 2 v_j v_jᵀ / ‖v_j‖²`. `W` has orthonormal rows
/// whenever `out ≤ in`, for any values of the vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalFc {
    /// Householder vectors, one per row: `[r×n]`.
    pub vectors: Tensor,
    pub out_features: usize,
    pub in_features: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct OrthogonalFcVars {
    pub vectors: Var,
    pub out_features: usize,
    pub in_features: usize,
}

impl OrthogonalFc {
    pub fn new(vectors: Tensor, out_features: usize, in_features: usize) -> Result<Self> {
        let (_, n) = vectors.dims2("householder vectors")?;
        if out_features > n || in_features > n || out_features == 0 || in_features == 0 {
            return Err(Error::Config(format!(
                "orthogonal layer {out_features}×{in_features} does not fit reflector dimension {n}"
            )));
        }
        Ok(Self { vectors, out_features, in_features })
    }

    /// `r = n = max(out, in)` standard-normal reflectors.
    pub fn init(rng: &mut impl Rng, out_features: usize, in_features: usize) -> Self {
        let n = out_features.max(in_features);
        Self {
            vectors: normal(rng, &[n, n], 1.0),
            out_features,
            in_features,
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool, vars: &mut Vec<Var>) -> OrthogonalFcVars {
        OrthogonalFcVars {
            vectors: bind_one(g, &self.vectors, trainable, vars),
            out_features: self.out_features,
            in_features: self.in_features,
        }
    }

    /// The realized `[out×in]` weight.
    pub fn weight(&self) -> Result<Tensor> {
        let mut g = Graph::inference();
        let p = self.bind(&mut g, false, &mut Vec::new());
        let w = p.weight(&mut g)?;
        Ok(g.value(w).clone())
    }
}

impl OrthogonalFcVars {
    pub fn weight(&self, g: &mut Graph) -> Result<Var> {
        let (r, n) = g.value(self.vectors).dims2("householder vectors")?;
        let mut q = g.constant(Tensor::eye(n));
        for j in 0..r {
            let v = g.select_row(self.vectors, j)?;
            let nrm = g.sum_sq(v)?;
            if g.value(nrm).item()? < MIN_REFLECTOR_NORM_SQ {
                continue;
            }
            // Q ← Q H_j = Q − (2/‖v‖²) (Q v) vᵀ
            let qv = g.matmul_nt(q, v)?;
            let outer = g.matmul(qv, v)?;
            let inv = g.recip(nrm)?;
            let coef = g.scale(inv, 2.0)?;
            let upd = g.mul_scalar_var(outer, coef)?;
            q = g.sub(q, upd)?;
        }
        let w = if self.out_features < n {
            let e_out = g.constant(selection(self.out_features, n));
            g.matmul(e_out, q)?
        } else {
            q
        };
        if self.in_features < n {
            let e_in = g.constant(selection(self.in_features, n));
            g.matmul_nt(w, e_in)
        } else {
            Ok(w)
        }
    }

    pub fn forward(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let w = self.weight(g)?;
        g.matmul_nt(z, w)
    }
}

/// `[k×n]` matrix selecting the first `k` coordinates.
fn selection(k: usize, n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[k, n]);
    for i in 0..k {
        t.row_mut(i)[i] = 1.0;
    }
    t
}

impl Parameterized for OrthogonalFc {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("householder", &self.vectors);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("householder", &mut self.vectors);
    }
}

/// `‖W Wᵀ − I‖∞` (largest absolute entry).
pub fn orthogonality_defect(w: &Tensor) -> Result<f64> {
    let wwt = crate::tensor::matmul_nt(w, w)?;
    let n = wwt.rows();
    Ok(wwt.sub(&Tensor::eye(n))?.max_abs())
}
