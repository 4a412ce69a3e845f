//! The implicit layer and its equilibrium.
//!
//! `f(z, x) = Norm(ReLU(x + W₂·Norm(ReLU(W₁ z + b₁)) + b₂))`. The forward pass
//! finds `z* = f(z*, x)` with Anderson acceleration outside any graph and
//! records `z*` as a single custom node. Its backward pass solves
//! `uᵀ = vᵀ + uᵀ ∂f/∂z` at `z*` and then takes one vector-Jacobian product
//! through `f` for the input and parameter gradients.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixedpoint::{anderson_solve, vjp_linear_solve, SolverConfig, SolverReport};
use crate::graph::{CustomOp, Graph, Var};
use crate::layers::{Linear, LinearVars, Norm, NormKind, NormVars, Parameterized};
use crate::tensor::Tensor;

/// Scale applied to the default uniform initialization of `W₁`, `W₂`. Keeps
/// the untrained map contractive so early training sees converged fixed
/// points.
pub const DEQ_WEIGHT_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeqParams {
    pub w1: Linear,
    pub w2: Linear,
    pub norm1: Norm,
    pub norm2: Norm,
}

#[derive(Clone, Copy, Debug)]
pub struct DeqVars {
    pub w1: LinearVars,
    pub w2: LinearVars,
    pub norm1: NormVars,
    pub norm2: NormVars,
}

impl DeqParams {
    pub fn init(rng: &mut impl Rng, n: usize, norm: NormKind) -> Self {
        let mut w1 = Linear::init(rng, n, n);
        let mut w2 = Linear::init(rng, n, n);
        w1.weight = w1.weight.scale(DEQ_WEIGHT_INIT_SCALE);
        w2.weight = w2.weight.scale(DEQ_WEIGHT_INIT_SCALE);
        Self {
            w1,
            w2,
            norm1: Norm::new(norm, n),
            norm2: Norm::new(norm, n),
        }
    }

    /// Zero weights and biases, unit scales, zero shifts.
    pub fn zeros(n: usize, norm: NormKind) -> Self {
        let lin = || Linear {
            weight: Tensor::zeros(&[n, n]),
            bias: Tensor::zeros(&[n]),
        };
        Self {
            w1: lin(),
            w2: lin(),
            norm1: Norm::new(norm, n),
            norm2: Norm::new(norm, n),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.w1.out_features()
    }

    pub fn norm_kind(&self) -> NormKind {
        self.norm1.kind
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool, vars: &mut Vec<Var>) -> DeqVars {
        DeqVars {
            w1: self.w1.bind(g, trainable, vars),
            w2: self.w2.bind(g, trainable, vars),
            norm1: self.norm1.bind(g, trainable, vars),
            norm2: self.norm2.bind(g, trainable, vars),
        }
    }

    /// Fold the batch statistics seen by both normalizations at `(z, x)`
    /// into their running averages. No-op for layer normalization.
    pub fn update_running_stats(&mut self, z: &Tensor, x: &Tensor) -> Result<()> {
        if self.norm_kind() != NormKind::Batch {
            return Ok(());
        }
        let mut g = Graph::inference();
        let p = self.bind(&mut g, false, &mut Vec::new());
        let zv = g.constant(z.clone());
        let xv = g.constant(x.clone());
        let mut taps = Vec::new();
        p.map_with_taps(&mut g, zv, xv, true, &mut taps)?;
        let pre1 = g.value(taps[0]).clone();
        let pre2 = g.value(taps[1]).clone();
        self.norm1.update_running(&pre1)?;
        self.norm2.update_running(&pre2)
    }
}

impl Parameterized for DeqParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.w1.visit(&mut |n, t| f(&format!("w1.{n}"), t));
        self.w2.visit(&mut |n, t| f(&format!("w2.{n}"), t));
        self.norm1.visit(&mut |n, t| f(&format!("norm1.{n}"), t));
        self.norm2.visit(&mut |n, t| f(&format!("norm2.{n}"), t));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.w1.visit_mut(&mut |n, t| f(&format!("w1.{n}"), t));
        self.w2.visit_mut(&mut |n, t| f(&format!("w2.{n}"), t));
        self.norm1.visit_mut(&mut |n, t| f(&format!("norm1.{n}"), t));
        self.norm2.visit_mut(&mut |n, t| f(&format!("norm2.{n}"), t));
    }
}

impl DeqVars {
    /// `f(z, x)` on the graph.
    pub fn map(&self, g: &mut Graph, z: Var, x: Var, training: bool) -> Result<Var> {
        self.map_with_taps(g, z, x, training, &mut Vec::new())
    }

    /// As [`DeqVars::map`], also pushing the inputs of both normalizations.
    fn map_with_taps(&self, g: &mut Graph, z: Var, x: Var, training: bool, taps: &mut Vec<Var>) -> Result<Var> {
        if g.shape(z) != g.shape(x) {
            return Err(Error::shape("implicit map", g.shape(z), g.shape(x)));
        }
        let h = self.w1.forward(g, z)?;
        let h = g.relu(h)?;
        taps.push(h);
        let h = self.norm1.forward(g, h, training)?;
        let y = self.w2.forward(g, h)?;
        let s = g.add(x, y)?;
        let s = g.relu(s)?;
        taps.push(s);
        self.norm2.forward(g, s, training)
    }
}

/// Graph-free `f(z, x)` with evaluation-mode normalization.
pub fn implicit_map(p: &DeqParams, z: &Tensor, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference();
    let vars = p.bind(&mut g, false, &mut Vec::new());
    let zv = g.constant(z.clone());
    let xv = g.constant(x.clone());
    let f = vars.map(&mut g, zv, xv, false)?;
    Ok(g.value(f).clone())
}

/// Solve `z = f(z, x)` from `z = 0` without recording anything.
pub fn solve_fixed_point(p: &DeqParams, x: &Tensor, cfg: &SolverConfig, training: bool) -> Result<(Tensor, SolverReport)> {
    if x.shape().len() != 2 || x.cols() != p.state_dim() {
        return Err(Error::shape("deq input", x.shape(), &[x.rows(), p.state_dim()]));
    }
    let mut g = Graph::inference();
    let vars = p.bind(&mut g, false, &mut Vec::new());
    let xv = g.constant(x.clone());
    let mark = g.len();
    let map = |z: &Tensor| -> Result<Tensor> {
        let zv = g.constant(z.clone());
        let f = vars.map(&mut g, zv, xv, training)?;
        let out = g.value(f).clone();
        g.truncate(mark);
        Ok(out)
    };
    anderson_solve(map, &Tensor::zeros(x.shape()), cfg)
}

#[derive(Clone, Debug)]
pub struct DeqGradients {
    pub x: Tensor,
    /// One per parameter tensor, in `visit` order.
    pub params: Vec<Tensor>,
    pub report: SolverReport,
}

/// Input and parameter gradients of `vᵀz*` by implicit differentiation.
pub fn deq_backward(
    upstream: &Tensor,
    z_star: &Tensor,
    x: &Tensor,
    p: &DeqParams,
    cfg: &SolverConfig,
    training: bool,
) -> Result<DeqGradients> {
    let mut g = Graph::new();
    let mut pv = Vec::new();
    let vars = p.bind(&mut g, true, &mut pv);
    let xv = g.param(x.clone());
    let zv = g.param(z_star.clone());
    let f = vars.map(&mut g, zv, xv, training)?;
    let seed = upstream.clone().reshape(z_star.shape())?;
    let jt = |u: &Tensor| -> Result<Tensor> {
        Ok(g.vjp(f, u, &[zv])?.remove(0).unwrap_or_else(|| Tensor::zeros(u.shape())))
    };
    let (u, report) = vjp_linear_solve(jt, &seed, cfg)?;
    let mut wrt = vec![xv];
    wrt.extend_from_slice(&pv);
    let mut grads = g.vjp(f, &u, &wrt)?.into_iter();
    let gx = grads.next().flatten().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let params = grads
        .zip(&pv)
        .map(|(gr, &v)| gr.unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();
    Ok(DeqGradients { x: gx, params, report })
}

struct DeqNode {
    params: DeqParams,
    cfg: SolverConfig,
    training: bool,
}

impl CustomOp for DeqNode {
    fn name(&self) -> &'static str {
        "deq_fixed_point"
    }

    fn vjp(&self, upstream: &Tensor, output: &Tensor, inputs: &[&Tensor], needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let grads = deq_backward(upstream, output, inputs[0], &self.params, &self.cfg, self.training)?;
        let mut out = Vec::with_capacity(inputs.len());
        out.push(needs[0].then_some(grads.x));
        for (gr, &need) in grads.params.into_iter().zip(&needs[1..]) {
            out.push(need.then_some(gr));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct DeqOutput {
    pub z_star: Var,
    pub report: SolverReport,
}

/// Equilibrium state for the feature batch `x`, recorded on `g` as one node
/// whose parents are `x` and the bound parameters `param_vars` (in `visit`
/// order).
pub fn deq_forward(
    g: &mut Graph,
    p: &DeqParams,
    param_vars: &[Var],
    x: Var,
    cfg: &SolverConfig,
    training: bool,
) -> Result<DeqOutput> {
    let (z, report) = solve_fixed_point(p, g.value(x), cfg, training)?;
    let node = Rc::new(DeqNode {
        params: p.clone(),
        cfg: cfg.clone(),
        training,
    });
    let mut inputs = vec![x];
    inputs.extend_from_slice(param_vars);
    let z_star = g.custom(node, &inputs, z)?;
    Ok(DeqOutput { z_star, report })
}
