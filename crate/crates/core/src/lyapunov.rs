//! Lyapunov stability module.
//!
//! With residual dynamics `F(z) = f(z, x) − z` and the Lyapunov function `V`
//! of [`crate::layers::Icnn`], the projected dynamics are
//!
//! ```text
//! φ(z) = ∇V(z)ᵀF(z) + αV(z)
//! F̂(z) = F(z)                           if φ(z) ≤ 0
//!        F(z) − ∇V(z) φ(z) / ‖∇V(z)‖²    otherwise
//! ```
//!
//! so `∇VᵀF̂ ≤ −αV` always holds. The module output is `h = z* + γF̂(z*)`,
//! optionally repeated for several steps.

use serde::{Deserialize, Serialize};

use crate::deq::{implicit_map, DeqVars};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Icnn, IcnnVars};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityConfig {
    /// Exponential decay margin, `α ≥ 0`.
    pub alpha: f64,
    /// Step length of the output-state update, `γ > 0`.
    pub gamma: f64,
    /// Rows with `‖∇V‖² <` guard keep `F` unprojected.
    pub guard: f64,
    /// Number of `h ← h + γF̂(h)` updates.
    pub steps: usize,
}

impl Default for StabilityConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            gamma: 1.0,
            guard: 1e-12,
            steps: 1,
        }
    }
}

impl StabilityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.guard > 0.0) {
            return Err(Error::Config(format!("denominator guard must be positive, got {}", self.guard)));
        }
        if self.steps < 1 {
            return Err(Error::Config("stability steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// `F(z) = f(z, x) − z` with evaluation-mode normalization.
pub fn residual_dynamics(p: &crate::deq::DeqParams, z: &Tensor, x: &Tensor) -> Result<Tensor> {
    implicit_map(p, z, x)?.sub(z)
}

/// Whether a row takes the projection branch.
fn projects(phi: f64, grad_norm_sq: f64, guard: f64) -> bool {
    phi > 0.0 && grad_norm_sq >= guard
}

/// Projected dynamics for each row of `z`, evaluated directly on tensors.
pub fn stability_projection(f: &Tensor, z: &Tensor, icnn: &Icnn, cfg: &StabilityConfig) -> Result<Tensor> {
    cfg.validate()?;
    let z = as_batch(z)?;
    let f_b = as_batch(f)?;
    if f_b.shape() != z.shape() {
        return Err(Error::shape("stability projection", f.shape(), z.shape()));
    }
    let v = icnn.eval_v(&z)?;
    let grad = icnn.grad_v(&z)?;
    let mut out = f_b.clone();
    for b in 0..z.rows() {
        let gr = grad.row(b);
        let fr = f_b.row(b);
        let dot: f64 = gr.iter().zip(fr).map(|(a, c)| a * c).sum();
        let nsq: f64 = gr.iter().map(|a| a * a).sum();
        let phi = dot + cfg.alpha * v.data()[b];
        if projects(phi, nsq, cfg.guard) {
            let c = phi / nsq;
            for (o, gi) in out.row_mut(b).iter_mut().zip(gr) {
                *o -= c * gi;
            }
        }
    }
    out.reshape(f.shape())
}

/// `φ(z) = ∇V(z)ᵀF + αV(z)` for each row.
pub fn decay_margin(f: &Tensor, z: &Tensor, icnn: &Icnn, alpha: f64) -> Result<Vec<f64>> {
    let z = as_batch(z)?;
    let f = as_batch(f)?;
    let v = icnn.eval_v(&z)?;
    let grad = icnn.grad_v(&z)?;
    Ok((0..z.rows())
        .map(|b| {
            let dot: f64 = grad.row(b).iter().zip(f.row(b)).map(|(a, c)| a * c).sum();
            dot + alpha * v.data()[b]
        })
        .collect())
}

fn as_batch(t: &Tensor) -> Result<Tensor> {
    match t.shape().len() {
        1 => t.clone().reshape(&[1, t.numel()]),
        2 => Ok(t.clone()),
        _ => Err(Error::shape("state batch", t.shape(), &[0, 0])),
    }
}

/// Projected dynamics on the graph. `∇V` is taken with respect to `z` itself
/// and recorded, so the result stays differentiable in `z`, `f` and the ICNN
/// parameters. The branch choice is a constant mask.
pub fn project_on_graph(g: &mut Graph, icnn: &IcnnVars, z: Var, f: Var, cfg: &StabilityConfig) -> Result<Var> {
    if g.shape(z) != g.shape(f) {
        return Err(Error::shape("stability projection", g.shape(f), g.shape(z)));
    }
    let rows = g.value(z).dims2("stability projection")?.0;
    let v = icnn.v(g, z)?;
    let total = g.sum(v)?;
    let grad_v = match g.gradients(total, &[z], true)?.remove(0) {
        Some(gv) => gv,
        // z carries no gradient, so ∇V is a plain constant.
        None => {
            let gv = icnn_grad_constant(g, icnn, z)?;
            g.constant(gv)
        }
    };
    let gf = g.mul(grad_v, f)?;
    let dot = g.sum_rows(gf)?;
    let av = g.scale(v, cfg.alpha)?;
    let phi = g.add(dot, av)?;
    let gsq = g.square(grad_v)?;
    let nsq = g.sum_rows(gsq)?;

    let mut mask = Tensor::zeros(&[rows, 1]);
    let mut inv_mask = Tensor::zeros(&[rows, 1]);
    for b in 0..rows {
        let on = projects(g.value(phi).data()[b], g.value(nsq).data()[b], cfg.guard);
        mask.data_mut()[b] = if on { 1.0 } else { 0.0 };
        inv_mask.data_mut()[b] = if on { 0.0 } else { 1.0 };
    }
    let mask = g.constant(mask);
    let inv_mask = g.constant(inv_mask);
    let safe = g.add(nsq, inv_mask)?;
    let inv = g.recip(safe)?;
    let active = g.mul(phi, mask)?;
    let coef = g.mul(active, inv)?;
    let corr = g.mul_rows(grad_v, coef)?;
    g.sub(f, corr)
}

fn icnn_grad_constant(g: &Graph, icnn: &IcnnVars, z: Var) -> Result<Tensor> {
    let mut local = Graph::new();
    let p = IcnnVars {
        w0: local.constant(g.value(icnn.w0).clone()),
        b0: local.constant(g.value(icnn.b0).clone()),
        u_raw: local.constant(g.value(icnn.u_raw).clone()),
        w1: local.constant(g.value(icnn.w1).clone()),
        b1: local.constant(g.value(icnn.b1).clone()),
        smoothing: icnn.smoothing,
    };
    let zv = local.param(g.value(z).clone());
    let v = p.v(&mut local, zv)?;
    let total = local.sum(v)?;
    Ok(local
        .vjp(total, &Tensor::scalar(1.0), &[zv])?
        .remove(0)
        .unwrap_or_else(|| Tensor::zeros(g.shape(z))))
}

/// One update `z + γF̂` given the dynamics `f` at `z`.
pub fn lyapunov_step(g: &mut Graph, icnn: &IcnnVars, z: Var, f: Var, cfg: &StabilityConfig) -> Result<Var> {
    let fhat = project_on_graph(g, icnn, z, f, cfg)?;
    let step = g.scale(fhat, cfg.gamma)?;
    g.add(z, step)
}

/// Stabilized output state starting from the equilibrium `z_star`: `steps`
/// updates `h ← h + γF̂(h)` with `F(h) = f(h, x) − h`.
pub fn stabilized_state(
    g: &mut Graph,
    deq: &DeqVars,
    icnn: &IcnnVars,
    z_star: Var,
    x: Var,
    cfg: &StabilityConfig,
    training: bool,
) -> Result<Var> {
    cfg.validate()?;
    let mut h = z_star;
    for _ in 0..cfg.steps {
        let fh = deq.map(g, h, x, training)?;
        let f = g.sub(fh, h)?;
        h = lyapunov_step(g, icnn, h, f, cfg)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deq::{solve_fixed_point, DeqParams};
    use crate::fixedpoint::SolverConfig;
    use crate::gradcheck::{finite_difference_gradient, relative_error};
    use crate::layers::{normal, uniform, NormKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(&[1, v.len()], v.to_vec()).unwrap()
    }

    fn zero_icnn() -> Icnn {
        Icnn::zeros(2, 4, 0.1).unwrap()
    }

    fn cfg(alpha: f64) -> StabilityConfig {
        StabilityConfig { alpha, ..Default::default() }
    }

    #[test]
    fn projection_hand_examples() {
        let icnn = zero_icnn();
        let fhat = stability_projection(&t(&[1.0, 0.0]), &t(&[1.0, 0.0]), &icnn, &cfg(2.0)).unwrap();
        assert!(relative_error(&fhat, &t(&[-1.0, 0.0]), 1.0) < 1e-15);
        let phi = decay_margin(&fhat, &t(&[1.0, 0.0]), &icnn, 0.0).unwrap();
        assert!((phi[0] + 2.0).abs() < 1e-15);

        let f = t(&[-2.0, 0.0]);
        assert_eq!(stability_projection(&f, &t(&[1.0, 0.0]), &icnn, &cfg(1.0)).unwrap(), f);

        let f = t(&[0.3, -0.7]);
        assert_eq!(stability_projection(&f, &t(&[0.0, 0.0]), &icnn, &cfg(1.0)).unwrap(), f);
    }

    #[test]
    fn one_step_hand_example() {
        let icnn = zero_icnn();
        let mut g = Graph::new();
        let p = icnn.bind(&mut g, false, &mut Vec::new());
        let z = g.param(t(&[1.0, 0.0]));
        let f = g.constant(t(&[1.0, 0.0]));
        let h = lyapunov_step(&mut g, &p, z, f, &cfg(2.0)).unwrap();
        assert!(g.value(h).max_abs() < 1e-15);
    }

    #[test]
    fn graph_projection_matches_direct_evaluation() {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let icnn = Icnn::init(&mut r, 6, 8, 0.1).unwrap();
        let z = normal(&mut r, &[5, 6], 1.0);
        let f = normal(&mut r, &[5, 6], 2.0);
        let direct = stability_projection(&f, &z, &icnn, &cfg(0.5)).unwrap();
        for z_grad in [true, false] {
            let mut g = Graph::new();
            let p = icnn.bind(&mut g, true, &mut Vec::new());
            let zv = g.leaf(z.clone(), z_grad);
            let fv = g.constant(f.clone());
            let fhat = project_on_graph(&mut g, &p, zv, fv, &cfg(0.5)).unwrap();
            assert!(relative_error(g.value(fhat), &direct, 1.0) < 1e-12);
        }
    }

    #[test]
    fn exponential_decrease_certificate() {
        let mut r = ChaCha8Rng::seed_from_u64(12);
        let icnn = Icnn::init(&mut r, 8, 16, 0.1).unwrap();
        let c = cfg(0.1);
        for _ in 0..1000 {
            let dir = normal(&mut r, &[1, 8], 1.0);
            let radius = r.gen_range(0.1..10.0);
            let z = dir.scale(radius / dir.sum_sq().sqrt());
            let f_scale = r.gen_range(0.1..10.0);
            let f = normal(&mut r, &[1, 8], f_scale);
            let fhat = stability_projection(&f, &z, &icnn, &c).unwrap();
            let margin = decay_margin(&fhat, &z, &icnn, c.alpha).unwrap()[0];
            let scale = icnn.eval_v(&z).unwrap().data()[0].max(1.0);
            assert!(margin <= 1e-9 * scale, "margin {margin}");
            if decay_margin(&f, &z, &icnn, c.alpha).unwrap()[0] > 0.0 {
                assert!(margin.abs() <= 1e-9 * scale);
            }
        }
    }

    #[test]
    fn projection_is_idempotent_and_minimal() {
        let mut r = ChaCha8Rng::seed_from_u64(13);
        let icnn = Icnn::init(&mut r, 8, 16, 0.1).unwrap();
        let c = cfg(0.3);
        for _ in 0..200 {
            let z = normal(&mut r, &[1, 8], 2.0);
            let f = normal(&mut r, &[1, 8], 3.0);
            let fhat = stability_projection(&f, &z, &icnn, &c).unwrap();
            let again = stability_projection(&fhat, &z, &icnn, &c).unwrap();
            assert!(relative_error(&again, &fhat, 1.0) < 1e-12);
            let phi = decay_margin(&f, &z, &icnn, c.alpha).unwrap()[0];
            let grad_norm = icnn.grad_v(&z).unwrap().sum_sq().sqrt();
            let moved = fhat.sub(&f).unwrap().sum_sq().sqrt();
            assert!((moved - phi.max(0.0) / grad_norm).abs() <= 1e-9 * (1.0 + moved));
        }
    }

    #[test]
    fn projected_flow_decreases_v() {
        let mut r = ChaCha8Rng::seed_from_u64(14);
        let icnn = Icnn::init(&mut r, 8, 16, 0.1).unwrap();
        let c = cfg(0.5);
        let eta = 1e-3;
        let mut checked = 0;
        for _ in 0..1000 {
            let z_scale = r.gen_range(0.05..3.0);
            let z = normal(&mut r, &[1, 8], z_scale);
            let v0 = icnn.eval_v(&z).unwrap().data()[0];
            if v0 < 0.01 {
                continue;
            }
            let norm = z.sum_sq().sqrt();
            let f = uniform(&mut r, &[1, 8], norm);
            let fhat = stability_projection(&f, &z, &icnn, &c).unwrap();
            let moved = z.add(&fhat.scale(eta)).unwrap();
            let v1 = icnn.eval_v(&moved).unwrap().data()[0];
            assert!(v1 < v0, "V rose from {v0} to {v1}");
            checked += 1;
        }
        assert!(checked > 500);
    }

    #[test]
    fn invalid_config() {
        assert!(cfg(-1.0).validate().is_err());
        assert!(StabilityConfig { gamma: 0.0, ..Default::default() }.validate().is_err());
        assert!(StabilityConfig { steps: 0, ..Default::default() }.validate().is_err());
    }

    fn small_model(seed: u64) -> (DeqParams, Icnn, Tensor) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut p = DeqParams::init(&mut r, 6, NormKind::Layer);
        p.w1.weight = uniform(&mut r, &[6, 6], 0.3);
        p.w2.weight = uniform(&mut r, &[6, 6], 0.3);
        let icnn = Icnn::init(&mut r, 6, 8, 0.1).unwrap();
        let x = uniform(&mut r, &[3, 6], 1.0);
        (p, icnn, x)
    }

    #[test]
    fn residual_dynamics_vanish_at_fixed_point() {
        let (p, _, x) = small_model(15);
        let sc = SolverConfig::default();
        let (z, _) = solve_fixed_point(&p, &x, &sc, false).unwrap();
        assert!(residual_dynamics(&p, &z, &x).unwrap().max_abs() <= sc.tol);
        let zero = DeqParams::zeros(4, NormKind::Layer);
        let o = Tensor::zeros(&[1, 4]);
        assert_eq!(residual_dynamics(&zero, &o, &o).unwrap(), o);
    }

    #[test]
    fn residual_dynamics_gradient() {
        let (p, _, x) = small_model(16);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let z = uniform(&mut r, &[3, 6], 1.0);
        let w = uniform(&mut r, &[3, 6], 1.0);
        let mut g = Graph::new();
        let vars = p.bind(&mut g, false, &mut Vec::new());
        let zv = g.param(z.clone());
        let xv = g.constant(x.clone());
        let fz = vars.map(&mut g, zv, xv, false).unwrap();
        let f = g.sub(fz, zv).unwrap();
        let wv = g.constant(w.clone());
        let fw = g.mul(f, wv).unwrap();
        let s = g.sum(fw).unwrap();
        g.backward(s).unwrap();
        let fd = finite_difference_gradient(|z| residual_dynamics(&p, z, &x)?.dot(&w), &z, 1e-6).unwrap();
        assert!(relative_error(g.grad(zv).unwrap(), &fd, 1e-8) < 1e-5);
    }

    /// `Σ w ⊙ h(x)` through the full solve and stabilization.
    fn stabilized_loss(p: &DeqParams, icnn: &Icnn, x: &Tensor, w: &Tensor, c: &StabilityConfig) -> Result<f64> {
        let sc = SolverConfig { tol: 1e-11, max_iter: 200, ..Default::default() };
        let (z, _) = solve_fixed_point(p, x, &sc, false)?;
        let mut g = Graph::new();
        let dv = p.bind(&mut g, false, &mut Vec::new());
        let iv = icnn.bind(&mut g, false, &mut Vec::new());
        let zv = g.constant(z);
        let xv = g.constant(x.clone());
        let h = stabilized_state(&mut g, &dv, &iv, zv, xv, c, false)?;
        g.value(h).dot(w)
    }

    #[test]
    fn stabilized_state_gradient_and_clean_behaviour() {
        let (p, icnn, x) = small_model(17);
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let w = uniform(&mut r, &[3, 6], 1.0);
        for c in [cfg(0.1), StabilityConfig { alpha: 2.0, steps: 2, gamma: 0.5, ..Default::default() }] {
            let sc = SolverConfig { tol: 1e-11, max_iter: 200, ..Default::default() };
            let mut g = Graph::new();
            let mut pv = Vec::new();
            let dv = p.bind(&mut g, true, &mut pv);
            let mut iw = Vec::new();
            let iv = icnn.bind(&mut g, true, &mut iw);
            let xv = g.param(x.clone());
            let out = crate::deq::deq_forward(&mut g, &p, &pv, xv, &sc, false).unwrap();
            let h = stabilized_state(&mut g, &dv, &iv, out.z_star, xv, &c, false).unwrap();
            let gap = g.value(h).sub(g.value(out.z_star)).unwrap().max_abs();
            let wv = g.constant(w.clone());
            let hw = g.mul(h, wv).unwrap();
            let s = g.sum(hw).unwrap();
            g.backward(s).unwrap();

            let fd = finite_difference_gradient(|x| stabilized_loss(&p, &icnn, x, &w, &c), &x, 1e-5).unwrap();
            assert!(relative_error(g.grad(xv).unwrap(), &fd, 1e-8) <= 1e-3);
            let fd_w0 = finite_difference_gradient(
                |w0| {
                    let mut q = icnn.clone();
                    q.w0 = w0.clone();
                    stabilized_loss(&p, &q, &x, &w, &c)
                },
                &icnn.w0,
                1e-5,
            )
            .unwrap();
            assert!(relative_error(g.grad(iw[0]).unwrap(), &fd_w0, 1e-8) <= 1e-3);
            if c.steps == 1 {
                // On a converged clean fixed point only the αV term can move h.
                let v = icnn.eval_v(g.value(out.z_star)).unwrap();
                assert!(gap <= c.gamma * (1e-9 + c.alpha * v.max_abs()));
            }
        }
    }
}
