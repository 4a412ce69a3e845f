//! Fixed-point solvers for `z = map(z)`.
//!
//! States are `[rows×n]` tensors whose rows are independent systems (one per
//! batch sample): residuals, convergence and Anderson mixing weights are all
//! tracked per row. A rank-1 state is a single row. Solvers never touch a
//! differentiation graph; gradients of a fixed point come from implicit
//! differentiation, not from unrolling iterations.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A row whose residual grows past this multiple of its starting residual
/// (floored at 1) is treated as diverging.
const BLOWUP_FACTOR: f64 = 1e6;

/// Mixing weights beyond this magnitude mean the small-ridge system was
/// numerically singular.
const MAX_MIXING_WEIGHT: f64 = 1e6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Max-abs residual at which a row counts as converged.
    pub tol: f64,
    pub max_iter: usize,
    /// Anderson history length.
    pub memory: usize,
    /// Mixing between map images and iterates, in `(0, 1]`.
    pub beta: f64,
    /// Ridge added to the Anderson Gram diagonal, relative to the Gram's
    /// mean diagonal.
    pub ridge: f64,
    /// Fraction of rows allowed to diverge before the solve fails. Diverged
    /// rows fall back to their best finite iterate.
    pub max_diverged_fraction: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iter: 50,
            memory: 5,
            beta: 1.0,
            ridge: 1e-8,
            max_diverged_fraction: 0.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("solver tolerance must be positive, got {}", self.tol)));
        }
        if self.max_iter < 1 {
            return Err(Error::Config("solver max_iter must be at least 1".into()));
        }
        if self.memory < 1 {
            return Err(Error::Config("Anderson memory must be at least 1".into()));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("mixing beta must lie in (0, 1], got {}", self.beta)));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::Config(format!("ridge must be nonnegative, got {}", self.ridge)));
        }
        if !(0.0..=1.0).contains(&self.max_diverged_fraction) {
            return Err(Error::Config("max_diverged_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    /// Map evaluations after the initial residual check.
    pub iterations: usize,
    /// Max over rows of each row's returned residual.
    pub final_residual: f64,
    pub initial_residual: f64,
    /// Max-abs residual over rows after each iteration.
    pub residual_trace: Vec<f64>,
    pub converged: bool,
    /// Iterations where some row's Gram system was singular and took a plain
    /// fixed-point step instead.
    pub picard_fallbacks: usize,
    /// Residual of each returned row.
    pub row_residuals: Vec<f64>,
    pub diverged_rows: usize,
}

impl SolverReport {
    /// Fraction of rows whose returned residual meets `tol`.
    pub fn converged_fraction(&self, tol: f64) -> f64 {
        if self.row_residuals.is_empty() {
            return 1.0;
        }
        self.row_residuals.iter().filter(|&&r| r <= tol).count() as f64 / self.row_residuals.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Method {
    Picard,
    Anderson,
}

/// Plain fixed-point iteration `z ← map(z)`.
pub fn picard_solve<F>(map: F, z0: &Tensor, cfg: &SolverConfig) -> Result<(Tensor, SolverReport)>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    solve(map, z0, cfg, Method::Picard)
}

/// Anderson-accelerated fixed-point iteration.
///
/// Keeps the last `memory` iterates `zᵢ` and images `map(zᵢ)`. Mixing weights
/// minimise `‖Σ αᵢ gᵢ‖²` with `Σ αᵢ = 1`, `gᵢ = map(zᵢ) − zᵢ`, through the
/// ridge-regularised normal equations `(H + λI) a = 1`, `α = a / Σa`. The next
/// iterate is `Σ αᵢ (β·map(zᵢ) + (1−β)·zᵢ)`.
pub fn anderson_solve<F>(map: F, z0: &Tensor, cfg: &SolverConfig) -> Result<(Tensor, SolverReport)>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    solve(map, z0, cfg, Method::Anderson)
}

/// Solve `uᵀ = seedᵀ + uᵀJ` given `vjp(u) = uᵀJ`, by Anderson iteration on
/// `u ↦ seed + vjp(u)` from `u = seed`.
pub fn vjp_linear_solve<F>(mut vjp: F, seed: &Tensor, cfg: &SolverConfig) -> Result<(Tensor, SolverReport)>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let map = |u: &Tensor| -> Result<Tensor> {
        let mut out = vjp(u)?;
        out.axpy(1.0, seed)?;
        Ok(out)
    };
    anderson_solve(map, seed, cfg)
}

fn solve<F>(mut map: F, z0: &Tensor, cfg: &SolverConfig, method: Method) -> Result<(Tensor, SolverReport)>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    cfg.validate()?;
    let rows = z0.rows();
    let mut report = SolverReport::default();

    let mut z = z0.clone();
    let mut fz = eval(&mut map, &z, &report)?;
    let mut res = row_residuals(&fz, &z)?;
    report.initial_residual = max_of(&res);

    let mut best = z.clone();
    let mut best_res = res.clone();
    let start_res: Vec<f64> = res.iter().map(|r| if r.is_finite() { r.max(1.0) } else { 1.0 }).collect();
    let mut active: Vec<bool> = res.iter().map(|&r| !(r <= cfg.tol)).collect();
    let mut diverged = vec![false; rows];
    for b in 0..rows {
        if !res[b].is_finite() {
            diverged[b] = true;
            active[b] = false;
        }
    }

    let mut hist_x: VecDeque<Tensor> = VecDeque::with_capacity(cfg.memory);
    let mut hist_f: VecDeque<Tensor> = VecDeque::with_capacity(cfg.memory);

    while active.iter().any(|&a| a) && report.iterations < cfg.max_iter {
        let next = match method {
            Method::Picard => {
                let mut next = z.clone();
                for b in (0..rows).filter(|&b| active[b]) {
                    next.row_mut(b).copy_from_slice(fz.row(b));
                }
                next
            }
            Method::Anderson => {
                if hist_x.len() == cfg.memory {
                    hist_x.pop_front();
                    hist_f.pop_front();
                }
                hist_x.push_back(z.clone());
                hist_f.push_back(fz.clone());
                let (next, fell_back) = anderson_step(&hist_x, &hist_f, &active, cfg);
                if fell_back {
                    report.picard_fallbacks += 1;
                }
                next
            }
        };
        z = next;
        fz = eval(&mut map, &z, &report)?;
        res = row_residuals(&fz, &z)?;
        report.iterations += 1;

        let mut trace = 0.0_f64;
        for b in 0..rows {
            if !active[b] {
                continue;
            }
            let r = res[b];
            if !r.is_finite() || r > BLOWUP_FACTOR * start_res[b] {
                diverged[b] = true;
                active[b] = false;
                trace = f64::INFINITY;
                continue;
            }
            trace = trace.max(r);
            if r < best_res[b] {
                best_res[b] = r;
                best.row_mut(b).copy_from_slice(z.row(b));
            }
            if r <= cfg.tol {
                active[b] = false;
            }
        }
        // Frozen rows keep their best residual in the trace.
        for b in (0..rows).filter(|&b| !active[b] && !diverged[b]) {
            trace = trace.max(best_res[b]);
        }
        report.residual_trace.push(trace);
        if method == Method::Picard {
            // Frozen rows must not move on the next step.
            for b in (0..rows).filter(|&b| !active[b]) {
                z.row_mut(b).copy_from_slice(best.row(b));
                fz.row_mut(b).copy_from_slice(best.row(b));
            }
        }
    }

    report.diverged_rows = diverged.iter().filter(|&&d| d).count();
    report.row_residuals = best_res;
    report.final_residual = max_of(&report.row_residuals);
    report.converged = report.final_residual <= cfg.tol;
    if report.diverged_rows > 0 && report.diverged_rows as f64 > cfg.max_diverged_fraction * rows as f64 {
        return Err(Error::SolverDivergence { report: Box::new(report) });
    }
    Ok((best, report))
}

fn eval<F>(map: &mut F, z: &Tensor, report: &SolverReport) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    match map(z) {
        Ok(out) => {
            if out.numel() != z.numel() {
                return Err(Error::shape("fixed-point map", z.shape(), out.shape()));
            }
            out.reshape(z.shape())
        }
        Err(Error::NonFinite(_)) => {
            let mut r = report.clone();
            r.final_residual = f64::INFINITY;
            Err(Error::SolverDivergence { report: Box::new(r) })
        }
        Err(e) => Err(e),
    }
}

fn row_residuals(fz: &Tensor, z: &Tensor) -> Result<Vec<f64>> {
    Ok(fz.sub(z)?.row_max_abs())
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, &r| if r.is_nan() { f64::NAN } else { m.max(r) })
}

/// Next Anderson iterate for every active row; inactive rows stay put.
fn anderson_step(
    hist_x: &VecDeque<Tensor>,
    hist_f: &VecDeque<Tensor>,
    active: &[bool],
    cfg: &SolverConfig,
) -> (Tensor, bool) {
    let k = hist_x.len();
    let last = hist_x.len() - 1;
    let mut next = hist_x[last].clone();
    let mut fell_back = false;
    let n = next.cols();
    let mut gram = vec![0.0; k * k];
    let mut g_rows: Vec<Vec<f64>> = vec![vec![0.0; n]; k];

    for b in (0..next.rows()).filter(|&b| active[b]) {
        for i in 0..k {
            let (x, f) = (hist_x[i].row(b), hist_f[i].row(b));
            for j in 0..n {
                g_rows[i][j] = f[j] - x[j];
            }
        }
        let alpha = if k == 1 {
            None
        } else {
            for i in 0..k {
                for j in 0..=i {
                    let v: f64 = g_rows[i].iter().zip(&g_rows[j]).map(|(a, c)| a * c).sum();
                    gram[i * k + j] = v;
                    gram[j * k + i] = v;
                }
            }
            mixing_weights(&gram, k, cfg.ridge)
        };
        let dst = next.row_mut(b);
        match alpha {
            Some(alpha) => {
                dst.iter_mut().for_each(|v| *v = 0.0);
                for (i, a) in alpha.iter().enumerate() {
                    let (x, f) = (hist_x[i].row(b), hist_f[i].row(b));
                    for j in 0..n {
                        dst[j] += a * (cfg.beta * f[j] + (1.0 - cfg.beta) * x[j]);
                    }
                }
            }
            None => {
                if k > 1 {
                    fell_back = true;
                }
                let (x, f) = (hist_x[last].row(b), hist_f[last].row(b));
                for j in 0..n {
                    dst[j] = cfg.beta * f[j] + (1.0 - cfg.beta) * x[j];
                }
            }
        }
    }
    (next, fell_back)
}

/// Mixing weights from `(H + λ·s·I) a = 1`, `α = a / Σa`, where `s` is the
/// smallest Gram diagonal entry (the squared norm of the best residual in the
/// history) so the ridge never dominates the newest residuals. Falls back to
/// `s = mean(diag H)` when that system is numerically singular or yields
/// extreme extrapolation. `None` when both fail.
fn mixing_weights(gram: &[f64], k: usize, ridge: f64) -> Option<Vec<f64>> {
    let diag = (0..k).map(|i| gram[i * k + i]);
    let min_diag = diag.clone().fold(f64::INFINITY, f64::min);
    let mean_diag = diag.sum::<f64>() / k as f64;
    if !(mean_diag > 0.0) || !mean_diag.is_finite() {
        return None;
    }
    if min_diag > 0.0 {
        if let Some(alpha) = ridge_solve(gram, k, mean_diag, ridge * min_diag / mean_diag) {
            if alpha.iter().all(|a| a.abs() <= MAX_MIXING_WEIGHT) {
                return Some(alpha);
            }
        }
    }
    ridge_solve(gram, k, mean_diag, ridge)
}

/// Solve `(H / scale + ridge·I) a = 1` by Gaussian elimination with partial
/// pivoting and normalise to `Σα = 1`.
fn ridge_solve(gram: &[f64], k: usize, scale: f64, ridge: f64) -> Option<Vec<f64>> {
    // Solve on the scale-free matrix; the normalisation below removes the
    // scale from the result.
    let inv = 1.0 / scale;
    let mut a: Vec<f64> = gram.iter().map(|v| v * inv).collect();
    for i in 0..k {
        a[i * k + i] += ridge;
    }
    let mut rhs = vec![1.0; k];
    for col in 0..k {
        let piv = (col..k).max_by(|&r1, &r2| a[r1 * k + col].abs().total_cmp(&a[r2 * k + col].abs()))?;
        if a[piv * k + col].abs() < 1e-300 {
            return None;
        }
        if piv != col {
            for j in 0..k {
                a.swap(piv * k + j, col * k + j);
            }
            rhs.swap(piv, col);
        }
        let p = a[col * k + col];
        for r in col + 1..k {
            let factor = a[r * k + col] / p;
            if factor != 0.0 {
                for j in col..k {
                    a[r * k + j] -= factor * a[col * k + j];
                }
                rhs[r] -= factor * rhs[col];
            }
        }
    }
    let mut x = vec![0.0; k];
    for r in (0..k).rev() {
        let s: f64 = (r + 1..k).map(|j| a[r * k + j] * x[j]).sum();
        x[r] = (rhs[r] - s) / a[r * k + r];
    }
    let total: f64 = x.iter().sum();
    if !total.is_finite() || total.abs() < 1e-300 {
        return None;
    }
    let alpha: Vec<f64> = x.iter().map(|v| v / total).collect();
    alpha.iter().all(|v| v.is_finite()).then_some(alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(z: &Tensor) -> Result<Tensor> {
        Ok(z.map(|v| 0.5 * v + 1.0))
    }

    #[test]
    fn picard_affine_contraction() {
        let cfg = SolverConfig { tol: 1e-6, ..Default::default() };
        let (z, rep) = picard_solve(affine, &Tensor::zeros(&[1]), &cfg).unwrap();
        assert!(rep.converged);
        assert!(rep.iterations <= 25, "{}", rep.iterations);
        assert!((z.data()[0] - 2.0).abs() < 1e-5);
        assert_eq!(rep.residual_trace.len(), rep.iterations);
    }

    #[test]
    fn identity_map_converges_immediately() {
        let z0 = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        for solver in [picard_solve::<fn(&Tensor) -> Result<Tensor>>, anderson_solve] {
            let (z, rep) = solver(|z| Ok(z.clone()), &z0, &SolverConfig::default()).unwrap();
            assert_eq!(z, z0);
            assert_eq!(rep.iterations, 0);
            assert_eq!(rep.final_residual, 0.0);
            assert!(rep.converged);
        }
    }

    #[test]
    fn expanding_map_diverges() {
        let err = picard_solve(|z| Ok(z.scale(2.0)), &Tensor::ones(&[1]), &SolverConfig::default()).unwrap_err();
        match err {
            Error::SolverDivergence { report } => assert!(!report.residual_trace.is_empty()),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn anderson_is_exact_on_affine_maps() {
        let cfg = SolverConfig { tol: 1e-10, memory: 2, ..Default::default() };
        let (z, rep) = anderson_solve(affine, &Tensor::zeros(&[1]), &cfg).unwrap();
        assert!(rep.converged, "{rep:?}");
        assert!(rep.iterations <= 3, "{rep:?}");
        let (zp, _) = picard_solve(affine, &Tensor::zeros(&[1]), &cfg).unwrap();
        assert!((z.data()[0] - zp.data()[0]).abs() < 1e-9);
    }

    #[test]
    fn rows_are_solved_independently() {
        // Row b has fixed point 2(b + 1).
        let map = |z: &Tensor| -> Result<Tensor> {
            let mut out = z.map(|v| 0.5 * v);
            for b in 0..out.rows() {
                for v in out.row_mut(b) {
                    *v += (b + 1) as f64;
                }
            }
            Ok(out)
        };
        let cfg = SolverConfig { tol: 1e-9, ..Default::default() };
        let (z, rep) = anderson_solve(map, &Tensor::zeros(&[3, 2]), &cfg).unwrap();
        assert!(rep.converged);
        for b in 0..3 {
            for &v in z.row(b) {
                assert!((v - 2.0 * (b + 1) as f64).abs() < 1e-8);
            }
        }
        assert_eq!(rep.row_residuals.len(), 3);
    }

    #[test]
    fn vjp_solve_closed_forms() {
        let seed = Tensor::new(&[1], vec![1.0]).unwrap();
        let cfg = SolverConfig { tol: 1e-12, ..Default::default() };
        let (u, _) = vjp_linear_solve(|u| Ok(Tensor::zeros(u.shape())), &seed, &cfg).unwrap();
        assert_eq!(u, seed);
        let (u, _) = vjp_linear_solve(|u| Ok(u.scale(0.5)), &seed, &cfg).unwrap();
        assert!((u.data()[0] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = SolverConfig { memory: 0, ..Default::default() };
        assert!(matches!(anderson_solve(affine, &Tensor::zeros(&[1]), &bad), Err(Error::Config(_))));
        let bad = SolverConfig { tol: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn non_finite_map_output_is_divergence() {
        let err = anderson_solve(|_| Err(Error::NonFinite("test".into())), &Tensor::zeros(&[1]), &SolverConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::SolverDivergence { .. }));
    }

    #[test]
    fn tolerated_divergence_returns_best_rows() {
        // Row 0 contracts, row 1 expands.
        let map = |z: &Tensor| -> Result<Tensor> {
            let mut out = z.clone();
            out.row_mut(0)[0] = 0.5 * z.row(0)[0] + 1.0;
            out.row_mut(1)[0] = 2.0 * z.row(1)[0] + 1.0;
            Ok(out)
        };
        let strict = SolverConfig::default();
        assert!(picard_solve(map, &Tensor::zeros(&[2, 1]), &strict).is_err());
        let lenient = SolverConfig { max_diverged_fraction: 0.5, ..Default::default() };
        let (z, rep) = picard_solve(map, &Tensor::zeros(&[2, 1]), &lenient).unwrap();
        assert_eq!(rep.diverged_rows, 1);
        assert!((z.row(0)[0] - 2.0).abs() < 1e-3);
        assert_eq!(z.row(1)[0], 0.0);
    }
}
