//! Runtime invariant suite for a model, reporting measured margins.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{containment, pgd, AttackConfig, AttackFamily, ModelTarget};
use crate::error::Result;
use crate::fixedpoint::SolverConfig;
use crate::layers::{normal, orthogonality_defect, Icnn};
use crate::lyapunov::{decay_margin, residual_dynamics, stability_projection, StabilityConfig};
use crate::model::{evaluate, ModelParams};
use crate::tensor::{relu, Tensor};

pub const ORTHOGONALITY_TOL: f64 = 1e-6;
pub const CERTIFICATE_TOL: f64 = 1e-9;
pub const CONVEXITY_TOL: f64 = 1e-9;
pub const MIN_CONVERGED_FRACTION: f64 = 0.99;
pub const GRADIENT_REL_TOL: f64 = 1e-3;
/// Random states per Lyapunov check.
pub const LYAPUNOV_SAMPLES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantCheck {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

impl InvariantCheck {
    /// Passes when `measured ≤ threshold`.
    pub fn at_most(name: &str, measured: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: measured <= threshold,
            measured,
            threshold,
            detail: detail.into(),
        }
    }

    /// Passes when `measured ≥ threshold`.
    pub fn at_least(name: &str, measured: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: measured >= threshold,
            measured,
            threshold,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InvariantReport {
    pub checks: Vec<InvariantCheck>,
}

impl InvariantReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&InvariantCheck> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    pub fn get(&self, name: &str) -> Option<&InvariantCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

pub fn check_orthogonality(w: &Tensor) -> Result<InvariantCheck> {
    Ok(InvariantCheck::at_most(
        "orthogonality",
        orthogonality_defect(w)?,
        ORTHOGONALITY_TOL,
        "max |W Wᵀ − I|",
    ))
}

pub fn check_skip_nonnegative(icnn: &Icnn) -> InvariantCheck {
    let min = icnn.u_raw.data().iter().map(|&u| relu(u)).fold(f64::INFINITY, f64::min);
    InvariantCheck::at_least("icnn-skip-nonnegative", min, 0.0, "min effective skip weight")
}

/// States with norms spread over `[0.1, 10]`.
fn random_states(rng: &mut impl Rng, count: usize, n: usize) -> Tensor {
    let mut z = normal(rng, &[count, n], 1.0);
    for r in 0..count {
        let radius = 10f64.powf(rng.gen_range(-1.0..=1.0));
        let norm = z.row(r).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        for v in z.row_mut(r) {
            *v *= radius / norm;
        }
    }
    z
}

/// Positivity, lower bound, midpoint convexity and the projected decay
/// certificate of `V`. `dynamics` supplies `F(z)` for a batch of states.
pub fn check_lyapunov(
    icnn: &Icnn,
    stability: &StabilityConfig,
    rng: &mut impl Rng,
    mut dynamics: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<Vec<InvariantCheck>> {
    let n = icnn.state_dim();
    let mut checks = Vec::new();
    let v0 = icnn.eval_v(&Tensor::zeros(&[1, n]))?.data()[0].abs();
    checks.push(InvariantCheck::at_most("lyapunov-origin", v0, 1e-12, "|V(0)|"));

    let z = random_states(rng, LYAPUNOV_SAMPLES, n);
    let v = icnn.eval_v(&z)?;
    let slack = (0..z.rows())
        .map(|r| v.data()[r] - z.row(r).iter().map(|x| x * x).sum::<f64>())
        .fold(f64::INFINITY, f64::min);
    checks.push(InvariantCheck::at_least(
        "lyapunov-lower-bound",
        slack,
        -1e-12,
        "min V(z) − ‖z‖² over sampled states",
    ));

    let w = random_states(rng, LYAPUNOV_SAMPLES, n);
    let mid = z.add(&w)?.scale(0.5);
    let (vw, vm) = (icnn.eval_v(&w)?, icnn.eval_v(&mid)?);
    let violation = (0..z.rows())
        .map(|r| vm.data()[r] - 0.5 * (v.data()[r] + vw.data()[r]))
        .fold(f64::NEG_INFINITY, f64::max);
    checks.push(InvariantCheck::at_most(
        "lyapunov-convexity",
        violation,
        CONVEXITY_TOL,
        "max V((a+b)/2) − (V(a)+V(b))/2",
    ));

    let f = dynamics(&z)?;
    let fhat = stability_projection(&f, &z, icnn, stability)?;
    let margin = decay_margin(&fhat, &z, icnn, stability.alpha)?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    checks.push(InvariantCheck::at_most(
        "decay-certificate",
        margin,
        CERTIFICATE_TOL,
        "max ∇V(z)ᵀF̂(z) + αV(z) over sampled states",
    ));
    Ok(checks)
}

/// Directional finite-difference check of the input gradient of the loss,
/// with the solver tightened to 1e-10.
pub fn check_input_gradient(
    params: &ModelParams,
    images: &Tensor,
    labels: &[usize],
    stability: &StabilityConfig,
    rng: &mut impl Rng,
) -> Result<InvariantCheck> {
    let tight = SolverConfig {
        tol: 1e-10,
        max_iter: 500,
        ..SolverConfig::default()
    };
    let (_, grad, report) = params.loss_input_gradient(images, labels, &tight, stability)?;
    let dir = normal(rng, images.shape(), 1.0);
    let h = 1e-5;
    let loss = |x: &Tensor| params.loss_input_gradient(x, labels, &tight, stability).map(|r| r.0);
    let (plus, minus) = (images.add(&dir.scale(h))?, images.sub(&dir.scale(h))?);
    let numeric = (loss(&plus)? - loss(&minus)?) / (2.0 * h);
    let analytic = grad.dot(&dir)?;
    let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
    let mut check = InvariantCheck::at_most(
        "implicit-gradient",
        err,
        GRADIENT_REL_TOL,
        format!("directional derivative {analytic:.6e} vs finite difference {numeric:.6e}"),
    );
    if !report.converged {
        check.passed = false;
        check.detail = format!("solver did not reach 1e-10 (residual {:.3e})", report.final_residual);
    }
    Ok(check)
}

/// The full suite on `params`, using `images`/`labels` (pixels in `[0, 1]`)
/// for the data-dependent checks.
pub fn verify_model(
    params: &ModelParams,
    images: &Tensor,
    labels: &[usize],
    solver: &SolverConfig,
    stability: &StabilityConfig,
    seed: u64,
) -> Result<InvariantReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = InvariantReport::default();
    if params.variant.uses_orthogonal_head() {
        report.checks.push(check_orthogonality(&params.head_weight()?)?);
    }
    if let Some(icnn) = &params.icnn {
        report.checks.push(check_skip_nonnegative(icnn));
        // Drive the sampled states with the model's own dynamics at one input.
        let x = params.features.forward(&images.slice_rows(0, 1))?.map(relu);
        let deq = &params.deq;
        let checks = check_lyapunov(icnn, stability, &mut rng, |z| {
            let xs = Tensor::from_rows(&vec![x.row(0).to_vec(); z.rows()])?;
            residual_dynamics(deq, z, &xs)
        })?;
        report.checks.extend(checks);
    }

    let eval = evaluate(params, images, labels, solver, stability, 256)?;
    report.checks.push(InvariantCheck::at_least(
        "fixed-point-residual",
        eval.convergence_rate,
        MIN_CONVERGED_FRACTION,
        format!(
            "fraction of {} samples with residual ≤ {:e} (mean {:.3e}, max {:.3e})",
            eval.samples, solver.tol, eval.mean_residual, eval.max_residual
        ),
    ));

    let few = images.rows().min(4);
    report.checks.push(check_input_gradient(
        params,
        &images.slice_rows(0, few),
        &labels[..few],
        stability,
        &mut rng,
    )?);

    let some = images.rows().min(32);
    let attack = AttackConfig::for_radius(AttackFamily::Pgd, 8, 1.0, seed);
    let x = images.slice_rows(0, some);
    let mut target = ModelTarget::new(params, solver, stability);
    let adv = pgd(&mut target, &x, &labels[..some], &attack, 0)?;
    let (dist, in_range) = containment(&adv, &x, &attack)?;
    let mut check = InvariantCheck::at_most(
        "attack-containment",
        dist,
        attack.epsilon + 1e-12,
        "max ‖x_adv − x‖∞ under PGD at 8/255",
    );
    if !in_range {
        check.passed = false;
        check.detail.push_str("; pixels left [0, 1]");
    }
    report.checks.push(check);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{rescale_unit, synth_blobs};
    use crate::model::{ModelConfig, Variant};

    fn small(variant: Variant) -> ModelParams {
        let cfg = ModelConfig {
            input_dim: 2,
            state_dim: 8,
            classes: 2,
            icnn_hidden: 8,
            ..Default::default()
        };
        ModelParams::init(variant, &cfg, 3).unwrap()
    }

    #[test]
    fn fresh_models_pass_every_check() {
        let data = rescale_unit(&synth_blobs(2, 20, 2.0, 1).unwrap());
        for v in Variant::ALL {
            let report = verify_model(
                &small(v),
                &data.images,
                &data.labels,
                &SolverConfig::default(),
                &StabilityConfig::default(),
                0,
            )
            .unwrap();
            assert!(report.passed(), "{v}: {:?}", report.failures());
            assert_eq!(report.get("decay-certificate").is_some(), v.uses_lyapunov());
            assert_eq!(report.get("orthogonality").is_some(), v.uses_orthogonal_head());
        }
    }

    #[test]
    fn corrupted_weight_fails_orthogonality() {
        let w = small(Variant::LyaDeq).head_weight().unwrap();
        assert!(check_orthogonality(&w).unwrap().passed);
        let bad = check_orthogonality(&w.scale(1.01)).unwrap();
        assert!(!bad.passed);
        assert!(bad.measured > 0.01);
    }

    #[test]
    fn certificate_catches_unprojected_dynamics() {
        // Outward dynamics F(z) = z violate decay everywhere before projection.
        let icnn = small(Variant::LyaDeq).icnn.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = random_states(&mut rng, 16, 8);
        let margin = decay_margin(&z, &z, &icnn, 0.1).unwrap();
        assert!(margin.iter().all(|&m| m > 0.0));
        let checks = check_lyapunov(&icnn, &StabilityConfig::default(), &mut rng, |z| Ok(z.clone())).unwrap();
        assert!(checks.iter().all(|c| c.passed), "{checks:?}");
    }
}
