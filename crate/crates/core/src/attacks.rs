//! White-box ℓ∞ attacks: I-FGSM and PGD.
//!
//! Radii are given as integers `k` meaning `k/255`. Both attacks take `n`
//! signed-gradient ascent steps of size `step` and project back onto the
//! `ε`-ball around the clean image intersected with `[0, 1]`. PGD starts from
//! a uniformly perturbed image; each sample draws its noise from its own
//! ChaCha8 stream (stream index = global sample index), so results do not
//! depend on batching.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixedpoint::{SolverConfig, SolverReport};
use crate::lyapunov::StabilityConfig;
use crate::model::{EvalReport, EvalTally, ModelParams};
use crate::tensor::{sign, Tensor};

pub const PIXEL_LEVELS: f64 = 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackFamily {
    Ifgsm,
    Pgd,
}

impl AttackFamily {
    pub const ALL: [AttackFamily; 2] = [AttackFamily::Ifgsm, AttackFamily::Pgd];

    pub fn name(self) -> &'static str {
        match self {
            AttackFamily::Ifgsm => "ifgsm",
            AttackFamily::Pgd => "pgd",
        }
    }
}

impl fmt::Display for AttackFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ifgsm" | "i-fgsm" => Ok(AttackFamily::Ifgsm),
            "pgd" => Ok(AttackFamily::Pgd),
            other => Err(Error::Config(format!("unknown attack {other:?} (expected ifgsm or pgd)"))),
        }
    }
}

/// `⌊min(k + 4, 1.25k)⌋` for `ε = k/255`, in exact integer arithmetic.
pub fn steps_for_k(k: u32) -> usize {
    (k + 4).min(5 * k / 4) as usize
}

/// `⌊min(255ε + 4, 1.25·255ε)⌋`. Radii that are `k/255` up to rounding give
/// the same result as [`steps_for_k`].
pub fn steps_for_radius(epsilon: f64) -> Result<usize> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Domain(format!("attack radius must be nonnegative, got {epsilon}")));
    }
    let scaled = epsilon * PIXEL_LEVELS;
    // Undo representation error in k/255 before flooring.
    let v = (scaled + 4.0).min(1.25 * scaled);
    Ok((v + 1e-9).floor() as usize)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub family: AttackFamily,
    pub epsilon: f64,
    pub step: f64,
    pub steps: usize,
    /// Seed of the PGD initialization.
    pub seed: u64,
    pub clip_min: f64,
    pub clip_max: f64,
}

impl AttackConfig {
    /// Radius `k/255`, step `step_255/255`, step count from [`steps_for_k`].
    pub fn for_radius(family: AttackFamily, k: u32, step_255: f64, seed: u64) -> Self {
        Self {
            family,
            epsilon: k as f64 / PIXEL_LEVELS,
            step: step_255 / PIXEL_LEVELS,
            steps: steps_for_k(k),
            seed,
            clip_min: 0.0,
            clip_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("attack radius must be nonnegative, got {}", self.epsilon)));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config(format!("attack step must be positive, got {}", self.step)));
        }
        if !(self.clip_min < self.clip_max) {
            return Err(Error::Config("attack clip range is empty".into()));
        }
        Ok(())
    }
}

/// A model that exposes the gradient of its loss with respect to its input.
pub trait InputGradient {
    fn input_gradient(&mut self, x: &Tensor, labels: &[usize]) -> Result<Tensor>;
}

impl<F> InputGradient for F
where
    F: FnMut(&Tensor, &[usize]) -> Result<Tensor>,
{
    fn input_gradient(&mut self, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
        self(x, labels)
    }
}

/// The full model at inference settings as an attack target. Collects the
/// solver reports of every gradient evaluation.
pub struct ModelTarget<'a> {
    pub params: &'a ModelParams,
    pub solver: &'a SolverConfig,
    pub stability: &'a StabilityConfig,
    pub reports: Vec<SolverReport>,
}

impl<'a> ModelTarget<'a> {
    pub fn new(params: &'a ModelParams, solver: &'a SolverConfig, stability: &'a StabilityConfig) -> Self {
        Self {
            params,
            solver,
            stability,
            reports: Vec::new(),
        }
    }
}

impl InputGradient for ModelTarget<'_> {
    fn input_gradient(&mut self, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let (_, grad, report) = self.params.loss_input_gradient(x, labels, self.solver, self.stability)?;
        self.reports.push(report);
        Ok(grad)
    }
}

/// Project `x_adv` onto the `ε`-ball around `x` and the clip range, in place.
pub fn project(x_adv: &mut Tensor, x: &Tensor, cfg: &AttackConfig) -> Result<()> {
    if x_adv.shape() != x.shape() {
        return Err(Error::shape("attack projection", x_adv.shape(), x.shape()));
    }
    for (a, &o) in x_adv.data_mut().iter_mut().zip(x.data()) {
        *a = a.clamp(o - cfg.epsilon, o + cfg.epsilon).clamp(cfg.clip_min, cfg.clip_max);
    }
    Ok(())
}

fn check_input(x: &Tensor, cfg: &AttackConfig) -> Result<()> {
    cfg.validate()?;
    if x.data().iter().any(|&v| !(cfg.clip_min..=cfg.clip_max).contains(&v)) {
        return Err(Error::Domain("attack input lies outside the clip range".into()));
    }
    Ok(())
}

fn ascend(model: &mut impl InputGradient, mut x_adv: Tensor, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    for _ in 0..cfg.steps {
        let grad = model.input_gradient(&x_adv, labels)?;
        if grad.shape() != x.shape() {
            return Err(Error::shape("attack gradient", grad.shape(), x.shape()));
        }
        for (a, &gv) in x_adv.data_mut().iter_mut().zip(grad.data()) {
            *a += cfg.step * sign(gv);
        }
        project(&mut x_adv, x, cfg)?;
    }
    Ok(x_adv)
}

/// Iterative FGSM from the clean image.
pub fn ifgsm(model: &mut impl InputGradient, x: &Tensor, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    check_input(x, cfg)?;
    ascend(model, x.clone(), x, labels, cfg)
}

/// PGD from `x + U[−ε, ε]`. Row `i` of `x` is global sample
/// `sample_offset + i` for the purpose of its noise stream.
pub fn pgd(
    model: &mut impl InputGradient,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    sample_offset: u64,
) -> Result<Tensor> {
    check_input(x, cfg)?;
    let mut x0 = x.clone();
    if cfg.epsilon > 0.0 {
        for r in 0..x0.rows() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(sample_offset + r as u64);
            for v in x0.row_mut(r) {
                *v += rng.gen_range(-cfg.epsilon..=cfg.epsilon);
            }
        }
    }
    project(&mut x0, x, cfg)?;
    ascend(model, x0, x, labels, cfg)
}

pub fn attack(
    model: &mut impl InputGradient,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    sample_offset: u64,
) -> Result<Tensor> {
    match cfg.family {
        AttackFamily::Ifgsm => ifgsm(model, x, labels, cfg),
        AttackFamily::Pgd => pgd(model, x, labels, cfg, sample_offset),
    }
}

/// Largest `‖x_adv − x‖∞` and whether every entry lies in the clip range.
pub fn containment(x_adv: &Tensor, x: &Tensor, cfg: &AttackConfig) -> Result<(f64, bool)> {
    let dist = x_adv.sub(x)?.max_abs();
    let in_range = x_adv.data().iter().all(|v| (cfg.clip_min..=cfg.clip_max).contains(v));
    Ok((dist, in_range))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustReport {
    /// Accuracy on the adversarial images, with solver statistics of the
    /// final classification pass.
    pub robust: EvalReport,
    /// Largest ℓ∞ distance of any emitted example.
    pub max_distance: f64,
    pub in_range: bool,
}

/// Robust accuracy of `params` on `images` under `cfg`, in batches.
pub fn evaluate_attack(
    params: &ModelParams,
    images: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    solver: &SolverConfig,
    stability: &StabilityConfig,
    batch: usize,
) -> Result<RobustReport> {
    let batch = batch.max(1);
    let mut tally = EvalTally::default();
    let mut max_distance = 0.0_f64;
    let mut in_range = true;
    let n = images.rows();
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        let x = images.slice_rows(start, end);
        let y = &labels[start..end];
        let mut target = ModelTarget::new(params, solver, stability);
        let x_adv = attack(&mut target, &x, y, cfg, start as u64)?;
        let (d, ok) = containment(&x_adv, &x, cfg)?;
        max_distance = max_distance.max(d);
        in_range &= ok;
        let (pred, report) = params.predict(&x_adv, solver, stability)?;
        tally.add(&pred, y, &report, solver.tol);
        start = end;
    }
    Ok(RobustReport {
        robust: tally.finish(),
        max_distance,
        in_range,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::uniform;

    #[test]
    fn steps_follow_the_floor_min_rule() {
        assert_eq!(steps_for_k(2), 2);
        assert_eq!(steps_for_k(4), 5);
        assert_eq!(steps_for_k(6), 7);
        assert_eq!(steps_for_k(8), 10);
        assert_eq!(steps_for_k(0), 0);
        assert_eq!(steps_for_k(16), 20);
        assert_eq!(steps_for_k(20), 24);
        for k in 0..64 {
            assert_eq!(steps_for_radius(k as f64 / 255.0).unwrap(), steps_for_k(k), "k={k}");
        }
        assert!(steps_for_radius(-0.1).is_err());
    }

    fn linear_loss(w: Tensor) -> impl FnMut(&Tensor, &[usize]) -> Result<Tensor> {
        move |x: &Tensor, _: &[usize]| Ok(crate::tensor::broadcast_rows(&w, x.rows()))
    }

    #[test]
    fn zero_radius_returns_input() {
        let x = uniform(&mut ChaCha8Rng::seed_from_u64(0), &[3, 5], 0.5).map(|v| v + 0.5);
        let w = Tensor::new(&[5], vec![1.0, -1.0, 0.5, 0.0, 2.0]).unwrap();
        for family in AttackFamily::ALL {
            let cfg = AttackConfig {
                steps: 3,
                ..AttackConfig::for_radius(family, 0, 1.0, 9)
            };
            let out = attack(&mut linear_loss(w.clone()), &x, &[0, 0, 0], &cfg, 0).unwrap();
            assert_eq!(out, x);
        }
    }

    #[test]
    fn one_step_on_a_linear_model() {
        let x = Tensor::full(&[1, 4], 0.5);
        let w = Tensor::new(&[4], vec![3.0, -0.2, 0.0, 1e-9]).unwrap();
        let cfg = AttackConfig {
            steps: 1,
            ..AttackConfig::for_radius(AttackFamily::Ifgsm, 8, 1.0, 0)
        };
        let out = ifgsm(&mut linear_loss(w), &x, &[0], &cfg).unwrap();
        let s = 1.0 / 255.0;
        let want = [0.5 + s, 0.5 - s, 0.5, 0.5 + s];
        for (a, b) in out.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn containment_and_range() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        // Pixels near both range ends.
        let x = uniform(&mut r, &[6, 10], 0.5).map(|v| if v > 0.0 { 1.0 - v / 100.0 } else { -v / 100.0 });
        let w = uniform(&mut r, &[10], 1.0);
        for family in AttackFamily::ALL {
            for k in [2, 4, 6, 8] {
                let cfg = AttackConfig::for_radius(family, k, 1.0, 3);
                let out = attack(&mut linear_loss(w.clone()), &x, &[0; 6], &cfg, 0).unwrap();
                let (d, ok) = containment(&out, &x, &cfg).unwrap();
                assert!(d <= cfg.epsilon + 1e-12);
                assert!(ok);
            }
        }
    }

    #[test]
    fn pgd_noise_is_per_sample_and_seeded() {
        let x = Tensor::full(&[4, 6], 0.5);
        let zero = |x: &Tensor, _: &[usize]| Ok(Tensor::zeros(x.shape()));
        let cfg = AttackConfig::for_radius(AttackFamily::Pgd, 8, 1.0, 42);
        let full = pgd(&mut zero.clone(), &x, &[0; 4], &cfg, 0).unwrap();
        let again = pgd(&mut zero.clone(), &x, &[0; 4], &cfg, 0).unwrap();
        assert_eq!(full, again);
        let tail = pgd(&mut zero.clone(), &x.slice_rows(2, 4), &[0; 2], &cfg, 2).unwrap();
        assert_eq!(tail.data(), &full.data()[12..]);
        assert_ne!(full.row(0), full.row(1));
        let other = pgd(&mut zero.clone(), &x, &[0; 4], &AttackConfig { seed: 43, ..cfg.clone() }, 0).unwrap();
        assert_ne!(full, other);
    }

    #[test]
    fn rejects_out_of_range_input_and_bad_config() {
        let x = Tensor::full(&[1, 2], 1.5);
        let cfg = AttackConfig::for_radius(AttackFamily::Ifgsm, 2, 1.0, 0);
        let zero = |x: &Tensor, _: &[usize]| Ok(Tensor::zeros(x.shape()));
        assert!(ifgsm(&mut zero.clone(), &x, &[0], &cfg).is_err());
        let bad = AttackConfig { step: 0.0, ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn family_parsing() {
        assert_eq!("I-FGSM".parse::<AttackFamily>().unwrap(), AttackFamily::Ifgsm);
        assert_eq!("pgd".parse::<AttackFamily>().unwrap(), AttackFamily::Pgd);
        assert!("cw".parse::<AttackFamily>().is_err());
    }
}
