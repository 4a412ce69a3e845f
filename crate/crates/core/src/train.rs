//! Mini-batch training with softmax cross-entropy and optional PGD
//! adversarial training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, AttackConfig, AttackFamily, ModelTarget};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fixedpoint::SolverConfig;
use crate::graph::Graph;
use crate::lyapunov::StabilityConfig;
use crate::model::{argmax_rows, ModelConfig, ModelParams, Variant};
use crate::optim::{cosine_lr, Adam};
use crate::tensor::{relu, Tensor};

/// Fraction of a batch allowed to diverge before training aborts.
pub const TRAIN_MAX_DIVERGED_FRACTION: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdvTraining {
    #[default]
    None,
    PgdAt,
}

impl std::str::FromStr for AdvTraining {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(AdvTraining::None),
            "pgd-at" | "pgd_at" | "pgdat" => Ok(AdvTraining::PgdAt),
            other => Err(Error::Config(format!("unknown adversarial training mode {other:?} (expected none or pgd-at)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PgdAtConfig {
    pub epsilon: f64,
    pub step: f64,
    pub iterations: usize,
}

impl Default for PgdAtConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.031,
            step: 0.00784,
            iterations: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub adv: AdvTraining,
    pub pgd_at: PgdAtConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
            adv: AdvTraining::None,
            pgd_at: PgdAtConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    fn pgd_attack(&self, epoch: usize) -> AttackConfig {
        AttackConfig {
            family: AttackFamily::Pgd,
            epsilon: self.pgd_at.epsilon,
            step: self.pgd_at.step,
            steps: self.pgd_at.iterations,
            seed: self.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64),
            clip_min: 0.0,
            clip_max: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Training accuracy in percent, on the (possibly adversarial) batches.
    pub accuracy: f64,
    pub convergence_rate: f64,
    pub mean_residual: f64,
    /// Rows whose solve diverged but stayed under the abort threshold.
    pub diverged_rows: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

/// Solver settings used while training: the given tolerance and budget,
/// with partial divergence tolerated.
pub fn training_solver(solver: &SolverConfig) -> SolverConfig {
    SolverConfig {
        max_diverged_fraction: TRAIN_MAX_DIVERGED_FRACTION,
        ..solver.clone()
    }
}

struct StepStats {
    loss: f64,
    correct: usize,
    converged: usize,
    residual_sum: f64,
    diverged: usize,
}

fn train_step(
    params: &mut ModelParams,
    opt: &mut Adam,
    images: &Tensor,
    labels: &[usize],
    lr: f64,
    solver: &SolverConfig,
    stability: &StabilityConfig,
) -> Result<StepStats> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let x = g.constant(images.clone());
    let out = params.forward(&mut g, &bound, x, solver, stability, true).map_err(|e| match e {
        Error::SolverDivergence { report } => Error::TrainingAborted(format!(
            "fixed-point solve diverged on {} of {} rows (final residual {:.3e})",
            report.diverged_rows,
            labels.len(),
            report.final_residual
        )),
        other => other,
    })?;
    let loss = g.softmax_cross_entropy(out.logits, labels)?;
    let loss_value = g.value(loss).item()?;
    if !loss_value.is_finite() {
        return Err(Error::TrainingAborted(format!("non-finite loss {loss_value}")));
    }
    g.backward(loss)?;
    // A parameter the loss does not reach in this batch has zero gradient.
    let grads: Vec<_> = bound
        .vars
        .iter()
        .map(|&v| Some(g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v)))))
        .collect();
    let predicted = argmax_rows(g.value(out.logits));
    let z_star = g.value(out.z_star).clone();
    let report = out.report;
    drop(g);

    // Running statistics follow the pre-update forward pass.
    let features = params.features.forward(images)?.map(relu);
    params.deq.update_running_stats(&z_star, &features)?;
    opt.update(params, &grads, lr)?;

    Ok(StepStats {
        loss: loss_value,
        correct: predicted.iter().zip(labels).filter(|(p, y)| p == y).count(),
        converged: report.row_residuals.iter().filter(|&&r| r <= solver.tol).count(),
        residual_sum: report.row_residuals.iter().sum(),
        diverged: report.diverged_rows,
    })
}

/// Train a fresh `variant` model on `data`. `on_epoch` sees every epoch log
/// and the parameters after that epoch.
pub fn train(
    variant: Variant,
    model: &ModelConfig,
    data: &Dataset,
    cfg: &TrainConfig,
    solver: &SolverConfig,
    stability: &StabilityConfig,
    mut on_epoch: impl FnMut(&EpochLog, &ModelParams) -> Result<()>,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    solver.validate()?;
    stability.validate()?;
    if data.features() != model.input_dim {
        return Err(Error::shape("training data", data.images.shape(), &[data.len(), model.input_dim]));
    }
    if data.classes > model.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model only {}",
            data.classes, model.classes
        )));
    }
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut params = ModelParams::init(variant, model, cfg.seed)?;
    let solver = training_solver(solver);
    let mut opt = Adam::default();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr);
        order.shuffle(&mut shuffle_rng);
        let attack = cfg.pgd_attack(epoch);
        let (mut loss_sum, mut correct, mut converged, mut residual_sum, mut diverged) = (0.0, 0, 0, 0.0, 0);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let clean = data.images.select_rows(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let images = match cfg.adv {
                AdvTraining::None => clean,
                AdvTraining::PgdAt => {
                    let mut target = ModelTarget::new(&params, &solver, stability);
                    pgd(&mut target, &clean, &labels, &attack, (b * cfg.batch_size) as u64)?
                }
            };
            let s = train_step(&mut params, &mut opt, &images, &labels, lr, &solver, stability)?;
            loss_sum += s.loss * labels.len() as f64;
            correct += s.correct;
            converged += s.converged;
            residual_sum += s.residual_sum;
            diverged += s.diverged;
        }
        let n = data.len() as f64;
        let entry = EpochLog {
            epoch: epoch + 1,
            lr,
            loss: loss_sum / n,
            accuracy: 100.0 * correct as f64 / n,
            convergence_rate: converged as f64 / n,
            mean_residual: residual_sum / n,
            diverged_rows: diverged,
        };
        on_epoch(&entry, &params)?;
        log.epochs.push(entry);
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{rescale_unit, synth_blobs};
    use crate::layers::NormKind;
    use crate::model::evaluate;

    fn blob_model() -> ModelConfig {
        ModelConfig {
            input_dim: 2,
            state_dim: 8,
            classes: 2,
            icnn_hidden: 8,
            ..Default::default()
        }
    }

    fn quick(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 50,
            lr: 1e-2,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn lyadeq_learns_two_blobs() {
        let data = synth_blobs(2, 250, 3.0, 7).unwrap();
        let solver = SolverConfig::default();
        let stability = StabilityConfig::default();
        let (params, log) = train(
            Variant::LyaDeq,
            &blob_model(),
            &data,
            &TrainConfig { batch_size: 128, lr: 1e-3, ..quick(20, 1) },
            &solver,
            &stability,
            |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(log.epochs.len(), 20);
        assert!(log.epochs.iter().all(|e| e.loss.is_finite()));
        let report = evaluate(&params, &data.images, &data.labels, &solver, &stability, 128).unwrap();
        assert!(report.accuracy >= 95.0, "train accuracy {}", report.accuracy);
    }

    #[test]
    fn training_is_deterministic() {
        let data = synth_blobs(2, 40, 2.0, 3).unwrap();
        let run = || {
            train(
                Variant::LyaDeq,
                &blob_model(),
                &data,
                &quick(2, 5),
                &SolverConfig::default(),
                &StabilityConfig::default(),
                |_, _| Ok(()),
            )
            .unwrap()
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la, lb);
        assert_eq!(a, b);
    }

    #[test]
    fn constraints_hold_after_every_epoch() {
        let data = synth_blobs(2, 40, 2.0, 4).unwrap();
        let mut checked = 0;
        train(
            Variant::LyaDeq,
            &blob_model(),
            &data,
            &quick(3, 2),
            &SolverConfig::default(),
            &StabilityConfig::default(),
            |_, p| {
                assert!(p.orthogonality_defect()?.unwrap() <= 1e-6);
                checked += 1;
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(checked, 3);
    }

    #[test]
    fn pgd_training_and_batch_norm_run() {
        let data = rescale_unit(&synth_blobs(2, 30, 2.0, 6).unwrap());
        let model = ModelConfig {
            norm: NormKind::Batch,
            ..blob_model()
        };
        let cfg = TrainConfig {
            adv: AdvTraining::PgdAt,
            ..quick(1, 0)
        };
        let (p, log) = train(
            Variant::LyaDeq,
            &model,
            &data,
            &cfg,
            &SolverConfig::default(),
            &StabilityConfig::default(),
            |_, _| Ok(()),
        )
        .unwrap();
        assert!(log.epochs[0].loss.is_finite());
        assert!(p.deq.norm1.running_var.data().iter().any(|&v| v != 1.0));
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let data = synth_blobs(2, 10, 2.0, 0).unwrap();
        let s = SolverConfig::default();
        let st = StabilityConfig::default();
        let bad = TrainConfig { epochs: 0, ..quick(1, 0) };
        assert!(train(Variant::Deq, &blob_model(), &data, &bad, &s, &st, |_, _| Ok(())).is_err());
        let wide = ModelConfig { input_dim: 3, ..blob_model() };
        assert!(train(Variant::Deq, &wide, &data, &quick(1, 0), &s, &st, |_, _| Ok(())).is_err());
    }

    #[test]
    fn adversarial_mode_parses() {
        assert_eq!("pgd-at".parse::<AdvTraining>().unwrap(), AdvTraining::PgdAt);
        assert_eq!("none".parse::<AdvTraining>().unwrap(), AdvTraining::None);
        assert!("trades".parse::<AdvTraining>().is_err());
    }
}
