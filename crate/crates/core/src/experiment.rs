//! Declarative run descriptions and the variant/attack/radius result grid.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{evaluate_attack, AttackConfig, AttackFamily, PIXEL_LEVELS};
use crate::data::{load_mnist, rescale_unit, synth_blobs, Dataset, Split};
use crate::error::{Error, Result};
use crate::fixedpoint::SolverConfig;
use crate::layers::NormKind;
use crate::lyapunov::StabilityConfig;
use crate::model::{evaluate, EvalReport, ModelConfig, ModelParams, Variant};
use crate::train::{train, AdvTraining, EpochLog, TrainConfig, TrainLog};

/// Batch size of evaluation and attack passes.
pub const EVAL_BATCH: usize = 256;

/// Radii of the robustness grid, in units of 1/255.
pub const GRID_RADII: [u32; 4] = [2, 4, 6, 8];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    #[default]
    Mnist,
    /// Two-class Gaussian blobs rescaled into `[0, 1]²`.
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetSizes {
    pub train: usize,
    pub test: usize,
}

impl Default for SubsetSizes {
    fn default() -> Self {
        Self {
            train: 10_000,
            test: 2_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub tol: f64,
    pub max_iter: usize,
    pub anderson_m: usize,
    pub beta: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = SolverConfig::default();
        Self {
            tol: s.tol,
            max_iter: s.max_iter,
            anderson_m: s.memory,
            beta: s.beta,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StabilitySection {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for StabilitySection {
    fn default() -> Self {
        let s = StabilityConfig::default();
        Self {
            alpha: s.alpha,
            gamma: s.gamma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub adv_training: AdvTraining,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch: t.batch_size,
            lr: t.lr,
            adv_training: t.adv,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub family: AttackFamily,
    /// Radii as integers `k`, meaning `k/255`.
    pub eps_255: Vec<u32>,
    pub step_255: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            family: AttackFamily::Pgd,
            eps_255: GRID_RADII.to_vec(),
            step_255: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    /// Seeded subset sizes; `None` uses the full splits.
    pub subset: Option<SubsetSizes>,
    pub variant: Variant,
    pub seed: u64,
    pub solver: SolverSection,
    pub stability: StabilitySection,
    pub train: TrainSection,
    pub attack: AttackSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            subset: Some(SubsetSizes::default()),
            variant: Variant::LyaDeq,
            seed: 0,
            solver: SolverSection::default(),
            stability: StabilitySection::default(),
            train: TrainSection::default(),
            attack: AttackSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.solver_config().validate()?;
        self.stability_config().validate()?;
        self.train_config().validate()?;
        if self.attack.eps_255.is_empty() {
            return Err(Error::Config("attack.eps_255 must list at least one radius".into()));
        }
        for k in &self.attack.eps_255 {
            self.attack_config(self.attack.family, *k).validate()?;
        }
        Ok(())
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            tol: self.solver.tol,
            max_iter: self.solver.max_iter,
            memory: self.solver.anderson_m,
            beta: self.solver.beta,
            ..SolverConfig::default()
        }
    }

    pub fn stability_config(&self) -> StabilityConfig {
        StabilityConfig {
            alpha: self.stability.alpha,
            gamma: self.stability.gamma,
            ..StabilityConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch,
            lr: self.train.lr,
            seed: self.seed,
            adv: self.train.adv_training,
            ..TrainConfig::default()
        }
    }

    pub fn attack_config(&self, family: AttackFamily, k: u32) -> AttackConfig {
        AttackConfig::for_radius(family, k, self.attack.step_255, self.seed)
    }

    /// Model shape for `data` with the default widths.
    pub fn model_config(&self, data: &Dataset, norm: NormKind) -> ModelConfig {
        ModelConfig {
            input_dim: data.features(),
            classes: data.classes,
            norm,
            ..ModelConfig::default()
        }
    }

    /// Training and test splits. MNIST is read from `mnist_dir`.
    pub fn load_data(&self, mnist_dir: &Path) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self.dataset {
            DatasetKind::Mnist => (load_mnist(mnist_dir, Split::Train)?, load_mnist(mnist_dir, Split::Test)?),
            DatasetKind::Synthetic => {
                // One draw split in two, so both halves share the rescaling.
                let all = rescale_unit(&synth_blobs(2, 350, 3.0, self.seed)?);
                let cut = 500.min(all.len());
                let idx: Vec<usize> = (0..all.len()).collect();
                let (mut tr, mut te) = (all.select(&idx[..cut]), all.select(&idx[cut..]));
                tr.split = "train".into();
                te.split = "test".into();
                (tr, te)
            }
        };
        Ok(match self.subset {
            Some(s) => (train.subset(s.train, self.seed), test.subset(s.test, self.seed)),
            None => (train, test),
        })
    }
}

/// One cell of a results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: Variant,
    /// `none` for clean rows, otherwise the attack family.
    pub attack: String,
    pub eps_k: u32,
    /// The radius as the exact rational `k/255`.
    pub eps: String,
    pub clean_accuracy: Option<f64>,
    pub robust_accuracy: Option<f64>,
    pub seed: u64,
    pub runtime_s: f64,
    pub convergence_rate: Option<f64>,
    /// Set when the cell failed; the accuracies are then empty.
    pub error: Option<String>,
}

impl ResultRow {
    pub fn clean(variant: Variant, seed: u64, report: &EvalReport, runtime_s: f64) -> Self {
        Self {
            variant,
            attack: "none".into(),
            eps_k: 0,
            eps: format!("0/{}", PIXEL_LEVELS),
            clean_accuracy: Some(report.accuracy),
            robust_accuracy: Some(report.accuracy),
            seed,
            runtime_s,
            convergence_rate: Some(report.convergence_rate),
            error: None,
        }
    }

    pub fn failed(variant: Variant, attack: &str, k: u32, seed: u64, err: &Error) -> Self {
        Self {
            variant,
            attack: attack.into(),
            eps_k: k,
            eps: format!("{k}/{}", PIXEL_LEVELS),
            clean_accuracy: None,
            robust_accuracy: None,
            seed,
            runtime_s: 0.0,
            convergence_rate: None,
            error: Some(err.to_string()),
        }
    }
}

/// Clean accuracy of a trained model on `test`.
pub fn clean_row(params: &ModelParams, test: &Dataset, cfg: &ExperimentConfig) -> Result<(ResultRow, EvalReport)> {
    let t = Instant::now();
    let report = evaluate(
        params,
        &test.images,
        &test.labels,
        &cfg.solver_config(),
        &cfg.stability_config(),
        EVAL_BATCH,
    )?;
    Ok((ResultRow::clean(params.variant, cfg.seed, &report, t.elapsed().as_secs_f64()), report))
}

/// Robust accuracy under one attack family at radius `k/255`.
pub fn attack_row(
    params: &ModelParams,
    test: &Dataset,
    cfg: &ExperimentConfig,
    family: AttackFamily,
    k: u32,
    clean_accuracy: f64,
) -> Result<ResultRow> {
    let t = Instant::now();
    let attack = cfg.attack_config(family, k);
    let report = evaluate_attack(
        params,
        &test.images,
        &test.labels,
        &attack,
        &cfg.solver_config(),
        &cfg.stability_config(),
        EVAL_BATCH,
    )?;
    Ok(ResultRow {
        variant: params.variant,
        attack: family.name().into(),
        eps_k: k,
        eps: format!("{k}/{}", PIXEL_LEVELS),
        clean_accuracy: Some(clean_accuracy),
        robust_accuracy: Some(report.robust.accuracy),
        seed: cfg.seed,
        runtime_s: t.elapsed().as_secs_f64(),
        convergence_rate: Some(report.robust.convergence_rate),
        error: None,
    })
}

/// Train `variant` under `cfg` on `train_set`.
pub fn train_variant(
    variant: Variant,
    cfg: &ExperimentConfig,
    train_set: &Dataset,
    norm: NormKind,
    on_epoch: impl FnMut(&EpochLog, &ModelParams) -> Result<()>,
) -> Result<(ModelParams, TrainLog)> {
    train(
        variant,
        &cfg.model_config(train_set, norm),
        train_set,
        &cfg.train_config(),
        &cfg.solver_config(),
        &cfg.stability_config(),
        on_epoch,
    )
}

/// Clean plus I-FGSM and PGD rows at every grid radius for a trained model.
/// A failed cell becomes an error row and the grid continues.
pub fn grid_rows(params: &ModelParams, test: &Dataset, cfg: &ExperimentConfig, on_row: &mut dyn FnMut(&ResultRow)) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    let mut push = |row: ResultRow, rows: &mut Vec<ResultRow>| {
        on_row(&row);
        rows.push(row);
    };
    let clean = match clean_row(params, test, cfg) {
        Ok((row, report)) => {
            push(row, &mut rows);
            Some(report.accuracy)
        }
        Err(e) => {
            push(ResultRow::failed(params.variant, "none", 0, cfg.seed, &e), &mut rows);
            None
        }
    };
    for family in [AttackFamily::Ifgsm, AttackFamily::Pgd] {
        for &k in &cfg.attack.eps_255 {
            let row = match clean {
                Some(acc) => attack_row(params, test, cfg, family, k, acc)
                    .unwrap_or_else(|e| ResultRow::failed(params.variant, family.name(), k, cfg.seed, &e)),
                None => ResultRow::failed(
                    params.variant,
                    family.name(),
                    k,
                    cfg.seed,
                    &Error::Contract("clean evaluation failed".into()),
                ),
            };
            push(row, &mut rows);
        }
    }
    rows
}

/// Train all four variants with the same seed and schedule and evaluate each
/// on the grid. With the default radii this yields 36 rows.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    train_set: &Dataset,
    test: &Dataset,
    norm: NormKind,
    mut on_row: impl FnMut(&ResultRow),
) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        match train_variant(variant, cfg, train_set, norm, |_, _| Ok(())) {
            Ok((params, _)) => rows.extend(grid_rows(&params, test, cfg, &mut on_row)),
            Err(e) => {
                let mut cells = vec![ResultRow::failed(variant, "none", 0, cfg.seed, &e)];
                for family in [AttackFamily::Ifgsm, AttackFamily::Pgd] {
                    for &k in &cfg.attack.eps_255 {
                        cells.push(ResultRow::failed(variant, family.name(), k, cfg.seed, &e));
                    }
                }
                for row in cells {
                    on_row(&row);
                    rows.push(row);
                }
            }
        }
    }
    rows
}
