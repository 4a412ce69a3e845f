//! Subcommand implementations.

use std::path::Path;

use lyadeq::checkpoint::{load_model, save_model};
use lyadeq::experiment::{attack_row, clean_row, run_ablation, train_variant, ExperimentConfig, ResultRow};
use lyadeq::invariants::{verify_model, InvariantReport};
use lyadeq::model::ModelParams;
use lyadeq::train::EpochLog;
use serde::Serialize;

use crate::args::{Cli, Command, CommonArgs};
use crate::report::{csv_bytes, ensure_dir, write_results, write_sidecar, Environment, Sidecar};
use crate::{CliError, CliResult};

const EPOCH_COLUMNS: [&str; 7] = [
    "epoch",
    "lr",
    "loss",
    "accuracy",
    "convergence_rate",
    "mean_residual",
    "diverged_rows",
];

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = cli.common.resolve_config()?;
    let out = cli.common.out_dir(&cli.command);
    ensure_dir(&out)?;
    let ctx = Context {
        common: &cli.common,
        cfg: &cfg,
        out: &out,
        command: cli.command.name(),
    };
    match &cli.command {
        Command::Train => train(&ctx),
        Command::Eval { checkpoint } => eval(&ctx, checkpoint),
        Command::AttackEval { checkpoint } => attack_eval(&ctx, checkpoint),
        Command::Ablate => ablate(&ctx),
        Command::VerifyInvariants { checkpoint } => verify(&ctx, checkpoint.as_deref()),
    }
}

struct Context<'a> {
    common: &'a CommonArgs,
    cfg: &'a ExperimentConfig,
    out: &'a Path,
    command: &'a str,
}

impl Context<'_> {
    fn sidecar<T: Serialize>(&self, name: &str, result: T) -> CliResult<()> {
        write_sidecar(
            &self.out.join(name),
            &Sidecar {
                command: self.command,
                config: self.cfg,
                norm: self.common.norm,
                data_dir: &self.common.data_dir,
                environment: Environment::current(),
                result,
            },
        )
    }

    fn data(&self) -> CliResult<(lyadeq::data::Dataset, lyadeq::data::Dataset)> {
        Ok(self.cfg.load_data(&self.common.data_dir)?)
    }

    /// A checkpoint, checked against the configured data shape.
    fn model(&self, path: &Path, test: &lyadeq::data::Dataset) -> CliResult<ModelParams> {
        if !path.is_file() {
            return Err(CliError::Usage(format!("checkpoint {} not found", path.display())));
        }
        let (params, _) = load_model(path)?;
        if params.config.input_dim != test.features() {
            return Err(CliError::Usage(format!(
                "checkpoint expects {} input features but the dataset has {}",
                params.config.input_dim,
                test.features()
            )));
        }
        if params.variant != self.cfg.variant {
            eprintln!("note: using the checkpoint's variant {}", params.variant);
        }
        Ok(params)
    }
}

#[derive(Serialize)]
struct TrainResult<'a> {
    variant: String,
    epochs: &'a [EpochLog],
    checkpoints: Vec<String>,
    test: &'a ResultRow,
}

fn train(ctx: &Context) -> CliResult<()> {
    let (train_set, test) = ctx.data()?;
    let ckpt_dir = ctx.out.join("checkpoints");
    ensure_dir(&ckpt_dir)?;
    let mut checkpoints = Vec::new();
    let variant = ctx.cfg.variant;
    let seed = ctx.cfg.seed;
    let (params, log) = train_variant(variant, ctx.cfg, &train_set, ctx.common.norm, |e, p| {
        eprintln!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}  acc {:6.2}%  converged {:.4}  residual {:.2e}",
            e.epoch, e.lr, e.loss, e.accuracy, e.convergence_rate, e.mean_residual
        );
        let path = ckpt_dir.join(format!("epoch-{:03}.ckpt", e.epoch));
        save_model(&path, p, seed, e.epoch, serde_json::to_value(e)?)?;
        checkpoints.push(path.display().to_string());
        Ok(())
    })?;
    save_model(
        &ctx.out.join("model.ckpt"),
        &params,
        seed,
        log.epochs.len(),
        serde_json::to_value(ctx.cfg)?,
    )?;
    write_atomic_csv(&ctx.out.join("train_log.csv"), &log.epochs, &EPOCH_COLUMNS)?;
    let (row, _) = clean_row(&params, &test, ctx.cfg)?;
    eprintln!("test accuracy {:.2}%", row.clean_accuracy.unwrap_or(f64::NAN));
    write_results(&ctx.out.join("results.csv"), std::slice::from_ref(&row))?;
    ctx.sidecar(
        "train.json",
        TrainResult {
            variant: variant.to_string(),
            epochs: &log.epochs,
            checkpoints,
            test: &row,
        },
    )
}

fn write_atomic_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> CliResult<()> {
    lyadeq::checkpoint::write_atomic(path, &csv_bytes(rows, header)?)?;
    Ok(())
}

fn eval(ctx: &Context, checkpoint: &Path) -> CliResult<()> {
    let (_, test) = ctx.data()?;
    let params = ctx.model(checkpoint, &test)?;
    let (row, report) = clean_row(&params, &test, ctx.cfg)?;
    println!(
        "{} clean accuracy {:.2}% on {} samples (converged {:.4}, mean residual {:.2e})",
        params.variant, report.accuracy, report.samples, report.convergence_rate, report.mean_residual
    );
    write_results(&ctx.out.join("results.csv"), std::slice::from_ref(&row))?;
    ctx.sidecar("results.json", (&row, &report))
}

fn attack_eval(ctx: &Context, checkpoint: &Path) -> CliResult<()> {
    let (_, test) = ctx.data()?;
    let params = ctx.model(checkpoint, &test)?;
    let (clean, _) = clean_row(&params, &test, ctx.cfg)?;
    let clean_acc = clean.clean_accuracy.unwrap_or(f64::NAN);
    let mut rows = vec![clean];
    for &k in &ctx.cfg.attack.eps_255 {
        let row = attack_row(&params, &test, ctx.cfg, ctx.cfg.attack.family, k, clean_acc)?;
        println!(
            "{} {} eps {}: robust accuracy {:.2}% (clean {:.2}%)",
            params.variant,
            row.attack,
            row.eps,
            row.robust_accuracy.unwrap_or(f64::NAN),
            clean_acc
        );
        rows.push(row);
        write_results(&ctx.out.join("results.csv"), &rows)?;
    }
    ctx.sidecar("results.json", &rows)
}

fn ablate(ctx: &Context) -> CliResult<()> {
    let (train_set, test) = ctx.data()?;
    let path = ctx.out.join("ablation.csv");
    let mut rows = Vec::new();
    let mut write_error = None;
    run_ablation(ctx.cfg, &train_set, &test, ctx.common.norm, |row| {
        match &row.error {
            None => println!(
                "{:<15} {:<5} {:>6}  clean {:6.2}  robust {:6.2}",
                row.variant.to_string(),
                row.attack,
                row.eps,
                row.clean_accuracy.unwrap_or(f64::NAN),
                row.robust_accuracy.unwrap_or(f64::NAN)
            ),
            Some(e) => println!("{:<15} {:<5} {:>6}  error: {e}", row.variant.to_string(), row.attack, row.eps),
        }
        rows.push(row.clone());
        if let Err(e) = write_results(&path, &rows) {
            write_error.get_or_insert(e);
        }
    });
    if let Some(e) = write_error {
        return Err(e);
    }
    ctx.sidecar("ablation.json", &rows)
}

fn verify(ctx: &Context, checkpoint: Option<&Path>) -> CliResult<()> {
    let (_, test) = ctx.data()?;
    let params = match checkpoint {
        Some(path) => ctx.model(path, &test)?,
        None => ModelParams::init(ctx.cfg.variant, &ctx.cfg.model_config(&test, ctx.common.norm), ctx.cfg.seed)?,
    };
    let report = verify_model(
        &params,
        &test.images,
        &test.labels,
        &ctx.cfg.solver_config(),
        &ctx.cfg.stability_config(),
        ctx.cfg.seed,
    )?;
    print_report(&report);
    ctx.sidecar("invariants.json", &report)?;
    match report.failures().len() {
        0 => Ok(()),
        n => Err(CliError::InvariantsFailed(n)),
    }
}

pub fn print_report(report: &InvariantReport) {
    for c in &report.checks {
        println!(
            "{}  {:<22} measured {:>12.4e}  threshold {:>12.4e}  {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.measured,
            c.threshold,
            c.detail
        );
    }
}
