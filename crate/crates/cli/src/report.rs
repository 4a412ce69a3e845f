//! CSV tables and JSON sidecars.

use std::fs;
use std::path::Path;

use lyadeq::checkpoint::write_atomic;
use lyadeq::experiment::{ExperimentConfig, ResultRow};
use lyadeq::layers::NormKind;
use serde::Serialize;

use crate::CliResult;

/// Column order of every results table.
pub const RESULT_COLUMNS: [&str; 10] = [
    "variant",
    "attack",
    "eps_k",
    "eps",
    "clean_accuracy",
    "robust_accuracy",
    "seed",
    "runtime_s",
    "convergence_rate",
    "error",
];

/// Serialize `rows` as CSV with a header taken from the row type.
pub fn csv_bytes<T: Serialize>(rows: &[T], header: &[&str]) -> CliResult<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?)
}

/// Rewrite the whole results table atomically.
pub fn write_results(path: &Path, rows: &[ResultRow]) -> CliResult<()> {
    write_atomic(path, &csv_bytes(rows, &RESULT_COLUMNS)?)?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct Environment {
    pub package: &'static str,
    pub version: &'static str,
    pub os: &'static str,
    pub arch: &'static str,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            package: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
        }
    }
}

/// The resolved run description written next to every CSV.
#[derive(Debug, Serialize)]
pub struct Sidecar<'a, T: Serialize> {
    pub command: &'a str,
    pub config: &'a ExperimentConfig,
    pub norm: NormKind,
    pub data_dir: &'a Path,
    pub environment: Environment,
    pub result: T,
}

pub fn write_sidecar<T: Serialize>(path: &Path, sidecar: &Sidecar<'_, T>) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(sidecar)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

pub fn ensure_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use lyadeq::model::Variant;

    fn row(error: Option<&str>) -> ResultRow {
        ResultRow {
            variant: Variant::LyaDeq,
            attack: "pgd".into(),
            eps_k: 8,
            eps: "8/255".into(),
            clean_accuracy: error.is_none().then_some(93.5),
            robust_accuracy: error.is_none().then_some(71.25),
            seed: 2,
            runtime_s: 1.5,
            convergence_rate: error.is_none().then_some(0.999),
            error: error.map(str::to_string),
        }
    }

    #[test]
    fn results_csv_has_a_fixed_schema() {
        let text = String::from_utf8(csv_bytes(&[row(None), row(Some("diverged, badly"))], &RESULT_COLUMNS).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], RESULT_COLUMNS.join(","));
        assert_eq!(lines[1], "lyadeq,pgd,8,8/255,93.5,71.25,2,1.5,0.999,");
        assert_eq!(lines[2], "lyadeq,pgd,8,8/255,,,2,1.5,,\"diverged, badly\"");
    }

    #[test]
    fn header_matches_row_fields() {
        let json = serde_json::to_value(row(None)).unwrap();
        let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
        let mut sorted_cols: Vec<&str> = RESULT_COLUMNS.to_vec();
        sorted_cols.sort();
        let mut sorted_keys: Vec<&str> = keys.iter().map(|k| k.as_str()).collect();
        sorted_keys.sort();
        assert_eq!(sorted_cols, sorted_keys);
    }
}
