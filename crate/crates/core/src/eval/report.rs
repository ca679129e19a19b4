use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// One report row per evaluated checkpoint. Attack columns stay empty for
/// rows evaluated without the attack stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    pub method: String,
    pub seed: u64,
    pub epoch: usize,
    pub forget_quality: f64,
    pub model_utility: f64,
    pub attack_bleu_mean: Option<f64>,
    pub attack_bleu_min: Option<f64>,
    pub attack_bleu_max: Option<f64>,
}

pub const REPORT_COLUMNS: [&str; 9] = [
    "task",
    "method",
    "seed",
    "epoch",
    "forget_quality",
    "model_utility",
    "attack_bleu_mean",
    "attack_bleu_min",
    "attack_bleu_max",
];

/// One row of the dominance-ratio summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdrRow {
    pub task: String,
    pub method: String,
    pub pdr: f64,
}

pub fn write_report_rows(path: &Path, rows: &[ReportRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads report rows, verifying the header names column by column.
pub fn read_report_rows(path: &Path) -> Result<Vec<ReportRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let got: Vec<&str> = headers.iter().collect();
    if got != REPORT_COLUMNS {
        let missing: Vec<&str> = REPORT_COLUMNS
            .iter()
            .filter(|c| !got.contains(c))
            .copied()
            .collect();
        let unexpected: Vec<&str> = got
            .iter()
            .filter(|c| !REPORT_COLUMNS.contains(c))
            .copied()
            .collect();
        return Err(CoreError::Metric(format!(
            "report schema mismatch in {}: missing columns {missing:?}, unexpected columns {unexpected:?}",
            path.display()
        )));
    }
    let mut rows = Vec::new();
    for record in reader.deserialize() {
        rows.push(record?);
    }
    Ok(rows)
}

pub fn write_pdr_rows(path: &Path, rows: &[PdrRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}
