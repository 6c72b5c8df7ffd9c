//! Latency lookup tables (CSV, microseconds) and fitted models (JSON, seconds).

use std::fs;
use std::path::Path;

use maskprune_core::cost::{fit_latency_model, LatencyEntry, LatencyTable};
use maskprune_core::{LatencyModel, UnitKind};
use serde::Deserialize;

use crate::atomic::write_json;
use crate::error::{CliError, CliResult, PathContext};

#[derive(Debug, Deserialize)]
struct Row {
    kind: String,
    n_active: usize,
    latency_us: f64,
}

fn parse_kind(s: &str) -> Option<UnitKind> {
    match s.trim().to_ascii_lowercase().as_str() {
        "mha" => Some(UnitKind::Head),
        "ffn" => Some(UnitKind::Filter),
        _ => None,
    }
}

/// Parses `kind,n_active,latency_us` with `kind` in {mha, ffn}.
pub fn parse_latency_csv(text: &str) -> CliResult<LatencyTable> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| CliError::input(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["kind", "n_active", "latency_us"] {
        return Err(CliError::input(format!(
            "latency table header must be kind,n_active,latency_us, found {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut entries = Vec::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| CliError::input(format!("latency table row {}: {e}", i + 1)))?;
        let kind = parse_kind(&row.kind)
            .ok_or_else(|| CliError::input(format!("latency table row {}: unknown kind {:?}", i + 1, row.kind)))?;
        entries.push(LatencyEntry {
            kind,
            n_active: row.n_active,
            latency: row.latency_us / 1e6,
        });
    }
    Ok(LatencyTable::new(entries)?)
}

pub fn read_latency_table(path: &Path) -> CliResult<LatencyTable> {
    let text = fs::read_to_string(path).reading(path)?;
    parse_latency_csv(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

pub fn save_latency_model(path: &Path, model: &LatencyModel) -> CliResult<()> {
    write_json(path, model).writing(path)
}

/// A `.csv` path is treated as a lookup table and fitted; anything else as
/// a fitted model in JSON.
pub fn load_latency(path: &Path) -> CliResult<LatencyModel> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let model = if is_csv {
        fit_latency_model(&read_latency_table(path)?)?
    } else {
        let text = fs::read_to_string(path).reading(path)?;
        serde_json::from_str::<LatencyModel>(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?
    };
    model.mha.validate()?;
    model.ffn.validate()?;
    Ok(model)
}
