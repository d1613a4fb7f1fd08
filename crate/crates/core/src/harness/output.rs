//! Report files. CSV columns are fixed; see the README for their meaning.

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{AblationTable, GeneralizationReport, HarnessError, RunReport, TransmissionRow};

/// JSON Schema that every `report.json` validates against.
pub const REPORT_SCHEMA: &str = include_str!("../../schema/report.schema.json");

fn csv_error(e: csv::Error) -> HarnessError {
    HarnessError::Io(e.to_string())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Io(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, HarnessError> {
    csv::Writer::from_path(path).map_err(csv_error)
}

/// `report.json`, `metrics.csv` and `report.schema.json` under `dir`.
pub fn write_report(dir: &Path, report: &RunReport) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("report.json"), report)?;
    fs::write(dir.join("report.schema.json"), REPORT_SCHEMA)?;
    let mut w = csv_writer(&dir.join("metrics.csv"))?;
    w.write_record(["seed", "client_id", "profile", "phase", "epoch", "metric", "value"])
        .map_err(csv_error)?;
    let alignment_epochs = report.config.rounds as usize * report.config.local_epochs;
    for s in &report.seeds {
        for c in &s.clients {
            let mut row = |phase: &str, epoch: usize, metric: &str, value: f64| {
                w.write_record([
                    s.seed.to_string(),
                    c.client_id.to_string(),
                    c.profile.clone(),
                    phase.to_string(),
                    epoch.to_string(),
                    metric.to_string(),
                    value.to_string(),
                ])
            };
            for (i, &loss) in c.epoch_losses.iter().enumerate() {
                let (phase, epoch) = if i < alignment_epochs {
                    ("alignment", i + 1)
                } else {
                    ("finetune", i + 1 - alignment_epochs)
                };
                row(phase, epoch, "loss", loss).map_err(csv_error)?;
            }
            for (epoch, &d) in c.finetune_val_dice.iter().enumerate() {
                row("finetune", epoch, "val_dice", d).map_err(csv_error)?;
            }
            row("test", 0, "dice", c.test_dice).map_err(csv_error)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `ablation.csv` (and the full table as `ablation.json`).
pub fn write_ablation(dir: &Path, table: &AblationTable) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("ablation.json"), table)?;
    let mut w = csv_writer(&dir.join("ablation.csv"))?;
    let mut header = vec!["row".to_string(), "use_dca".into(), "use_adapter".into(), "use_pbl".into()];
    header.extend(table.profiles.iter().enumerate().map(|(k, p)| format!("client{k}_{p}")));
    header.push("mean".into());
    w.write_record(&header).map_err(csv_error)?;
    for r in &table.rows {
        let mut rec = vec![
            r.name.clone(),
            r.use_dca.to_string(),
            r.use_adapter.to_string(),
            r.use_pbl.to_string(),
        ];
        rec.extend(r.per_client.iter().map(f64::to_string));
        rec.push(r.mean.to_string());
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// `transmission.csv`; measured cells are empty for formula-only rows.
pub fn write_transmission(dir: &Path, rows: &[TransmissionRow]) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    let mut w = csv_writer(&dir.join("transmission.csv"))?;
    w.write_record([
        "scale",
        "strategy",
        "clients",
        "anchor",
        "uplink_formula",
        "uplink_measured",
        "downlink_formula",
        "downlink_measured",
        "kv_bytes",
        "per_round_mb",
    ])
    .map_err(csv_error)?;
    let opt = |v: Option<u64>| v.map(|b| b.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.scale.clone(),
            r.strategy.clone(),
            r.clients.to_string(),
            r.anchor.to_string(),
            r.uplink_formula.to_string(),
            opt(r.uplink_measured),
            r.downlink_formula.to_string(),
            opt(r.downlink_measured),
            r.kv_bytes.to_string(),
            format!("{:.6}", r.per_round_mb),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// `generalization.json` and `generalization.csv`.
pub fn write_generalization(dir: &Path, report: &GeneralizationReport) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    write_json(&dir.join("generalization.json"), report)?;
    let mut w = csv_writer(&dir.join("generalization.csv"))?;
    w.write_record(["seed", "profile", "zero_shot_dice", "fine_tuned_dice"])
        .map_err(csv_error)?;
    for s in &report.seeds {
        w.write_record([
            s.seed.to_string(),
            report.profile.clone(),
            s.zero_shot_dice.to_string(),
            s.fine_tuned_dice.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Wall-clock time lives apart from the report so reruns stay byte-identical.
pub fn write_timing(dir: &Path, command: &str, seconds: f64) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    write_json(
        &dir.join("timing.json"),
        &serde_json::json!({ "command": command, "wall_clock_seconds": seconds }),
    )
}
