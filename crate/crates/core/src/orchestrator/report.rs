//! Plain-text result tables. All numbers are shown as percentages with
//! one decimal; persisted files keep raw fractions.

use std::path::Path;

use super::manifest::RunManifest;
use super::run::ReportRow;
use super::OrchestratorError;

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}", x * 100.0))
        .unwrap_or_else(|| "-".to_string())
}

/// Table with one row per (model, dataset, method): atomic ECE, Brier and
/// AUROC, then macro ECE, Brier and Spearman correlation.
pub fn format_report(rows: &[ReportRow]) -> String {
    let header = [
        "Model", "Dataset", "Method", "A-ECE", "A-BS", "A-AUROC", "M-ECE", "M-BS", "M-SC",
    ];
    let body: Vec<[String; 9]> = rows
        .iter()
        .map(|r| {
            [
                r.model.clone(),
                r.dataset.clone(),
                r.method.clone(),
                pct(Some(r.atomic.ece)),
                pct(Some(r.atomic.brier)),
                pct(r.atomic.auroc),
                pct(Some(r.macro_.ece)),
                pct(Some(r.macro_.brier)),
                pct(r.macro_.spearman),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let mut out = String::new();
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 3 || i == 6 {
                out.push_str(" |");
            }
            if i < 3 {
                out.push_str(&format!("{cell:<w$}  "));
            } else {
                out.push_str(&format!(" {cell:>w$}"));
            }
        }
        out.trim_end().to_string()
    };
    let mut out = String::from("All numbers are percentages. A = atomic (per claim), M = macro (per response).\n");
    out.push_str(&line(header.to_vec()));
    out.push('\n');
    for row in &body {
        out.push_str(&line(row.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

/// Report for a finished run directory.
pub fn report(run_dir: &Path) -> Result<String, OrchestratorError> {
    let manifest = RunManifest::load(run_dir)
        .map_err(|_| OrchestratorError::Missing(format!("no manifest in {}", run_dir.display())))?;
    if manifest.stage("evaluate").is_none() {
        return Err(OrchestratorError::Missing("evaluate stage has not completed".into()));
    }
    let path = run_dir.join("reports/calibration.json");
    let text = std::fs::read_to_string(&path).map_err(|e| OrchestratorError::io(&path, e))?;
    let rows: Vec<ReportRow> =
        serde_json::from_str(&text).map_err(|e| OrchestratorError::Corrupt(format!("{}: {e}", path.display())))?;
    if rows.is_empty() {
        return Err(OrchestratorError::Missing("run has no evaluated methods".into()));
    }
    Ok(format_report(&rows))
}
