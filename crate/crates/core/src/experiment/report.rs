use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::config::{tier_level, ExperimentConfig, Method};
use crate::experiment::runner::{read_metrics, read_round_reports, METRICS_FILE, RESOLVED_CONFIG_FILE};

/// Heatmap CSV (`client_id,expert_0,…`) of `a_i^j / S_i` for one round of a run.
pub fn export_heatmap(run_dir: &Path, round: usize) -> Result<String> {
    let reports = read_round_reports(run_dir)?;
    let report = reports.iter().find(|r| r.round == round).ok_or_else(|| {
        Error::NotFound(format!(
            "round {round} in {} (available: {:?})",
            run_dir.display(),
            reports.iter().map(|r| r.round).collect::<Vec<_>>()
        ))
    })?;
    let mut buf = Vec::new();
    report.write_heatmap(&mut buf)?;
    Ok(String::from_utf8(buf).expect("CSV output is UTF-8"))
}

/// Final-round score of one run per budget tier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportColumn {
    pub label: String,
    pub dir: PathBuf,
    pub round: usize,
    /// budget → (val accuracy if classification, else val loss)
    pub scores: BTreeMap<String, f64>,
}

/// Budgets as rows, runs as columns: the layout of a method-comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub metric: String,
    pub budgets: Vec<String>,
    pub columns: Vec<ReportColumn>,
}

fn column_label(cfg: &ExperimentConfig, dir: &Path) -> String {
    let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or("run");
    let method = cfg.experiment.method.as_str();
    match cfg.experiment.method {
        Method::Flame if name != cfg.experiment.name => format!("{}/{name}", cfg.experiment.name),
        _ if name == cfg.experiment.name => format!("{name} ({method})"),
        _ => format!("{}/{name} ({method})", cfg.experiment.name),
    }
}

/// Merges the metrics of several runs into one comparison table.
pub fn merge_reports(run_dirs: &[PathBuf]) -> Result<ReportTable> {
    if run_dirs.is_empty() {
        return Err(Error::config("report", "name at least one run directory"));
    }
    let mut columns = Vec::with_capacity(run_dirs.len());
    let mut metric: Option<String> = None;
    for dir in run_dirs {
        let cfg_path = dir.join(RESOLVED_CONFIG_FILE);
        if !cfg_path.exists() {
            return Err(Error::NotFound(format!(
                "{} (is {} a run directory?)",
                cfg_path.display(),
                dir.display()
            )));
        }
        let cfg = ExperimentConfig::load(&cfg_path)?;
        let rows = read_metrics(&dir.join(METRICS_FILE))?;
        let round = rows.iter().map(|r| r.round).max().unwrap_or(0);
        let uses_accuracy = rows.iter().any(|r| r.val_accuracy.is_some());
        let this_metric = if uses_accuracy { "val_accuracy" } else { "val_loss" };
        if metric.get_or_insert_with(|| this_metric.to_string()) != this_metric {
            return Err(Error::config(
                "report",
                "cannot merge classification and regression runs in one table",
            ));
        }
        let scores = rows
            .iter()
            .filter(|r| r.round == round)
            .map(|r| (r.budget.clone(), r.val_accuracy.unwrap_or(r.val_loss)))
            .collect();
        columns.push(ReportColumn {
            label: column_label(&cfg, dir),
            dir: dir.clone(),
            round,
            scores,
        });
    }
    let mut budgets: Vec<String> = columns.iter().flat_map(|c| c.scores.keys().cloned()).collect();
    budgets.sort_by_key(|b| (tier_level(b), b.clone()));
    budgets.dedup();
    Ok(ReportTable {
        metric: metric.unwrap_or_default(),
        budgets,
        columns,
    })
}

impl ReportTable {
    pub fn to_text(&self) -> String {
        let mut header = vec![format!("budget ({})", self.metric)];
        header.extend(self.columns.iter().map(|c| c.label.clone()));
        let rows: Vec<Vec<String>> = self
            .budgets
            .iter()
            .map(|b| {
                let mut row = vec![b.clone()];
                row.extend(
                    self.columns
                        .iter()
                        .map(|c| c.scores.get(b).map_or("-".into(), |v| format!("{v:.4}"))),
                );
                row
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
            .collect();
        let fmt = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut out = fmt(&header);
        out.push('\n');
        for r in &rows {
            out.push_str(&fmt(r));
            out.push('\n');
        }
        out
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["budget".to_string()];
        header.extend(self.columns.iter().map(|c| c.label.clone()));
        w.write_record(&header)?;
        for b in &self.budgets {
            let mut row = vec![b.clone()];
            row.extend(self.columns.iter().map(|c| c.scores.get(b).map_or(String::new(), f64::to_string)));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<report csv>", e))?;
        Ok(())
    }
}
