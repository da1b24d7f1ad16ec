//! Result tables: per-dataset rows plus macro-averaged group rows.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::runner::RunResult;
use super::{config, ExperimentError};

/// Datasets (corpus names) averaged into one row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetGroup {
    pub name: String,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub experiment: String,
    pub condition: String,
    /// Corpus name, or the group name for averaged rows.
    pub dataset: String,
    pub averaged: bool,
    /// One value per column.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    /// Metric names.
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Markdown,
    Tsv,
}

/// Rows in result order, then conditions in spec order, then datasets;
/// every group present in a result adds an arithmetic-mean row after its
/// members.
pub fn aggregate(results: &[RunResult], groups: &[DatasetGroup]) -> Result<ResultTable, ExperimentError> {
    let Some(first) = results.first() else {
        return config("no results to aggregate");
    };
    let columns = first.config.metrics.clone();
    for r in results {
        if r.config.metrics != columns {
            return config(format!(
                "{} reports {:?} but {} reports {:?}",
                r.spec_name, r.config.metrics, first.spec_name, columns
            ));
        }
    }
    let mut used = HashSet::new();
    let mut rows = Vec::new();
    for r in results {
        let corpora = r.corpora();
        let mut seen_conditions = Vec::new();
        for c in &r.conditions {
            if !seen_conditions.contains(&c.condition) {
                seen_conditions.push(c.condition.clone());
            }
        }
        for cond in &seen_conditions {
            let value_row = |corpus: &str| -> Result<Vec<f64>, ExperimentError> {
                let c = r
                    .condition(corpus, cond)
                    .ok_or_else(|| ExperimentError::Config(format!("{} lacks {corpus}/{cond}", r.spec_name)))?;
                columns
                    .iter()
                    .map(|m| {
                        c.score(m)
                            .ok_or_else(|| ExperimentError::Config(format!("{corpus}/{cond} has no {m} score")))
                    })
                    .collect()
            };
            for corpus in &corpora {
                rows.push(TableRow {
                    experiment: r.spec_name.clone(),
                    condition: cond.clone(),
                    dataset: corpus.to_string(),
                    averaged: false,
                    values: value_row(corpus)?,
                });
            }
            for g in groups {
                let present = g.members.iter().filter(|m| corpora.contains(&m.as_str())).count();
                if present == 0 {
                    continue;
                }
                if present < g.members.len() {
                    return config(format!("{} has only some members of group {}", r.spec_name, g.name));
                }
                used.insert(&g.name);
                let member_rows = g.members.iter().map(|m| value_row(m)).collect::<Result<Vec<_>, _>>()?;
                let n = member_rows.len() as f64;
                let values = (0..columns.len())
                    .map(|k| member_rows.iter().map(|v| v[k]).sum::<f64>() / n)
                    .collect();
                rows.push(TableRow {
                    experiment: r.spec_name.clone(),
                    condition: cond.clone(),
                    dataset: g.name.clone(),
                    averaged: true,
                    values,
                });
            }
        }
    }
    if let Some(g) = groups.iter().find(|g| !used.contains(&g.name)) {
        return config(format!("group {} matches no dataset", g.name));
    }
    Ok(ResultTable { columns, rows })
}

fn header(metric: &str) -> String {
    metric.to_uppercase()
}

/// Scores are printed with two decimals.
pub fn render_table(table: &ResultTable, format: TableFormat) -> String {
    let mut head = vec!["Experiment".to_string(), "Context".into(), "Dataset".into()];
    head.extend(table.columns.iter().map(|m| header(m)));
    let body: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            let dataset = if r.averaged { format!("{} (avg)", r.dataset) } else { r.dataset.clone() };
            let mut cells = vec![r.experiment.clone(), r.condition.clone(), dataset];
            cells.extend(r.values.iter().map(|v| format!("{v:.2}")));
            cells
        })
        .collect();
    let mut out = String::new();
    match format {
        TableFormat::Tsv => {
            for line in std::iter::once(&head).chain(&body) {
                let _ = writeln!(out, "{}", line.join("\t"));
            }
        }
        TableFormat::Markdown => {
            let cell = |s: &str| s.replace('|', "\\|");
            let _ = writeln!(out, "| {} |", head.iter().map(|h| cell(h)).collect::<Vec<_>>().join(" | "));
            let align: Vec<&str> = (0..head.len()).map(|i| if i < 3 { "---" } else { "---:" }).collect();
            let _ = writeln!(out, "|{}|", align.join("|"));
            for line in &body {
                let _ = writeln!(out, "| {} |", line.iter().map(|c| cell(c)).collect::<Vec<_>>().join(" | "));
            }
        }
    }
    out
}
