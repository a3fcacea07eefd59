//! Comparison tables over metrics files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::metrics::{read_csv, ParsedMetrics};
use crate::error::{contract_err, Result};

/// One report input: an explicit `label=path` or a bare path.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportInput {
    pub label: String,
    pub path: PathBuf,
}

impl ReportInput {
    pub fn parse(arg: &str) -> Self {
        match arg.split_once('=') {
            Some((label, path)) if !label.is_empty() => Self {
                label: label.to_string(),
                path: PathBuf::from(path),
            },
            _ => Self {
                label: default_label(Path::new(arg)),
                path: PathBuf::from(arg),
            },
        }
    }
}

fn strip_seed(name: &str) -> &str {
    let trimmed = name.trim_end_matches(|c: char| c.is_ascii_digit());
    if trimmed.len() == name.len() {
        return name;
    }
    match trimmed.strip_suffix("seed") {
        Some(rest) => rest.trim_end_matches(['_', '-', '.']),
        None => name,
    }
}

/// Label from the enclosing directory, ignoring a trailing `seed<N>` so
/// that seed-varied runs of one config group together.
pub fn default_label(path: &Path) -> String {
    let mut dir = path.parent();
    while let Some(d) = dir {
        if let Some(name) = d.file_name().and_then(|n| n.to_str()) {
            let label = strip_seed(name);
            if !label.is_empty() {
                return label.to_string();
            }
        } else {
            break;
        }
        dir = d.parent();
    }
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("run")
        .to_string()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub runs: usize,
    /// Mean overall accuracy after each task.
    pub per_task: Vec<f64>,
    /// Average incremental accuracy, as stated in the files.
    pub average: f64,
    /// Exact average field for a single run.
    pub average_text: String,
    /// Sample standard deviation across runs; `None` for one run.
    pub std: Option<f64>,
}

pub fn build_report(inputs: &[(String, ParsedMetrics)]) -> Result<Vec<ReportRow>> {
    let mut groups: BTreeMap<&str, Vec<&ParsedMetrics>> = BTreeMap::new();
    let mut order = Vec::new();
    for (label, m) in inputs {
        if !groups.contains_key(label.as_str()) {
            order.push(label.as_str());
        }
        groups.entry(label).or_default().push(m);
    }
    let schemas: Vec<&str> = inputs.iter().map(|(_, m)| m.header.as_str()).collect();
    if schemas.windows(2).any(|w| w[0] != w[1]) {
        return contract_err("inputs mix metrics schema versions");
    }
    order
        .into_iter()
        .map(|label| {
            let runs = &groups[label];
            let tasks = runs[0].log.rows.len();
            if runs.iter().any(|r| r.log.rows.len() != tasks) {
                return contract_err(format!("runs labelled `{label}` differ in task count"));
            }
            let n = runs.len() as f64;
            let per_task = (0..tasks)
                .map(|t| runs.iter().map(|r| r.log.rows[t].overall_acc).sum::<f64>() / n)
                .collect();
            let avgs: Vec<f64> = runs.iter().map(|r| r.average).collect();
            let average = avgs.iter().sum::<f64>() / n;
            let std = (runs.len() > 1).then(|| {
                (avgs.iter().map(|a| (a - average).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            });
            Ok(ReportRow {
                label: label.to_string(),
                runs: runs.len(),
                per_task,
                average: if runs.len() == 1 { avgs[0] } else { average },
                average_text: if runs.len() == 1 {
                    runs[0].average_text.clone()
                } else {
                    format!("{average:.6}")
                },
                std,
            })
        })
        .collect()
}

/// Reads every input; the first parse failure is returned as is.
pub fn load_inputs(inputs: &[ReportInput]) -> Result<Vec<(String, ParsedMetrics)>> {
    inputs
        .iter()
        .map(|i| Ok((i.label.clone(), read_csv(&i.path)?)))
        .collect()
}

fn max_tasks(rows: &[ReportRow]) -> usize {
    rows.iter().map(|r| r.per_task.len()).max().unwrap_or(0)
}

fn average_cell(r: &ReportRow) -> String {
    match r.std {
        Some(s) => format!("{} ± {s:.6}", r.average_text),
        None => r.average_text.clone(),
    }
}

pub fn render_csv(rows: &[ReportRow]) -> String {
    let tasks = max_tasks(rows);
    let mut out = String::from("label,runs");
    for t in 0..tasks {
        out.push_str(&format!(",task_{t}"));
    }
    out.push_str(",avg_incremental_accuracy,std\n");
    for r in rows {
        out.push_str(&format!("{},{}", r.label, r.runs));
        for t in 0..tasks {
            match r.per_task.get(t) {
                Some(a) => out.push_str(&format!(",{a:.6}")),
                None => out.push(','),
            }
        }
        let std = r.std.map(|s| format!("{s:.6}")).unwrap_or_default();
        out.push_str(&format!(",{},{std}\n", r.average_text));
    }
    out
}

pub fn render_table(rows: &[ReportRow]) -> String {
    let tasks = max_tasks(rows);
    let mut header = vec!["label".to_string(), "runs".to_string()];
    header.extend((0..tasks).map(|t| format!("task {t}")));
    header.push("avg inc. acc".into());
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut cells = vec![r.label.clone(), r.runs.to_string()];
            cells.extend((0..tasks).map(|t| {
                r.per_task
                    .get(t)
                    .map_or(String::new(), |a| format!("{a:.4}"))
            }));
            cells.push(average_cell(r));
            cells
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            std::iter::once(&header)
                .chain(&body)
                .map(|row| row[c].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| {
                let pad = w - c.chars().count();
                if i == 0 {
                    format!("{c}{}", " ".repeat(pad))
                } else {
                    format!("{}{c}", " ".repeat(pad))
                }
            })
            .collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(&header);
    out.push_str(&line(
        &widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>(),
    ));
    for row in &body {
        out.push_str(&line(row));
    }
    out
}
