//! Per-task accuracy log and its CSV form.

use std::io::Write;
use std::path::Path;

use crate::error::{contract_err, Error, Result};

pub const HEADER: &str = "task,classes_seen,overall_acc,per_task_accs,wall_ms";
pub const FINAL_KEY: &str = "avg_incremental_accuracy";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub task: usize,
    pub classes_seen: usize,
    pub overall_acc: f64,
    pub per_task_accs: Vec<f64>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

fn fmt_acc(v: f64) -> String {
    format!("{v:.6}")
}

/// Mean of overall accuracies over every evaluation point, base task
/// included.
pub fn average_incremental_accuracy(log: &MetricsLog) -> Result<f64> {
    if log.rows.is_empty() {
        return contract_err("average incremental accuracy of an empty log");
    }
    Ok(log.rows.iter().map(|r| r.overall_acc).sum::<f64>() / log.rows.len() as f64)
}

impl MetricsLog {
    pub fn push(&mut self, row: MetricsRow) {
        self.rows.push(row);
    }

    pub fn average_incremental_accuracy(&self) -> Result<f64> {
        average_incremental_accuracy(self)
    }

    /// Value printed on the final line; reading it back yields exactly the
    /// same `f64`.
    pub fn average_field(&self) -> Result<String> {
        Ok(fmt_acc(self.average_incremental_accuracy()?))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{HEADER}")?;
        for r in &self.rows {
            let per: Vec<String> = r.per_task_accs.iter().map(|&a| fmt_acc(a)).collect();
            writeln!(
                w,
                "{},{},{},{},{}",
                r.task,
                r.classes_seen,
                fmt_acc(r.overall_acc),
                per.join(";"),
                r.wall_ms
            )?;
        }
        writeln!(w, "{FINAL_KEY},{}", self.average_field()?)?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("ascii"))
    }
}

/// A parsed metrics file: its rows and the average stated on its last line.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedMetrics {
    pub header: String,
    pub log: MetricsLog,
    pub average: f64,
    /// The average field as written.
    pub average_text: String,
}

/// Parses a metrics CSV. Errors carry the 1-based line number.
pub fn parse_csv(text: &str, file: &Path) -> Result<ParsedMetrics> {
    let err = |line: usize, message: String| Error::Parse {
        file: file.to_path_buf(),
        line,
        message,
    };
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let Some((_, header)) = lines.next() else {
        return Err(err(1, "empty file".into()));
    };
    let header = header.trim();
    if header != HEADER {
        return Err(err(1, format!("unrecognised header `{header}`")));
    }
    let mut log = MetricsLog::default();
    let mut average = None;
    for (i, line) in lines {
        let n = i + 1;
        if average.is_some() {
            return Err(err(n, "content after the average line".into()));
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields[0] == FINAL_KEY {
            if fields.len() != 2 {
                return Err(err(n, "average line needs exactly one value".into()));
            }
            average = Some((
                parse_acc(fields[1]).map_err(|m| err(n, m))?,
                fields[1].to_string(),
            ));
            continue;
        }
        if fields.len() != 5 {
            return Err(err(n, format!("expected 5 fields, found {}", fields.len())));
        }
        let int = |s: &str, what: &str| {
            s.parse::<usize>()
                .map_err(|_| err(n, format!("bad {what} `{s}`")))
        };
        let per_task_accs = fields[3]
            .split(';')
            .map(parse_acc)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|m| err(n, m))?;
        log.push(MetricsRow {
            task: int(fields[0], "task")?,
            classes_seen: int(fields[1], "classes_seen")?,
            overall_acc: parse_acc(fields[2]).map_err(|m| err(n, m))?,
            per_task_accs,
            wall_ms: fields[4]
                .parse()
                .map_err(|_| err(n, format!("bad wall_ms `{}`", fields[4])))?,
        });
    }
    let Some((average, average_text)) = average else {
        return Err(err(
            text.lines().count().max(1),
            format!("missing `{FINAL_KEY}` line"),
        ));
    };
    if log.rows.is_empty() {
        return Err(err(2, "no task rows".into()));
    }
    Ok(ParsedMetrics {
        header: header.to_string(),
        log,
        average,
        average_text,
    })
}

fn parse_acc(s: &str) -> std::result::Result<f64, String> {
    match s.trim().parse::<f64>() {
        Ok(v) if (0.0..=1.0).contains(&v) => Ok(v),
        Ok(v) => Err(format!("accuracy {v} outside [0, 1]")),
        Err(_) => Err(format!("bad accuracy `{s}`")),
    }
}

pub fn read_csv(path: &Path) -> Result<ParsedMetrics> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
        file: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    parse_csv(&text, path)
}
