use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::probe::{EvalRecord, Role, Stage, RESULTS_HEADER};

/// Mean and population standard deviation of one
/// `(method, sparsity, role, stage)` group.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub sparsity: f64,
    pub role: Role,
    pub stage: Stage,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

pub const SUMMARY_HEADER: &str = "method,sparsity,role,stage,n,mean,std";

impl SummaryRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{},{},{},{:.6},{:.6}",
            self.method, self.sparsity, self.role, self.stage, self.count, self.mean, self.std
        )
    }
}

/// A parsed results row, kept loose so foreign method names survive.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub sparsity: f64,
    pub task: usize,
    pub role: Role,
    pub stage: Stage,
    pub accuracy: f64,
    pub seed: u64,
}

impl From<&EvalRecord> for ResultRow {
    fn from(r: &EvalRecord) -> Self {
        Self {
            method: r.method.to_string(),
            sparsity: r.sparsity,
            task: r.task,
            role: r.role,
            stage: r.stage,
            accuracy: r.accuracy,
            seed: r.seed,
        }
    }
}

/// Parses a results CSV. Every malformed row is reported with its line.
pub fn read_results<R: Read>(input: R, source: &str) -> Result<Vec<ResultRow>> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let header = reader
        .headers()
        .map_err(|e| Error::parse(format!("{source}:1"), e.to_string()))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if header != RESULTS_HEADER {
        return Err(Error::parse(format!("{source}:1"), format!("expected header '{RESULTS_HEADER}', found '{header}'")));
    }
    let mut rows = Vec::new();
    let mut problems = Vec::new();
    for rec in reader.records() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                problems.push(format!("line {line}: {e}"));
                continue;
            }
        };
        let line = rec.position().map_or(0, |p| p.line());
        match parse_row(&rec) {
            Ok(r) => rows.push(r),
            Err(msg) => problems.push(format!("line {line}: {msg}")),
        }
    }
    if !problems.is_empty() {
        return Err(Error::parse(source, problems.join("; ")));
    }
    Ok(rows)
}

fn parse_row(rec: &csv::StringRecord) -> std::result::Result<ResultRow, String> {
    if rec.len() != 7 {
        return Err(format!("expected 7 fields, found {}", rec.len()));
    }
    let num = |i: usize, what: &str| -> std::result::Result<f64, String> {
        let v: f64 = rec[i].trim().parse().map_err(|_| format!("bad {what} '{}'", &rec[i]))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("non-finite {what}"))
        }
    };
    let method = rec[0].trim();
    if method.is_empty() {
        return Err("empty method".into());
    }
    Ok(ResultRow {
        method: method.to_string(),
        sparsity: num(1, "sparsity")?,
        task: rec[2].trim().parse().map_err(|_| format!("bad task_id '{}'", &rec[2]))?,
        role: rec[3].trim().parse().map_err(|e: Error| e.to_string())?,
        stage: rec[4].trim().parse().map_err(|e: Error| e.to_string())?,
        accuracy: num(5, "accuracy")?,
        seed: rec[6].trim().parse().map_err(|_| format!("bad seed '{}'", &rec[6]))?,
    })
}

/// Groups rows by `(method, sparsity, role, stage)` in order of first
/// appearance.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, u64, Role, Stage)> = Vec::new();
    let mut groups: HashMap<(String, u64, Role, Stage), Vec<f64>> = HashMap::new();
    for r in rows {
        let key = (r.method.clone(), r.sparsity.to_bits(), r.role, r.stage);
        groups
            .entry(key.clone())
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(r.accuracy);
    }
    order
        .into_iter()
        .map(|key| {
            let values = &groups[&key];
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            SummaryRow {
                method: key.0,
                sparsity: f64::from_bits(key.1),
                role: key.2,
                stage: key.3,
                count: values.len(),
                mean,
                std: var.sqrt(),
            }
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(mut w: W, rows: &[SummaryRow]) -> std::io::Result<()> {
    writeln!(w, "{SUMMARY_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

pub fn summarize_file(path: &Path) -> Result<Vec<SummaryRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let rows = read_results(std::io::BufReader::new(file), &path.display().to_string())?;
    Ok(summarize(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<ResultRow>> {
        read_results(text.as_bytes(), "mem")
    }

    #[test]
    fn single_row_has_zero_spread() {
        let rows = parse("method,sparsity,task_id,role,stage,accuracy,seed\nmagnitude,0.360000,1,transfer,pruned,0.750000,0\n").unwrap();
        let s = summarize(&rows);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].mean, 0.75);
        assert_eq!(s[0].std, 0.0);
    }

    #[test]
    fn two_rows_average() {
        let rows = parse(
            "method,sparsity,task_id,role,stage,accuracy,seed\n\
             block,0.5,1,transfer,pruned,0.4,0\n\
             block,0.5,2,transfer,pruned,0.6,0\n\
             block,0.5,0,source,pruned,0.9,0\n",
        )
        .unwrap();
        let s = summarize(&rows);
        assert_eq!(s.len(), 2);
        assert!((s[0].mean - 0.5).abs() < 1e-15);
        assert!((s[0].std - 0.1).abs() < 1e-15);
        assert_eq!(s[1].role, Role::Source);
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let err = parse(
            "method,sparsity,task_id,role,stage,accuracy,seed\n\
             block,0.5,1,transfer,pruned,0.4,0\n\
             block,abc,1,transfer,pruned,0.4,0\n\
             block,0.5,1,transfer\n\
             block,0.5,1,sideways,pruned,0.4,0\n",
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("line 3"), "{err}");
        assert!(err.contains("line 4"), "{err}");
        assert!(err.contains("line 5"), "{err}");
        assert!(!err.contains("line 2"), "{err}");
    }

    #[test]
    fn wrong_header_is_rejected() {
        assert!(parse("a,b\n1,2\n").is_err());
    }
}
