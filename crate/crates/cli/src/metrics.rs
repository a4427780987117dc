//! Append-only metric logs: JSON lines plus a CSV mirror with the same columns.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use bai_core::train::MetricRecord;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const JSONL_FILE: &str = "metrics.jsonl";
pub const CSV_FILE: &str = "metrics.csv";

/// CSV header, in column order. Empty cells (`null` in JSON) mean "not
/// measured at this step": `beta` and `lambda` without BAI, the `valid_*`
/// columns everywhere but the last step of an epoch, `wall_clock_ms` unless
/// timing was requested.
pub const COLUMNS: [&str; 13] = [
    "epoch",
    "iteration",
    "ce",
    "beta",
    "lambda",
    "total",
    "lr",
    "grad_norm",
    "valid_token_accuracy",
    "valid_bleu",
    "valid_ce",
    "valid_beta",
    "wall_clock_ms",
];

/// Serialized form of [`MetricRecord`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub epoch: u64,
    pub iteration: u64,
    pub ce: f64,
    pub beta: Option<f64>,
    pub lambda: Option<f64>,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub valid_token_accuracy: Option<f64>,
    pub valid_bleu: Option<f64>,
    pub valid_ce: Option<f64>,
    pub valid_beta: Option<f64>,
    pub wall_clock_ms: Option<u64>,
}

impl From<&MetricRecord> for Row {
    fn from(r: &MetricRecord) -> Self {
        Row {
            epoch: r.epoch,
            iteration: r.iteration,
            ce: r.ce,
            beta: r.beta,
            lambda: r.lambda,
            total: r.total,
            lr: r.lr,
            grad_norm: r.grad_norm,
            valid_token_accuracy: r.valid_token_accuracy,
            valid_bleu: r.valid_bleu,
            valid_ce: r.valid_ce,
            valid_beta: r.valid_beta,
            wall_clock_ms: r.wall_clock_ms,
        }
    }
}

pub struct MetricsWriter {
    jsonl: BufWriter<File>,
    csv: csv::Writer<File>,
}

impl MetricsWriter {
    /// Creates (truncating) both files in `dir`.
    pub fn create(dir: &Path) -> CliResult<Self> {
        let jpath = dir.join(JSONL_FILE);
        let cpath = dir.join(CSV_FILE);
        let jsonl = BufWriter::new(File::create(&jpath).map_err(|e| CliError::io(&jpath, e))?);
        let mut csv = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(&cpath)
            .map_err(|e| CliError::runtime(format!("{}: {e}", cpath.display())))?;
        csv.write_record(COLUMNS).map_err(csv_err)?;
        csv.flush().map_err(|e| CliError::io(&cpath, e))?;
        Ok(MetricsWriter { jsonl, csv })
    }

    /// Appends records and flushes both files.
    pub fn append(&mut self, records: &[MetricRecord]) -> CliResult<()> {
        for r in records {
            let row = Row::from(r);
            serde_json::to_writer(&mut self.jsonl, &row).map_err(|e| CliError::runtime(e.to_string()))?;
            self.jsonl.write_all(b"\n").map_err(|e| CliError::runtime(e.to_string()))?;
            self.csv.serialize(&row).map_err(csv_err)?;
        }
        self.jsonl.flush().map_err(|e| CliError::runtime(e.to_string()))?;
        self.csv.flush().map_err(|e| CliError::runtime(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::runtime(format!("metrics.csv: {e}"))
}

/// Reads a `metrics.jsonl` file back.
pub fn read_jsonl(path: &Path) -> CliResult<Vec<Row>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| CliError::runtime(format!("{}: {e}", path.display()))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(i: u64) -> MetricRecord {
        MetricRecord {
            epoch: 0,
            iteration: i,
            ce: 1.25 / (i + 1) as f64,
            beta: Some(0.1),
            lambda: None,
            total: 0.3,
            lr: 1e-3,
            grad_norm: 0.7,
            valid_token_accuracy: (i == 1).then_some(0.5),
            valid_bleu: None,
            valid_ce: None,
            valid_beta: None,
            wall_clock_ms: None,
        }
    }

    #[test]
    fn both_files_carry_the_same_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = MetricsWriter::create(dir.path()).unwrap();
        w.append(&[record(0), record(1)]).unwrap();
        drop(w);
        let rows = read_jsonl(&dir.path().join(JSONL_FILE)).unwrap();
        assert_eq!(rows, vec![Row::from(&record(0)), Row::from(&record(1))]);
        let mut rdr = csv::Reader::from_path(dir.path().join(CSV_FILE)).unwrap();
        assert_eq!(rdr.headers().unwrap().iter().collect::<Vec<_>>(), COLUMNS);
        let csv_rows: Vec<Row> = rdr.deserialize().collect::<Result<_, _>>().unwrap();
        assert_eq!(csv_rows, rows);
    }
}
