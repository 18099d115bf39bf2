//! On-disk formats: feature CSVs, logits dumps, checkpoints, calibration
//! tables and JSON documents. Every file is written atomically.

use std::fs;
use std::path::{Path, PathBuf};

use bdkd_core::calibration::CalibrationReport;
use bdkd_core::data::{Dataset, Split};
use bdkd_core::models::{MlpSpec, Network};
use bdkd_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Writes to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serialisable value");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        line: e.line() as u64,
        detail: e.to_string(),
    })
}

fn csv_bytes(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::Data(e.to_string());
    w.write_record(header).map_err(fail)?;
    for row in rows {
        w.write_record(&row).map_err(fail)?;
    }
    w.into_inner().map_err(|e| CliError::Data(e.to_string()))
}

struct Table {
    header: Vec<String>,
    rows: Vec<(u64, Vec<String>)>,
}

fn read_table(path: &Path) -> CliResult<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => CliError::io(path, io),
            other => CliError::Data(format!("{}: {other:?}", path.display())),
        })?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        rows.push((line, record.iter().map(|f| f.trim().to_string()).collect()));
    }
    Ok(Table { header, rows })
}

fn parse_err(path: &Path, line: u64, detail: impl Into<String>) -> CliError {
    CliError::Parse {
        path: path.to_path_buf(),
        line,
        detail: detail.into(),
    }
}

fn parse_f64(path: &Path, line: u64, column: &str, raw: &str) -> CliResult<f64> {
    match raw.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(x),
        _ => Err(parse_err(
            path,
            line,
            format!("column `{column}`: `{raw}` is not a finite number"),
        )),
    }
}

fn parse_label(path: &Path, line: u64, raw: &str) -> CliResult<usize> {
    raw.parse::<usize>()
        .map_err(|_| parse_err(path, line, format!("label `{raw}` is not a non-negative integer")))
}

/// Reads a headed CSV with numeric feature columns and an integer label
/// column. Features are returned unnormalised; the class count is one more
/// than the largest label.
pub fn load_csv(path: &Path, label_column: &str) -> CliResult<Dataset> {
    let table = read_table(path)?;
    let label_at = table
        .header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| CliError::Data(format!("{}: no label column `{label_column}`", path.display())))?;
    let d = table.header.len() - 1;
    if d == 0 {
        return Err(CliError::Data(format!("{}: no feature columns", path.display())));
    }
    let mut features = Vec::with_capacity(table.rows.len() * d);
    let mut labels = Vec::with_capacity(table.rows.len());
    for (line, row) in &table.rows {
        if row.len() != table.header.len() {
            return Err(parse_err(
                path,
                *line,
                format!("expected {} fields, found {}", table.header.len(), row.len()),
            ));
        }
        for (k, raw) in row.iter().enumerate() {
            if k == label_at {
                labels.push(parse_label(path, *line, raw)?);
            } else {
                features.push(parse_f64(path, *line, &table.header[k], raw)?);
            }
        }
    }
    if labels.is_empty() {
        return Err(CliError::Data(format!("{}: no rows", path.display())));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(2);
    let x = Tensor::new(vec![labels.len(), d], features)?;
    Ok(Dataset::new(x, labels, classes, Split::Full)?)
}

/// Writes `x0, x1, …, label`.
pub fn write_dataset_csv(path: &Path, ds: &Dataset) -> CliResult<()> {
    let mut header: Vec<String> = (0..ds.dim()).map(|k| format!("x{k}")).collect();
    header.push("label".to_string());
    let x = ds.features();
    let rows = (0..ds.len()).map(|i| {
        let mut row: Vec<String> = x.row(i).iter().map(|v| v.to_string()).collect();
        row.push(ds.labels()[i].to_string());
        row
    });
    write_atomic(path, &csv_bytes(&header, rows)?)
}

/// Writes `logit_0, …, logit_{c-1}, label`, one row per sample.
pub fn write_logits(path: &Path, logits: &Tensor, labels: &[usize]) -> CliResult<()> {
    let mut header: Vec<String> = (0..logits.cols()).map(|j| format!("logit_{j}")).collect();
    header.push("label".to_string());
    let rows = (0..logits.rows()).map(|i| {
        let mut row: Vec<String> = logits.row(i).iter().map(|v| v.to_string()).collect();
        row.push(labels[i].to_string());
        row
    });
    write_atomic(path, &csv_bytes(&header, rows)?)
}

/// Reads a logits dump; the label column is optional.
pub fn read_logits(path: &Path) -> CliResult<(Tensor, Option<Vec<usize>>)> {
    let table = read_table(path)?;
    let label_at = table.header.iter().position(|h| h == "label");
    let c = table.header.len() - usize::from(label_at.is_some());
    if c < 2 {
        return Err(CliError::Data(format!(
            "{}: need at least two logit columns",
            path.display()
        )));
    }
    let mut data = Vec::with_capacity(table.rows.len() * c);
    let mut labels = Vec::new();
    for (line, row) in &table.rows {
        if row.len() != table.header.len() {
            return Err(parse_err(path, *line, "ragged row"));
        }
        for (k, raw) in row.iter().enumerate() {
            if Some(k) == label_at {
                labels.push(parse_label(path, *line, raw)?);
            } else {
                data.push(parse_f64(path, *line, &table.header[k], raw)?);
            }
        }
    }
    let n = table.rows.len();
    if n == 0 {
        return Err(CliError::Data(format!("{}: no rows", path.display())));
    }
    let logits = Tensor::new(vec![n, c], data)?;
    Ok((logits, label_at.map(|_| labels)))
}

/// Reads labels from a CSV whose `label` column (or only column) holds them.
pub fn read_labels(path: &Path) -> CliResult<Vec<usize>> {
    let table = read_table(path)?;
    let at = match table.header.iter().position(|h| h == "label") {
        Some(k) => k,
        None if table.header.len() == 1 => 0,
        None => return Err(CliError::Data(format!("{}: no `label` column", path.display()))),
    };
    table
        .rows
        .iter()
        .map(|(line, row)| {
            let raw = row.get(at).ok_or_else(|| parse_err(path, *line, "missing label"))?;
            parse_label(path, *line, raw)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON checkpoint: the architecture plus every parameter by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub spec: MlpSpec,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn of(net: &Network) -> Self {
        Self {
            spec: net.spec().clone(),
            params: net
                .param_names()
                .into_iter()
                .zip(net.params())
                .map(|(name, p)| NamedArray {
                    name,
                    shape: p.shape().to_vec(),
                    data: p.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_network(self) -> CliResult<Network> {
        let mut params = Vec::with_capacity(self.params.len());
        for a in self.params {
            params.push(Tensor::new(a.shape, a.data)?);
        }
        Ok(Network::from_params(self.spec, params)?)
    }
}

pub fn save_checkpoint(path: &Path, net: &Network) -> CliResult<()> {
    write_json(path, &Checkpoint::of(net))
}

pub fn load_checkpoint(path: &Path) -> CliResult<Network> {
    read_json::<Checkpoint>(path)?.into_network()
}

/// `calibration.csv` (one row per bin) and the `calibration.json` sidecar.
pub fn write_calibration(dir: &Path, report: &CalibrationReport) -> CliResult<()> {
    let header = ["bin_lo", "bin_hi", "count", "accuracy", "confidence"].map(String::from);
    let rows = report.bins.iter().map(|b| {
        vec![
            b.lo.to_string(),
            b.hi.to_string(),
            b.count.to_string(),
            b.accuracy.to_string(),
            b.confidence.to_string(),
        ]
    });
    write_atomic(&dir.join("calibration.csv"), &csv_bytes(&header, rows)?)?;
    write_json(&dir.join("calibration.json"), report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = std::env::temp_dir().join(format!("bdkd-io-{}", std::process::id()));
        let path = dir.join("a/b.txt");
        write_atomic(&path, b"hello").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"hello");
        assert!(!dir.join("a/b.txt.tmp").exists());
        fs::remove_dir_all(dir).unwrap();
    }
}
