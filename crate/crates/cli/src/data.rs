//! CSV ingestion: one header row naming the columns, one numeric row per timestep.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use dmamba::{Series, Tensor};
use serde::{Deserialize, Serialize};

/// Where the data lives and how to shape it before it reaches the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    /// CSV with a `label` column (or a single column) of 0/1 per test row.
    pub label_path: Option<PathBuf>,
    /// Feature columns to keep, in this order. All columns when absent.
    pub columns: Option<Vec<String>>,
    /// Average each run of this many rows into one; a partial final run is kept.
    pub downsample: usize,
    /// Drop zero-variance columns of the training file.
    pub drop_constant: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            train_path: None,
            test_path: None,
            label_path: None,
            columns: None,
            downsample: 1,
            drop_constant: true,
        }
    }
}

/// Header and numeric body of a CSV file.
struct Table {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

fn read_table(path: &Path) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let header: Vec<String> = reader
        .headers()
        .with_context(|| format!("{}: cannot read header", path.display()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        bail!("{}: empty file", path.display());
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
                anyhow!(
                    "{}: row {row} has {len} fields, header has {expected_len}",
                    path.display()
                )
            }
            _ => anyhow!("{}: row {row}: {e}", path.display()),
        })?;
        let mut values = Vec::with_capacity(record.len());
        for (cell, name) in record.iter().zip(&header) {
            let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
                anyhow!(
                    "{}: row {row}, column \"{name}\": {cell:?} is not a finite number",
                    path.display()
                )
            })?;
            values.push(v);
        }
        rows.push(values);
    }
    if rows.is_empty() {
        bail!("{}: no data rows", path.display());
    }
    Ok(Table { header, rows })
}

/// Mean of each run of `factor` rows; the last run may be shorter.
pub fn downsample_mean(values: &Tensor, factor: usize) -> Tensor {
    let (t, d) = (values.rows(), values.cols());
    let out_rows = t.div_ceil(factor);
    Tensor::from_fn(out_rows, d, |r, c| {
        let lo = r * factor;
        let hi = (lo + factor).min(t);
        (lo..hi).map(|i| values.get(i, c)).sum::<f64>() / (hi - lo) as f64
    })
}

/// Reads a feature CSV into a series.
///
/// Columns are selected by `columns` (all when `None`), rows are mean-pooled
/// by `downsample`, and with `drop_constant` zero-variance columns are removed
/// with a warning on stderr.
pub fn load_csv(path: &Path, columns: Option<&[String]>, downsample: usize, drop_constant: bool) -> Result<Series> {
    if downsample == 0 {
        bail!("downsample factor must be >= 1");
    }
    let table = read_table(path)?;
    let picked: Vec<usize> = match columns {
        Some(names) => names
            .iter()
            .map(|n| {
                table.header.iter().position(|h| h == n).ok_or_else(|| {
                    anyhow!(
                        "{}: no column \"{n}\" (have {})",
                        path.display(),
                        table.header.join(", ")
                    )
                })
            })
            .collect::<Result<_>>()?,
        None => (0..table.header.len()).collect(),
    };
    if picked.is_empty() {
        bail!("{}: no feature columns selected", path.display());
    }
    let raw = Tensor::from_fn(table.rows.len(), picked.len(), |r, c| table.rows[r][picked[c]]);
    let values = if downsample > 1 {
        downsample_mean(&raw, downsample)
    } else {
        raw
    };
    let mut names: Vec<String> = picked.iter().map(|&i| table.header[i].clone()).collect();

    let values = if drop_constant {
        let keep: Vec<usize> = (0..values.cols())
            .filter(|&c| {
                let first = values.get(0, c);
                let varies = (0..values.rows()).any(|r| values.get(r, c) != first);
                if !varies {
                    eprintln!(
                        "warning: dropping constant column \"{}\" of {}",
                        names[c],
                        path.display()
                    );
                }
                varies
            })
            .collect();
        if keep.is_empty() {
            bail!("{}: every column is constant", path.display());
        }
        names = keep.iter().map(|&c| names[c].clone()).collect();
        Tensor::from_fn(values.rows(), keep.len(), |r, c| values.get(r, keep[c]))
    } else {
        values
    };
    let mut series = Series::new(names, values)?;
    series.downsample = downsample;
    Ok(series)
}

/// Reads 0/1 labels, max-pooled by `downsample` so an anomalous raw row marks
/// its whole group, and checks they cover `expected_len` rows.
pub fn load_labels(path: &Path, downsample: usize, expected_len: usize) -> Result<Vec<u8>> {
    if downsample == 0 {
        bail!("downsample factor must be >= 1");
    }
    let table = read_table(path)?;
    let col = match table.header.iter().position(|h| h == "label") {
        Some(c) => c,
        None if table.header.len() == 1 => 0,
        None => bail!("{}: expected a \"label\" column or a single column", path.display()),
    };
    let raw: Vec<u8> = table.rows.iter().map(|r| u8::from(r[col] != 0.0)).collect();
    let labels: Vec<u8> = raw
        .chunks(downsample)
        .map(|c| c.iter().copied().max().unwrap_or(0))
        .collect();
    if labels.len() != expected_len {
        bail!(
            "{}: {} labels after downsampling, test series has {expected_len} rows",
            path.display(),
            labels.len()
        );
    }
    Ok(labels)
}
