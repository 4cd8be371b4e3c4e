//! Labeled classification datasets in JSONL or CSV.

use std::path::Path;
use std::str::FromStr;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::eval::extract::match_label;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Jsonl,
    Csv,
}

impl DatasetFormat {
    /// Guess from the file extension.
    pub fn from_path(path: &Path) -> Option<DatasetFormat> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "jsonl" | "ndjson" => Some(DatasetFormat::Jsonl),
            "csv" => Some(DatasetFormat::Csv),
            _ => None,
        }
    }
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(DatasetFormat::Jsonl),
            "csv" => Ok(DatasetFormat::Csv),
            other => Err(Error::Usage(format!(
                "unknown dataset format {other:?} (expected jsonl or csv)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub text: String,
    /// Index into the dataset's label set.
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub labels: Vec<String>,
    pub samples: Vec<Sample>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of samples per label, in label order.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.labels.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}

#[derive(Deserialize)]
struct Row {
    text: String,
    label: String,
}

/// Splits a comma-separated label list, rejecting duplicates.
pub fn parse_label_list(s: &str) -> Result<Vec<String>> {
    let labels: Vec<String> = s
        .split(',')
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    validate_labels(&labels)?;
    Ok(labels)
}

pub fn validate_labels(labels: &[String]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Usage("label set is empty".into()));
    }
    for (i, l) in labels.iter().enumerate() {
        if match_label(l, &labels[..i], false).is_some() {
            return Err(Error::Usage(format!("duplicate label {l:?}")));
        }
    }
    Ok(())
}

pub fn load_dataset(
    path: &Path,
    format: DatasetFormat,
    labels: &[String],
) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    parse_dataset(&name, &text, format, labels)
}

pub fn parse_dataset(
    name: &str,
    text: &str,
    format: DatasetFormat,
    labels: &[String],
) -> Result<LabeledDataset> {
    validate_labels(labels)?;
    let mut samples = Vec::new();
    let mut push = |line: usize, row: Row| -> Result<()> {
        let label = match_label(&row.label, labels, false).ok_or_else(|| {
            Error::Data(format!(
                "line {line}: label {:?} is not in the label set {labels:?}",
                row.label
            ))
        })?;
        samples.push(Sample {
            text: row.text,
            label,
        });
        Ok(())
    };
    match format {
        DatasetFormat::Jsonl => {
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let row: Row = serde_json::from_str(line).map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                push(i + 1, row)?;
            }
        }
        DatasetFormat::Csv => {
            let mut reader = csv::Reader::from_reader(text.as_bytes());
            let headers = reader
                .headers()
                .map_err(|e| Error::Parse {
                    line: 1,
                    message: e.to_string(),
                })?
                .clone();
            for record in reader.records() {
                let parse_err = |e: csv::Error| Error::Parse {
                    line: e.position().map_or(0, |p| p.line() as usize),
                    message: e.to_string(),
                };
                let record = record.map_err(parse_err)?;
                let line = record.position().map_or(0, |p| p.line() as usize);
                let row: Row = record
                    .deserialize(Some(&headers))
                    .map_err(|e| Error::Parse {
                        line,
                        message: e.to_string(),
                    })?;
                push(line, row)?;
            }
        }
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("dataset {name} has no samples")));
    }
    Ok(LabeledDataset {
        name: name.to_string(),
        labels: labels.to_vec(),
        samples,
    })
}
