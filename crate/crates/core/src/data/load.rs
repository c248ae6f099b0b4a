//! File loaders: numeric CSV and hashed-text JSON lines.

use std::path::Path;

use serde::Deserialize;
use twox_hash::XxHash64;

use super::Dataset;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    CsvNumeric,
    JsonlText,
}

impl std::str::FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv_numeric" | "csv" => Ok(DataFormat::CsvNumeric),
            "jsonl_text" | "jsonl" => Ok(DataFormat::JsonlText),
            other => Err(invalid(format!("unknown data format {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadOptions {
    /// Hash buckets for text features.
    pub hash_dim: usize,
    pub hash_seed: u64,
    /// Defaults to `max(label) + 1`, at least 2.
    pub num_classes: Option<usize>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            hash_dim: 256,
            hash_seed: 0,
            num_classes: None,
        }
    }
}

pub fn load_dataset(path: &Path, format: DataFormat, opts: &LoadOptions) -> Result<Dataset> {
    let (rows, labels, dim) = match format {
        DataFormat::CsvNumeric => read_csv(path)?,
        DataFormat::JsonlText => read_jsonl(path, opts)?,
    };
    let classes = opts
        .num_classes
        .unwrap_or_else(|| labels.iter().max().map_or(2, |&m| (m + 1).max(2)));
    let features = Tensor::new(vec![labels.len(), dim], rows)?;
    Dataset::new(features, labels, classes)
}

fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn read_csv(path: &Path) -> Result<(Vec<f64>, Vec<usize>, usize)> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if lineno == 1 && fields.last() == Some(&"label") {
            continue;
        }
        if fields.len() < 2 {
            return Err(parse_error(lineno, "need at least one feature and a label"));
        }
        let d = fields.len() - 1;
        match dim {
            None => dim = Some(d),
            Some(expect) if expect != d => {
                return Err(parse_error(
                    lineno,
                    format!("expected {expect} feature(s), found {d}"),
                ))
            }
            _ => {}
        }
        for f in &fields[..d] {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_error(lineno, format!("bad number {f:?}")))?;
            if !v.is_finite() {
                return Err(parse_error(lineno, "non-finite feature"));
            }
            rows.push(v);
        }
        let y: usize = fields[d]
            .parse()
            .map_err(|_| parse_error(lineno, format!("bad label {:?}", fields[d])))?;
        labels.push(y);
    }
    let dim = dim.ok_or(Error::EmptyInput)?;
    Ok((rows, labels, dim))
}

#[derive(Deserialize)]
struct TextRecord {
    text: String,
    label: usize,
}

fn read_jsonl(path: &Path, opts: &LoadOptions) -> Result<(Vec<f64>, Vec<usize>, usize)> {
    if opts.hash_dim == 0 {
        return Err(invalid("hash dim must be positive"));
    }
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TextRecord =
            serde_json::from_str(line).map_err(|e| parse_error(i + 1, e.to_string()))?;
        rows.extend(featurize_text(&rec.text, opts.hash_dim, opts.hash_seed));
        labels.push(rec.label);
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok((rows, labels, opts.hash_dim))
}

fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Signed feature hashing of lowercase word unigrams and bigrams into `dim`
/// buckets, L2-normalized (an empty text maps to the zero vector).
pub fn featurize_text(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let toks = tokens(text);
    let bigrams = toks.windows(2).map(|w| format!("{} {}", w[0], w[1]));
    let mut v = vec![0.0; dim];
    for feat in toks.iter().cloned().chain(bigrams) {
        let h = XxHash64::oneshot(seed, feat.as_bytes());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        v[(h % dim as u64) as usize] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}
