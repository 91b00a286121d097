use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::preprocess::Preprocessor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    pub label: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, examples: Vec<Example>) -> Self {
        Self {
            name: name.into(),
            examples,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn positives(&self) -> usize {
        self.examples.iter().filter(|e| e.label == 1).count()
    }

    /// The examples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Self {
        Self::new(name, indices.iter().map(|&i| self.examples[i].clone()).collect())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for ex in &self.examples {
            let line = serde_json::to_string(ex).map_err(|e| Error::Internal(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io("<dataset output>", e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Jsonl,
    Csv,
}

impl DatasetFormat {
    /// Guesses from the file extension; anything but `.csv` is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Self::Csv,
            _ => Self::Jsonl,
        }
    }
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(Self::Jsonl),
            "csv" => Ok(Self::Csv),
            other => Err(Error::Config(format!("unknown dataset format {other:?}"))),
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Jsonl => "jsonl",
            Self::Csv => "csv",
        })
    }
}

fn parse_label(raw: &str, line: usize) -> Result<u8> {
    match raw.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::format(line, format!("label must be 0 or 1, found {other:?}"))),
    }
}

/// One JSON object per line with a string `text` and a 0/1 `label`
/// (number or string). Blank lines are skipped; other fields are ignored.
pub fn parse_jsonl<R: BufRead>(reader: R, name: &str) -> Result<Dataset> {
    let mut examples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::format(lineno, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::format(lineno, format!("invalid JSON: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::format(lineno, "record is not a JSON object"))?;
        let text = obj
            .get("text")
            .and_then(|t| t.as_str())
            .ok_or_else(|| Error::format(lineno, "missing string field `text`"))?;
        let label = match obj.get("label") {
            Some(serde_json::Value::Number(n)) => parse_label(&n.to_string(), lineno)?,
            Some(serde_json::Value::String(s)) => parse_label(s, lineno)?,
            Some(other) => return Err(Error::format(lineno, format!("label must be 0 or 1, found {other}"))),
            None => return Err(Error::format(lineno, "missing field `label`")),
        };
        examples.push(Example {
            text: text.to_owned(),
            label,
        });
    }
    Ok(Dataset::new(name, examples))
}

/// CSV with a header containing `text` and `label` columns.
pub fn parse_csv<R: Read>(reader: R, name: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::format(1, format!("invalid CSV header: {e}")))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::format(1, format!("CSV header lacks a `{name}` column")))
    };
    let (text_col, label_col) = (col("text")?, col("label")?);
    let mut examples = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::format(line, format!("malformed CSV record: {e}"))
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let text = record
            .get(text_col)
            .ok_or_else(|| Error::format(line, "missing `text` value"))?;
        let label = record
            .get(label_col)
            .ok_or_else(|| Error::format(line, "missing `label` value"))?;
        examples.push(Example {
            text: text.to_owned(),
            label: parse_label(label, line)?,
        });
    }
    Ok(Dataset::new(name, examples))
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let ds = match format {
        DatasetFormat::Jsonl => parse_jsonl(BufReader::new(file), &name),
        DatasetFormat::Csv => parse_csv(BufReader::new(file), &name),
    }
    .map_err(|e| match e {
        Error::Format { line, message } => Error::Format {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })?;
    log::info!(
        "loaded {} examples ({} positive) from {}",
        ds.len(),
        ds.positives(),
        path.display()
    );
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub positive: usize,
    pub negative: usize,
    pub total: usize,
    /// Longest preprocessed text, in tokens.
    pub max_tokens: usize,
    /// `1:round(negative / positive)`.
    pub ratio: String,
}

pub fn dataset_stats(dataset: &Dataset, pre: &Preprocessor) -> DatasetStats {
    let positive = dataset.positives();
    let negative = dataset.len() - positive;
    let max_tokens = dataset
        .examples
        .iter()
        .map(|e| pre.tokens(&e.text).len())
        .max()
        .unwrap_or(0);
    let ratio = if positive == 0 {
        "0:1".to_owned()
    } else {
        format!("1:{}", (negative as f64 / positive as f64).round() as u64)
    };
    DatasetStats {
        positive,
        negative,
        total: dataset.len(),
        max_tokens,
        ratio,
    }
}
