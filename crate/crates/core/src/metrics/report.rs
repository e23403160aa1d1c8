use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub config_digest: String,
    pub split: String,
    pub samples: usize,
    pub f1_averaging: String,
}

/// Named metric values plus provenance. Values are always finite.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub meta: ReportMeta,
    pub metrics: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

impl MetricReport {
    pub fn new(meta: ReportMeta) -> Self {
        Self {
            meta,
            metrics: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Numeric {
                step: 0,
                detail: format!("metric `{name}` is {value}"),
            });
        }
        self.metrics.insert(name.to_string(), value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn warn(&mut self, message: impl Into<String>) {
        self.warnings.push(message.into());
    }

    /// Header of metric names and a single row of values.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.metrics.keys())?;
        w.write_record(self.metrics.values().map(|v| v.to_string()))?;
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn parse_csv(text: &str) -> Result<BTreeMap<String, f64>> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers()?.clone();
        let row = r
            .records()
            .next()
            .ok_or_else(|| Error::Format("metric CSV has no data row".into()))??;
        header
            .iter()
            .zip(row.iter())
            .map(|(k, v)| {
                let v = v.parse::<f64>().map_err(|e| Error::Format(format!("metric `{k}`: {e}")))?;
                Ok((k.to_string(), v))
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub id: usize,
    pub class: usize,
    pub values: Vec<f64>,
}

/// CSV with columns `id, class, v0 … v(d-1)`.
pub fn write_embeddings(path: &Path, rows: &[EmbeddingRow]) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.values.len());
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header = vec!["id".to_string(), "class".to_string()];
    header.extend((0..dim).map(|j| format!("v{j}")));
    w.write_record(&header)?;
    for r in rows {
        if r.values.len() != dim {
            return Err(Error::dim("write_embeddings", &[dim], &[r.values.len()]));
        }
        let mut rec = vec![r.id.to_string(), r.class.to_string()];
        rec.extend(r.values.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let parse = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(e.to_string()));
    let parse_id = |s: &str| s.parse::<usize>().map_err(|e| Error::Format(e.to_string()));
    r.records()
        .map(|rec| {
            let rec = rec?;
            if rec.len() < 2 {
                return Err(Error::Format("embedding row without id and class".into()));
            }
            Ok(EmbeddingRow {
                id: parse_id(&rec[0])?,
                class: parse_id(&rec[1])?,
                values: rec.iter().skip(2).map(parse).collect::<Result<_>>()?,
            })
        })
        .collect()
}
