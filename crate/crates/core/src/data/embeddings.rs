//! Date-keyed text embedding streams and channel-description embeddings,
//! stored as JSONL.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::routing::EmbeddingSource;
use crate::tensor::Tensor;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DateRecord {
    date: NaiveDate,
    /// Present in per-target streams written by the text pipeline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target: Option<String>,
    vector: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChannelRecord {
    channel: String,
    vector: Vec<f64>,
}

/// A map from calendar date to a D-dimensional embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSeries {
    pub source: EmbeddingSource,
    dim: usize,
    vectors: BTreeMap<NaiveDate, Vec<f64>>,
}

impl EmbeddingSeries {
    pub fn new(source: EmbeddingSource, dim: usize) -> Self {
        Self {
            source,
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, date: NaiveDate) -> Option<&[f64]> {
        self.vectors.get(&date).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NaiveDate, &[f64])> {
        self.vectors.iter().map(|(d, v)| (*d, v.as_slice()))
    }

    pub fn insert(&mut self, date: NaiveDate, vector: Vec<f64>) -> Result<()> {
        check_vector(&vector, self.dim)?;
        if self.vectors.insert(date, vector).is_some() {
            return Err(Error::Data(format!("duplicate embedding date {date}")));
        }
        Ok(())
    }

    /// Reads JSONL records `{"date":..,"vector":[..]}`. With `dim` unset the
    /// width of the first record fixes D.
    pub fn read_jsonl<R: BufRead>(
        reader: R,
        source: EmbeddingSource,
        dim: Option<usize>,
        path: &str,
    ) -> Result<Self> {
        Self::read_jsonl_for_target(reader, source, dim, path, None)
    }

    /// As [`read_jsonl`](Self::read_jsonl), but when `target` is set only
    /// records tagged with that target (or untagged) are kept.
    pub fn read_jsonl_for_target<R: BufRead>(
        reader: R,
        source: EmbeddingSource,
        dim: Option<usize>,
        path: &str,
        target: Option<&str>,
    ) -> Result<Self> {
        let mut series = Self::new(source, dim.unwrap_or(0));
        let mut fixed = dim.is_some();
        for_each_record(reader, path, |line, rec: DateRecord| {
            if let (Some(want), Some(have)) = (target, rec.target.as_deref()) {
                if want != have {
                    return Ok(());
                }
            }
            if !fixed {
                series.dim = rec.vector.len();
                fixed = true;
            }
            series.insert(rec.date, rec.vector).map_err(|e| Error::Format {
                path: path.to_string(),
                line,
                message: e.to_string(),
            })
        })?;
        Ok(series)
    }

    pub fn load(path: &Path, source: EmbeddingSource, dim: Option<usize>) -> Result<Self> {
        Self::load_for_target(path, source, dim, None)
    }

    pub fn load_for_target(
        path: &Path,
        source: EmbeddingSource,
        dim: Option<usize>,
        target: Option<&str>,
    ) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl_for_target(
            std::io::BufReader::new(file),
            source,
            dim,
            &path.display().to_string(),
            target,
        )
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for (date, vector) in &self.vectors {
            let rec = DateRecord {
                date: *date,
                target: None,
                vector: vector.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Per-channel description embeddings, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelDescriptions {
    dim: usize,
    entries: Vec<(String, Vec<f64>)>,
}

impl ChannelDescriptions {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, channel: &str) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(c, _)| c == channel)
            .map(|(_, v)| v.as_slice())
    }

    pub fn insert(&mut self, channel: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        let channel = channel.into();
        check_vector(&vector, self.dim)?;
        if self.get(&channel).is_some() {
            return Err(Error::Data(format!("duplicate description for {channel}")));
        }
        self.entries.push((channel, vector));
        Ok(())
    }

    /// Stacks the descriptions of `channels` into a C×D tensor.
    pub fn matrix_for(&self, channels: &[String]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(channels.len() * self.dim);
        for c in channels {
            let v = self
                .get(c)
                .ok_or_else(|| Error::Config(format!("no description embedding for channel {c}")))?;
            data.extend_from_slice(v);
        }
        Tensor::matrix(channels.len(), self.dim, data)
    }

    pub fn read_jsonl<R: BufRead>(reader: R, dim: Option<usize>, path: &str) -> Result<Self> {
        let mut out = Self::new(dim.unwrap_or(0));
        let mut fixed = dim.is_some();
        for_each_record(reader, path, |line, rec: ChannelRecord| {
            if !fixed {
                out.dim = rec.vector.len();
                fixed = true;
            }
            out.insert(rec.channel, rec.vector).map_err(|e| Error::Format {
                path: path.to_string(),
                line,
                message: e.to_string(),
            })
        })?;
        Ok(out)
    }

    pub fn load(path: &Path, dim: Option<usize>) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(std::io::BufReader::new(file), dim, &path.display().to_string())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for (channel, vector) in &self.entries {
            let rec = ChannelRecord {
                channel: channel.clone(),
                vector: vector.clone(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn check_vector(v: &[f64], dim: usize) -> Result<()> {
    if v.len() != dim {
        return Err(Error::Data(format!(
            "vector has length {}, stream dimension is {dim}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Data("vector contains a non-finite value".into()));
    }
    Ok(())
}

fn for_each_record<R, T, F>(reader: R, path: &str, mut f: F) -> Result<()>
where
    R: BufRead,
    T: for<'de> Deserialize<'de>,
    F: FnMut(usize, T) -> Result<()>,
{
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let text = line.map_err(|e| Error::io(path, e))?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        f(line_no, rec)?;
    }
    Ok(())
}
