//! Aggregation and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::experiment::{Leaf, RunFailure, RunSummary};
use crate::error::{Error, Result};

/// Leaves produced under one experiment configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafSet {
    pub config_hash: String,
    pub leaves: Vec<Leaf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetAggregate {
    pub model: String,
    pub target: String,
    /// Per retrain point, mean over seeds; ordered by point.
    pub per_point: Vec<f64>,
    /// Mean of `per_point`.
    pub mean_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMean {
    pub model: String,
    pub seed: u64,
    /// Mean over retrain points and targets for this seed alone.
    pub mean_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMean {
    pub model: String,
    /// Mean over targets of the target aggregates.
    pub mean_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeChange {
    pub model: String,
    pub baseline: String,
    /// `100 · (model − baseline) / baseline`.
    pub percent: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub targets: Vec<TargetAggregate>,
    pub models: Vec<ModelMean>,
    pub seeds: Vec<SeedMean>,
    pub relative: Vec<RelativeChange>,
}

impl Aggregates {
    pub fn model_mean(&self, model: &str) -> Option<f64> {
        self.models.iter().find(|m| m.model == model).map(|m| m.mean_mse)
    }

    pub fn seed_mean(&self, model: &str, seed: u64) -> Option<f64> {
        self.seeds
            .iter()
            .find(|s| s.model == model && s.seed == seed)
            .map(|s| s.mean_mse)
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// `100 · (value − baseline) / baseline`.
pub fn relative_change(value: f64, baseline: f64) -> f64 {
    100.0 * (value - baseline) / baseline
}

/// Mean over seeds, then an unweighted mean over retrain points. Models and
/// targets keep their first-appearance order.
pub fn aggregate(sets: &[LeafSet], baseline: Option<&str>) -> Result<Aggregates> {
    let first = sets
        .first()
        .ok_or_else(|| Error::Aggregation("nothing to aggregate".into()))?;
    if let Some(other) = sets.iter().find(|s| s.config_hash != first.config_hash) {
        return Err(Error::Aggregation(format!(
            "config hash {} differs from {}",
            other.config_hash, first.config_hash
        )));
    }
    let leaves: Vec<&Leaf> = sets.iter().flat_map(|s| &s.leaves).collect();
    if leaves.is_empty() {
        return Err(Error::Aggregation("no leaves".into()));
    }
    let mut models: Vec<&str> = Vec::new();
    let mut targets: Vec<&str> = Vec::new();
    for l in &leaves {
        if !models.contains(&l.model.as_str()) {
            models.push(&l.model);
        }
        if !targets.contains(&l.target.as_str()) {
            targets.push(&l.target);
        }
    }
    // (model, target) -> point -> seed values
    let mut cells: BTreeMap<(&str, &str), BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    let mut seen = std::collections::BTreeSet::new();
    for l in &leaves {
        if !seen.insert((&l.model, &l.target, l.point, l.seed)) {
            return Err(Error::Aggregation(format!(
                "duplicate leaf {} {} point {} seed {}",
                l.model, l.target, l.point, l.seed
            )));
        }
        cells
            .entry((&l.model, &l.target))
            .or_default()
            .entry(l.point)
            .or_default()
            .push(l.mse);
    }
    let mut out = Aggregates {
        targets: Vec::new(),
        models: Vec::new(),
        seeds: Vec::new(),
        relative: Vec::new(),
    };
    for &m in &models {
        let mut target_means = Vec::new();
        for &t in &targets {
            let Some(points) = cells.get(&(m, t)) else {
                continue;
            };
            let per_point: Vec<f64> = points.values().map(|v| mean(v.iter().copied())).collect();
            let mean_mse = mean(per_point.iter().copied());
            target_means.push(mean_mse);
            out.targets.push(TargetAggregate {
                model: m.to_string(),
                target: t.to_string(),
                per_point,
                mean_mse,
            });
        }
        out.models.push(ModelMean {
            model: m.to_string(),
            mean_mse: mean(target_means),
        });
        let mut seeds: Vec<u64> = leaves.iter().filter(|l| l.model == m).map(|l| l.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        for seed in seeds {
            // Mean over points per target, then over targets.
            let per_target = targets.iter().filter_map(|&t| {
                let vals: Vec<f64> = leaves
                    .iter()
                    .filter(|l| l.model == m && l.target == t && l.seed == seed)
                    .map(|l| l.mse)
                    .collect();
                (!vals.is_empty()).then(|| mean(vals))
            });
            out.seeds.push(SeedMean {
                model: m.to_string(),
                seed,
                mean_mse: mean(per_target),
            });
        }
    }
    if let Some(b) = baseline {
        let base = out
            .model_mean(b)
            .ok_or_else(|| Error::Aggregation(format!("baseline model {b} has no results")))?;
        out.relative = out
            .models
            .iter()
            .filter(|m| m.model != b)
            .map(|m| RelativeChange {
                model: m.model.clone(),
                baseline: b.to_string(),
                percent: relative_change(m.mean_mse, base),
            })
            .collect();
    }
    Ok(out)
}

/// Hex SHA-256 of the JSON serialization of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub config_hash: String,
    /// Short content hash identifying this run's results.
    pub run_id: String,
    /// Data span and cutoffs; derived from the data, never the wall clock,
    /// so identical inputs give identical bytes.
    pub data_start: NaiveDate,
    pub data_end: NaiveDate,
    pub first_cutoff: NaiveDate,
    pub last_cutoff: NaiveDate,
    pub models: Vec<String>,
    pub targets: Vec<String>,
    pub seeds: Vec<u64>,
    pub retrain_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metadata: ReportMetadata,
    pub aggregates: Aggregates,
    pub leaves: Vec<Leaf>,
    pub runs: Vec<RunSummary>,
    pub failures: Vec<RunFailure>,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    /// Fills in `metadata.run_id` from the report content.
    pub fn seal(mut self) -> Result<Self> {
        self.metadata.run_id.clear();
        let bytes = serde_json::to_vec(&self)?;
        self.metadata.run_id = hex(&Sha256::digest(&bytes))[..12].to_string();
        Ok(self)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Model × target matrix of mean MSE with a trailing all-target mean.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("model");
        for t in &self.metadata.targets {
            let _ = write!(s, ",{t}");
        }
        s.push_str(",mean\n");
        for m in &self.aggregates.models {
            s.push_str(&m.model);
            for t in &self.metadata.targets {
                let v = self
                    .aggregates
                    .targets
                    .iter()
                    .find(|a| a.model == m.model && &a.target == t)
                    .map(|a| a.mean_mse.to_string())
                    .unwrap_or_default();
                let _ = write!(s, ",{v}");
            }
            let _ = writeln!(s, ",{}", m.mean_mse);
        }
        s
    }
}

/// Writes `report.json` and `summary.csv` into `dir`, creating it if needed.
pub fn emit_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join("report.json");
    std::fs::write(&json, report.to_json()?).map_err(|e| Error::io(&json, e))?;
    let csv = dir.join("summary.csv");
    std::fs::write(&csv, report.summary_csv()).map_err(|e| Error::io(&csv, e))?;
    Ok(())
}
