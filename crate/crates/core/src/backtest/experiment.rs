//! Runs every (model, retrain point, seed) cell of a backtest.

use std::sync::Arc;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::evaluate::evaluate_point;
use super::schedule::{BacktestSchedule, RetrainPoint};
use super::train::{run_training, TrainConfig};
use crate::data::{
    build_windows, zscore_fit, ChannelDescriptions, EmbeddingSeries, SyntheticData, TimeSeriesFrame,
    WindowSample, WindowSource, ZScore,
};
use crate::error::{Error, Result};
use crate::model::{ForecastModel, ModelConfig, ModelId};
use crate::tensor::Tensor;

/// Complete daily series with its text streams.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dates: Vec<NaiveDate>,
    pub channels: Vec<String>,
    /// C×N raw values without gaps.
    pub values: Vec<Vec<f64>>,
    pub targets: Vec<usize>,
    pub key_driver: EmbeddingSeries,
    pub outlook: EmbeddingSeries,
    pub descriptions: Arc<Tensor>,
}

impl Dataset {
    /// `frame` must have no missing cells; targets are channel names.
    pub fn new(
        frame: &TimeSeriesFrame,
        targets: &[String],
        key_driver: EmbeddingSeries,
        outlook: EmbeddingSeries,
        descriptions: &ChannelDescriptions,
    ) -> Result<Self> {
        let values = frame.complete_values()?;
        let targets = targets
            .iter()
            .map(|t| {
                frame
                    .channel_index(t)
                    .ok_or_else(|| Error::Config(format!("target {t} is not a channel")))
            })
            .collect::<Result<Vec<_>>>()?;
        if targets.is_empty() {
            return Err(Error::Config("at least one target is required".into()));
        }
        if key_driver.dim() != outlook.dim() {
            return Err(Error::Config(format!(
                "key-driver embeddings have dim {}, outlook {}",
                key_driver.dim(),
                outlook.dim()
            )));
        }
        let descriptions = Arc::new(descriptions.matrix_for(frame.channels())?);
        Ok(Self {
            dates: frame.dates().to_vec(),
            channels: frame.channels().to_vec(),
            values,
            targets,
            key_driver,
            outlook,
            descriptions,
        })
    }

    pub fn from_synthetic(data: &SyntheticData, targets: &[usize]) -> Result<Self> {
        let names: Vec<String> = targets
            .iter()
            .map(|&t| {
                data.frame
                    .channels()
                    .get(t)
                    .cloned()
                    .ok_or_else(|| Error::Config(format!("target index {t} out of range")))
            })
            .collect::<Result<_>>()?;
        Self::new(
            &data.frame,
            &names,
            data.key_driver.clone(),
            data.outlook.clone(),
            &data.descriptions,
        )
    }

    pub fn target_names(&self) -> Vec<String> {
        self.targets.iter().map(|&t| self.channels[t].clone()).collect()
    }

    /// Specializes a base model configuration to this dataset's shapes.
    pub fn adapt(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            channels: self.channels.len(),
            targets: self.targets.clone(),
            embedding_dim: self.key_driver.dim(),
            description_dim: self.descriptions.cols(),
            ..base.clone()
        }
    }
}

/// Normalized training and test windows for one retrain point.
#[derive(Debug, Clone)]
pub struct PointData {
    pub index: usize,
    pub point: RetrainPoint,
    pub zscore: ZScore,
    pub train: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
    /// Reasons test origins were dropped.
    pub skipped: Vec<String>,
}

/// Builds the windows of one point. Normalization statistics and every
/// training window use only rows dated strictly before the cutoff.
pub fn prepare_point(
    data: &Dataset,
    index: usize,
    point: &RetrainPoint,
    lookback: usize,
    horizon: usize,
) -> Result<PointData> {
    let zscore = zscore_fit(&data.dates, &data.values, point.cutoff)?;
    let normalized = zscore.apply(&data.values);
    let cut = data.dates.partition_point(|&d| d < point.cutoff);
    let src = WindowSource {
        dates: &data.dates,
        values: &normalized,
        targets: &data.targets,
        key_driver: &data.key_driver,
        outlook: &data.outlook,
        descriptions: &data.descriptions,
    };
    let train_origins: Vec<NaiveDate> = (lookback.max(1)..=cut.saturating_sub(horizon))
        .map(|i| data.dates[i])
        .collect();
    let (train, _) = build_windows(src, lookback, horizon, &train_origins);
    let (test, rejected) = build_windows(src, lookback, horizon, &point.origins);
    let skipped = rejected
        .into_iter()
        .map(|r| format!("{} origin {}: {}", point.week, r.origin, r.reason))
        .collect();
    Ok(PointData {
        index,
        point: point.clone(),
        zscore,
        train,
        test,
        skipped,
    })
}

/// Everything that selects the runs of an experiment.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub models: Vec<ModelId>,
    pub base: ModelConfig,
    pub train: TrainConfig,
    /// Parallel runs; 0 means one per available core.
    pub workers: usize,
    /// Keep denormalized forecasts of the first seed for plotting.
    pub keep_forecasts: bool,
}

/// MSE of one (model, target, retrain point, seed) cell, averaged over the
/// point's origins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaf {
    pub model: String,
    pub target: String,
    pub point: usize,
    pub cutoff: NaiveDate,
    pub seed: u64,
    pub mse: f64,
    pub origins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub model: String,
    pub point: usize,
    pub seed: u64,
    pub train_samples: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub model: String,
    pub point: usize,
    pub seed: u64,
    pub error: String,
    /// Set when training diverged.
    pub epoch: Option<usize>,
}

/// Lookback and truth of one test origin in original units, per target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OriginRecord {
    pub origin: NaiveDate,
    pub point: usize,
    pub lookback: Vec<Vec<f64>>,
    pub truth: Vec<Vec<f64>>,
}

/// A forecast in original units, per target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub model: String,
    pub seed: u64,
    pub origin: NaiveDate,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOutcome {
    pub leaves: Vec<Leaf>,
    pub runs: Vec<RunSummary>,
    pub failures: Vec<RunFailure>,
    pub warnings: Vec<String>,
    pub origins: Vec<OriginRecord>,
    pub forecasts: Vec<ForecastRecord>,
}

impl ExperimentOutcome {
    pub fn diverged(&self) -> bool {
        self.failures.iter().any(|f| f.epoch.is_some())
    }
}

struct RunOutput {
    leaves: Vec<Leaf>,
    summary: RunSummary,
    forecasts: Vec<ForecastRecord>,
}

fn denormalize(z: &ZScore, channels: &[usize], rows: &Tensor) -> Vec<Vec<f64>> {
    channels
        .iter()
        .enumerate()
        .map(|(r, &c)| rows.row_slice(r).iter().map(|&v| z.invert_one(c, v)).collect())
        .collect()
}

fn run_cell(
    data: &Dataset,
    pd: &PointData,
    mid: ModelId,
    base: &ModelConfig,
    train: &TrainConfig,
    seed: u64,
    keep: bool,
) -> Result<RunOutput> {
    let cfg = mid.configure(base);
    let mut model = ForecastModel::new(cfg, seed)?;
    let trace = run_training(&mut model, &pd.train, train, seed)?;
    let scores = evaluate_point(&model, &pd.test, train.batch_size)?;
    let names = data.target_names();
    let leaves = names
        .iter()
        .enumerate()
        .map(|(j, name)| Leaf {
            model: mid.to_string(),
            target: name.clone(),
            point: pd.index,
            cutoff: pd.point.cutoff,
            seed,
            mse: scores.iter().map(|s| s.target_mse[j]).sum::<f64>() / scores.len() as f64,
            origins: scores.len(),
        })
        .collect();
    let forecasts = if keep {
        scores
            .iter()
            .map(|s| ForecastRecord {
                model: mid.to_string(),
                seed,
                origin: s.origin,
                values: denormalize(&pd.zscore, &data.targets, &s.prediction),
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(RunOutput {
        leaves,
        summary: RunSummary {
            model: mid.to_string(),
            point: pd.index,
            seed,
            train_samples: pd.train.len(),
            epochs: trace.validation_losses.len(),
            best_epoch: trace.best_epoch,
            final_train_loss: trace.validation_losses[trace.best_epoch - 1],
        },
        forecasts,
    })
}

/// Trains and scores every requested cell. Failed cells are recorded and the
/// remaining cells still run; output order is independent of scheduling.
pub fn run_experiment(
    data: &Dataset,
    schedule: &BacktestSchedule,
    spec: &ExperimentSpec,
) -> Result<ExperimentOutcome> {
    spec.train.validate()?;
    if spec.models.is_empty() {
        return Err(Error::Config("no models requested".into()));
    }
    let base = data.adapt(&spec.base);
    for mid in &spec.models {
        mid.configure(&base).validate()?;
    }
    let (lookback, horizon) = (base.lookback, base.horizon);
    let mut outcome = ExperimentOutcome {
        warnings: schedule
            .warnings
            .iter()
            .map(|w| format!("{}: {}", w.week, w.message))
            .collect(),
        ..Default::default()
    };
    let mut points = Vec::new();
    for (i, p) in schedule.points.iter().enumerate() {
        let pd = prepare_point(data, i, p, lookback, horizon)?;
        outcome.warnings.extend(pd.skipped.iter().cloned());
        if pd.test.is_empty() || pd.train.is_empty() {
            outcome.warnings.push(format!(
                "{}: skipped ({} training windows, {} test windows)",
                p.week,
                pd.train.len(),
                pd.test.len()
            ));
            continue;
        }
        points.push(pd);
    }
    if points.is_empty() {
        return Err(Error::Data("no retrain point has both training and test windows".into()));
    }
    for pd in &points {
        for s in &pd.test {
            let lb = s.x.clone();
            let lookback_rows: Vec<Vec<f64>> = data
                .targets
                .iter()
                .map(|&c| lb.row_slice(c).iter().map(|&v| pd.zscore.invert_one(c, v)).collect())
                .collect();
            outcome.origins.push(OriginRecord {
                origin: s.origin,
                point: pd.index,
                lookback: lookback_rows,
                truth: denormalize(&pd.zscore, &data.targets, &s.y),
            });
        }
    }

    let first_seed = spec.train.seeds[0];
    let cells: Vec<(ModelId, usize, u64)> = spec
        .models
        .iter()
        .flat_map(|&m| {
            (0..points.len()).flat_map(move |p| spec.train.seeds.iter().map(move |&s| (m, p, s)))
        })
        .collect();
    let run = |&(mid, p, seed): &(ModelId, usize, u64)| {
        let keep = spec.keep_forecasts && seed == first_seed;
        (mid, p, seed, run_cell(data, &points[p], mid, &base, &spec.train, seed, keep))
    };
    let workers = if spec.workers == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get()).min(8)
    } else {
        spec.workers
    };
    let results: Vec<_> = if workers <= 1 {
        cells.iter().map(run).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?
            .install(|| cells.par_iter().map(run).collect())
    };
    for (mid, p, seed, r) in results {
        match r {
            Ok(out) => {
                outcome.leaves.extend(out.leaves);
                outcome.runs.push(out.summary);
                outcome.forecasts.extend(out.forecasts);
            }
            Err(e) => outcome.failures.push(RunFailure {
                model: mid.to_string(),
                point: points[p].index,
                seed,
                epoch: match &e {
                    Error::Training { epoch, .. } => Some(*epoch),
                    _ => None,
                },
                error: e.to_string(),
            }),
        }
    }
    Ok(outcome)
}
