//! Subcommand bodies. They return data instead of printing so tests can
//! call them directly.

use std::path::{Path, PathBuf};
use std::time::Instant;

use air_core::backtest::{
    aggregate, build_biweekly_schedule, config_hash, emit_report, run_experiment, save_forecast_svg,
    Aggregates, BacktestSchedule, Dataset, ExperimentOutcome, ExperimentSpec, ForecastPlot,
    ForecastRecord, LeafSet, MetricsReport, OriginRecord, ReportMetadata,
};
use air_core::data::{
    linear_interpolate_missing, synth_generate, weekly_to_daily, ChannelDescriptions, EmbeddingSeries,
    IsoWeek, TimeSeriesFrame,
};
use air_core::gradsuite::{run_gradient_suite, TOLERANCE};
use air_core::model::{ModelId, Variant};
use air_core::routing::EmbeddingSource;
use air_refinery::{
    read_corpus, run_pipeline, HashEmbedder, HttpChat, HttpEmbedding, InsightDoc, MockChat, PipelineReport,
};
use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetConfig, RealPaths, RunConfig};
use crate::error::{CliError, CliResult};

pub const SERIES_FILE: &str = "series.csv";
pub const KEY_DRIVER_FILE: &str = "keydriver_emb.jsonl";
pub const OUTLOOK_FILE: &str = "outlook_emb.jsonl";
pub const DESCRIPTIONS_FILE: &str = "descriptions.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const FORECASTS_FILE: &str = "forecasts.json";
pub const TIMING_FILE: &str = "timing.json";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: &str) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Writes the synthetic benchmark files and returns their paths.
pub fn generate(cfg: &RunConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    let DatasetConfig::Synthetic(spec) = &cfg.dataset else {
        return Err(CliError::Config("generate needs a synthetic dataset section".into()));
    };
    let data = synth_generate(spec)?;
    create_dir(out)?;
    let files: Vec<PathBuf> = [SERIES_FILE, KEY_DRIVER_FILE, OUTLOOK_FILE, DESCRIPTIONS_FILE]
        .iter()
        .map(|f| out.join(f))
        .collect();
    data.frame.save_csv(&files[0])?;
    data.key_driver.save(&files[1])?;
    data.outlook.save(&files[2])?;
    data.descriptions.save(&files[3])?;
    Ok(files)
}

/// Runs the text pipeline. A stage with more than half of its items failed
/// is reported after every file has been written.
pub fn refine(cfg: &RunConfig, corpus: &Path, mock: bool, out: &Path) -> CliResult<PipelineReport> {
    let articles = read_corpus(corpus)?;
    let rc = &cfg.refinery;
    let report = if mock {
        let chat = MockChat::new(&rc.subject);
        let embedder = HashEmbedder::new(rc.mock_embedding_dim, rc.mock_embedding_seed);
        run_pipeline(&articles, rc, &chat, &embedder, out)?
    } else {
        let chat = HttpChat::new(&rc.backend)?;
        let embedder = HttpEmbedding::new(&rc.backend)?;
        run_pipeline(&articles, rc, &chat, &embedder, out)?
    };
    let failed = report.failed_stages();
    if !failed.is_empty() {
        return Err(CliError::Pipeline(format!(
            "more than half of the items failed in stage(s) {}; see {}",
            failed.join(", "),
            out.join(air_refinery::pipeline::ERRORS_FILE).display()
        )));
    }
    Ok(report)
}

fn load_real(r: &RealPaths) -> CliResult<Dataset> {
    let daily = TimeSeriesFrame::load_csv(&r.daily_csv)?;
    let frame = match &r.weekly_csv {
        None => daily,
        Some(path) => {
            let weekly = weekly_to_daily(&TimeSeriesFrame::load_csv(path)?, daily.dates())?;
            let mut channels = daily.channels().to_vec();
            channels.extend(weekly.channels().iter().cloned());
            let values = (0..daily.num_channels())
                .map(|c| daily.channel_values(c).to_vec())
                .chain((0..weekly.num_channels()).map(|c| weekly.channel_values(c).to_vec()))
                .collect();
            TimeSeriesFrame::new(daily.dates().to_vec(), channels, values)?
        }
    };
    let frame = linear_interpolate_missing(&frame)?;
    let stream = r.text_target.as_deref().or(r.targets.first().map(String::as_str));
    let key_driver = EmbeddingSeries::load_for_target(&r.key_driver, EmbeddingSource::KeyDriver, None, stream)?;
    let outlook = EmbeddingSeries::load_for_target(
        &r.outlook,
        EmbeddingSource::Outlook,
        Some(key_driver.dim()),
        stream,
    )?;
    let descriptions = ChannelDescriptions::load(&r.descriptions, None)?;
    Ok(Dataset::new(&frame, &r.targets, key_driver, outlook, &descriptions)?)
}

/// Materializes the configured dataset.
pub fn load_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    match &cfg.dataset {
        DatasetConfig::Synthetic(spec) => {
            let data = synth_generate(spec)?;
            Ok(Dataset::from_synthetic(&data, &data.target_indices(spec))?)
        }
        DatasetConfig::Real(r) => load_real(r),
    }
}

/// Retrain schedule over the dataset's trading dates.
pub fn schedule_for(cfg: &RunConfig, data: &Dataset) -> CliResult<BacktestSchedule> {
    let (first, last) = match (data.dates.first(), data.dates.last()) {
        (Some(&f), Some(&l)) => (f, l),
        _ => return Err(CliError::Config("dataset has no dates".into())),
    };
    let start = cfg.backtest.start_week.unwrap_or_else(|| IsoWeek::of(first));
    let years = cfg
        .backtest
        .years
        .unwrap_or_else(|| (last.year() - start.year + 1).max(1) as u32);
    let schedule = build_biweekly_schedule(start, years, &data.dates, cfg.model.horizon)?;
    Ok(match cfg.backtest.last_points {
        Some(n) => schedule.last_points(n),
        None => schedule,
    })
}

/// Test origins and first-seed forecasts, in original units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastDump {
    pub targets: Vec<String>,
    pub origins: Vec<OriginRecord>,
    pub forecasts: Vec<ForecastRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub total_secs: f64,
    pub runs: usize,
    pub failures: usize,
    pub workers: usize,
}

/// Result of [`backtest`]: the sealed report plus the raw outcome.
#[derive(Debug)]
pub struct BacktestRun {
    pub report: MetricsReport,
    pub outcome: ExperimentOutcome,
    pub seconds: f64,
}

fn baseline(models: &[ModelId]) -> Option<String> {
    models
        .iter()
        .find(|m| m.variant == Variant::Vanilla)
        .map(ToString::to_string)
}

/// Builds the sealed report for a finished experiment.
pub fn build_report(
    cfg: &RunConfig,
    data: &Dataset,
    schedule: &BacktestSchedule,
    outcome: &ExperimentOutcome,
) -> CliResult<MetricsReport> {
    let hash = config_hash(&cfg.result_key())?;
    let aggregates = if outcome.leaves.is_empty() {
        Aggregates::default()
    } else {
        aggregate(
            &[LeafSet {
                config_hash: hash.clone(),
                leaves: outcome.leaves.clone(),
            }],
            baseline(&cfg.models).as_deref(),
        )?
    };
    let cutoffs: Vec<NaiveDate> = schedule.points.iter().map(|p| p.cutoff).collect();
    let report = MetricsReport {
        metadata: ReportMetadata {
            config_hash: hash,
            run_id: String::new(),
            data_start: data.dates[0],
            data_end: *data.dates.last().expect("non-empty dates"),
            first_cutoff: cutoffs.first().copied().unwrap_or(data.dates[0]),
            last_cutoff: cutoffs.last().copied().unwrap_or(data.dates[0]),
            models: cfg.models.iter().map(ToString::to_string).collect(),
            targets: data.target_names(),
            seeds: cfg.training.seeds.clone(),
            retrain_points: schedule.points.len(),
        },
        aggregates,
        leaves: outcome.leaves.clone(),
        runs: outcome.runs.clone(),
        failures: outcome.failures.clone(),
        warnings: outcome.warnings.clone(),
    };
    Ok(report.seal()?)
}

/// Trains every requested model over the schedule and writes
/// `report.json`, `summary.csv`, `forecasts.json` and `timing.json` into
/// `out`. Divergence in any run is reported only after all files exist.
pub fn backtest(cfg: &RunConfig, out: &Path) -> CliResult<BacktestRun> {
    let data = load_dataset(cfg)?;
    let schedule = schedule_for(cfg, &data)?;
    let spec = ExperimentSpec {
        models: cfg.models.clone(),
        base: cfg.model.clone(),
        train: cfg.training.clone(),
        workers: cfg.workers,
        keep_forecasts: true,
    };
    let t0 = Instant::now();
    let outcome = run_experiment(&data, &schedule, &spec)?;
    let seconds = t0.elapsed().as_secs_f64();
    let report = build_report(cfg, &data, &schedule, &outcome)?;

    emit_report(&report, out)?;
    let dump = ForecastDump {
        targets: data.target_names(),
        origins: outcome.origins.clone(),
        forecasts: outcome.forecasts.clone(),
    };
    write(&out.join(FORECASTS_FILE), &(serde_json::to_string(&dump).map_err(air_core::Error::from)? + "\n"))?;
    let timing = Timing {
        total_secs: seconds,
        runs: outcome.runs.len(),
        failures: outcome.failures.len(),
        workers: cfg.workers,
    };
    write(&out.join(TIMING_FILE), &(serde_json::to_string_pretty(&timing).map_err(air_core::Error::from)? + "\n"))?;

    if outcome.diverged() {
        let cells: Vec<String> = outcome
            .failures
            .iter()
            .filter(|f| f.epoch.is_some())
            .map(|f| format!("{} point {} seed {}", f.model, f.point, f.seed))
            .collect();
        return Err(CliError::Divergence(format!(
            "{} run(s): {}; report written to {}",
            cells.len(),
            cells.join(", "),
            out.display()
        )));
    }
    Ok(BacktestRun {
        report,
        outcome,
        seconds,
    })
}

pub struct PlotRequest<'a> {
    /// `report.json` or the directory holding it.
    pub report: &'a Path,
    pub origin: NaiveDate,
    pub out: &'a Path,
    pub target: Option<&'a str>,
    /// Subset of the report's models; all of them when empty.
    pub models: &'a [String],
    /// Optional `insights.jsonl` supplying the outlook annotation.
    pub insights: Option<&'a Path>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

/// The latest non-empty outlook for `target` dated before `origin`, i.e. the
/// text a model forecasting from `origin` conditions on.
fn outlook_before(path: &Path, target: &str, origin: NaiveDate) -> CliResult<String> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut best: Option<InsightDoc> = None;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let doc: InsightDoc =
            serde_json::from_str(line).map_err(|e| io_err(path, format!("line {}: {e}", i + 1)))?;
        if doc.target == target && doc.date < origin && !doc.empty_window
            && best.as_ref().is_none_or(|b| doc.date > b.date) {
                best = Some(doc);
            }
    }
    Ok(best.map_or_else(String::new, |d| format!("Outlook ({}): {}", d.date, d.outlook)))
}

/// Renders one origin's forecasts to SVG.
pub fn plot(req: &PlotRequest<'_>) -> CliResult<PathBuf> {
    let report_path = if req.report.is_dir() {
        req.report.join(REPORT_FILE)
    } else {
        req.report.to_path_buf()
    };
    let dir = report_path.parent().unwrap_or(Path::new("."));
    let report: MetricsReport = read_json(&report_path)?;
    let dump: ForecastDump = read_json(&dir.join(FORECASTS_FILE))?;

    let target = req.target.unwrap_or_else(|| dump.targets.first().map_or("", String::as_str));
    let j = dump.targets.iter().position(|t| t == target).ok_or_else(|| {
        CliError::Config(format!("unknown target {target:?}; report has {}", dump.targets.join(", ")))
    })?;
    let origin = dump.origins.iter().find(|o| o.origin == req.origin).ok_or_else(|| {
        let first = dump.origins.iter().map(|o| o.origin).min();
        let last = dump.origins.iter().map(|o| o.origin).max();
        CliError::Config(match (first, last) {
            (Some(a), Some(b)) => format!("unknown origin {}; the report covers {a} to {b}", req.origin),
            _ => format!("unknown origin {}; the report has no forecasts", req.origin),
        })
    })?;
    let models: Vec<&String> = if req.models.is_empty() {
        report.metadata.models.iter().collect()
    } else {
        for m in req.models {
            if !report.metadata.models.contains(m) {
                return Err(CliError::Config(format!(
                    "model {m} is not in the report ({})",
                    report.metadata.models.join(", ")
                )));
            }
        }
        req.models.iter().collect()
    };
    let forecasts = models
        .iter()
        .filter_map(|m| {
            dump.forecasts
                .iter()
                .find(|f| &f.model == *m && f.origin == req.origin)
                .map(|f| ((*m).clone(), f.values[j].clone()))
        })
        .collect();
    let annotation = match req.insights {
        Some(p) => outlook_before(p, target, req.origin)?,
        None => String::new(),
    };
    let fig = ForecastPlot {
        title: format!("{target} forecast from {}", req.origin),
        origin: req.origin,
        lookback: origin.lookback[j].clone(),
        truth: origin.truth[j].clone(),
        forecasts,
        annotation,
    };
    if let Some(parent) = req.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_forecast_svg(&fig, req.out)?;
    Ok(req.out.to_path_buf())
}

pub struct GradcheckSummary {
    /// One line per check.
    pub lines: Vec<String>,
    pub failed: Vec<String>,
}

impl GradcheckSummary {
    pub fn into_result(self) -> CliResult<Vec<String>> {
        if self.failed.is_empty() {
            return Ok(self.lines);
        }
        Err(CliError::Check(format!(
            "{} check(s) at or above {TOLERANCE:e}: {}",
            self.failed.len(),
            self.failed.join(", ")
        )))
    }
}

/// Runs the finite-difference suite on instances drawn from `seed`.
pub fn gradcheck(seed: u64) -> CliResult<GradcheckSummary> {
    let results = run_gradient_suite(seed)?;
    let lines = results
        .iter()
        .map(|r| {
            let verdict = if r.passed() { "ok" } else { "FAIL" };
            format!(
                "{:<32} max rel error {:.3e}  {verdict}  ({} redraws)",
                r.name, r.max_rel_error, r.redraws
            )
        })
        .collect();
    let failed = results.iter().filter(|r| !r.passed()).map(|r| r.name.clone()).collect();
    Ok(GradcheckSummary { lines, failed })
}
