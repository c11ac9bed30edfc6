use std::path::PathBuf;
use std::process::ExitCode;

use air_cli::commands::{self, PlotRequest};
use air_cli::config::parse_models;
use air_cli::{CliResult, RunConfig};
use chrono::NaiveDate;
use clap::{Parser, Subcommand};

/// Text-routed time-series forecasting experiments.
///
/// Exit codes: 0 success, 1 gradient check failed, 2 configuration or
/// usage error, 3 I/O error, 4 a refinery stage failed for more than half
/// of its items, 5 training diverged.
#[derive(Parser)]
#[command(name = "air", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic benchmark: one CSV and three embedding JSONL files.
    Generate {
        /// JSON run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory; overrides the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the three-stage text refinement pipeline over a news corpus.
    Refine {
        /// JSON run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// A JSONL file of articles or a directory of them.
        #[arg(long)]
        corpus: PathBuf,
        /// Use the deterministic offline backends instead of HTTP.
        #[arg(long)]
        mock: bool,
        /// Output directory; overrides the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score models over the biweekly retraining schedule.
    Backtest {
        /// JSON run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated model ids, e.g. vanilla-tsmixer,air-tsmixer.
        #[arg(long)]
        models: Option<String>,
        /// Output directory; overrides the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw one forecast origin from a backtest's outputs as SVG.
    Plot {
        /// report.json, or the directory holding it and forecasts.json.
        #[arg(long)]
        report: PathBuf,
        /// Forecast origin, YYYY-MM-DD.
        #[arg(long)]
        origin: NaiveDate,
        /// SVG file to write.
        #[arg(long)]
        out: PathBuf,
        /// Target channel; defaults to the first.
        #[arg(long)]
        target: Option<String>,
        /// Comma-separated subset of the report's models.
        #[arg(long)]
        models: Option<String>,
        /// insights.jsonl whose outlook text annotates the figure.
        #[arg(long)]
        insights: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Seed for the random instances.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate { config, out } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            let out = out.unwrap_or_else(|| cfg.output.clone());
            for f in commands::generate(&cfg, &out)? {
                println!("{}", f.display());
            }
        }
        Command::Refine {
            config,
            corpus,
            mock,
            out,
        } => {
            let cfg = RunConfig::load_or_default(config.as_deref())?;
            let out = out.unwrap_or_else(|| cfg.output.clone());
            let r = commands::refine(&cfg, &corpus, mock, &out)?;
            println!(
                "{} articles, {} relevant, {} events, {} insights ({} empty windows), {} embeddings",
                r.articles, r.relevant, r.events, r.insights, r.empty_windows, r.embeddings
            );
            for s in &r.stages {
                println!("{:<10} {} items, {} failed", s.stage, s.items, s.failed);
            }
        }
        Command::Backtest {
            config,
            models,
            out,
        } => {
            let mut cfg = RunConfig::load_or_default(config.as_deref())?;
            if let Some(list) = models {
                cfg.models = parse_models(&list)?;
            }
            let out = out.unwrap_or_else(|| cfg.output.clone());
            let run = commands::backtest(&cfg, &out)?;
            for m in &run.report.aggregates.models {
                println!("{:<24} mean MSE {:.6}", m.model, m.mean_mse);
            }
            for r in &run.report.aggregates.relative {
                println!("{:<24} {:+.1}% vs {}", r.model, r.percent, r.baseline);
            }
            println!(
                "{} runs in {:.1}s; report {} written to {}",
                run.outcome.runs.len(),
                run.seconds,
                run.report.metadata.run_id,
                out.display()
            );
        }
        Command::Plot {
            report,
            origin,
            out,
            target,
            models,
            insights,
        } => {
            let models: Vec<String> = models
                .map(|l| l.split(',').map(|s| s.trim().to_string()).collect())
                .unwrap_or_default();
            let path = commands::plot(&PlotRequest {
                report: &report,
                origin,
                out: &out,
                target: target.as_deref(),
                models: &models,
                insights: insights.as_deref(),
            })?;
            println!("{}", path.display());
        }
        Command::Gradcheck { seed } => {
            let summary = commands::gradcheck(seed)?;
            for line in &summary.lines {
                println!("{line}");
            }
            summary.into_result()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("air: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
