//! End-to-end run: corpus in, JSONL artifacts out.

use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Duration;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::backend::{ChatBackend, EmbeddingBackend};
use crate::error::{Error, Result};
use crate::exec::{RetryPolicy, MAX_ATTEMPTS};
use crate::http::BackendConfig;
use crate::stages::{
    embed_insights, stage1_summarize_filter, stage2_extract_events, stage3_generate_insights, StageExec,
    DEFAULT_MAX_EVENTS, DEFAULT_WINDOW_DAYS,
};
use crate::types::{ErrorRecord, NewsArticle, TargetSpec};

pub const SUMMARIES_FILE: &str = "summaries.jsonl";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const INSIGHTS_FILE: &str = "insights.jsonl";
pub const KEY_DRIVER_FILE: &str = "keydriver_emb.jsonl";
pub const OUTLOOK_FILE: &str = "outlook_emb.jsonl";
pub const ERRORS_FILE: &str = "errors.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Short domain name used in prompts, e.g. "crude oil".
    pub subject: String,
    /// Longer domain description, e.g. "crude oil market".
    pub description: String,
    pub targets: Vec<TargetSpec>,
    pub window_days: usize,
    pub max_events: usize,
    /// Dimension of the offline hash embedder.
    pub mock_embedding_dim: usize,
    pub mock_embedding_seed: u64,
    pub backend: BackendConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            subject: "crude oil".into(),
            description: "crude oil market".into(),
            targets: vec![
                TargetSpec {
                    name: "WTI".into(),
                    description: "West Texas Intermediate crude oil spot price".into(),
                },
                TargetSpec {
                    name: "Brent".into(),
                    description: "Europe Brent crude oil spot price".into(),
                },
            ],
            window_days: DEFAULT_WINDOW_DAYS,
            max_events: DEFAULT_MAX_EVENTS,
            mock_embedding_dim: 64,
            mock_embedding_seed: 0,
            backend: BackendConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.subject.trim().is_empty() || self.description.trim().is_empty() {
            return fail("subject and description must be non-empty");
        }
        if self.targets.is_empty() {
            return fail("at least one target is required");
        }
        if self.window_days == 0 || self.max_events == 0 || self.mock_embedding_dim == 0 {
            return fail("window_days, max_events and mock_embedding_dim must be positive");
        }
        self.backend.validate()
    }

    pub fn exec(&self) -> StageExec {
        StageExec {
            retry: RetryPolicy {
                max_attempts: MAX_ATTEMPTS,
                base_delay: Duration::from_millis(self.backend.retry_base_ms),
            },
            max_in_flight: self.backend.max_in_flight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageStat {
    pub stage: String,
    /// Items that needed a backend call.
    pub items: usize,
    pub failed: usize,
}

impl StageStat {
    /// More than half of the items failed.
    pub fn over_threshold(&self) -> bool {
        self.failed * 2 > self.items
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    pub articles: usize,
    pub relevant: usize,
    pub events: usize,
    pub insights: usize,
    pub empty_windows: usize,
    pub embeddings: usize,
    pub stages: Vec<StageStat>,
}

impl PipelineReport {
    pub fn failed_stages(&self) -> Vec<&str> {
        self.stages
            .iter()
            .filter(|s| s.over_threshold())
            .map(|s| s.stage.as_str())
            .collect()
    }
}

/// Reads a JSONL corpus file, or every `*.jsonl` file of a directory in
/// name order.
pub fn read_corpus(path: &Path) -> Result<Vec<NewsArticle>> {
    let files = if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    let mut out = Vec::new();
    for f in files {
        let file = std::fs::File::open(&f).map_err(|e| Error::io(&f, e))?;
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&f, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let article: NewsArticle = serde_json::from_str(&line)
                .map_err(|e| Error::Corpus(format!("{}: line {}: {e}", f.display(), i + 1)))?;
            out.push(article);
        }
    }
    Ok(out)
}

/// One JSON object per line. Keys come out sorted because `serde_json::Map`
/// is ordered.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        let v = serde_json::to_value(r)?;
        serde_json::to_writer(&mut buf, &v)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Every calendar day from the first to the last article date.
fn article_days(articles: &[NewsArticle]) -> Vec<NaiveDate> {
    let (Some(first), Some(last)) = (
        articles.iter().map(NewsArticle::date).min(),
        articles.iter().map(NewsArticle::date).max(),
    ) else {
        return Vec::new();
    };
    first.iter_days().take_while(|d| *d <= last).collect()
}

/// Runs all stages with barriers between them and writes the artifacts into
/// `out_dir`. Per-item failures go to `errors.jsonl`; the caller decides what
/// a stage over the failure threshold means.
pub fn run_pipeline(
    articles: &[NewsArticle],
    cfg: &PipelineConfig,
    chat: &dyn ChatBackend,
    embedder: &dyn EmbeddingBackend,
    out_dir: &Path,
) -> Result<PipelineReport> {
    cfg.validate()?;
    let exec = cfg.exec();
    let s1 = stage1_summarize_filter(articles, &cfg.subject, &cfg.description, chat, &exec)?;
    let s2 = stage2_extract_events(&s1.items, &cfg.subject, cfg.max_events, chat, &exec)?;
    let days = article_days(articles);
    let s3 = stage3_generate_insights(&s2.items, &days, &cfg.targets, cfg.window_days, chat, &exec)?;
    let emb = embed_insights(&s3.items, embedder, &exec);

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut events = s2.items.clone();
    events.sort_by_key(|e| e.date);
    write_jsonl(&out_dir.join(SUMMARIES_FILE), &s1.items)?;
    write_jsonl(&out_dir.join(EVENTS_FILE), &events)?;
    write_jsonl(&out_dir.join(INSIGHTS_FILE), &s3.items)?;
    write_jsonl(&out_dir.join(KEY_DRIVER_FILE), &emb.key_driver)?;
    write_jsonl(&out_dir.join(OUTLOOK_FILE), &emb.outlook)?;
    let errors: Vec<&ErrorRecord> = s1
        .errors
        .iter()
        .chain(&s2.errors)
        .chain(&s3.errors)
        .chain(&emb.errors)
        .collect();
    write_jsonl(&out_dir.join(ERRORS_FILE), &errors)?;

    let stat = |stage: &str, items: usize, failed: usize| StageStat {
        stage: stage.into(),
        items,
        failed,
    };
    Ok(PipelineReport {
        articles: articles.len(),
        relevant: s1.items.iter().filter(|s| s.relevant).count(),
        events: events.len(),
        insights: s3.items.len(),
        empty_windows: s3.items.iter().filter(|d| d.empty_window).count(),
        embeddings: emb.key_driver.len() + emb.outlook.len(),
        stages: vec![
            stat("summarize", s1.attempted, s1.errors.len()),
            stat("events", s2.attempted, s2.errors.len()),
            stat("insights", s3.attempted, s3.errors.len()),
            stat("embed", emb.attempted, emb.errors.len()),
        ],
    })
}
