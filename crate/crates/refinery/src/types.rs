use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewsArticle {
    pub id: String,
    /// Publication time, `YYYY-MM-DDTHH:MM:SS`.
    pub datetime: NaiveDateTime,
    pub headline: String,
    pub body: String,
}

impl NewsArticle {
    pub fn date(&self) -> NaiveDate {
        self.datetime.date()
    }
}

/// Stage-one output. Irrelevant articles keep an empty summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArticleSummary {
    pub id: String,
    pub date: NaiveDate,
    pub summary: String,
    pub relevant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyEvent {
    pub date: NaiveDate,
    pub name: String,
    pub summary: String,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InsightDoc {
    pub date: NaiveDate,
    pub target: String,
    pub key_driver: String,
    pub outlook: String,
    /// Set when no event fell inside the window; both texts are then empty.
    pub empty_window: bool,
}

/// One embedded text, as read back by the forecasting data plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub date: NaiveDate,
    pub target: String,
    pub vector: Vec<f64>,
}

/// An item that exhausted its attempts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub stage: String,
    pub item: String,
    pub attempts: usize,
    pub message: String,
}

/// Forecasting target named in stage-three prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub name: String,
    pub description: String,
}
