//! The three refinement stages and the embedding step.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Duration, NaiveDate};
use serde_json::Value;

use crate::backend::{ChatBackend, ChatMessage, EmbeddingBackend};
use crate::error::{BackendError, Error, Result};
use crate::exec::{bounded_map, AttemptError, RetryPolicy};
use crate::prompts;
use crate::types::{ArticleSummary, DailyEvent, EmbeddingRecord, ErrorRecord, InsightDoc, NewsArticle, TargetSpec};

/// Events kept per date unless configured otherwise.
pub const DEFAULT_MAX_EVENTS: usize = 5;
/// Insight window length in calendar days, the insight date included.
pub const DEFAULT_WINDOW_DAYS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageExec {
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
}

impl Default for StageExec {
    fn default() -> Self {
        Self {
            retry: RetryPolicy::default(),
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput<T> {
    pub items: Vec<T>,
    pub errors: Vec<ErrorRecord>,
    /// Items that needed at least one backend call.
    pub attempted: usize,
}

impl<T> StageOutput<T> {
    pub fn failure_rate(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            self.errors.len() as f64 / self.attempted as f64
        }
    }
}

/// One chat exchange per attempt; parse failures trigger a re-ask with
/// `reminder` appended to the prompt.
fn ask_parsed<T>(
    chat: &dyn ChatBackend,
    exec: &StageExec,
    prompt: &str,
    reminder: &str,
    parse: impl Fn(&str) -> std::result::Result<T, String>,
) -> std::result::Result<T, crate::exec::Exhausted> {
    exec.retry
        .run(|_, prev| {
            let user = match prev {
                None => prompt.to_string(),
                Some(_) => format!("{prompt}\n{reminder}\n"),
            };
            let reply = chat
                .complete(&[ChatMessage::system(prompts::SYSTEM), ChatMessage::user(user)])
                .map_err(AttemptError::Backend)?;
            parse(&reply).map_err(AttemptError::Format)
        })
        .map(|(v, _)| v)
}

fn record(stage: &str, item: String, e: crate::exec::Exhausted) -> ErrorRecord {
    ErrorRecord {
        stage: stage.into(),
        item,
        attempts: e.attempts,
        message: e.message,
    }
}

/// Stage one: one call per article. A reply of exactly `N/A` marks the
/// article irrelevant. Output is sorted by (date, id).
pub fn stage1_summarize_filter(
    articles: &[NewsArticle],
    subject: &str,
    description: &str,
    chat: &dyn ChatBackend,
    exec: &StageExec,
) -> Result<StageOutput<ArticleSummary>> {
    let mut ids = BTreeSet::new();
    for a in articles {
        if !ids.insert(a.id.as_str()) {
            return Err(Error::Corpus(format!("duplicate article id {}", a.id)));
        }
    }
    let mut sorted: Vec<&NewsArticle> = articles.iter().collect();
    sorted.sort_by(|a, b| (a.date(), &a.id).cmp(&(b.date(), &b.id)));
    let results = bounded_map(&sorted, exec.max_in_flight, |a| {
        let prompt = prompts::summarize(a, subject, description);
        ask_parsed(chat, exec, &prompt, prompts::SUMMARY_REMINDER, |reply| {
            let reply = reply.trim();
            if reply.is_empty() {
                Err("empty reply".into())
            } else {
                Ok(reply.to_string())
            }
        })
    });
    let mut out = StageOutput {
        items: Vec::new(),
        errors: Vec::new(),
        attempted: sorted.len(),
    };
    for (a, r) in sorted.iter().zip(results) {
        match r {
            Ok(reply) => {
                let relevant = reply != prompts::NOT_APPLICABLE;
                out.items.push(ArticleSummary {
                    id: a.id.clone(),
                    date: a.date(),
                    summary: if relevant { reply } else { String::new() },
                    relevant,
                });
            }
            Err(e) => out.errors.push(record("summarize", a.id.clone(), e)),
        }
    }
    Ok(out)
}

/// Removes a surrounding Markdown code fence, if any.
fn strip_fence(reply: &str) -> &str {
    let t = reply.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let rest = rest.split_once('\n').map_or("", |(_, r)| r);
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}

fn text_field(obj: &serde_json::Map<String, Value>, key: &str) -> std::result::Result<String, String> {
    match obj.get(key).and_then(Value::as_str).map(str::trim) {
        Some(s) if !s.is_empty() => Ok(s.to_string()),
        _ => Err(format!("missing or empty string field {key:?}")),
    }
}

/// Parses a JSON list of `{name, summary, rationale}` objects and keeps the
/// first `cap`.
pub fn parse_events(reply: &str, date: NaiveDate, cap: usize) -> std::result::Result<Vec<DailyEvent>, String> {
    let v: Value = serde_json::from_str(strip_fence(reply)).map_err(|e| format!("not JSON: {e}"))?;
    let list = v.as_array().ok_or("expected a JSON list")?;
    list.iter()
        .take(cap)
        .map(|item| {
            let obj = item.as_object().ok_or("list element is not an object")?;
            Ok(DailyEvent {
                date,
                name: text_field(obj, "name")?,
                summary: text_field(obj, "summary")?,
                rationale: text_field(obj, "rationale")?,
            })
        })
        .collect()
}

/// Stage two: one call per date over that date's relevant summaries.
pub fn stage2_extract_events(
    summaries: &[ArticleSummary],
    subject: &str,
    max_events: usize,
    chat: &dyn ChatBackend,
    exec: &StageExec,
) -> Result<StageOutput<DailyEvent>> {
    if max_events == 0 {
        return Err(Error::Config("max_events must be positive".into()));
    }
    let mut by_date: BTreeMap<NaiveDate, Vec<&ArticleSummary>> = BTreeMap::new();
    for s in summaries.iter().filter(|s| s.relevant) {
        by_date.entry(s.date).or_default().push(s);
    }
    let groups: Vec<(NaiveDate, Vec<&ArticleSummary>)> = by_date
        .into_iter()
        .map(|(d, mut v)| {
            v.sort_by(|a, b| a.id.cmp(&b.id));
            (d, v)
        })
        .collect();
    let results = bounded_map(&groups, exec.max_in_flight, |(date, group)| {
        let prompt = prompts::extract_events(*date, group, subject, max_events);
        ask_parsed(chat, exec, &prompt, prompts::JSON_LIST_REMINDER, |r| {
            parse_events(r, *date, max_events)
        })
    });
    let mut out = StageOutput {
        items: Vec::new(),
        errors: Vec::new(),
        attempted: groups.len(),
    };
    for ((date, _), r) in groups.iter().zip(results) {
        match r {
            Ok(events) => out.items.extend(events),
            Err(e) => out.errors.push(record("events", date.to_string(), e)),
        }
    }
    Ok(out)
}

/// Events dated in `[date − (window − 1), date]`. `events` must be sorted
/// by date.
pub fn window_events(events: &[DailyEvent], date: NaiveDate, window_days: usize) -> &[DailyEvent] {
    if window_days == 0 {
        return &[];
    }
    let first = date - Duration::days(window_days as i64 - 1);
    let lo = events.partition_point(|e| e.date < first);
    let hi = events.partition_point(|e| e.date <= date);
    &events[lo..hi.max(lo)]
}

/// Parses `{"key_driver": .., "outlook": ..}`.
pub fn parse_insight(reply: &str) -> std::result::Result<(String, String), String> {
    let v: Value = serde_json::from_str(strip_fence(reply)).map_err(|e| format!("not JSON: {e}"))?;
    let obj = v.as_object().ok_or("expected a JSON object")?;
    Ok((text_field(obj, "key_driver")?, text_field(obj, "outlook")?))
}

/// Stage three: one call per (date, target) whose window holds any event.
/// Empty windows yield flagged documents without a call.
pub fn stage3_generate_insights(
    events: &[DailyEvent],
    dates: &[NaiveDate],
    targets: &[TargetSpec],
    window_days: usize,
    chat: &dyn ChatBackend,
    exec: &StageExec,
) -> Result<StageOutput<InsightDoc>> {
    if window_days == 0 {
        return Err(Error::Config("window_days must be positive".into()));
    }
    if targets.is_empty() {
        return Err(Error::Config("at least one target is required".into()));
    }
    let mut sorted = events.to_vec();
    // Stable: keeps each date's response order.
    sorted.sort_by_key(|e| e.date);
    let mut days = dates.to_vec();
    days.sort_unstable();
    days.dedup();
    let cells: Vec<(NaiveDate, &TargetSpec)> =
        days.iter().flat_map(|&d| targets.iter().map(move |t| (d, t))).collect();
    let results = bounded_map(&cells, exec.max_in_flight, |&(date, target)| {
        let window = window_events(&sorted, date, window_days);
        if window.is_empty() {
            return None;
        }
        let refs: Vec<&DailyEvent> = window.iter().collect();
        let prompt = prompts::insight(date, &refs, &target.description, window_days);
        Some(ask_parsed(chat, exec, &prompt, prompts::JSON_OBJECT_REMINDER, parse_insight))
    });
    let mut out = StageOutput {
        items: Vec::new(),
        errors: Vec::new(),
        attempted: 0,
    };
    for (&(date, target), r) in cells.iter().zip(results) {
        let doc = |kd: String, ol: String, empty: bool| InsightDoc {
            date,
            target: target.name.clone(),
            key_driver: kd,
            outlook: ol,
            empty_window: empty,
        };
        match r {
            None => out.items.push(doc(String::new(), String::new(), true)),
            Some(Ok((kd, ol))) => {
                out.attempted += 1;
                out.items.push(doc(kd, ol, false));
            }
            Some(Err(e)) => {
                out.attempted += 1;
                out.errors.push(record("insights", format!("{date} {}", target.name), e));
            }
        }
    }
    Ok(out)
}

/// Embeds one non-empty text and checks the vector is finite.
pub fn embed_text(text: &str, backend: &dyn EmbeddingBackend) -> std::result::Result<Vec<f64>, BackendError> {
    if text.trim().is_empty() {
        return Err(BackendError::Response("cannot embed empty text".into()));
    }
    let v = backend.embed(text)?;
    if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
        return Err(BackendError::Response("embedding is empty or not finite".into()));
    }
    Ok(v)
}

/// Key-driver and outlook embeddings of every non-empty insight.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedInsights {
    pub key_driver: Vec<EmbeddingRecord>,
    pub outlook: Vec<EmbeddingRecord>,
    pub errors: Vec<ErrorRecord>,
    pub attempted: usize,
}

pub fn embed_insights(
    insights: &[InsightDoc],
    backend: &dyn EmbeddingBackend,
    exec: &StageExec,
) -> EmbeddedInsights {
    let jobs: Vec<(&InsightDoc, bool)> = insights
        .iter()
        .filter(|d| !d.empty_window)
        .flat_map(|d| [(d, true), (d, false)])
        .collect();
    let results = bounded_map(&jobs, exec.max_in_flight, |&(doc, kd)| {
        let text = if kd { &doc.key_driver } else { &doc.outlook };
        exec.retry.run(|_, _| embed_text(text, backend).map_err(AttemptError::Backend))
    });
    let mut out = EmbeddedInsights {
        key_driver: Vec::new(),
        outlook: Vec::new(),
        errors: Vec::new(),
        attempted: jobs.len(),
    };
    for (&(doc, kd), r) in jobs.iter().zip(results) {
        match r {
            Ok((vector, _)) => {
                let rec = EmbeddingRecord {
                    date: doc.date,
                    target: doc.target.clone(),
                    vector,
                };
                if kd {
                    out.key_driver.push(rec);
                } else {
                    out.outlook.push(rec);
                }
            }
            Err(e) => {
                let which = if kd { "key_driver" } else { "outlook" };
                out.errors
                    .push(record("embed", format!("{} {} {which}", doc.date, doc.target), e));
            }
        }
    }
    out
}
