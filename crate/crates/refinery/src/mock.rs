//! Deterministic chat backend that recognises each stage by its prompt
//! section header.

use serde_json::json;

use crate::backend::{ChatBackend, ChatMessage, Role};
use crate::error::BackendError;
use crate::prompts::{ARTICLE_HEADER, EVENTS_HEADER, NOT_APPLICABLE, SUMMARIES_HEADER};

/// * Articles whose headline or body mentions `keyword` (case-insensitive)
///   are summarized as `headline: first sentence`; all others get `N/A`.
/// * Every listed summary becomes one event, in prompt order, so dates with
///   many relevant articles exercise the event cap.
/// * Insights name the in-window events: the key driver is
///   `Key drivers: a; b; c`.
#[derive(Debug, Clone)]
pub struct MockChat {
    keyword: String,
}

/// Text up to the first `.`, `!` or `?` that ends the body or precedes
/// whitespace, so decimals like `2.2` stay intact.
fn first_sentence(body: &str) -> &str {
    let mut chars = body.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|(_, n)| n.is_whitespace()) {
            return &body[..i + c.len_utf8()];
        }
    }
    body
}

impl MockChat {
    pub fn new(keyword: impl Into<String>) -> Self {
        Self {
            keyword: keyword.into().to_lowercase(),
        }
    }

    fn summarize(&self, section: &str) -> String {
        let headline = section
            .lines()
            .find_map(|l| l.strip_prefix("Headline: "))
            .unwrap_or("")
            .trim();
        let body = section.split_once("Body:\n").map_or("", |(_, b)| b).trim();
        let text = format!("{headline} {body}").to_lowercase();
        if self.keyword.is_empty() || !text.contains(&self.keyword) {
            return NOT_APPLICABLE.to_string();
        }
        format!("{headline}: {}", first_sentence(body))
    }

    fn events(&self, section: &str) -> String {
        let events: Vec<_> = section
            .lines()
            .filter_map(|l| l.strip_prefix("- ["))
            .filter_map(|l| l.split_once("] "))
            .map(|(id, summary)| {
                let name = summary.split_once(": ").map_or(summary, |(h, _)| h);
                json!({
                    "name": name,
                    "summary": summary,
                    "rationale": format!("Reported in article {id}; bears on {}.", self.keyword),
                })
            })
            .collect();
        serde_json::Value::Array(events).to_string()
    }

    fn insight(section: &str) -> String {
        let mut names = Vec::new();
        let mut dates = Vec::new();
        for l in section.lines() {
            if let Some((date, name)) = l.strip_prefix("- ").and_then(|l| l.split_once(" | ")) {
                dates.push(date.to_string());
                names.push(name.to_string());
            }
        }
        let span = match (dates.first(), dates.last()) {
            (Some(a), Some(b)) => format!("from {a} to {b}"),
            _ => "in the window".to_string(),
        };
        json!({
            "key_driver": format!("Key drivers: {}", names.join("; ")),
            "outlook": format!("Outlook shaped by {} events {span}.", names.len()),
        })
        .to_string()
    }
}

impl ChatBackend for MockChat {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let user = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .ok_or_else(|| BackendError::Response("no user message".into()))?;
        let text = &user.content;
        let after = |h: &str| text.split_once(h).map(|(_, s)| s);
        if let Some(s) = after(ARTICLE_HEADER) {
            Ok(self.summarize(s))
        } else if let Some(s) = after(SUMMARIES_HEADER) {
            Ok(self.events(s))
        } else if let Some(s) = after(EVENTS_HEADER) {
            Ok(Self::insight(s))
        } else {
            Err(BackendError::Response("mock cannot identify the stage".into()))
        }
    }
}
