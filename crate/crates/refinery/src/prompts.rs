//! Prompt templates. Placeholders are written `{NAME}`; the section headers
//! (`### ARTICLE`, `### SUMMARIES`, `### EVENTS`) double as stage markers for
//! the mock backend.

use chrono::NaiveDate;

use crate::types::{ArticleSummary, DailyEvent, NewsArticle};

pub const SYSTEM: &str =
    "You are a careful market analyst who turns news into information useful for forecasting.";

pub const ARTICLE_HEADER: &str = "### ARTICLE";
pub const SUMMARIES_HEADER: &str = "### SUMMARIES";
pub const EVENTS_HEADER: &str = "### EVENTS";

/// Reply that marks an article as irrelevant.
pub const NOT_APPLICABLE: &str = "N/A";

pub const SUMMARIZE_TEMPLATE: &str = "\
Read the news article below, published at {DATETIME}. Decide whether it carries information about the {DESCRIPTION}.
If it does, reply with a single concise paragraph summarizing what the article says that matters for {SUBJECT}.
If it does not, reply with exactly N/A and nothing else.

### ARTICLE
";

pub const EVENTS_TEMPLATE: &str = "\
The summaries below come from news published on {DATETIME}. Identify at most {COUNT} events with the largest influence on {SUBJECT}, most influential first.
Reply with a JSON list only. Every element must be an object with the string keys \"name\" (a short event name), \"summary\" (what happened) and \"rationale\" (why it moves {SUBJECT}).

### SUMMARIES
";

pub const INSIGHT_TEMPLATE: &str = "\
The events below were extracted from news in the {WINDOW} days up to and including {DATETIME}. The forecasting target is the {TARGET}.
Write two texts. The key driver explains the recent changes in the target and what caused them. The outlook states how the target is likely to move over the coming weeks and why.
Reply with a JSON object only, with the string keys \"key_driver\" and \"outlook\".

### EVENTS
";

pub const JSON_LIST_REMINDER: &str =
    "Your previous reply could not be used. Reply with a JSON list of objects with the keys \"name\", \"summary\" and \"rationale\", and nothing else.";

pub const JSON_OBJECT_REMINDER: &str =
    "Your previous reply could not be used. Reply with a JSON object with the string keys \"key_driver\" and \"outlook\", and nothing else.";

pub const SUMMARY_REMINDER: &str =
    "Your previous reply was empty. Reply with one summary paragraph, or exactly N/A.";

/// Replaces every `{KEY}` with its value.
pub fn fill(template: &str, values: &[(&str, &str)]) -> String {
    values.iter().fold(template.to_string(), |s, (k, v)| {
        s.replace(&format!("{{{k}}}"), v)
    })
}

/// Collapses whitespace so a field always stays on one line.
pub fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn summarize(article: &NewsArticle, subject: &str, description: &str) -> String {
    let datetime = article.datetime.format("%Y-%m-%d %H:%M").to_string();
    let mut s = fill(
        SUMMARIZE_TEMPLATE,
        &[("SUBJECT", subject), ("DESCRIPTION", description), ("DATETIME", &datetime)],
    );
    s.push_str(&format!("Headline: {}\nBody:\n{}\n", one_line(&article.headline), article.body.trim()));
    s
}

pub fn extract_events(date: NaiveDate, summaries: &[&ArticleSummary], subject: &str, count: usize) -> String {
    let mut s = fill(
        EVENTS_TEMPLATE,
        &[("SUBJECT", subject), ("DATETIME", &date.to_string()), ("COUNT", &count.to_string())],
    );
    for a in summaries {
        s.push_str(&format!("- [{}] {}\n", a.id, one_line(&a.summary)));
    }
    s
}

pub fn insight(date: NaiveDate, events: &[&DailyEvent], target_description: &str, window: usize) -> String {
    let mut s = fill(
        INSIGHT_TEMPLATE,
        &[
            ("TARGET", target_description),
            ("DATETIME", &date.to_string()),
            ("WINDOW", &window.to_string()),
        ],
    );
    for e in events {
        s.push_str(&format!(
            "- {} | {}\n  summary: {}\n  rationale: {}\n",
            e.date,
            one_line(&e.name),
            one_line(&e.summary),
            one_line(&e.rationale)
        ));
    }
    s
}
