use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use air_refinery::pipeline::{
    EVENTS_FILE, ERRORS_FILE, INSIGHTS_FILE, KEY_DRIVER_FILE, OUTLOOK_FILE, SUMMARIES_FILE,
};
use air_refinery::prompts::{ARTICLE_HEADER, EVENTS_HEADER, SUMMARIES_HEADER};
use air_refinery::stages::parse_events;
use air_refinery::{
    read_corpus, run_pipeline, stage1_summarize_filter, stage2_extract_events, stage3_generate_insights,
    window_events, ArticleSummary, BackendError, ChatBackend, ChatMessage, DailyEvent, EmbeddingBackend,
    Error, HashEmbedder, InsightDoc, MockChat, NewsArticle, PipelineConfig, RetryPolicy, ScriptedChat,
    StageExec, TargetSpec, MAX_ATTEMPTS,
};
use chrono::{Duration as Days, NaiveDate};
use proptest::prelude::*;
use serde_json::{json, Value};

const FILES: [&str; 6] = [SUMMARIES_FILE, EVENTS_FILE, INSIGHTS_FILE, KEY_DRIVER_FILE, OUTLOOK_FILE, ERRORS_FILE];

fn manifest() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn date(y: i32, m: u32, d: u32) -> NaiveDate {
    NaiveDate::from_ymd_opt(y, m, d).unwrap()
}

fn fast() -> StageExec {
    StageExec {
        retry: RetryPolicy {
            max_attempts: MAX_ATTEMPTS,
            base_delay: Duration::ZERO,
        },
        max_in_flight: 4,
    }
}

fn config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.backend.retry_base_ms = 0;
    cfg
}

fn corpus() -> Vec<NewsArticle> {
    read_corpus(&manifest().join("tests/fixtures/corpus.jsonl")).unwrap()
}

fn run_mock(articles: &[NewsArticle], dir: &Path) -> air_refinery::PipelineReport {
    let cfg = config();
    let chat = MockChat::new(&cfg.subject);
    let emb = HashEmbedder::new(cfg.mock_embedding_dim, cfg.mock_embedding_seed);
    run_pipeline(articles, &cfg, &chat, &emb, dir).unwrap()
}

fn read_lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn golden_run_is_byte_identical() {
    let articles = corpus();
    assert_eq!(articles.len(), 30);
    let dir = tempfile::tempdir().unwrap();
    let report = run_mock(&articles, dir.path());
    assert!(report.failed_stages().is_empty());
    assert_eq!(report.relevant, 20);

    let golden = manifest().join("tests/golden");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(&golden).unwrap();
        for f in FILES {
            std::fs::copy(dir.path().join(f), golden.join(f)).unwrap();
        }
    }
    for f in FILES {
        let got = std::fs::read(dir.path().join(f)).unwrap();
        let want = std::fs::read(golden.join(f)).unwrap();
        assert!(got == want, "{f} differs from the golden file");
    }

    let again = tempfile::tempdir().unwrap();
    run_mock(&articles, again.path());
    for f in FILES {
        assert_eq!(
            std::fs::read(dir.path().join(f)).unwrap(),
            std::fs::read(again.path().join(f)).unwrap()
        );
    }
}

#[test]
fn golden_run_respects_event_cap_and_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_mock(&corpus(), dir.path());
    let events = read_lines(&dir.path().join(EVENTS_FILE));
    let mut per_date = std::collections::BTreeMap::<String, usize>::new();
    for e in &events {
        *per_date.entry(e["date"].as_str().unwrap().to_string()).or_default() += 1;
    }
    assert!(per_date.values().all(|&n| n <= 5));
    // 2024-03-06 has seven relevant articles.
    assert_eq!(per_date["2024-03-06"], 5);
    assert_eq!(report.events, events.len());

    let summaries = read_lines(&dir.path().join(SUMMARIES_FILE));
    let keys: Vec<(String, String)> = summaries
        .iter()
        .map(|s| (s["date"].as_str().unwrap().into(), s["id"].as_str().unwrap().into()))
        .collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);

    // 12 calendar days × 2 targets, one embedding pair per non-empty window.
    let insights = read_lines(&dir.path().join(INSIGHTS_FILE));
    assert_eq!(insights.len(), 24);
    let kd = read_lines(&dir.path().join(KEY_DRIVER_FILE));
    let ol = read_lines(&dir.path().join(OUTLOOK_FILE));
    let filled = insights.iter().filter(|d| d["empty_window"] == false).count();
    assert_eq!(kd.len(), filled);
    assert_eq!(ol.len(), filled);
    for r in &kd {
        assert_eq!(r["vector"].as_array().unwrap().len(), 64);
        assert!(r["target"] == "WTI" || r["target"] == "Brent");
    }
}

#[test]
fn jsonl_keys_are_sorted() {
    let dir = tempfile::tempdir().unwrap();
    run_mock(&corpus(), dir.path());
    for f in [SUMMARIES_FILE, EVENTS_FILE, INSIGHTS_FILE, KEY_DRIVER_FILE] {
        let text = std::fs::read_to_string(dir.path().join(f)).unwrap();
        let line = text.lines().next().unwrap();
        let v: Value = serde_json::from_str(line).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        let positions: Vec<usize> = keys.iter().map(|k| line.find(&format!("\"{k}\"")).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{f}: {line}");
    }
}

#[test]
fn empty_corpus_writes_empty_files() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_mock(&[], dir.path());
    for f in FILES {
        assert_eq!(std::fs::read_to_string(dir.path().join(f)).unwrap(), "", "{f}");
    }
    assert_eq!(report.insights, 0);
    assert!(report.failed_stages().is_empty());
}

fn article(id: &str, dt: &str, body: &str) -> NewsArticle {
    NewsArticle {
        id: id.into(),
        datetime: format!("{dt}T09:00:00").parse().unwrap(),
        headline: format!("Headline {id}"),
        body: body.into(),
    }
}

#[test]
fn duplicate_ids_rejected_before_any_call() {
    let chat = ScriptedChat::new(|_: &[ChatMessage], _| Ok("N/A".to_string()));
    let arts = vec![article("x", "2024-01-02", "a"), article("x", "2024-01-03", "b")];
    let r = stage1_summarize_filter(&arts, "crude oil", "crude oil market", &chat, &fast());
    assert!(matches!(r, Err(Error::Corpus(_))));
    assert_eq!(chat.calls(), 0);
}

#[test]
fn keyword_mock_filters_exactly_the_matching_articles() {
    let arts = corpus();
    let out = stage1_summarize_filter(&arts, "crude oil", "crude oil market", &MockChat::new("crude oil"), &fast()).unwrap();
    let relevant: BTreeSet<&str> = out.items.iter().filter(|s| s.relevant).map(|s| s.id.as_str()).collect();
    let expected: BTreeSet<&str> = arts
        .iter()
        .filter(|a| format!("{} {}", a.headline, a.body).to_lowercase().contains("crude oil"))
        .map(|a| a.id.as_str())
        .collect();
    assert_eq!(relevant, expected);
    assert!(out.items.iter().all(|s| s.relevant != s.summary.is_empty()));
    assert_eq!(out.items.len(), 30);
}

#[test]
fn na_sentinel_is_trimmed() {
    let chat = ScriptedChat::new(|_: &[ChatMessage], _| Ok("  N/A \n".to_string()));
    let out = stage1_summarize_filter(&[article("a", "2024-01-02", "x")], "s", "d", &chat, &fast()).unwrap();
    assert!(!out.items[0].relevant);
}

fn summaries(date: NaiveDate, n: usize) -> Vec<ArticleSummary> {
    (0..n)
        .map(|i| ArticleSummary {
            id: format!("s{i}"),
            date,
            summary: format!("summary {i}"),
            relevant: true,
        })
        .collect()
}

fn events_json(n: usize) -> String {
    let list: Vec<Value> = (0..n)
        .map(|i| json!({"name": format!("event {i}"), "summary": format!("what {i}"), "rationale": format!("why {i}")}))
        .collect();
    Value::Array(list).to_string()
}

#[test]
fn five_events_keep_their_order_and_seven_are_truncated() {
    let d = date(2024, 3, 6);
    for (n, kept) in [(5, 5), (7, 5), (2, 2)] {
        let chat = ScriptedChat::new(move |_: &[ChatMessage], _| Ok(events_json(n)));
        let out = stage2_extract_events(&summaries(d, 3), "crude oil", 5, &chat, &fast()).unwrap();
        assert_eq!(out.items.len(), kept);
        let names: Vec<&str> = out.items.iter().map(|e| e.name.as_str()).collect();
        let expected: Vec<String> = (0..kept).map(|i| format!("event {i}")).collect();
        assert_eq!(names, expected);
        assert_eq!(chat.calls(), 1);
    }
}

#[test]
fn invalid_json_is_reasked_then_date_skipped() {
    let d = date(2024, 3, 6);
    let chat = ScriptedChat::new(|_: &[ChatMessage], _| Ok("not json".to_string()));
    let out = stage2_extract_events(&summaries(d, 2), "crude oil", 5, &chat, &fast()).unwrap();
    assert!(out.items.is_empty());
    assert_eq!(out.errors.len(), 1);
    assert_eq!(out.errors[0].item, "2024-03-06");
    assert_eq!(out.errors[0].attempts, 4);
    assert_eq!(chat.calls(), 4);

    // Three bad replies then a good one: the fourth attempt succeeds and the
    // re-asks carry the format reminder.
    let chat = ScriptedChat::new(|m: &[ChatMessage], k| {
        let user = &m.last().unwrap().content;
        assert_eq!(user.contains("could not be used"), k > 0);
        Ok(if k < 3 { "[{\"name\": 1}]".to_string() } else { events_json(1) })
    });
    let out = stage2_extract_events(&summaries(d, 2), "crude oil", 5, &chat, &fast()).unwrap();
    assert_eq!(out.items.len(), 1);
    assert!(out.errors.is_empty());
    assert_eq!(chat.calls(), 4);
}

#[test]
fn fenced_json_is_accepted_and_empty_fields_rejected() {
    let d = date(2024, 1, 1);
    let fenced = format!("```json\n{}\n```", events_json(2));
    assert_eq!(parse_events(&fenced, d, 5).unwrap().len(), 2);
    assert!(parse_events(r#"[{"name":"a","summary":" ","rationale":"c"}]"#, d, 5).is_err());
    assert!(parse_events(r#"{"name":"a"}"#, d, 5).is_err());
}

#[test]
fn transport_failures_stop_at_four_attempts() {
    let chat = ScriptedChat::new(|_: &[ChatMessage], _| Err(BackendError::Transport("connection reset".into())));
    let arts: Vec<NewsArticle> = (0..3).map(|i| article(&format!("a{i}"), "2024-01-02", "b")).collect();
    let out = stage1_summarize_filter(&arts, "s", "d", &chat, &fast()).unwrap();
    assert_eq!(chat.calls(), 12);
    assert_eq!(out.errors.len(), 3);
    assert!(out.errors.iter().all(|e| e.attempts == 4 && e.message.contains("connection reset")));
    assert_eq!(out.failure_rate(), 1.0);
}

#[test]
fn stage_over_half_failed_is_flagged() {
    // Every second article fails permanently.
    let chat = ScriptedChat::new(|m: &[ChatMessage], _| {
        let user = &m.last().unwrap().content;
        if user.contains("Headline a1") || user.contains("Headline a3") || user.contains("Headline a4") {
            Err(BackendError::Status { status: 500, body: "boom".into() })
        } else {
            Ok("N/A".into())
        }
    });
    let arts: Vec<NewsArticle> = (0..5).map(|i| article(&format!("a{i}"), "2024-01-02", "b")).collect();
    let dir = tempfile::tempdir().unwrap();
    let report = run_pipeline(&arts, &config(), &chat, &HashEmbedder::new(8, 0), dir.path()).unwrap();
    assert_eq!(report.failed_stages(), ["summarize"]);
    let errors = read_lines(&dir.path().join(ERRORS_FILE));
    assert_eq!(errors.len(), 3);
    assert!(errors.iter().all(|e| e["stage"] == "summarize" && e["attempts"] == 4));
}

#[test]
fn in_flight_calls_are_bounded() {
    let now = AtomicUsize::new(0);
    let peak = AtomicUsize::new(0);
    let chat = ScriptedChat::new(|_: &[ChatMessage], _| {
        let n = now.fetch_add(1, Ordering::SeqCst) + 1;
        peak.fetch_max(n, Ordering::SeqCst);
        std::thread::sleep(Duration::from_millis(3));
        now.fetch_sub(1, Ordering::SeqCst);
        Ok("N/A".to_string())
    });
    let arts: Vec<NewsArticle> = (0..24).map(|i| article(&format!("a{i:02}"), "2024-01-02", "b")).collect();
    stage1_summarize_filter(&arts, "s", "d", &chat, &fast()).unwrap();
    let p = peak.load(Ordering::SeqCst);
    assert!((1..=4).contains(&p), "peak {p}");
}

fn event(d: NaiveDate, name: &str) -> DailyEvent {
    DailyEvent {
        date: d,
        name: name.into(),
        summary: format!("{name} happened"),
        rationale: "matters".into(),
    }
}

fn target() -> Vec<TargetSpec> {
    vec![TargetSpec {
        name: "WTI".into(),
        description: "West Texas Intermediate crude oil spot price".into(),
    }]
}

fn key_driver_names(doc: &InsightDoc) -> BTreeSet<String> {
    doc.key_driver
        .strip_prefix("Key drivers: ")
        .unwrap()
        .split("; ")
        .map(String::from)
        .collect()
}

#[test]
fn window_boundaries() {
    let d = date(2024, 3, 31);
    let only_old = vec![event(d - Days::days(20), "old")];
    let out = stage3_generate_insights(&only_old, &[d], &target(), 20, &MockChat::new("x"), &fast()).unwrap();
    assert!(out.items[0].empty_window);
    assert!(out.items[0].key_driver.is_empty() && out.items[0].outlook.is_empty());
    assert_eq!(out.attempted, 0);

    let edges = vec![
        event(d - Days::days(20), "old"),
        event(d - Days::days(19), "first"),
        event(d, "today"),
        event(d + Days::days(1), "future"),
    ];
    let out = stage3_generate_insights(&edges, &[d], &target(), 20, &MockChat::new("x"), &fast()).unwrap();
    assert_eq!(key_driver_names(&out.items[0]), BTreeSet::from(["first".into(), "today".into()]));
}

#[test]
fn insight_prompt_fills_target_description() {
    let d = date(2024, 3, 6);
    let chat = ScriptedChat::new(|m: &[ChatMessage], _| {
        let user = &m.last().unwrap().content;
        assert!(user.contains("West Texas Intermediate crude oil spot price"));
        assert!(user.contains(EVENTS_HEADER) && !user.contains(ARTICLE_HEADER) && !user.contains(SUMMARIES_HEADER));
        assert!(!user.contains('{') || user.contains("\"key_driver\""));
        Ok(r#"{"key_driver":"k","outlook":"o"}"#.into())
    });
    let out = stage3_generate_insights(&[event(d, "e")], &[d], &target(), 20, &chat, &fast()).unwrap();
    assert_eq!((out.items[0].key_driver.as_str(), out.items[0].outlook.as_str()), ("k", "o"));
}

#[test]
fn malformed_insight_is_skipped_after_retries() {
    let d = date(2024, 3, 6);
    let chat = ScriptedChat::new(|_: &[ChatMessage], _| Ok(r#"{"key_driver":"only"}"#.into()));
    let out = stage3_generate_insights(&[event(d, "e")], &[d], &target(), 20, &chat, &fast()).unwrap();
    assert!(out.items.is_empty());
    assert_eq!(out.errors.len(), 1);
    assert_eq!(chat.calls(), 4);
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn disjoint_texts_are_nearly_orthogonal() {
    // Verified once for seed 0 and D = 64 and frozen.
    let e = HashEmbedder::new(64, 0);
    let pairs = [
        ("opec extends supply cuts", "payrolls beat economist forecasts"),
        ("refinery fire halts processing", "central bank keeps rates unchanged"),
        ("tanker freight rates climb", "semiconductor shares rally again"),
        ("inventories fell sharply last week", "housing starts rebound in february"),
        ("drone strike damages plant", "airline orders forty jets"),
    ];
    for (a, b) in pairs {
        let c = cos(&e.embed(a).unwrap(), &e.embed(b).unwrap());
        assert!(c.abs() < 0.2, "{a:?} vs {b:?}: {c}");
    }
    let a = e.embed("crude oil supply tightens").unwrap();
    assert_eq!(a, e.embed("crude oil supply tightens").unwrap());
    assert!((a.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn corpus_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.jsonl");
    std::fs::write(&p, "{\"id\":\"a\",\"datetime\":\"2024-01-01T00:00:00\",\"headline\":\"h\",\"body\":\"b\"}\n\n{\"id\":\"b\"}\n").unwrap();
    match read_corpus(&p) {
        Err(Error::Corpus(m)) => assert!(m.contains("line 3"), "{m}"),
        other => panic!("{other:?}"),
    }
    // A directory reads every .jsonl file in name order.
    std::fs::write(&p, "").unwrap();
    std::fs::copy(manifest().join("tests/fixtures/corpus.jsonl"), dir.path().join("a.jsonl")).unwrap();
    assert_eq!(read_corpus(dir.path()).unwrap().len(), 30);
}

struct Failing;

impl EmbeddingBackend for Failing {
    fn embed(&self, _: &str) -> Result<Vec<f64>, BackendError> {
        Err(BackendError::Status { status: 503, body: "busy".into() })
    }
}

#[test]
fn embedding_failures_are_recorded_per_text() {
    let cfg = config();
    let dir = tempfile::tempdir().unwrap();
    let report = run_pipeline(&corpus(), &cfg, &MockChat::new(&cfg.subject), &Failing, dir.path()).unwrap();
    assert_eq!(report.failed_stages(), ["embed"]);
    assert_eq!(std::fs::read_to_string(dir.path().join(KEY_DRIVER_FILE)).unwrap(), "");
    let errors = read_lines(&dir.path().join(ERRORS_FILE));
    assert!(errors.iter().all(|e| e["stage"] == "embed" && e["attempts"] == 4));
}

fn chat_is_object_safe(_: &dyn ChatBackend) {}

#[test]
fn backends_are_object_safe() {
    chat_is_object_safe(&MockChat::new("x"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn window_membership_matches_date_filter(
        offsets in proptest::collection::vec(0i64..60, 0..25),
        query in 0i64..70,
        window in 1usize..30,
    ) {
        let base = date(2024, 1, 1);
        let mut events: Vec<DailyEvent> = offsets
            .iter()
            .enumerate()
            .map(|(i, &o)| event(base + Days::days(o), &format!("e{i}")))
            .collect();
        events.sort_by_key(|e| e.date);
        let d = base + Days::days(query);

        // Oracle: inclusive calendar-day distance.
        let expected: BTreeSet<String> = events
            .iter()
            .filter(|e| {
                let age = (d - e.date).num_days();
                age >= 0 && age < window as i64
            })
            .map(|e| e.name.clone())
            .collect();
        let got: BTreeSet<String> = window_events(&events, d, window).iter().map(|e| e.name.clone()).collect();
        prop_assert_eq!(&got, &expected);

        // The same set reaches the insight prompt.
        let exec = StageExec { max_in_flight: 1, ..fast() };
        let out = stage3_generate_insights(&events, &[d], &target(), window, &MockChat::new("x"), &exec).unwrap();
        let doc = &out.items[0];
        if expected.is_empty() {
            prop_assert!(doc.empty_window);
        } else {
            prop_assert_eq!(key_driver_names(doc), expected);
        }
    }

    #[test]
    fn event_cap_holds_for_any_reply_length(n in 0usize..12, cap in 1usize..8) {
        let chat = ScriptedChat::new(move |_: &[ChatMessage], _| Ok(events_json(n)));
        let exec = StageExec { max_in_flight: 1, ..fast() };
        let out = stage2_extract_events(&summaries(date(2024, 1, 1), 1), "s", cap, &chat, &exec).unwrap();
        prop_assert_eq!(out.items.len(), n.min(cap));
    }
}
