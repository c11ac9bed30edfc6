//! Event-based refinement of news into forecasting text.
//!
//! Articles are summarized and filtered for relevance, condensed into at
//! most five events per day, and every day's trailing 20-day event window is
//! turned into a key-driver and an outlook text per target. Both texts are
//! embedded and written as JSONL streams the forecasting data plane reads.
//!
//! Backends are pluggable: [`MockChat`] and [`HashEmbedder`] are fully
//! deterministic, [`HttpChat`] and [`HttpEmbedding`] speak the common
//! chat-completion and embedding wire formats.

pub mod backend;
pub mod error;
pub mod exec;
pub mod hash_embed;
pub mod http;
pub mod mock;
pub mod pipeline;
pub mod prompts;
pub mod stages;
pub mod types;

pub use backend::{ChatBackend, ChatMessage, EmbeddingBackend, Role, ScriptedChat};
pub use error::{BackendError, Error, Result};
pub use exec::{RetryPolicy, MAX_ATTEMPTS};
pub use hash_embed::HashEmbedder;
pub use http::{BackendConfig, HttpChat, HttpEmbedding};
pub use mock::MockChat;
pub use pipeline::{read_corpus, run_pipeline, PipelineConfig, PipelineReport, StageStat};
pub use stages::{
    embed_text, stage1_summarize_filter, stage2_extract_events, stage3_generate_insights, window_events,
    StageExec, StageOutput,
};
pub use types::{ArticleSummary, DailyEvent, EmbeddingRecord, ErrorRecord, InsightDoc, NewsArticle, TargetSpec};
