//! Series and embedding ingestion, normalization, windowing and the
//! synthetic benchmark.

pub mod calendar;
pub mod embeddings;
pub mod frame;
pub mod normalize;
pub mod synth;
pub mod windows;

pub use calendar::{business_days, iso_week, IsoWeek};
pub use embeddings::{ChannelDescriptions, EmbeddingSeries};
pub use frame::{linear_interpolate_missing, weekly_to_daily, TimeSeriesFrame};
pub use normalize::{zscore_fit, ZScore};
pub use synth::{synth_generate, LeakMode, SyntheticData, SyntheticSpec};
pub use windows::{build_windows, WindowRejection, WindowSample, WindowSource};
