//! Lookback/horizon window assembly around forecast origins.

use std::sync::Arc;

use chrono::NaiveDate;
use serde::Serialize;

use super::embeddings::EmbeddingSeries;
use crate::tensor::Tensor;

/// One supervised example. The origin is the first forecast day: `x` holds
/// the `T` rows strictly before it and `y` the `H` rows starting at it. Text
/// embeddings are those dated on the last lookback day, the latest text
/// available when the forecast is made.
#[derive(Debug, Clone)]
pub struct WindowSample {
    /// C×T normalized lookback.
    pub x: Tensor,
    /// targets×H normalized horizon.
    pub y: Tensor,
    pub key_driver: Vec<f64>,
    pub outlook: Vec<f64>,
    /// C×D description embeddings, shared across samples.
    pub descriptions: Arc<Tensor>,
    pub origin: NaiveDate,
    pub origin_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WindowRejection {
    pub origin: NaiveDate,
    pub reason: String,
}

/// Borrowed inputs shared by every window of one build.
#[derive(Debug, Clone, Copy)]
pub struct WindowSource<'a> {
    pub dates: &'a [NaiveDate],
    /// C×N normalized values.
    pub values: &'a [Vec<f64>],
    pub targets: &'a [usize],
    pub key_driver: &'a EmbeddingSeries,
    pub outlook: &'a EmbeddingSeries,
    pub descriptions: &'a Arc<Tensor>,
}

/// Builds one sample per acceptable origin; the rest are reported with a
/// reason instead of failing the whole batch.
pub fn build_windows(
    src: WindowSource<'_>,
    lookback: usize,
    horizon: usize,
    origins: &[NaiveDate],
) -> (Vec<WindowSample>, Vec<WindowRejection>) {
    let mut samples = Vec::with_capacity(origins.len());
    let mut rejected = Vec::new();
    let n = src.dates.len();
    let all_channels: Vec<usize> = (0..src.values.len()).collect();
    for &origin in origins {
        let reject = |reason: String| WindowRejection { origin, reason };
        let Ok(i) = src.dates.binary_search(&origin) else {
            rejected.push(reject("origin is not a trading date of the series".into()));
            continue;
        };
        if i < lookback.max(1) {
            rejected.push(reject(format!("only {i} history rows, need {lookback}")));
            continue;
        }
        if i + horizon > n {
            rejected.push(reject(format!("only {} future rows, need {horizon}", n - i)));
            continue;
        }
        let asof = src.dates[i - 1];
        let Some(kd) = src.key_driver.get(asof) else {
            rejected.push(reject("missing key-driver embedding".into()));
            continue;
        };
        let Some(ol) = src.outlook.get(asof) else {
            rejected.push(reject("missing outlook embedding".into()));
            continue;
        };
        samples.push(WindowSample {
            x: slice_rows(src.values, &all_channels, i - lookback, lookback),
            y: slice_rows(src.values, src.targets, i, horizon),
            key_driver: kd.to_vec(),
            outlook: ol.to_vec(),
            descriptions: Arc::clone(src.descriptions),
            origin,
            origin_index: i,
        });
    }
    (samples, rejected)
}

fn slice_rows(values: &[Vec<f64>], channels: &[usize], start: usize, len: usize) -> Tensor {
    let mut data = Vec::with_capacity(channels.len() * len);
    for &c in channels {
        data.extend_from_slice(&values[c][start..start + len]);
    }
    Tensor::matrix(channels.len(), len, data).expect("window shape is nonzero")
}
