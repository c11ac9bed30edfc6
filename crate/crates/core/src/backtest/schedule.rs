//! Biweekly retrain schedule.

use chrono::{Duration, NaiveDate};
use serde::Serialize;

use crate::data::IsoWeek;
use crate::error::{Error, Result};

/// Calendar days covered by a point's test segment, cutoff included.
pub const TEST_SPAN_DAYS: i64 = 29;

/// Weekday offsets from the cutoff Monday: Monday..Friday of weeks `w` and
/// `w + 1`.
const ORIGIN_OFFSETS: [i64; 10] = [0, 1, 2, 3, 4, 7, 8, 9, 10, 11];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RetrainPoint {
    pub week: IsoWeek,
    /// Monday of `week`; training uses rows strictly before it.
    pub cutoff: NaiveDate,
    /// Last calendar day of the test segment.
    pub test_end: NaiveDate,
    pub origins: Vec<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScheduleWarning {
    pub week: IsoWeek,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BacktestSchedule {
    pub points: Vec<RetrainPoint>,
    pub warnings: Vec<ScheduleWarning>,
}

/// Retrain points every two ISO weeks from `start` for `years` years.
///
/// Origins are the trading days among the ten weekdays of weeks `w` and
/// `w + 1`. Origins without `horizon` trading days of truth from the origin
/// onwards are trimmed and recorded as warnings.
pub fn build_biweekly_schedule(
    start: IsoWeek,
    years: u32,
    trading_dates: &[NaiveDate],
    horizon: usize,
) -> Result<BacktestSchedule> {
    if years == 0 {
        return Err(Error::Config("backtest years must be at least 1".into()));
    }
    if trading_dates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Data("trading dates must be strictly increasing".into()));
    }
    let end = IsoWeek::new(start.year + years as i32, 1)?
        .plus_weeks(i64::from(start.week) - 1)
        .monday();
    let total_weeks = (end - start.monday()).num_days() / 7;
    let mut points = Vec::new();
    let mut warnings = Vec::new();
    for k in (0..total_weeks).step_by(2) {
        let week = start.plus_weeks(k);
        let cutoff = week.monday();
        let mut origins = Vec::with_capacity(ORIGIN_OFFSETS.len());
        for off in ORIGIN_OFFSETS {
            let day = cutoff + Duration::days(off);
            let Ok(i) = trading_dates.binary_search(&day) else {
                continue;
            };
            if i + horizon > trading_dates.len() {
                warnings.push(ScheduleWarning {
                    week,
                    message: format!(
                        "origin {day} has {} of {horizon} horizon days; trimmed",
                        trading_dates.len() - i
                    ),
                });
                continue;
            }
            origins.push(day);
        }
        if origins.is_empty() {
            warnings.push(ScheduleWarning {
                week,
                message: "no forecast origins".into(),
            });
        }
        points.push(RetrainPoint {
            week,
            cutoff,
            test_end: cutoff + Duration::days(TEST_SPAN_DAYS - 1),
            origins,
        });
    }
    Ok(BacktestSchedule { points, warnings })
}

impl BacktestSchedule {
    /// Keeps the last `n` points that have at least one origin.
    pub fn last_points(mut self, n: usize) -> Self {
        self.points.retain(|p| !p.origins.is_empty());
        let drop = self.points.len().saturating_sub(n);
        self.points.drain(..drop);
        self
    }
}
