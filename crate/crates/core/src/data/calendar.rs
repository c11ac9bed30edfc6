//! ISO-8601 week numbering and weekday calendars.

use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// An ISO-8601 week, written `YYYY-Www`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IsoWeek {
    pub year: i32,
    pub week: u32,
}

fn is_leap(year: i32) -> bool {
    (year % 4 == 0 && year % 100 != 0) || year % 400 == 0
}

/// Number of ISO weeks (52 or 53) in an ISO week-numbering year.
pub fn weeks_in_year(year: i32) -> u32 {
    let jan1 = NaiveDate::from_ymd_opt(year, 1, 1).expect("valid year");
    match jan1.weekday() {
        Weekday::Thu => 53,
        Weekday::Wed if is_leap(year) => 53,
        _ => 52,
    }
}

/// ISO-8601 week-numbering year and week of a Gregorian date.
pub fn iso_week(date: NaiveDate) -> (i32, u32) {
    let wd = date.weekday().number_from_monday() as i64;
    let ordinal = date.ordinal() as i64;
    let week = (ordinal - wd + 10).div_euclid(7);
    let year = date.year();
    if week < 1 {
        (year - 1, weeks_in_year(year - 1))
    } else if week as u32 > weeks_in_year(year) {
        (year + 1, 1)
    } else {
        (year, week as u32)
    }
}

impl IsoWeek {
    pub fn new(year: i32, week: u32) -> Result<Self> {
        if week == 0 || week > weeks_in_year(year) {
            return Err(Error::Config(format!("{year} has no ISO week {week}")));
        }
        Ok(Self { year, week })
    }

    pub fn of(date: NaiveDate) -> Self {
        let (year, week) = iso_week(date);
        Self { year, week }
    }

    pub fn monday(self) -> NaiveDate {
        let jan4 = NaiveDate::from_ymd_opt(self.year, 1, 4).expect("valid year");
        let week1 = jan4 - Duration::days(jan4.weekday().num_days_from_monday() as i64);
        week1 + Duration::weeks(self.week as i64 - 1)
    }

    pub fn plus_weeks(self, n: i64) -> Self {
        Self::of(self.monday() + Duration::weeks(n))
    }
}

impl fmt::Display for IsoWeek {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-W{:02}", self.year, self.week)
    }
}

impl FromStr for IsoWeek {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid ISO week {s:?}, expected YYYY-Www"));
        let (y, w) = s.split_once("-W").ok_or_else(bad)?;
        let year = y.parse().map_err(|_| bad())?;
        let week = w.parse().map_err(|_| bad())?;
        Self::new(year, week)
    }
}

impl Serialize for IsoWeek {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for IsoWeek {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn is_weekday(date: NaiveDate) -> bool {
    !matches!(date.weekday(), Weekday::Sat | Weekday::Sun)
}

/// `n` consecutive Monday–Friday dates starting at the first weekday on or
/// after `start`.
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if is_weekday(d) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}
