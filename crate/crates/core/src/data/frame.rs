//! Calendar-indexed multichannel series with optional missing cells.

use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;

use crate::error::{Error, Result};

pub(crate) const DATE_FORMAT: &str = "%Y-%m-%d";

/// A C×N value matrix indexed by strictly increasing dates.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesFrame {
    dates: Vec<NaiveDate>,
    channels: Vec<String>,
    /// One row per channel.
    values: Vec<Vec<Option<f64>>>,
}

impl TimeSeriesFrame {
    pub fn new(
        dates: Vec<NaiveDate>,
        channels: Vec<String>,
        values: Vec<Vec<Option<f64>>>,
    ) -> Result<Self> {
        if values.len() != channels.len() {
            return Err(Error::Data(format!(
                "{} channel names for {} value rows",
                channels.len(),
                values.len()
            )));
        }
        if let Some((name, row)) = channels
            .iter()
            .zip(&values)
            .find(|(_, row)| row.len() != dates.len())
        {
            return Err(Error::Data(format!(
                "channel {name} has {} values for {} dates",
                row.len(),
                dates.len()
            )));
        }
        if let Some(w) = dates.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Data(format!(
                "dates must be strictly increasing: {} then {}",
                w[0], w[1]
            )));
        }
        Ok(Self {
            dates,
            channels,
            values,
        })
    }

    /// Builds a frame with no missing cells.
    pub fn from_complete(
        dates: Vec<NaiveDate>,
        channels: Vec<String>,
        values: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let values = values
            .into_iter()
            .map(|row| row.into_iter().map(Some).collect())
            .collect();
        Self::new(dates, channels, values)
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn channels(&self) -> &[String] {
        &self.channels
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == name)
    }

    pub fn date_index(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }

    pub fn value(&self, channel: usize, t: usize) -> Option<f64> {
        self.values[channel][t]
    }

    pub fn channel_values(&self, channel: usize) -> &[Option<f64>] {
        &self.values[channel]
    }

    pub fn set(&mut self, channel: usize, t: usize, value: Option<f64>) {
        self.values[channel][t] = value;
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().flatten().filter(|v| v.is_none()).count()
    }

    /// The dense C×N matrix; fails if any cell is missing.
    pub fn complete_values(&self) -> Result<Vec<Vec<f64>>> {
        self.channels
            .iter()
            .zip(&self.values)
            .map(|(name, row)| {
                row.iter()
                    .enumerate()
                    .map(|(t, v)| {
                        v.ok_or_else(|| {
                            Error::Data(format!(
                                "channel {name} is missing a value on {}",
                                self.dates[t]
                            ))
                        })
                    })
                    .collect()
            })
            .collect()
    }

    /// Reads `date,<name>,...` CSV; an empty field is a missing cell.
    pub fn read_csv<R: Read>(reader: R, source: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut records = rdr.records();
        let format = |line: usize, message: String| Error::Format {
            path: source.to_string(),
            line,
            message,
        };
        let header = match records.next() {
            Some(r) => r.map_err(|e| format(1, e.to_string()))?,
            None => return Err(format(1, "missing header row".into())),
        };
        if header.get(0) != Some("date") {
            return Err(format(1, "first header column must be `date`".into()));
        }
        let channels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        if channels.is_empty() {
            return Err(format(1, "no value columns".into()));
        }
        let mut dates = Vec::new();
        let mut values = vec![Vec::new(); channels.len()];
        for (i, record) in records.enumerate() {
            let line = i + 2;
            let record = record.map_err(|e| format(line, e.to_string()))?;
            if record.len() != channels.len() + 1 {
                return Err(format(
                    line,
                    format!("expected {} fields, found {}", channels.len() + 1, record.len()),
                ));
            }
            let date = NaiveDate::parse_from_str(&record[0], DATE_FORMAT).map_err(|e| {
                format(line, format!("column 1: invalid date {:?}: {e}", &record[0]))
            })?;
            if let Some(&prev) = dates.last() {
                if date <= prev {
                    return Err(format(
                        line,
                        format!("date {date} does not follow {prev}; dates must be strictly increasing"),
                    ));
                }
            }
            dates.push(date);
            for (c, field) in record.iter().skip(1).enumerate() {
                let v = if field.is_empty() {
                    None
                } else {
                    Some(field.parse::<f64>().map_err(|_| {
                        format(line, format!("column {}: invalid number {field:?}", c + 2))
                    })?)
                };
                values[c].push(v);
            }
        }
        Self::new(dates, channels, values)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file), &path.display().to_string())
    }

    /// Writes CSV using shortest round-trip float formatting.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let csv_err = |e: csv::Error| Error::Data(format!("csv write failed: {e}"));
        let mut header = vec!["date".to_string()];
        header.extend(self.channels.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (t, date) in self.dates.iter().enumerate() {
            let mut row = vec![date.format(DATE_FORMAT).to_string()];
            row.extend(
                self.values
                    .iter()
                    .map(|ch| ch[t].map(|v| v.to_string()).unwrap_or_default()),
            );
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()
            .map_err(|e| Error::Data(format!("csv flush failed: {e}")))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Fills interior gaps linearly in index and edge gaps with the nearest
/// observation.
pub fn linear_interpolate_missing(frame: &TimeSeriesFrame) -> Result<TimeSeriesFrame> {
    let mut out = frame.clone();
    for (c, row) in out.values.iter_mut().enumerate() {
        let observed: Vec<(usize, f64)> = row
            .iter()
            .enumerate()
            .filter_map(|(t, v)| v.map(|v| (t, v)))
            .collect();
        if observed.is_empty() {
            return Err(Error::Data(format!(
                "channel {} has no observed values",
                frame.channels[c]
            )));
        }
        let points: Vec<(f64, f64)> = observed.iter().map(|&(t, v)| (t as f64, v)).collect();
        for (t, cell) in row.iter_mut().enumerate() {
            if cell.is_none() {
                *cell = Some(interpolate_at(&points, t as f64));
            }
        }
    }
    Ok(out)
}

/// Piecewise-linear interpolation through `points` (sorted by position) with
/// constant extrapolation.
fn interpolate_at(points: &[(f64, f64)], x: f64) -> f64 {
    let first = points[0];
    let last = points[points.len() - 1];
    if x <= first.0 {
        return first.1;
    }
    if x >= last.0 {
        return last.1;
    }
    let hi = points.partition_point(|p| p.0 <= x);
    let (x0, y0) = points[hi - 1];
    let (x1, y1) = points[hi];
    if x == x0 {
        return y0;
    }
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// Converts a weekly frame onto `daily_dates`, interpolating linearly in the
/// daily index between anchors.
///
/// An anchor falling between two daily dates (a weekend, say) is placed at a
/// fractional index proportional to calendar days.
pub fn weekly_to_daily(weekly: &TimeSeriesFrame, daily_dates: &[NaiveDate]) -> Result<TimeSeriesFrame> {
    if weekly.is_empty() {
        return Err(Error::Data("weekly frame has no rows".into()));
    }
    if daily_dates.is_empty() {
        return Err(Error::Data("daily calendar is empty".into()));
    }
    let first = daily_dates[0];
    let last = daily_dates[daily_dates.len() - 1];
    let mut positions = Vec::with_capacity(weekly.len());
    for &d in weekly.dates() {
        if d < first || d > last {
            return Err(Error::Data(format!(
                "weekly anchor {d} lies outside the daily span {first}..{last}"
            )));
        }
        let hi = daily_dates.partition_point(|&x| x < d);
        let pos = if daily_dates[hi] == d {
            hi as f64
        } else {
            let prev = daily_dates[hi - 1];
            let next = daily_dates[hi];
            let frac = (d - prev).num_days() as f64 / (next - prev).num_days() as f64;
            (hi - 1) as f64 + frac
        };
        positions.push(pos);
    }
    let mut values = Vec::with_capacity(weekly.num_channels());
    for c in 0..weekly.num_channels() {
        let points: Vec<(f64, f64)> = positions
            .iter()
            .zip(weekly.channel_values(c))
            .filter_map(|(&p, v)| v.map(|v| (p, v)))
            .collect();
        if points.is_empty() {
            return Err(Error::Data(format!(
                "channel {} has no observed weekly values",
                weekly.channels[c]
            )));
        }
        values.push(
            (0..daily_dates.len())
                .map(|t| interpolate_at(&points, t as f64))
                .collect(),
        );
    }
    TimeSeriesFrame::from_complete(daily_dates.to_vec(), weekly.channels.clone(), values)
}
