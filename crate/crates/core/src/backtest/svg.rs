//! Forecast figure: lookback, truth and per-model forecasts as polylines.

use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDate;

use crate::error::{Error, Result};

const WIDTH: f64 = 900.0;
const PLOT_LEFT: f64 = 60.0;
const PLOT_TOP: f64 = 40.0;
const PLOT_WIDTH: f64 = 640.0;
const PLOT_HEIGHT: f64 = 300.0;
const LEGEND_X: f64 = 720.0;
const PALETTE: [&str; 8] = [
    "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];
const WRAP: usize = 110;

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastPlot {
    pub title: String,
    pub origin: NaiveDate,
    pub lookback: Vec<f64>,
    /// Horizon truth; every forecast has the same length.
    pub truth: Vec<f64>,
    pub forecasts: Vec<(String, Vec<f64>)>,
    /// Free text shown under the chart, typically the outlook snippet.
    pub annotation: String,
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c if c.is_control() => out.push(' '),
            c => out.push(c),
        }
    }
    out
}

fn wrap(text: &str, width: usize) -> Vec<String> {
    let mut lines = Vec::new();
    let mut line = String::new();
    for word in text.split_whitespace() {
        if !line.is_empty() && line.chars().count() + 1 + word.chars().count() > width {
            lines.push(std::mem::take(&mut line));
        }
        if !line.is_empty() {
            line.push(' ');
        }
        line.push_str(word);
    }
    if !line.is_empty() {
        lines.push(line);
    }
    lines
}

/// Renders the figure. Lookback occupies x positions `0..T`, the horizon
/// `T..T+H`.
pub fn emit_forecast_svg(plot: &ForecastPlot) -> Result<String> {
    let h = plot.truth.len();
    if plot.lookback.is_empty() || h == 0 {
        return Err(Error::Contract("forecast plot needs lookback and truth".into()));
    }
    if let Some((name, f)) = plot.forecasts.iter().find(|(_, f)| f.len() != h) {
        return Err(Error::Contract(format!(
            "forecast {name} has {} points, truth has {h}",
            f.len()
        )));
    }
    let all = plot
        .lookback
        .iter()
        .chain(&plot.truth)
        .chain(plot.forecasts.iter().flat_map(|(_, f)| f));
    let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Contract("forecast plot values must be finite".into()));
    }
    if hi - lo < 1e-12 {
        lo -= 1.0;
        hi += 1.0;
    }
    let t = plot.lookback.len();
    let span = (t + h - 1).max(1) as f64;
    let px = |i: usize| PLOT_LEFT + PLOT_WIDTH * i as f64 / span;
    let py = |v: f64| PLOT_TOP + PLOT_HEIGHT * (hi - v) / (hi - lo);
    let points = |start: usize, values: &[f64]| {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", px(start + i), py(v)))
            .collect::<Vec<_>>()
            .join(" ")
    };

    let notes = wrap(&plot.annotation, WRAP);
    let height = PLOT_TOP + PLOT_HEIGHT + 60.0 + 16.0 * notes.len() as f64;
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{PLOT_LEFT}" y="22" font-size="14">{} (origin {})</text>"#,
        escape(&plot.title),
        plot.origin
    );
    let _ = writeln!(
        s,
        r##"<rect x="{PLOT_LEFT}" y="{PLOT_TOP}" width="{PLOT_WIDTH}" height="{PLOT_HEIGHT}" fill="none" stroke="#999"/>"##
    );
    let split = px(t);
    let _ = writeln!(
        s,
        r##"<line x1="{split:.2}" y1="{PLOT_TOP}" x2="{split:.2}" y2="{:.2}" stroke="#bbb" stroke-dasharray="4 3"/>"##,
        PLOT_TOP + PLOT_HEIGHT
    );
    for (v, y) in [(hi, PLOT_TOP), (lo, PLOT_TOP + PLOT_HEIGHT)] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"#,
            PLOT_LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r##"<polyline class="lookback" fill="none" stroke="#555" stroke-width="1.5" points="{}"/>"##,
        points(0, &plot.lookback)
    );
    let _ = writeln!(
        s,
        r##"<polyline class="truth" fill="none" stroke="#000" stroke-width="2" points="{}"/>"##,
        points(t, &plot.truth)
    );
    for (k, (name, values)) in plot.forecasts.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<polyline class="forecast" data-model="{}" fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            escape(name),
            PALETTE[k % PALETTE.len()],
            points(t, values)
        );
    }
    let mut legend: Vec<(&str, &str)> = vec![("lookback", "#555"), ("truth", "#000")];
    legend.extend(
        plot.forecasts
            .iter()
            .enumerate()
            .map(|(k, (n, _))| (n.as_str(), PALETTE[k % PALETTE.len()])),
    );
    let _ = writeln!(s, r#"<g class="legend">"#);
    for (k, (name, color)) in legend.iter().enumerate() {
        let y = PLOT_TOP + 10.0 + 18.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{LEGEND_X}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            LEGEND_X + 20.0,
            LEGEND_X + 26.0,
            y + 4.0,
            escape(name)
        );
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g class="annotation">"#);
    for (k, line) in notes.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{PLOT_LEFT}" y="{:.2}">{}</text>"#,
            PLOT_TOP + PLOT_HEIGHT + 36.0 + 16.0 * k as f64,
            escape(line)
        );
    }
    let _ = writeln!(s, "</g>");
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn save_forecast_svg(plot: &ForecastPlot, path: &Path) -> Result<()> {
    let svg = emit_forecast_svg(plot)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}
