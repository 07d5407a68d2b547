//! Report files (CSV, JSON) and SVG charts.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scenario::RunReport;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

pub const REPORT_COLUMNS: [&str; 6] = ["stage", "flops", "params", "rank1", "map", "seconds"];

pub fn report_csv(report: &RunReport) -> String {
    let mut out = REPORT_COLUMNS.join(",");
    out.push('\n');
    for s in &report.stages {
        let _ = writeln!(out, "{},{},{},{},{},{}", s.stage, s.flops, s.params, s.rank1, s.map, s.seconds);
    }
    out
}

pub fn report_json(report: &RunReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

pub fn parse_report_json(text: &str) -> Result<RunReport> {
    serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
}

pub fn render_report(report: &RunReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => report_csv(report),
        ReportFormat::Json => report_json(report),
    }
}

pub fn emit_report(report: &RunReport, format: ReportFormat, path: &Path) -> Result<()> {
    write_file(path, &render_report(report, format))
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlotSpec {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

/// Data range widened by 5% on each side; a zero-width range gets ±5% of
/// its magnitude (or ±0.05 at zero).
pub fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    let span = hi - lo;
    let pad = if span > 0.0 {
        0.05 * span
    } else if lo != 0.0 {
        0.05 * lo.abs()
    } else {
        0.05
    };
    (lo - pad, hi + pad)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Standalone SVG line chart with one `<circle class="marker">` per point.
pub fn render_plot(spec: &PlotSpec) -> Result<String> {
    let all: Vec<(f64, f64)> = spec.series.iter().flat_map(|s| s.points.iter().copied()).collect();
    if all.is_empty() {
        return Err(Error::invalid("plot needs at least one point"));
    }
    if let Some(p) = all.iter().find(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::invalid(format!("non-finite plot point {p:?}")));
    }
    let (x0, x1) = axis_range(all.iter().map(|p| p.0));
    let (y0, y1) = axis_range(all.iter().map(|p| p.1));
    let (w, h, left, right, top, bottom) = (640.0, 420.0, 70.0, 160.0, 40.0, 60.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" data-x-range="{x0} {x1}" data-y-range="{y0} {y1}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, left + pw / 2.0, esc(&spec.title));
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{}</text>"#,
            sx(xv),
            top + ph + 14.0,
            tick(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{}</text>"#,
            left - 4.0,
            sy(yv) + 3.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text class="x-label" x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
        left + pw / 2.0,
        h - 18.0,
        esc(&spec.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text class="y-label" x="16" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        esc(&spec.y_label)
    );
    for (k, series) in spec.series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        if series.points.len() > 1 {
            let pts: Vec<String> = series.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" points="{}"/>"#, pts.join(" "));
        }
        for &(x, y) in &series.points {
            let _ = writeln!(
                s,
                r#"<circle class="marker" cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}"/>"#,
                sx(x),
                sy(y)
            );
        }
        let ly = top + 12.0 + 18.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<g class="legend-entry"><rect x="{}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}" font-size="11">{}</text></g>"#,
            left + pw + 12.0,
            ly - 9.0,
            left + pw + 28.0,
            ly,
            esc(&series.label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a >= 1e6 || (a > 0.0 && a < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

pub fn emit_plot(spec: &PlotSpec, path: &Path) -> Result<()> {
    write_file(path, &render_plot(spec)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::StageRecord;

    fn one(points: Vec<(f64, f64)>) -> PlotSpec {
        PlotSpec {
            title: "t".into(),
            x_label: "GFLOPs".into(),
            y_label: "mAP".into(),
            series: vec![Series { label: "a".into(), points }],
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        assert_eq!(report_csv(&RunReport::default()), "stage,flops,params,rank1,map,seconds\n");
    }

    #[test]
    fn csv_has_one_row_per_stage() {
        let mut r = RunReport::default();
        for name in ["pretrain", "eval"] {
            r.stages.push(StageRecord {
                stage: name.into(),
                flops: 10,
                params: 3,
                rank1: 0.5,
                map: 0.25,
                seconds: 1.5,
            });
        }
        assert_eq!(report_csv(&r).lines().count(), 3);
        assert_eq!(parse_report_json(&report_json(&r)).unwrap(), r);
    }

    #[test]
    fn single_point_single_marker() {
        let svg = render_plot(&one(vec![(1.0, 2.0)])).unwrap();
        assert_eq!(svg.matches("class=\"marker\"").count(), 1);
    }

    #[test]
    fn legend_per_series() {
        let mut p = one(vec![(0.0, 1.0), (1.0, 0.5)]);
        p.series.push(Series {
            label: "b".into(),
            points: vec![(0.5, 0.7)],
        });
        assert_eq!(render_plot(&p).unwrap().matches("legend-entry").count(), 2);
    }

    #[test]
    fn margins_and_rejection() {
        assert_eq!(axis_range([0.0, 10.0].into_iter()), (-0.5, 10.5));
        assert!(render_plot(&one(vec![(f64::NAN, 1.0)])).is_err());
        assert!(render_plot(&one(vec![])).is_err());
    }
}
