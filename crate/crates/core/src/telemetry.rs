//! Training metrics, the flip-ratio statistic, CSV output and SVG plots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Additive floor inside the flip-ratio logarithm, `e^-9`.
pub fn flip_ratio_floor() -> f64 {
    (-9.0f64).exp()
}

/// `ln(flips / total + e^-9)`.
pub fn flip_ratio(flips: u64, total: u64) -> Result<f64> {
    if flips > total || total == 0 {
        return Err(Error::FlipCount { flips, total });
    }
    if flips == 0 {
        return Ok(-9.0);
    }
    Ok((flips as f64 / total as f64 + flip_ratio_floor()).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub epoch: u64,
    pub step: u64,
    pub split: Split,
    pub loss: f64,
    pub top1: f64,
    pub per_layer_pi: Vec<f64>,
    pub global_pi: f64,
}

const FIXED_COLUMNS: [&str; 6] = ["epoch", "step", "split", "loss", "top1", "global_pi"];

fn fmt_real(x: f64) -> String {
    // 17 significant digits round-trip every f64.
    format!("{x:.16e}")
}

/// Renders records as CSV text. All records must carry the same number of
/// per-layer ratios.
pub fn to_csv_string(records: &[TelemetryRecord]) -> Result<String> {
    let layers = records.first().map_or(0, |r| r.per_layer_pi.len());
    if let Some(r) = records.iter().find(|r| r.per_layer_pi.len() != layers) {
        return Err(Error::Data(format!(
            "record at epoch {} step {} has {} layer ratios, expected {layers}",
            r.epoch,
            r.step,
            r.per_layer_pi.len()
        )));
    }
    let mut out = FIXED_COLUMNS.join(",");
    for l in 0..layers {
        write!(out, ",pi_layer_{l}").unwrap();
    }
    out.push('\n');
    for r in records {
        write!(
            out,
            "{},{},{},{},{},{}",
            r.epoch,
            r.step,
            r.split.as_str(),
            fmt_real(r.loss),
            fmt_real(r.top1),
            fmt_real(r.global_pi)
        )
        .unwrap();
        for &p in &r.per_layer_pi {
            write!(out, ",{}", fmt_real(p)).unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn emit_csv(records: &[TelemetryRecord], path: &Path) -> Result<()> {
    let text = to_csv_string(records)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_error(path: &Path, line: u64, message: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        message: format!("line {line}: {message}"),
    }
}

/// Parses CSV text in the [`emit_csv`] schema. `path` is used for error
/// messages only.
pub fn parse_csv_str(text: &str, path: &Path) -> Result<Vec<TelemetryRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| parse_error(path, 1, e))?
        .clone();
    let mut columns = [0usize; 6];
    for (slot, name) in columns.iter_mut().zip(FIXED_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_error(path, 1, format!("missing column `{name}`")))?;
    }
    let mut layer_columns = Vec::new();
    while let Some(pos) = headers
        .iter()
        .position(|h| h == format!("pi_layer_{}", layer_columns.len()))
    {
        layer_columns.push(pos);
    }

    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(path, line, e)
        })?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(i).unwrap_or("");
        let real = |i: usize| -> Result<f64> {
            field(i)
                .parse::<f64>()
                .map_err(|e| parse_error(path, line, format!("column `{}`: {e}", &headers[i])))
        };
        let int = |i: usize| -> Result<u64> {
            field(i)
                .parse::<u64>()
                .map_err(|e| parse_error(path, line, format!("column `{}`: {e}", &headers[i])))
        };
        let split = match field(columns[2]) {
            "train" => Split::Train,
            "validation" => Split::Validation,
            other => return Err(parse_error(path, line, format!("unknown split `{other}`"))),
        };
        records.push(TelemetryRecord {
            epoch: int(columns[0])?,
            step: int(columns[1])?,
            split,
            loss: real(columns[3])?,
            top1: real(columns[4])?,
            global_pi: real(columns[5])?,
            per_layer_pi: layer_columns.iter().map(|&c| real(c)).collect::<Result<_>>()?,
        });
    }
    Ok(records)
}

pub fn parse_csv(path: &Path) -> Result<Vec<TelemetryRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv_str(&text, path)
}

const PANEL_W: f64 = 640.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn panel(svg: &mut String, top: f64, title: &str, series: &[Series]) {
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (PANEL_W - 2.0 * MARGIN);
    let sy = |y: f64| top + PANEL_H - MARGIN / 2.0 - (y - y0) / (y1 - y0) * (PANEL_H - MARGIN);

    writeln!(
        svg,
        r##"<g class="panel" data-metric="{title}"><rect x="{MARGIN}" y="{}" width="{}" height="{}" fill="none" stroke="#888"/>"##,
        top + MARGIN / 2.0,
        PANEL_W - 2.0 * MARGIN,
        PANEL_H - MARGIN
    )
    .unwrap();
    writeln!(svg, r#"<text x="{MARGIN}" y="{}" font-size="13">{title}</text>"#, top + 18.0).unwrap();
    writeln!(
        svg,
        r#"<text x="4" y="{}" font-size="10">{y1:.4}</text><text x="4" y="{}" font-size="10">{y0:.4}</text>"#,
        top + MARGIN / 2.0 + 10.0,
        top + PANEL_H - MARGIN / 2.0
    )
    .unwrap();
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        writeln!(
            svg,
            r#"<polyline class="curve" data-series="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            s.label,
            pts.join(" ")
        )
        .unwrap();
        writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="10" fill="{color}">{}</text>"#,
            PANEL_W - MARGIN - 90.0,
            top + 18.0 + 12.0 * i as f64,
            s.label
        )
        .unwrap();
    }
    svg.push_str("</g>\n");
}

/// Renders loss, accuracy and flip-ratio curves as a standalone SVG.
pub fn render_svg(records: &[TelemetryRecord]) -> String {
    let x_of = |r: &TelemetryRecord| r.epoch as f64;
    let by_split = |split: Split, f: &dyn Fn(&TelemetryRecord) -> f64| -> Vec<(f64, f64)> {
        records.iter().filter(|r| r.split == split).map(|r| (x_of(r), f(r))).collect()
    };
    let metric = |name: &str, f: &dyn Fn(&TelemetryRecord) -> f64| {
        vec![
            Series { label: format!("{name} train"), points: by_split(Split::Train, f) },
            Series { label: format!("{name} validation"), points: by_split(Split::Validation, f) },
        ]
    };
    let layers = records.first().map_or(0, |r| r.per_layer_pi.len());
    let mut pi = vec![Series {
        label: "global".to_string(),
        points: by_split(Split::Train, &|r| r.global_pi),
    }];
    for l in 0..layers {
        pi.push(Series {
            label: format!("layer {l}"),
            points: by_split(Split::Train, &|r| r.per_layer_pi[l]),
        });
    }

    let height = 3.0 * PANEL_H;
    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PANEL_W}" height="{height}" viewBox="0 0 {PANEL_W} {height}">"#
    )
    .unwrap();
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    panel(&mut svg, 0.0, "loss", &metric("loss", &|r| r.loss));
    panel(&mut svg, PANEL_H, "top1", &metric("top1", &|r| r.top1));
    panel(&mut svg, 2.0 * PANEL_H, "pi", &pi);
    svg.push_str("</svg>\n");
    svg
}

pub fn emit_plot(csv_path: &Path, out_path: &Path) -> Result<()> {
    let records = parse_csv(csv_path)?;
    fs::write(out_path, render_svg(&records)).map_err(|e| Error::io(out_path, e))
}
