//! Report files: metrics JSON and CSV, a config echo and SVG plots.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use decomp_core::Hierarchy;
use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{BenchError, Result};

pub const SCHEMA_VERSION: &str = "decomp-report/1";

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum Cell {
    Int(i64),
    Num(f64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Int(i64::from(v))
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub kind: String,
    pub seed: u64,
    pub config: Value,
    pub summary: Map<String, Value>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    /// `(file name, svg document)`.
    pub plots: Vec<(String, String)>,
    /// Extra text artifacts such as model files, `(file name, contents)`.
    pub files: Vec<(String, String)>,
}

impl Report {
    pub fn new(kind: &str, seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(Self { kind: kind.into(), seed, config: serde_json::to_value(config)?, ..Self::default() })
    }

    pub fn columns(mut self, names: &[&str]) -> Self {
        self.columns = names.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn push_row(&mut self, row: Vec<Cell>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(BenchError::invalid(format!("row has {} cells for {} columns", row.len(), self.columns.len())));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) -> Result<()> {
        self.summary.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.config.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> Value {
        json!({
            "schema": SCHEMA_VERSION,
            "kind": self.kind,
            "seed": self.seed,
            "config_hash": self.config_hash(),
            "versions": { "decomp-core": decomp_core::VERSION, "decomp-bench": env!("CARGO_PKG_VERSION") },
            "config": self.config,
            "summary": self.summary,
            "columns": self.columns,
            "rows": self.rows,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.columns.iter().map(|c| csv_field(c)).collect::<Vec<_>>().join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.iter().map(format_cell).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }
}

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn format_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn format_cell(c: &Cell) -> String {
    match c {
        Cell::Int(v) => v.to_string(),
        Cell::Num(v) => format_float(*v),
        Cell::Text(s) => csv_field(s),
    }
}

fn write(path: PathBuf, contents: &str) -> Result<PathBuf> {
    fs::write(&path, contents).map_err(|e| BenchError::io(&path, e))?;
    Ok(path)
}

/// Write `metrics.json`, `metrics.csv`, `config.json`, plots and extra files
/// into `out_dir`, creating it if needed. Returns the written paths.
pub fn emit_report(report: &Report, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| BenchError::io(out_dir, e))?;
    let mut written = Vec::new();
    let metrics = serde_json::to_string_pretty(&report.to_json())? + "\n";
    written.push(write(out_dir.join("metrics.json"), &metrics)?);
    written.push(write(out_dir.join("metrics.csv"), &report.to_csv())?);
    let config = serde_json::to_string_pretty(&json!({ "kind": report.kind, "seed": report.seed, "config": report.config }))? + "\n";
    written.push(write(out_dir.join("config.json"), &config)?);
    for (name, body) in report.plots.iter().chain(&report.files) {
        if name.contains(['/', '\\']) || name.is_empty() {
            return Err(BenchError::invalid(format!("artifact name `{name}` must be a plain file name")));
        }
        written.push(write(out_dir.join(name), body)?);
    }
    Ok(written)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Line chart of several series over a shared integer x axis.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<f64>)]) -> String {
    let (w, h, left, right, top, bottom) = (560.0, 340.0, 60.0, 130.0, 30.0, 40.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let finite = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0).max(2);
    let x_of = |i: usize| left + pw * i as f64 / (n - 1) as f64;
    let y_of = |v: f64| top + ph * (1.0 - (v - lo) / (hi - lo));
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(s, r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 8.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#, left - 4.0, top + 4.0, hi);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#, left - 4.0, top + ph, lo);
    let _ = writeln!(s, r#"<text x="{left}" y="{}" text-anchor="middle">0</text>"#, top + ph + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, left + pw, top + ph + 14.0, n - 1);
    for (k, (name, values)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.2},{:.2}", x_of(i), y_of(v)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, points.join(" "));
        let ly = top + 14.0 + 16.0 * k as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, w - right + 10.0, w - right + 30.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, w - right + 34.0, ly + 4.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

/// Hierarchy as nested boxes: one row per level, each group spanning its
/// units, shaded blue for positive and red for negative scores.
pub fn hierarchy_svg(hierarchy: &Hierarchy<f64>, labels: &[String]) -> String {
    let units = labels.len().max(1);
    let levels = hierarchy.nodes.iter().map(|n| n.level).max().unwrap_or(0) + 1;
    let cell = 64.0;
    let row = 34.0;
    let w = cell * units as f64 + 20.0;
    let h = row * levels as f64 + 20.0;
    let max = hierarchy.nodes.iter().map(|n| n.score.abs()).fold(0.0, f64::max).max(1e-12);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="10">"#);
    for node in &hierarchy.nodes {
        let (Some(&first), Some(&last)) = (node.units.first(), node.units.last()) else { continue };
        let x = 10.0 + cell * first as f64;
        let width = cell * (last - first + 1) as f64 - 4.0;
        let y = 10.0 + row * (levels - 1 - node.level) as f64;
        let alpha = 0.15 + 0.75 * node.score.abs() / max;
        let fill = if node.score >= 0.0 { "#1f77b4" } else { "#d62728" };
        let text: Vec<&str> = node.units.iter().filter_map(|&u| labels.get(u).map(String::as_str)).collect();
        let _ = writeln!(
            s,
            r##"<rect x="{x:.1}" y="{y:.1}" width="{width:.1}" height="{:.1}" rx="3" fill="{fill}" fill-opacity="{alpha:.3}" stroke="#333"/>"##,
            row - 6.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{} ({:.3})</text>"#,
            x + width / 2.0,
            y + row / 2.0,
            escape(&text.join(" ")),
            node.score
        );
    }
    s.push_str("</svg>\n");
    s
}
