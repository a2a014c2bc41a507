//! Run reports, the comparison table and the trace plot.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sfod::adapt::{AdaptConfig, AdaptTrace};
use sfod::boxes::EvalResult;

pub const REPORT_FILE: &str = "report.json";
pub const TRACE_FILE: &str = "trace.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub strategy: String,
    pub seed: u64,
    pub include_reg: bool,
    pub config: AdaptConfig,
    pub config_hash: String,
    pub source_checkpoint: String,
    pub final_step: usize,
    pub final_eval: Option<EvalResult>,
    pub best_step: usize,
    pub best_map: Option<f64>,
    pub trace_csv: String,
    pub wall_clock_secs: f64,
    /// Step at which training diverged, if it did.
    pub diverged_at: Option<usize>,
}

/// Hex SHA-256 of a value's JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(json))
}

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{path}: {msg}")]
    Missing { path: PathBuf, msg: String },
    #[error("{path}: {msg}")]
    Malformed { path: PathBuf, msg: String },
}

pub struct LoadedRun {
    pub dir: PathBuf,
    pub report: RunReport,
    pub trace: AdaptTrace,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun, ReportError> {
    let read = |p: PathBuf| {
        fs::read_to_string(&p).map_err(|e| ReportError::Missing {
            path: p.clone(),
            msg: e.to_string(),
        })
    };
    let rpath = dir.join(REPORT_FILE);
    let report: RunReport = serde_json::from_str(&read(rpath.clone())?).map_err(|e| ReportError::Malformed { path: rpath, msg: e.to_string() })?;
    let tpath = dir.join(TRACE_FILE);
    let trace = AdaptTrace::from_csv(&read(tpath.clone())?).map_err(|msg| ReportError::Malformed { path: tpath, msg })?;
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        report,
        trace,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// One row per run: per-class AP50 and mAP of the final model, plus the
/// best-by-trace point.
pub fn table_csv(runs: &[LoadedRun], num_classes: usize) -> String {
    let mut out = String::from("strategy,seed");
    for c in 0..num_classes {
        write!(out, ",ap_class{c}").unwrap();
    }
    out.push_str(",map,best_step,best_map,run\n");
    for r in runs {
        let e = r.report.final_eval.as_ref();
        write!(out, "{},{}", r.report.strategy, r.report.seed).unwrap();
        for c in 0..num_classes {
            write!(out, ",{}", fmt_opt(e.and_then(|e| e.per_class_ap.get(c).copied().flatten()))).unwrap();
        }
        writeln!(out, ",{},{},{},{}", fmt_opt(e.map(|e| e.map)), r.report.best_step, fmt_opt(r.report.best_map), r.dir.display()).unwrap();
    }
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// mAP-vs-step line plot: one polyline per run with a vertex per evaluated
/// trace row.
pub fn trace_svg(runs: &[(String, &AdaptTrace)]) -> String {
    let (w, h) = (720.0, 420.0);
    let (left, right, top, bottom) = (60.0, 180.0, 20.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let max_step = runs.iter().flat_map(|(_, t)| t.evaluations().map(|(s, _)| s)).max().unwrap_or(1).max(1) as f64;
    let x = |s: f64| left + pw * s / max_step;
    let y = |m: f64| top + ph * (1.0 - m.clamp(0.0, 1.0));
    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(svg, r#"<g class="axes" stroke="black" fill="none"><path d="M{left},{top} L{left},{} L{},{}"/></g>"#, top + ph, left + pw, top + ph).unwrap();
    for i in 0..=5 {
        let m = i as f64 / 5.0;
        writeln!(svg, r##"<line x1="{}" y1="{:.1}" x2="{left}" y2="{:.1}" stroke="black"/><text x="{}" y="{:.1}" text-anchor="end">{m:.1}</text>"##, left - 4.0, y(m), y(m), left - 6.0, y(m) + 4.0).unwrap();
        let s = max_step * i as f64 / 5.0;
        writeln!(svg, r##"<line x1="{:.1}" y1="{}" x2="{:.1}" y2="{}" stroke="black"/><text x="{:.1}" y="{}" text-anchor="middle">{s:.0}</text>"##, x(s), top + ph, x(s), top + ph + 4.0, x(s), top + ph + 16.0).unwrap();
    }
    writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#, left + pw / 2.0, h - 10.0).unwrap();
    writeln!(svg, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">mAP (AP50)</text>"#, top + ph / 2.0, top + ph / 2.0).unwrap();
    for (i, (label, trace)) in runs.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = trace.evaluations().map(|(s, m)| format!("{:.2},{:.2}", x(s as f64), y(m))).collect();
        writeln!(svg, r#"<polyline data-run="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, xml_escape(label), points.join(" ")).unwrap();
        let ly = top + 14.0 * i as f64 + 8.0;
        writeln!(svg, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#, w - right + 10.0, w - right + 30.0, w - right + 34.0, ly + 4.0, xml_escape(label)).unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}
