use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentKind;
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, OtMode};

/// Metrics of one (method, seed, grid cell). Fields not measured by an
/// experiment are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RowMetrics {
    pub accuracy: Option<f64>,
    pub mean_loss: Option<f64>,
    pub perplexity: Option<f64>,
    pub vocab_containment: Option<f64>,
    pub ot_distance: Option<f64>,
    pub ot_mode: Option<OtMode>,
    pub ot_converged: Option<bool>,
    pub leaked_selected: Option<usize>,
}

impl From<&MetricsReport> for RowMetrics {
    fn from(r: &MetricsReport) -> Self {
        Self {
            accuracy: r.accuracy,
            mean_loss: Some(r.mean_loss),
            perplexity: r.perplexity,
            vocab_containment: Some(r.vocab_containment),
            ot_distance: Some(r.ot.distance),
            ot_mode: Some(r.ot.mode),
            ot_converged: Some(r.ot.converged),
            leaked_selected: None,
        }
    }
}

impl RowMetrics {
    pub const NUMERIC: [&'static str; 6] = [
        "accuracy",
        "mean_loss",
        "perplexity",
        "vocab_containment",
        "ot_distance",
        "leaked_selected",
    ];

    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "accuracy" => self.accuracy,
            "mean_loss" => self.mean_loss,
            "perplexity" => self.perplexity,
            "vocab_containment" => self.vocab_containment,
            "ot_distance" => self.ot_distance,
            "leaked_selected" => self.leaked_selected.map(|c| c as f64),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub seed: u64,
    /// Grid coordinates, e.g. `{"M": "500"}`.
    pub group: BTreeMap<String, String>,
    pub metrics: RowMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub group: BTreeMap<String, String>,
    pub seeds: usize,
    pub mean: BTreeMap<String, f64>,
    /// Population standard deviation over seeds.
    pub std: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Figure {
    pub name: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub seed: u64,
    pub stage: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    /// Fingerprints of every model the run produced, keyed by role.
    pub checkpoint_checksums: BTreeMap<String, String>,
    pub toolkit_version: String,
    pub generated_at_unix: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub kind: ExperimentKind,
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<AggregateRow>,
    pub figures: Vec<Figure>,
    pub provenance: Provenance,
    pub failures: Vec<Failure>,
}

/// Mean and population std of every numeric metric per (method, group).
pub fn aggregate(rows: &[ReportRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, BTreeMap<String, String>), Vec<&ReportRow>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in rows {
        let key = (r.method.clone(), r.group.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let members = &groups[&key];
            let mut mean = BTreeMap::new();
            let mut std = BTreeMap::new();
            for name in RowMetrics::NUMERIC {
                let vals: Vec<f64> = members.iter().filter_map(|r| r.metrics.get(name)).collect();
                if vals.is_empty() {
                    continue;
                }
                let mu = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64;
                mean.insert(name.to_string(), mu);
                std.insert(name.to_string(), var.sqrt());
            }
            AggregateRow {
                method: key.0,
                group: key.1,
                seeds: members.len(),
                mean,
                std,
            }
        })
        .collect()
}

impl ReportBundle {
    /// Aggregate mean of `metric` for `method` in the cell matching `group`.
    pub fn mean(&self, method: &str, group: &[(&str, &str)], metric: &str) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|a| {
                a.method == method
                    && group.iter().all(|(k, v)| a.group.get(*k).map(String::as_str) == Some(*v))
            })
            .and_then(|a| a.mean.get(metric).copied())
    }

    pub fn std(&self, method: &str, group: &[(&str, &str)], metric: &str) -> Option<f64> {
        self.aggregates
            .iter()
            .find(|a| {
                a.method == method
                    && group.iter().all(|(k, v)| a.group.get(*k).map(String::as_str) == Some(*v))
            })
            .and_then(|a| a.std.get(metric).copied())
    }

    /// JSON with the timestamp zeroed, for reproducibility checks.
    pub fn canonical_json(&self) -> String {
        let mut copy = self.clone();
        copy.provenance.generated_at_unix = 0;
        serde_json::to_string(&copy).expect("bundle serializes")
    }

    pub fn to_csv(&self) -> Result<String> {
        let keys: BTreeSet<&String> = self.rows.iter().flat_map(|r| r.group.keys()).collect();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["method".to_string(), "seed".to_string()];
        header.extend(keys.iter().map(|k| k.to_string()));
        header.extend(RowMetrics::NUMERIC.iter().map(|s| s.to_string()));
        header.extend(["ot_mode".to_string(), "ot_converged".to_string()]);
        w.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.method.clone(), r.seed.to_string()];
            rec.extend(keys.iter().map(|k| r.group.get(*k).cloned().unwrap_or_default()));
            rec.extend(
                RowMetrics::NUMERIC
                    .iter()
                    .map(|m| r.metrics.get(m).map(|v| v.to_string()).unwrap_or_default()),
            );
            rec.push(r.metrics.ot_mode.map(|m| m.to_string()).unwrap_or_default());
            rec.push(r.metrics.ot_converged.map(|c| c.to_string()).unwrap_or_default());
            w.write_record(&rec).map_err(csv_err)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::invalid(e.to_string()))?)
            .map_err(|e| Error::invalid(e.to_string()))
    }

    /// Writes `report.json`, `report.csv` and `figures/<name>.{csv,svg}`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let figures = dir.join("figures");
        fs::create_dir_all(&figures).map_err(|e| Error::file(&figures, e))?;
        let put = |path: &Path, bytes: &[u8]| fs::write(path, bytes).map_err(|e| Error::file(path, e));
        put(&dir.join("report.json"), &serde_json::to_vec_pretty(self)?)?;
        put(&dir.join("report.csv"), self.to_csv()?.as_bytes())?;
        for f in &self.figures {
            put(&figures.join(format!("{}.csv", f.name)), figure_csv(f)?.as_bytes())?;
            put(&figures.join(format!("{}.svg", f.name)), figure_svg(f).as_bytes())?;
        }
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(format!("csv: {e}"))
}

pub fn figure_csv(f: &Figure) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["series", &f.x_label, &f.y_label]).map_err(csv_err)?;
    for s in &f.series {
        for (x, y) in &s.points {
            w.write_record([s.name.clone(), x.to_string(), y.to_string()])
                .map_err(csv_err)?;
        }
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::invalid(e.to_string()))?)
        .map_err(|e| Error::invalid(e.to_string()))
}

const PALETTE: [&str; 7] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Static line chart with one polyline per series.
pub fn figure_svg(f: &Figure) -> String {
    let (w, h, pad) = (640.0, 400.0, 60.0);
    let pts = || f.series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts().filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<path d="M{pad} {top} V{bottom} H{right}" stroke="black" fill="none"/>"#,
        top = pad,
        bottom = h - pad,
        right = w - pad
    );
    for (v, anchor, x, y) in [
        (x0, "start", pad, h - pad + 16.0),
        (x1, "end", w - pad, h - pad + 16.0),
    ] {
        let _ = writeln!(out, r#"<text x="{x}" y="{y}" text-anchor="{anchor}">{v:.4}</text>"#);
    }
    for (v, y) in [(y0, h - pad), (y1, pad)] {
        let _ = writeln!(out, r#"<text x="{}" y="{y}" text-anchor="end">{v:.4}</text>"#, pad - 4.0);
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        w / 2.0,
        h - 16.0,
        escape(&f.x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        escape(&f.y_label)
    );
    for (i, s) in f.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for p in &path {
            let (cx, cy) = p.split_once(',').unwrap();
            let _ = writeln!(out, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
        }
        let ly = pad + 16.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{ly}" fill="{color}">{}</text>"#,
            w - pad + 4.0,
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}
