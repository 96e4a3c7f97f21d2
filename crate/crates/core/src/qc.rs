//! Volume-level scoring: aggregate slice embeddings, calibrate a density
//! cutoff on a reference set, emit pass/fail verdicts and evaluate them
//! against labels when those exist.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffnet::ParamStore;
use crate::encoder::{encode_many, Embedding, EncoderConfig, EncoderError};
use crate::flow::{log_density, FlowModel};
use crate::volio::{center_slices, VolError, Volume};

#[derive(Debug, Error)]
pub enum QcError {
    #[error("reference set is empty")]
    EmptyReference,
    #[error("tau must lie in (0, 1), got {0}")]
    TauOutOfRange(f64),
    #[error("record {0} has no label")]
    MissingLabels(String),
    #[error("no records to report")]
    EmptyRecords,
    #[error("reference log-density {0} is not finite")]
    NonFiniteReference(f64),
    #[error(transparent)]
    Volume(#[from] VolError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("serializing metrics: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io failure: {0}")]
    IoFailure(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, QcError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Low,
    Medium,
    High,
}

impl Label {
    /// Medium and high artifact levels count as failures.
    pub fn is_positive(self) -> bool {
        !matches!(self, Label::Low)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Low => "low",
            Label::Medium => "medium",
            Label::High => "high",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcRecord {
    pub volume_id: String,
    pub m: Embedding,
    pub log_density: f64,
    pub verdict: Verdict,
    pub label: Option<Label>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCalibration {
    pub tau: f64,
    pub log_density_cutoff: f64,
    pub reference_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Median,
}

/// Aggregates the embeddings of the `count` central axial slices.
pub fn volume_embedding(
    volume: &Volume,
    params: &ParamStore,
    cfg: &EncoderConfig,
    count: usize,
    aggregation: Aggregation,
) -> Result<Embedding> {
    let slices = center_slices(volume, count, cfg.input_size)?;
    let refs: Vec<_> = slices.iter().collect();
    let embs = encode_many(&refs, params, cfg)?;
    Ok(match aggregation {
        Aggregation::Mean => Embedding::mean(&embs),
        Aggregation::Median => {
            let med = |c: usize| {
                let mut v: Vec<f64> = embs.iter().map(|e| e.0[c]).collect();
                v.sort_by(f64::total_cmp);
                let n = v.len();
                if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
            };
            Embedding([med(0), med(1)])
        }
    })
}

/// Linear interpolation between order statistics at position (n - 1) * q.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn calibrate_threshold(reference: &[f64], tau: f64) -> Result<ThresholdCalibration> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(QcError::TauOutOfRange(tau));
    }
    if reference.is_empty() {
        return Err(QcError::EmptyReference);
    }
    if let Some(&bad) = reference.iter().find(|v| !v.is_finite()) {
        return Err(QcError::NonFiniteReference(bad));
    }
    let mut sorted = reference.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(ThresholdCalibration {
        tau,
        log_density_cutoff: quantile(&sorted, tau),
        reference_count: reference.len(),
    })
}

/// Fails strictly below the cutoff; a tie passes.
pub fn verdict_for(log_density: f64, calibration: &ThresholdCalibration) -> Verdict {
    if log_density < calibration.log_density_cutoff {
        Verdict::Fail
    } else {
        Verdict::Pass
    }
}

pub fn classify(inputs: &[(String, Embedding)], flow: &FlowModel, calibration: &ThresholdCalibration) -> Vec<QcRecord> {
    inputs
        .iter()
        .map(|(id, m)| {
            let ld = log_density(flow, m);
            QcRecord {
                volume_id: id.clone(),
                m: *m,
                log_density: ld,
                verdict: verdict_for(ld, calibration),
                label: None,
            }
        })
        .collect()
}

/// Confusion counts with "fail" as the positive prediction. Rates are
/// absent when their denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Contingency {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Contingency {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn sensitivity(&self) -> Option<f64> {
        let pos = self.tp + self.fn_;
        (pos > 0).then(|| self.tp as f64 / pos as f64)
    }

    pub fn specificity(&self) -> Option<f64> {
        let neg = self.tn + self.fp;
        (neg > 0).then(|| self.tn as f64 / neg as f64)
    }
}

pub fn contingency(records: &[QcRecord]) -> Result<Contingency> {
    let mut t = Contingency::default();
    for r in records {
        let label = r.label.ok_or_else(|| QcError::MissingLabels(r.volume_id.clone()))?;
        match (label.is_positive(), r.verdict) {
            (true, Verdict::Fail) => t.tp += 1,
            (true, Verdict::Pass) => t.fn_ += 1,
            (false, Verdict::Fail) => t.fp += 1,
            (false, Verdict::Pass) => t.tn += 1,
        }
    }
    Ok(t)
}

/// The metrics.json document. Counts and rates are null when records are
/// unlabeled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub tp: Option<usize>,
    pub fp: Option<usize>,
    pub tn: Option<usize>,
    #[serde(rename = "fn")]
    pub fn_: Option<usize>,
    pub tau: f64,
    pub cutoff_log_density: f64,
}

impl MetricsReport {
    pub fn new(table: Option<&Contingency>, calibration: &ThresholdCalibration) -> Self {
        Self {
            sensitivity: table.and_then(Contingency::sensitivity),
            specificity: table.and_then(Contingency::specificity),
            tp: table.map(|t| t.tp),
            fp: table.map(|t| t.fp),
            tn: table.map(|t| t.tn),
            fn_: table.map(|t| t.fn_),
            tau: calibration.tau,
            cutoff_log_density: calibration.log_density_cutoff,
        }
    }
}

/// Axis-aligned plotting window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Bounds {
    /// Box around the points, padded by `pad` of the larger span.
    pub fn around(points: &[Embedding], pad: f64) -> Self {
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in points {
            for c in 0..2 {
                min[c] = min[c].min(p.0[c]);
                max[c] = max[c].max(p.0[c]);
            }
        }
        let span = (max[0] - min[0]).max(max[1] - min[1]).max(1e-6);
        let margin = pad * span;
        Self {
            min: [min[0] - margin, min[1] - margin],
            max: [max[0] + margin, max[1] + margin],
        }
    }
}

/// Iso-line segments of `field` at `level` by marching squares on a
/// `cells` x `cells` grid. Each crossing is refined by bisection along its
/// grid edge until the field is within `1e-9` of `level`.
pub fn iso_segments(field: impl Fn(f64, f64) -> f64, level: f64, bounds: &Bounds, cells: usize) -> Vec<[[f64; 2]; 2]> {
    let n = cells + 1;
    let (dx, dy) = ((bounds.max[0] - bounds.min[0]) / cells as f64, (bounds.max[1] - bounds.min[1]) / cells as f64);
    let coord = |i: usize, j: usize| [bounds.min[0] + i as f64 * dx, bounds.min[1] + j as f64 * dy];
    let mut values = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            let [x, y] = coord(i, j);
            values[j * n + i] = field(x, y) - level;
        }
    }
    let refine = |a: [f64; 2], va: f64, b: [f64; 2]| -> [f64; 2] {
        let (mut lo, mut hi, mut vlo) = (a, b, va);
        let mut mid = a;
        for _ in 0..80 {
            mid = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
            let vm = field(mid[0], mid[1]) - level;
            if vm.abs() < 1e-9 {
                break;
            }
            if (vm < 0.0) == (vlo < 0.0) {
                lo = mid;
                vlo = vm;
            } else {
                hi = mid;
            }
        }
        mid
    };

    let mut segments = Vec::new();
    for j in 0..cells {
        for i in 0..cells {
            // Corners counter-clockwise from the lower left.
            let idx = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
            let v: Vec<f64> = idx.iter().map(|&(a, b)| values[b * n + a]).collect();
            let mut crossings = Vec::with_capacity(4);
            for e in 0..4 {
                let (p, q) = (e, (e + 1) % 4);
                if (v[p] < 0.0) != (v[q] < 0.0) {
                    let (a, b) = (coord(idx[p].0, idx[p].1), coord(idx[q].0, idx[q].1));
                    crossings.push(refine(a, v[p], b));
                }
            }
            match crossings.len() {
                2 => segments.push([crossings[0], crossings[1]]),
                4 => {
                    // Saddle: resolve with the cell-center sign.
                    let c = coord(i, j);
                    let center = field(c[0] + dx / 2.0, c[1] + dy / 2.0) - level;
                    if (center < 0.0) == (v[0] < 0.0) {
                        segments.push([crossings[0], crossings[3]]);
                        segments.push([crossings[1], crossings[2]]);
                    } else {
                        segments.push([crossings[0], crossings[1]]);
                        segments.push([crossings[2], crossings[3]]);
                    }
                }
                _ => {}
            }
        }
    }
    segments
}

/// Iso-line of the flow's log-density at the calibrated cutoff.
pub fn density_contour(flow: &FlowModel, calibration: &ThresholdCalibration, bounds: &Bounds, cells: usize) -> Vec<[[f64; 2]; 2]> {
    iso_segments(|x, y| log_density(flow, &Embedding([x, y])), calibration.log_density_cutoff, bounds, cells)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn records_csv(records: &[QcRecord]) -> String {
    let mut out = String::from("volume_id,m1,m2,log_density,verdict,label\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            csv_field(&r.volume_id),
            r.m.0[0],
            r.m.0[1],
            r.log_density,
            r.verdict.as_str(),
            r.label.map(Label::as_str).unwrap_or("")
        );
    }
    out
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn scatter_svg(records: &[QcRecord], contour: &[[[f64; 2]; 2]], bounds: &Bounds) -> String {
    const SIZE: f64 = 480.0;
    const MARGIN: f64 = 40.0;
    let sx = |x: f64| MARGIN + (x - bounds.min[0]) / (bounds.max[0] - bounds.min[0]) * SIZE;
    let sy = |y: f64| MARGIN + SIZE - (y - bounds.min[1]) / (bounds.max[1] - bounds.min[1]) * SIZE;
    let full = SIZE + 2.0 * MARGIN;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{full}" height="{full}" viewBox="0 0 {full} {full}">"#
    );
    let _ = writeln!(svg, r#"<rect x="{MARGIN}" y="{MARGIN}" width="{SIZE}" height="{SIZE}" fill="white" stroke="black"/>"#);
    if !contour.is_empty() {
        let mut d = String::new();
        for [a, b] in contour {
            let _ = write!(d, "M{:.2} {:.2}L{:.2} {:.2}", sx(a[0]), sy(a[1]), sx(b[0]), sy(b[1]));
        }
        let _ = writeln!(svg, r#"<path d="{d}" fill="none" stroke="gray" stroke-width="1.5" stroke-dasharray="6 4"/>"#);
    }
    for r in records {
        let fill = match r.verdict {
            Verdict::Pass => "#3b75af",
            Verdict::Fail => "#d62728",
        };
        let stroke = match r.label {
            Some(l) if l.is_positive() => "black",
            _ => "none",
        };
        let label = r.label.map(Label::as_str).unwrap_or("unlabeled");
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{fill}" stroke="{stroke}"><title>{} ({}, {label})</title></circle>"#,
            sx(r.m.0[0]),
            sy(r.m.0[1]),
            xml_escape(&r.volume_id),
            r.verdict.as_str()
        );
    }
    let _ = writeln!(svg, r#"<text x="{MARGIN}" y="{}" font-size="12">m1</text>"#, full - 10.0);
    let _ = writeln!(svg, r#"<text x="8" y="{MARGIN}" font-size="12">m2</text>"#);
    svg.push_str("</svg>\n");
    svg
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportPaths {
    pub records: PathBuf,
    pub metrics: PathBuf,
    pub scatter: PathBuf,
}

/// Writes records.csv, metrics.json and scatter.svg under `out_dir`.
/// Metrics are only computed when every record carries a label.
pub fn emit_report(
    records: &[QcRecord],
    calibration: &ThresholdCalibration,
    flow: &FlowModel,
    out_dir: impl AsRef<Path>,
) -> Result<ReportPaths> {
    if records.is_empty() {
        return Err(QcError::EmptyRecords);
    }
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let table = if records.iter().all(|r| r.label.is_some()) { Some(contingency(records)?) } else { None };
    let metrics = MetricsReport::new(table.as_ref(), calibration);
    let points: Vec<Embedding> = records.iter().map(|r| r.m).collect();
    let bounds = Bounds::around(&points, 0.25);
    let contour = density_contour(flow, calibration, &bounds, 120);

    let paths = ReportPaths {
        records: out_dir.join("records.csv"),
        metrics: out_dir.join("metrics.json"),
        scatter: out_dir.join("scatter.svg"),
    };
    fs::write(&paths.records, records_csv(records))?;
    fs::write(&paths.metrics, serde_json::to_string_pretty(&metrics)?)?;
    fs::write(&paths.scatter, scatter_svg(records, &contour, &bounds))?;
    Ok(paths)
}
