//! Evaluation reports: full-precision JSON, an aligned plain-text table,
//! and a CSV export of the per-class AP matrix.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Aggregate match counts at the report's F1 operating point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchCounts {
    #[serde(rename = "tp")]
    pub true_positives: u64,
    #[serde(rename = "fp")]
    pub false_positives: u64,
    #[serde(rename = "fn")]
    pub false_negatives: u64,
}

/// One class row of the AP matrix. `ap` is the mean over the IoU grid;
/// `None` marks a class with no ground truth (reported as "undefined",
/// excluded from the mAP mean).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassApRow {
    pub class_id: u32,
    pub name: String,
    pub ap_by_threshold: Vec<Option<f64>>,
    pub ap: Option<f64>,
}

/// Evaluation parameters echoed into every report so the operating point
/// is never ambiguous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfigEcho {
    pub f1_iou_threshold: f64,
    pub confidence_threshold: f64,
    pub ap_interpolation: String,
    pub top_k_per_image: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    pub classes: Vec<ClassApRow>,
    pub map: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: MatchCounts,
    pub config: EvalConfigEcho,
}

impl EvalReport {
    /// Check the report's internal consistency: mAP is the arithmetic mean
    /// of the defined per-class APs, and F1 agrees with P and R.
    pub fn validate(&self) -> Result<()> {
        let defined: Vec<f64> = self.classes.iter().filter_map(|c| c.ap).collect();
        if defined.is_empty() {
            return Err(Error::Domain("report has no class with defined AP".into()));
        }
        let mean = defined.iter().sum::<f64>() / defined.len() as f64;
        if (self.map - mean).abs() > 1e-12 {
            return Err(Error::Domain(format!(
                "stored mAP {} disagrees with per-class mean {mean}",
                self.map
            )));
        }
        let f1 = if self.precision + self.recall > 0.0 {
            2.0 * self.precision * self.recall / (self.precision + self.recall)
        } else {
            0.0
        };
        if (self.f1 - f1).abs() > 1e-12 {
            return Err(Error::Domain(format!(
                "stored F1 {} disagrees with 2PR/(P+R) = {f1}",
                self.f1
            )));
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, self)
            .map_err(|e| Error::parse(path, "serialization", e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let report: EvalReport = serde_json::from_reader(BufReader::new(file)).map_err(|e| {
            Error::parse(
                path,
                format!("line {}, column {}", e.line(), e.column()),
                e.to_string(),
            )
        })?;
        report.validate()?;
        Ok(report)
    }
}

/// Render a metric the way the tables do: four decimals, trailing zeros
/// trimmed, at least one decimal kept (0.489, 0.4029, 1.0).
pub fn format_metric(v: f64) -> String {
    let mut s = format!("{v:.4}");
    while s.ends_with('0') {
        s.pop();
    }
    if s.ends_with('.') {
        s.push('0');
    }
    s
}

fn metric_cell(v: Option<f64>) -> String {
    match v {
        Some(v) => format_metric(v),
        None => "undefined".into(),
    }
}

/// Aligned plain-text rendering of a report.
pub fn render_table(report: &EvalReport) -> String {
    let grid_label = match (report.iou_thresholds.first(), report.iou_thresholds.last()) {
        (Some(a), Some(b)) if report.iou_thresholds.len() > 1 => format!("AP@[{a:.2}:{b:.2}]"),
        (Some(a), _) => format!("AP@{a:.2}"),
        _ => "AP".into(),
    };
    let mut out = String::new();
    out.push_str(&format!("{:<20} {:>14}\n", "class", grid_label));
    for row in &report.classes {
        out.push_str(&format!("{:<20} {:>14}\n", row.name, metric_cell(row.ap)));
    }
    out.push_str(&format!("{:-<35}\n", ""));
    out.push_str(&format!("{:<20} {:>14}\n", "mAP", format_metric(report.map)));
    out.push_str(&format!(
        "{:<20} {:>14}\n",
        "precision",
        format_metric(report.precision)
    ));
    out.push_str(&format!("{:<20} {:>14}\n", "recall", format_metric(report.recall)));
    out.push_str(&format!("{:<20} {:>14}\n", "F1", format_metric(report.f1)));
    out.push_str(&format!(
        "{:<20} {:>14}\n",
        "TP/FP/FN",
        format!(
            "{}/{}/{}",
            report.counts.true_positives,
            report.counts.false_positives,
            report.counts.false_negatives
        )
    ));
    out.push_str(&format!(
        "{:<20} {:>14}\n",
        "F1 operating point",
        format!(
            "IoU {} conf {}",
            format_metric(report.config.f1_iou_threshold),
            format_metric(report.config.confidence_threshold)
        )
    ));
    out
}

/// Leaderboard-style comparison of several stored reports.
pub fn render_comparison(entries: &[(String, EvalReport)]) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<24} {:>9} {:>9}\n", "method", "mAP", "F1"));
    for (name, report) in entries {
        out.push_str(&format!(
            "{:<24} {:>9} {:>9}\n",
            name,
            format_metric(report.map),
            format_metric(report.f1)
        ));
    }
    out
}

/// CSV export of the per-class AP matrix: one row per class, one column
/// per IoU threshold plus the grid mean. Undefined cells stay empty.
pub fn write_csv_matrix(report: &EvalReport, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let mut header = vec!["class".to_string(), "ap_mean".to_string()];
    header.extend(report.iou_thresholds.iter().map(|t| format!("ap@{t:.2}")));
    w.write_record(&header)
        .map_err(|e| Error::parse(path, "csv", e.to_string()))?;
    for row in &report.classes {
        let mut record = vec![row.name.clone()];
        record.push(row.ap.map(|v| v.to_string()).unwrap_or_default());
        for cell in &row.ap_by_threshold {
            record.push(cell.map(|v| v.to_string()).unwrap_or_default());
        }
        w.write_record(&record)
            .map_err(|e| Error::parse(path, "csv", e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixture with uniform per-class AP so mAP comes out at `map` exactly.
    pub(crate) fn fixture(map: f64, p: f64, r: f64) -> EvalReport {
        let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
        let classes = ["Bus", "Bike", "Car", "Pedestrian", "Truck"]
            .iter()
            .enumerate()
            .map(|(i, name)| ClassApRow {
                class_id: i as u32,
                name: name.to_string(),
                ap_by_threshold: vec![Some(map); thresholds.len()],
                ap: Some(map),
            })
            .collect();
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        EvalReport {
            iou_thresholds: thresholds,
            classes,
            map,
            precision: p,
            recall: r,
            f1,
            counts: MatchCounts::default(),
            config: EvalConfigEcho {
                f1_iou_threshold: 0.5,
                confidence_threshold: 0.0,
                ap_interpolation: "101-point".into(),
                top_k_per_image: None,
            },
        }
    }

    #[test]
    fn format_metric_matches_published_style() {
        assert_eq!(format_metric(0.4029), "0.4029");
        assert_eq!(format_metric(0.489), "0.489");
        assert_eq!(format_metric(0.5965), "0.5965");
        assert_eq!(format_metric(1.0), "1.0");
        assert_eq!(format_metric(0.33), "0.33");
        assert_eq!(format_metric(0.0), "0.0");
    }

    #[test]
    fn baseline_row_renders() {
        let entries = vec![
            ("Baseline".to_string(), fixture(0.4029, 0.5, 0.5)),
            ("Our-2".to_string(), fixture(0.489, 0.5, 0.5)),
        ];
        let table = render_comparison(&entries);
        let rows: Vec<Vec<&str>> = table
            .lines()
            .skip(1)
            .map(|l| l.split_whitespace().collect())
            .collect();
        assert_eq!(rows[0][0], "Baseline");
        assert_eq!(rows[0][1], "0.4029");
        assert_eq!(rows[1][0], "Our-2");
        assert_eq!(rows[1][1], "0.489");
    }

    #[test]
    fn f1_row_matches_leaderboard_entry() {
        let report = fixture(0.489, 0.5965, 0.5965);
        assert!((report.f1 - 0.5965).abs() < 1e-12);
        let table = render_table(&report);
        let f1_line = table.lines().find(|l| l.starts_with("F1")).unwrap();
        assert_eq!(f1_line.split_whitespace().last().unwrap(), "0.5965");
    }

    #[test]
    fn validate_catches_inconsistency() {
        let mut report = fixture(0.4, 0.5, 0.5);
        report.validate().unwrap();
        report.map = 0.41;
        assert!(report.validate().is_err());
        let mut report = fixture(0.4, 0.5, 0.5);
        report.f1 = 0.9;
        assert!(report.validate().is_err());
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let report = fixture(0.4029, 0.61, 0.58);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        report.write_json(&path).unwrap();
        let back = EvalReport::read_json(&path).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn csv_matrix_has_grid_columns() {
        let report = fixture(0.4, 0.5, 0.5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("matrix.csv");
        write_csv_matrix(&report, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let header = text.lines().next().unwrap();
        assert!(header.starts_with("class,ap_mean,ap@0.50"));
        assert!(header.ends_with("ap@0.95"));
        assert_eq!(text.lines().count(), 6);
    }
}
