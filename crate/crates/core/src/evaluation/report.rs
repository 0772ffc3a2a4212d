use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::plot::{render_line_plot, Curve};
use super::{DigitalReport, PhotoReport, SweepReport};
use crate::error::{Error, Result};
use crate::trainer::TrainHistory;

/// Column order of `report.csv`.
pub const CSV_HEADER: &str = "condition,n_all,n_undetected,rs_percent";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: String,
    pub n_all: usize,
    pub n_undetected: usize,
    pub rs_percent: f64,
}

/// Everything a run produced. `rows` feed the CSV; the rest is carried
/// verbatim into `report.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub title: String,
    pub rows: Vec<ReportRow>,
    pub digital: Option<DigitalReport>,
    pub photo: Option<PhotoReport>,
    pub sweep: Option<SweepReport>,
    pub history: Option<TrainHistory>,
    pub curves: Vec<Curve>,
}

impl Report {
    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    /// Loss curves from the training history, if any.
    fn history_curve(&self) -> Option<Curve> {
        let h = self.history.as_ref().filter(|h| !h.records.is_empty())?;
        Some(Curve {
            name: "loss_vs_epoch".into(),
            x: h.records.iter().map(|r| r.epoch as f64).collect(),
            series: vec![
                (
                    "total".into(),
                    h.records.iter().map(|r| r.loss.total).collect(),
                ),
                (
                    "detection".into(),
                    h.records.iter().map(|r| r.loss.detection).collect(),
                ),
            ],
        })
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes `report.csv`, `report.json`, `sweep.csv` for sweeps and one PNG
/// per curve, plus a loss curve when a training history is present.
/// Returns the written paths.
pub fn emit_report(report: &Report, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();

    let mut csv = format!("{CSV_HEADER}\n");
    for r in &report.rows {
        csv += &format!(
            "{},{},{},{}\n",
            csv_field(&r.condition),
            r.n_all,
            r.n_undetected,
            r.rs_percent
        );
    }
    let p = dir.join("report.csv");
    std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    written.push(p);

    let p = dir.join("report.json");
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::json(&p, e))?;
    std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    written.push(p);

    if let Some(sw) = &report.sweep {
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("name,color,shape,mean_rs,min_rs,max_rs,detected_as,error\n");
        for r in &sw.rows {
            let hist: Vec<String> = r
                .class_histogram
                .iter()
                .map(|(k, v)| format!("{k}:{v}"))
                .collect();
            out += &format!(
                "{},{},{},{},{},{},{},{}\n",
                csv_field(&r.name),
                csv_field(&r.color_tag),
                csv_field(&r.shape_tag),
                fmt(r.mean),
                fmt(r.min),
                fmt(r.max),
                hist.join(" "),
                csv_field(r.error.as_deref().unwrap_or(""))
            );
        }
        let p = dir.join("sweep.csv");
        std::fs::write(&p, out).map_err(|e| Error::io(&p, e))?;
        written.push(p);
    }

    for curve in report.curves.iter().cloned().chain(report.history_curve()) {
        let p = dir.join(format!("{}.png", curve.name));
        render_line_plot(&curve, &p)?;
        written.push(p);
    }
    Ok(written)
}
