//! Append-only metrics reports and the pruning-sweep table.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::attacks::SweepRow;
use crate::config::{SeedBundle, Task};
use crate::error::{Error, Result};

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// `clean`, `watermarked`, `attacked:<attack label>` or `verify`.
    pub stage: String,
    pub model: String,
    /// `accuracy` (percent) or `rmse`.
    pub metric_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub main_metric: Option<f64>,
    /// Percent of held-out samples flagged as watermarked.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wm_detection_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<bool>,
    pub config_hash: String,
    pub seeds: SeedBundle,
    /// Seconds since the Unix epoch; ignored by [`MetricsReport::eq_ignoring_time`].
    pub timestamp: u64,
}

impl ReportRow {
    pub fn new(
        stage: impl Into<String>,
        model: &str,
        task: Task,
        config_hash: &str,
        seeds: SeedBundle,
    ) -> Self {
        ReportRow {
            stage: stage.into(),
            model: model.to_string(),
            metric_name: metric_name(task).to_string(),
            main_metric: None,
            wm_detection_rate: None,
            decision: None,
            config_hash: config_hash.to_string(),
            seeds,
            timestamp: now(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.wm_detection_rate {
            if !(0.0..=100.0).contains(&r) {
                return Err(Error::Data(format!("detection rate {r} outside [0, 100]")));
            }
        }
        Ok(())
    }
}

pub fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Classification => "accuracy",
        Task::Regression => "rmse",
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format_version: u32,
    pub rows: Vec<ReportRow>,
}

impl Default for MetricsReport {
    fn default() -> Self {
        MetricsReport {
            format_version: REPORT_FORMAT_VERSION,
            rows: Vec::new(),
        }
    }
}

impl MetricsReport {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: MetricsReport =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if report.format_version != REPORT_FORMAT_VERSION {
            return Err(Error::Compat(format!(
                "report format_version {} (supported: {REPORT_FORMAT_VERSION})",
                report.format_version
            )));
        }
        Ok(report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Adds a row to the report at `path`, creating the file if needed.
    pub fn append(path: &Path, row: ReportRow) -> Result<()> {
        row.validate()?;
        let mut report = if path.exists() {
            Self::load(path)?
        } else {
            Self::default()
        };
        report.rows.push(row);
        report.save(path)
    }

    pub fn eq_ignoring_time(&self, other: &Self) -> bool {
        let strip = |r: &Self| {
            let mut r = r.clone();
            r.rows.iter_mut().for_each(|row| row.timestamp = 0);
            r
        };
        strip(self) == strip(other)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<30} {:<5} {:>14} {:>10} {:>9}",
            "stage", "model", "main", "wm rate %", "decision"
        );
        for r in &self.rows {
            let main = r
                .main_metric
                .map(|m| format!("{m:.4} {}", if r.metric_name == "rmse" { "rmse" } else { "%" }))
                .unwrap_or_else(|| "-".into());
            let rate = r
                .wm_detection_rate
                .map(|v| format!("{v:.2}"))
                .unwrap_or_else(|| "-".into());
            let dec = r.decision.map(|d| d.to_string()).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:<30} {:<5} {:>14} {:>10} {:>9}",
                r.stage, r.model, main, rate, dec
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub format_version: u32,
    pub metric_name: String,
    pub config_hash: String,
    pub seeds: SeedBundle,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>6} {:>10} {:>12} {:>10} {:>12}",
            "ratio", "mlp loss", "mlp metric", "kan loss", "kan metric"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>5.0}% {:>10.4} {:>12.2} {:>10.4} {:>12.2}",
                100.0 * r.ratio,
                r.mlp.loss,
                r.mlp.metric,
                r.kan.loss,
                r.kan.metric
            );
        }
        s
    }
}
