use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCorrelation {
    pub task: String,
    pub pearson_x100: f64,
    pub spearman_x100: f64,
}

/// Written next to the CSV as `<name>.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub model_id: String,
    pub pool_k: usize,
    pub flow: bool,
    pub seed: Option<u64>,
    pub truncated_sentences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub rows: Vec<TaskCorrelation>,
    /// `(task, error)` for tasks that could not be scored.
    pub failed: Vec<(String, String)>,
    pub metadata: ReportMetadata,
}

impl CorrelationReport {
    pub fn new(rows: Vec<TaskCorrelation>, failed: Vec<(String, String)>, metadata: ReportMetadata) -> Self {
        CorrelationReport { rows, failed, metadata }
    }

    pub fn is_partial(&self) -> bool {
        !self.failed.is_empty()
    }

    pub fn row(&self, task: &str) -> Option<&TaskCorrelation> {
        self.rows.iter().find(|r| r.task == task)
    }

    /// Unweighted mean over scored tasks, unrounded.
    pub fn average(&self) -> Option<TaskCorrelation> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        Some(TaskCorrelation {
            task: "Avg.".into(),
            pearson_x100: self.rows.iter().map(|r| r.pearson_x100).sum::<f64>() / n,
            spearman_x100: self.rows.iter().map(|r| r.spearman_x100).sum::<f64>() / n,
        })
    }

    pub fn avg_spearman(&self) -> f64 {
        self.average().map_or(f64::NAN, |a| a.spearman_x100)
    }

    pub fn avg_pearson(&self) -> f64 {
        self.average().map_or(f64::NAN, |a| a.pearson_x100)
    }

    /// CSV with a trailing `Avg.` row; values rounded to two decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,pearson_x100,spearman_x100\n");
        for r in self.rows.iter().cloned().chain(self.average()) {
            let _ = writeln!(out, "{},{:.2},{:.2}", r.task, r.pearson_x100, r.spearman_x100);
        }
        out
    }

    /// Writes `path` and a JSON sidecar with the same stem.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_csv())?;
        let sidecar = serde_json::json!({
            "metadata": self.metadata,
            "partial": self.is_partial(),
            "failed": self.failed,
        });
        std::fs::write(
            path.with_extension("json"),
            serde_json::to_string_pretty(&sidecar).expect("metadata serializes"),
        )?;
        Ok(())
    }
}
