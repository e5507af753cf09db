use serde::{Deserialize, Serialize};

use super::runlog::RunLog;
use crate::error::{Error, Result};
use crate::graph::SupernetModel;

pub const REPORT_FORMAT: &str = "spidernet-report/1";

/// Final figures of a run: accuracy, timings, size and memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format: String,
    pub run: String,
    pub seed: u64,
    pub test_accuracy: f64,
    /// Start until final training begins.
    pub search_time_seconds: f64,
    pub total_time_seconds: f64,
    pub parameter_count: usize,
    pub peak_memory_bytes: usize,
    pub memory_budget_bytes: usize,
    /// Where the final structure was written, if anywhere.
    pub genotype: Option<String>,
}

pub fn finalize_report(log: &RunLog, model: &SupernetModel, genotype: Option<String>) -> Result<Report> {
    let stats = log
        .final_stats
        .as_ref()
        .ok_or_else(|| Error::Run("run has not finished".into()))?;
    if stats.parameter_count != model.parameter_count() {
        return Err(Error::Run(format!(
            "logged parameter count {} does not match the model's {}",
            stats.parameter_count,
            model.parameter_count()
        )));
    }
    Ok(Report {
        format: REPORT_FORMAT.into(),
        run: log.kind.to_string(),
        seed: log.seed,
        test_accuracy: stats.test_accuracy,
        search_time_seconds: log.timings.search_seconds,
        total_time_seconds: log.timings.total_seconds,
        parameter_count: stats.parameter_count,
        peak_memory_bytes: stats.peak_memory_bytes,
        memory_budget_bytes: log.config.vram_budget,
        genotype,
    })
}
