use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{DsageConfig, MetricsRow, RunOutput};
use crate::error::Result;

/// Writes `evals,qd_score,coverage,outer_iter,wall_clock_s`.
pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(reader: R) -> Result<Vec<MetricsRow>> {
    let mut input = csv::Reader::from_reader(reader);
    let rows = input.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>()?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub evaluations: usize,
    pub qd_score: f64,
    pub coverage: f64,
    pub elites: usize,
    pub outer_iterations: usize,
}

impl RunSummary {
    pub fn of(output: &RunOutput) -> Self {
        Self {
            evaluations: output.metrics.last().map_or(0, |m| m.evals),
            qd_score: output.archive.qd_score(),
            coverage: output.archive.coverage(),
            elites: output.archive.len(),
            outer_iterations: output.outer_iterations,
        }
    }
}

/// Everything needed to reproduce and audit one trial.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub build: String,
    pub condition: String,
    pub trial: usize,
    pub seed: u64,
    pub config: DsageConfig,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<RunSummary>,
}

impl Manifest {
    pub fn build_id() -> String {
        let profile = if cfg!(debug_assertions) { "debug" } else { "release" };
        format!("{} {} ({profile})", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
    }
}
