use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use dsage_core::dsage::{read_metrics_csv, Manifest};
use dsage_core::experiment::{SummaryRow, TrialMetrics, MANIFEST_FILE, METRICS_FILE};

use crate::CliError;

/// Completed trials of one condition.
#[derive(Clone, Debug)]
pub struct ConditionRuns {
    pub condition: String,
    pub trials: Vec<TrialMetrics>,
}

fn trial_dirs(dir: &Path) -> Vec<PathBuf> {
    let Ok(entries) = fs::read_dir(dir) else { return Vec::new() };
    let mut dirs: Vec<(usize, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let idx = name.strip_prefix("trial_")?.parse().ok()?;
            Some((idx, e.path()))
        })
        .collect();
    dirs.sort();
    dirs.into_iter().map(|(_, p)| p).collect()
}

fn read_trial(dir: &Path) -> Result<Option<(Option<Manifest>, TrialMetrics)>, CliError> {
    let manifest: Option<Manifest> = match File::open(dir.join(MANIFEST_FILE)) {
        Ok(f) => Some(
            serde_json::from_reader(BufReader::new(f))
                .map_err(|e| CliError::Runtime(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?,
        ),
        Err(_) => None,
    };
    if manifest.as_ref().is_some_and(|m| m.status != "completed") {
        return Ok(None);
    }
    let Ok(file) = File::open(dir.join(METRICS_FILE)) else { return Ok(None) };
    let rows = read_metrics_csv(BufReader::new(file))
        .map_err(|e| CliError::Runtime(format!("{}: {e}", dir.join(METRICS_FILE).display())))?;
    if rows.is_empty() {
        return Ok(None);
    }
    let budget = manifest
        .as_ref()
        .map_or_else(|| rows.last().map_or(0, |r| r.evals), |m| m.config.budget);
    Ok(Some((manifest, TrialMetrics { budget, rows })))
}

fn load_condition(dir: &Path) -> Result<Option<ConditionRuns>, CliError> {
    let mut condition = None;
    let mut trials = Vec::new();
    for t in trial_dirs(dir) {
        match read_trial(&t)? {
            Some((manifest, metrics)) => {
                if condition.is_none() {
                    condition = manifest.map(|m| m.condition);
                }
                trials.push(metrics);
            }
            None => eprintln!("skipping {}: no completed metrics", t.display()),
        }
    }
    if trials.is_empty() {
        return Ok(None);
    }
    let name = condition.unwrap_or_else(|| dir.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()));
    Ok(Some(ConditionRuns { condition: name, trials }))
}

/// Each path is either a condition directory holding `trial_*` directories
/// or an output directory holding condition directories.
pub fn load_conditions(paths: &[PathBuf]) -> Result<Vec<ConditionRuns>, CliError> {
    let mut out = Vec::new();
    for path in paths {
        if !path.is_dir() {
            return Err(CliError::Runtime(format!("{} is not a directory", path.display())));
        }
        if !trial_dirs(path).is_empty() {
            out.extend(load_condition(path)?);
            continue;
        }
        let mut subdirs: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        subdirs.sort();
        for sub in subdirs {
            out.extend(load_condition(&sub)?);
        }
    }
    if out.is_empty() {
        return Err(CliError::Runtime("no completed trial metrics found".into()));
    }
    Ok(out)
}

fn pm(mean: f64, se: Option<f64>, digits: usize) -> String {
    match se {
        Some(se) => format!("{mean:.digits$} ± {se:.digits$}"),
        None => format!("{mean:.digits$}"),
    }
}

pub fn format_table(rows: &[SummaryRow], target: Option<f64>) -> String {
    let mut lines = vec![format!(
        "{:<12} {:>6}  {:<22} {:<18} {}",
        "condition",
        "trials",
        "qd_score",
        "coverage",
        target.map_or_else(String::new, |t| format!("evals_to_{t}"))
    )];
    for r in rows {
        let evals = match r.evals_to_target_mean {
            Some(m) => {
                let prefix = if r.target_missed { ">= " } else { "" };
                format!("{prefix}{}", pm(m, r.evals_to_target_se, 1))
            }
            None => String::new(),
        };
        lines.push(format!(
            "{:<12} {:>6}  {:<22} {:<18} {}",
            r.condition,
            r.trials,
            pm(r.qd_score_mean, r.qd_score_se, 2),
            pm(r.coverage_mean, r.coverage_se, 4),
            evals
        ));
    }
    lines.iter().map(|l| l.trim_end()).collect::<Vec<_>>().join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use dsage_core::experiment::summarize;
    use dsage_core::dsage::MetricsRow;

    #[test]
    fn table_flags_missed_targets() {
        let t = |qd: f64| TrialMetrics {
            budget: 100,
            rows: vec![MetricsRow {
                evals: 100,
                qd_score: qd,
                coverage: 0.5,
                outer_iter: 0,
                wall_clock_s: 0.0,
            }],
        };
        let row = summarize("dr", &[t(10.0), t(14.0)], Some(50.0)).unwrap();
        let table = format_table(&[row], Some(50.0));
        assert!(table.contains("12.00 ± 2.00"), "{table}");
        assert!(table.contains(">= 100.0 ± 0.0"), "{table}");
    }
}
