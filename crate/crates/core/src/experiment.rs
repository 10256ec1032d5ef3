//! Experiment setups: named conditions and scale profiles, a TOML config
//! format with per-field overrides, multi-trial execution with on-disk
//! artifacts, and mean/standard-error summaries.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::dsage::{
    run, write_metrics_csv, Domain, DsageConfig, Manifest, MetricsRow, ModelConfig, RunSummary, Selector,
    SurrogateChoice,
};
use crate::error::{Error, Result};
use crate::maze::{AgentSpec, MeasureSet};
use crate::qd_opt::{CmaMeParams, MapElitesParams, OptimizerKind};
use crate::surrogate::{save_checkpoint, TrainConfig};

/// The six compared algorithms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    /// Occupancy-assisted surrogate with downsampled selection.
    Dsage,
    /// Occupancy-assisted surrogate, every surrogate elite evaluated.
    OnlyAnc,
    /// Direct surrogate with downsampled selection.
    OnlyDown,
    /// Direct surrogate, every surrogate elite evaluated.
    Basic,
    /// The QD optimizer on real evaluations.
    BaselineQd,
    /// Uniformly random solutions.
    Dr,
}

impl Condition {
    pub const ALL: [Condition; 6] = [
        Condition::Dsage,
        Condition::OnlyAnc,
        Condition::OnlyDown,
        Condition::Basic,
        Condition::BaselineQd,
        Condition::Dr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Dsage => "dsage",
            Condition::OnlyAnc => "only-anc",
            Condition::OnlyDown => "only-down",
            Condition::Basic => "basic",
            Condition::BaselineQd => "baseline-qd",
            Condition::Dr => "dr",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::config("condition", format!("unknown condition `{name}`")))
    }

    pub fn surrogate(self) -> SurrogateChoice {
        match self {
            Condition::Dsage | Condition::OnlyAnc => SurrogateChoice::TwoStage,
            Condition::OnlyDown | Condition::Basic => SurrogateChoice::Direct,
            Condition::BaselineQd | Condition::Dr => SurrogateChoice::None,
        }
    }

    /// Sets the surrogate and selection (or the random-search optimizer) the
    /// condition stands for. A downsampling condition keeps a configured
    /// random-k selector, which is the sampled-selection variant.
    pub fn apply(self, config: &mut DsageConfig) {
        config.surrogate = self.surrogate();
        match self {
            Condition::Dsage | Condition::OnlyDown => {
                if config.selector == Selector::All {
                    config.selector = Selector::Downsample { region: vec![8, 6] };
                }
            }
            Condition::OnlyAnc | Condition::Basic => config.selector = Selector::All,
            Condition::BaselineQd => {}
            Condition::Dr => {
                config.optimizer = OptimizerKind::Random {
                    batch_size: config.optimizer.batch_size(),
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    PaperScale,
    DeskScale,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainKind {
    DirectMaze,
    LatentMaze,
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::PaperScale => "paper_scale",
            Profile::DeskScale => "desk_scale",
        }
    }

    /// Run settings before a condition is applied.
    pub fn config(self, domain: DomainKind, measures: MeasureSet) -> DsageConfig {
        let (domain, optimizer) = match domain {
            DomainKind::DirectMaze => (
                Domain::DirectMaze,
                OptimizerKind::MapElites(MapElitesParams::default()),
            ),
            DomainKind::LatentMaze => (Domain::latent(), OptimizerKind::CmaMe(CmaMeParams::default())),
        };
        let base = DsageConfig {
            domain,
            optimizer,
            measures,
            agent: AgentSpec::greedy(),
            ..DsageConfig::default()
        };
        match self {
            Profile::PaperScale => base,
            // Small batches spread the budget over many outer iterations; the
            // trimmed training keeps a 10k run near 20 minutes on one core.
            Profile::DeskScale => DsageConfig {
                budget: match base.domain {
                    Domain::DirectMaze => 10_000,
                    Domain::LatentMaze { .. } => 5_000,
                },
                optimizer: match base.optimizer {
                    OptimizerKind::MapElites(p) => OptimizerKind::MapElites(MapElitesParams { batch_size: 30, ..p }),
                    OptimizerKind::CmaMe(p) => OptimizerKind::CmaMe(CmaMeParams { emitter_batch: 6, ..p }),
                    other => other,
                },
                exploit_iterations: 1_000,
                model: ModelConfig {
                    channels: 4,
                    head_hidden: 64,
                },
                train: TrainConfig {
                    epochs: 5,
                    batch_size: 16,
                    window: 5_000,
                    ..TrainConfig::default()
                },
                ..base
            },
        }
    }
}

/// Fully resolved experiment: one condition, several seeded trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub condition: Condition,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub jobs: usize,
    /// Run settings with the condition applied; each trial swaps in its seed.
    pub run: DsageConfig,
}

/// On-disk form. Everything is optional; `[run]` overrides individual run
/// fields of the chosen profile.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    profile: Option<Profile>,
    condition: Option<String>,
    domain: Option<DomainKind>,
    measures: Option<String>,
    trials: Option<usize>,
    seed: Option<u64>,
    seeds: Option<Vec<u64>>,
    out: Option<PathBuf>,
    jobs: Option<usize>,
    run: Option<toml::Table>,
}

/// Command-line adjustments applied after the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub trials: Option<usize>,
    pub budget: Option<usize>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
}

pub const DEFAULT_TRIALS: usize = 5;

impl ExperimentConfig {
    pub fn from_toml(text: &str, overrides: &Overrides) -> Result<Self> {
        let file: ExperimentFile = toml::from_str(text)?;
        let profile = file.profile.unwrap_or(Profile::DeskScale);
        let condition = Condition::parse(file.condition.as_deref().unwrap_or("dsage"))?;
        let measures = MeasureSet::parse(file.measures.as_deref().unwrap_or("walls-path"))?;
        let base = profile.config(file.domain.unwrap_or(DomainKind::DirectMaze), measures);
        let mut run = match file.run {
            Some(table) => {
                let mut merged = toml::Table::try_from(&base).map_err(|e| Error::config("run", e.to_string()))?;
                merge(&mut merged, table);
                merged
                    .try_into::<DsageConfig>()
                    .map_err(|e| Error::config("run", e.message().to_string()))?
            }
            None => base,
        };
        if let Some(budget) = overrides.budget {
            run.budget = budget;
        }
        condition.apply(&mut run);
        run.validate()?;

        let trials = overrides.trials.or(file.trials);
        let master = overrides.seed.or(file.seed).unwrap_or(0);
        let seeds = match (file.seeds, trials) {
            (Some(seeds), None) if overrides.seed.is_none() => seeds,
            (Some(seeds), Some(n)) if overrides.seed.is_none() && n <= seeds.len() => seeds[..n].to_vec(),
            (_, n) => trial_seeds(master, n.unwrap_or(DEFAULT_TRIALS)),
        };
        if seeds.is_empty() {
            return Err(Error::config("trials", "must be at least 1"));
        }
        let jobs = overrides.jobs.or(file.jobs).unwrap_or(1);
        if jobs == 0 {
            return Err(Error::config("jobs", "must be at least 1"));
        }
        Ok(Self {
            profile,
            condition,
            seeds,
            out: overrides.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("runs")),
            jobs,
            run,
        })
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?, overrides)
    }

    pub fn trial_config(&self, trial: usize) -> DsageConfig {
        DsageConfig {
            seed: self.seeds[trial],
            ..self.run.clone()
        }
    }

    pub fn trial_dir(&self, trial: usize) -> PathBuf {
        self.out.join(self.condition.name()).join(format!("trial_{trial}"))
    }
}

/// Trial `i` uses `master + i`.
pub fn trial_seeds(master: u64, trials: usize) -> Vec<u64> {
    (0..trials as u64).map(|i| master.wrapping_add(i)).collect()
}

/// Overlays `over` onto `base`. Nested tables merge key by key unless they
/// switch to a different `kind` of thing, which replaces the base entirely.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !switches_kind(b, &o) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

fn switches_kind(base: &toml::Table, over: &toml::Table) -> bool {
    match (base.get("kind"), over.get("kind")) {
        (Some(b), Some(o @ toml::Value::String(_))) => b != o,
        _ => false,
    }
}

#[derive(Clone, Debug)]
pub struct TrialOutcome {
    pub trial: usize,
    pub dir: PathBuf,
    pub result: std::result::Result<RunSummary, String>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const ARCHIVE_FILE: &str = "archive.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MODEL_FILE: &str = "model.json";
pub const DATASET_FILE: &str = "dataset.jsonl";

fn write_artifacts(dir: &Path, config: &DsageConfig) -> Result<RunSummary> {
    let out = run(config)?;
    write_metrics_csv(&out.metrics, BufWriter::new(File::create(dir.join(METRICS_FILE))?))?;
    out.archive.write_csv(BufWriter::new(File::create(dir.join(ARCHIVE_FILE))?))?;
    out.dataset.write_jsonl(File::create(dir.join(DATASET_FILE))?)?;
    if let Some(model) = &out.model {
        save_checkpoint(model, BufWriter::new(File::create(dir.join(MODEL_FILE))?))?;
    }
    Ok(RunSummary::of(&out))
}

/// Runs one trial and writes its artifacts. Failures are recorded in the
/// manifest rather than returned.
pub fn run_trial(exp: &ExperimentConfig, trial: usize) -> Result<TrialOutcome> {
    let dir = exp.trial_dir(trial);
    fs::create_dir_all(&dir)?;
    let config = exp.trial_config(trial);
    let result = write_artifacts(&dir, &config).map_err(|e| e.to_string());
    let manifest = Manifest {
        build: Manifest::build_id(),
        condition: exp.condition.name().to_string(),
        trial,
        seed: config.seed,
        status: if result.is_ok() { "completed" } else { "failed" }.to_string(),
        error: result.as_ref().err().cloned(),
        summary: result.as_ref().ok().cloned(),
        config,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(TrialOutcome { trial, dir, result })
}

/// All trials, `exp.jobs` at a time. Outcomes come back in trial order.
pub fn run_experiment(exp: &ExperimentConfig) -> Result<Vec<TrialOutcome>> {
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..exp.jobs.min(exp.seeds.len()) {
            scope.spawn(|| loop {
                let trial = next.fetch_add(1, Ordering::SeqCst);
                if trial >= exp.seeds.len() {
                    break;
                }
                let outcome = run_trial(exp, trial);
                results.lock().expect("no panics while holding the lock").push((trial, outcome));
            });
        }
    });
    let mut results = results.into_inner().expect("workers finished");
    results.sort_by_key(|(t, _)| *t);
    results.into_iter().map(|(_, r)| r).collect()
}

/// Mean and standard error of the mean; the error needs two or more values.
pub fn mean_se(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

/// First evaluation count whose QD-score reaches `target`.
pub fn evals_to_target(metrics: &[MetricsRow], target: f64) -> Option<usize> {
    metrics.iter().find(|m| m.qd_score >= target).map(|m| m.evals)
}

/// One trial's metrics log with its evaluation budget.
#[derive(Clone, Debug)]
pub struct TrialMetrics {
    pub budget: usize,
    pub rows: Vec<MetricsRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub condition: String,
    pub trials: usize,
    pub qd_score_mean: f64,
    pub qd_score_se: Option<f64>,
    pub coverage_mean: f64,
    pub coverage_se: Option<f64>,
    pub evals_to_target_mean: Option<f64>,
    pub evals_to_target_se: Option<f64>,
    /// Some trial never reached the target and counts as its full budget, so
    /// the mean is a lower bound.
    pub target_missed: bool,
}

pub fn summarize(condition: &str, trials: &[TrialMetrics], target: Option<f64>) -> Result<SummaryRow> {
    let finals = trials
        .iter()
        .map(|t| t.rows.last().ok_or_else(|| Error::InvalidInput(format!("{condition}: empty metrics log"))))
        .collect::<Result<Vec<_>>>()?;
    if finals.is_empty() {
        return Err(Error::InvalidInput(format!("{condition}: no trials")));
    }
    let (qd_score_mean, qd_score_se) = mean_se(&finals.iter().map(|m| m.qd_score).collect::<Vec<_>>());
    let (coverage_mean, coverage_se) = mean_se(&finals.iter().map(|m| m.coverage).collect::<Vec<_>>());
    let (mut evals_to_target_mean, mut evals_to_target_se, mut target_missed) = (None, None, false);
    if let Some(target) = target {
        let evals: Vec<f64> = trials
            .iter()
            .map(|t| {
                evals_to_target(&t.rows, target).unwrap_or_else(|| {
                    target_missed = true;
                    t.budget
                }) as f64
            })
            .collect();
        let (m, se) = mean_se(&evals);
        evals_to_target_mean = Some(m);
        evals_to_target_se = se;
    }
    Ok(SummaryRow {
        condition: condition.to_string(),
        trials: trials.len(),
        qd_score_mean,
        qd_score_se,
        coverage_mean,
        coverage_se,
        evals_to_target_mean,
        evals_to_target_se,
        target_missed,
    })
}
