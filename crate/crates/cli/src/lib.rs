//! The `dsage` command line: run experiments, summarize them, and export
//! heatmaps, surrogate reports and individual mazes.

pub mod heatmap;
mod summary;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use thiserror::Error;

use dsage_core::dsage::{Decoder, Domain, Manifest};
use dsage_core::experiment::{run_experiment, ExperimentConfig, Overrides, MANIFEST_FILE};
use dsage_core::maze::{evaluate, optimal_agent_policy, AgentSpec, MazeEnv, MazeGenotype, MeasureSet};
use dsage_core::surrogate::{cell_accuracy, evaluate_mae, load_checkpoint, Dataset, OccupancySource};
use dsage_core::Archive;

pub use summary::{load_conditions, ConditionRuns};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<dsage_core::Error> for CliError {
    fn from(e: dsage_core::Error) -> Self {
        match e {
            dsage_core::Error::Config { .. } | dsage_core::Error::Toml(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn runtime(context: impl std::fmt::Display) -> impl FnOnce(dsage_core::Error) -> CliError {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

#[derive(Debug, Parser)]
#[command(name = "dsage", version, about = "Surrogate-assisted quality-diversity maze generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every trial of one experiment config.
    Run(RunArgs),
    /// Mean and standard error of final QD-score, coverage and evaluations to a target.
    Summarize(SummarizeArgs),
    /// Render an archive CSV as a PPM image plus a JSON sidecar.
    Heatmap(HeatmapArgs),
    /// Score a surrogate checkpoint on recorded evaluations.
    EvalSurrogate(EvalSurrogateArgs),
    /// Print a maze with its measures and the optimal agent's actions.
    ShowMaze(ShowMazeArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub budget: Option<usize>,
    /// Master seed; trial i uses seed + i.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SummarizeArgs {
    /// Output directories, condition directories, or a mix.
    #[arg(required = true)]
    pub dirs: Vec<PathBuf>,
    #[arg(long)]
    pub target: Option<f64>,
    /// Where to write the CSV table.
    #[arg(long, default_value = "summary.csv")]
    pub csv: PathBuf,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    pub archive: PathBuf,
    pub output: PathBuf,
    /// Archive layout; read from a manifest next to the CSV when omitted.
    #[arg(long)]
    pub measures: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalSurrogateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset JSONL files, concatenated in order.
    #[arg(required = true)]
    pub datasets: Vec<PathBuf>,
    #[arg(long, default_value = "walls-path")]
    pub measures: String,
    /// Block shape for the same-region accuracy, e.g. `8,6`.
    #[arg(long, default_value = "8,6", value_delimiter = ',')]
    pub region: Vec<usize>,
    /// Score two-stage heads on recorded occupancy instead of predicted.
    #[arg(long)]
    pub true_occupancy: bool,
    #[arg(long, default_value = "surrogate_report.csv")]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct ShowMazeArgs {
    /// JSON array of genotype values, or an 18-line text maze.
    #[arg(long, conflicts_with_all = ["archive", "cell"])]
    pub genotype: Option<PathBuf>,
    #[arg(long, requires = "cell")]
    pub archive: Option<PathBuf>,
    /// Archive cell, e.g. `12,40`.
    #[arg(long, value_delimiter = ',')]
    pub cell: Option<Vec<usize>>,
    /// Genotype encoding; read from a manifest next to the archive when omitted.
    #[arg(long)]
    pub domain: Option<String>,
    #[arg(long)]
    pub measures: Option<String>,
}

/// Parses `args` (program name first) and runs the command. Help and
/// version requests print and succeed.
pub fn main_with<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            write!(out, "{e}")?;
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    execute(cli.command, out)
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Run(a) => cmd_run(&a, out),
        Command::Summarize(a) => cmd_summarize(&a, out),
        Command::Heatmap(a) => cmd_heatmap(&a, out),
        Command::EvalSurrogate(a) => cmd_eval_surrogate(&a, out),
        Command::ShowMaze(a) => cmd_show_maze(&a, out),
    }
}

pub fn cmd_run(args: &RunArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let overrides = Overrides {
        trials: args.trials,
        budget: args.budget,
        seed: args.seed,
        jobs: args.jobs,
        out: args.out.clone(),
    };
    let text = fs::read_to_string(&args.config)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", args.config.display())))?;
    let exp = ExperimentConfig::from_toml(&text, &overrides)?;
    let outcomes = run_experiment(&exp)?;
    let mut failed = 0;
    for o in &outcomes {
        match &o.result {
            Ok(s) => writeln!(
                out,
                "{} trial {}: qd_score {:.2} coverage {:.4} evals {} ({})",
                exp.condition.name(),
                o.trial,
                s.qd_score,
                s.coverage,
                s.evaluations,
                o.dir.display()
            )?,
            Err(e) => {
                failed += 1;
                writeln!(out, "{} trial {}: FAILED: {e}", exp.condition.name(), o.trial)?;
            }
        }
    }
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} of {} trials failed", outcomes.len())));
    }
    Ok(())
}

pub fn cmd_summarize(args: &SummarizeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let groups = load_conditions(&args.dirs)?;
    let rows = groups
        .iter()
        .map(|g| dsage_core::experiment::summarize(&g.condition, &g.trials, args.target))
        .collect::<dsage_core::Result<Vec<_>>>()?;
    writeln!(out, "{}", summary::format_table(&rows, args.target))?;
    let mut csv = csv::Writer::from_path(&args.csv).map_err(|e| CliError::Runtime(e.to_string()))?;
    for row in &rows {
        csv.serialize(row).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    csv.flush()?;
    Ok(())
}

/// The manifest in the same directory as `path`, when there is one.
fn sibling_manifest(path: &Path) -> Option<Manifest> {
    let file = File::open(path.parent()?.join(MANIFEST_FILE)).ok()?;
    serde_json::from_reader(BufReader::new(file)).ok()
}

fn measure_set(name: Option<&str>, manifest: Option<&Manifest>) -> Result<MeasureSet, CliError> {
    match (name, manifest) {
        (Some(n), _) => Ok(MeasureSet::parse(n)?),
        (None, Some(m)) => Ok(m.config.measures),
        (None, None) => Ok(MeasureSet::WallsPath),
    }
}

fn read_archive(path: &Path, measures: MeasureSet) -> Result<Archive, CliError> {
    let file = File::open(path).map_err(|e| CliError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    Archive::read_csv(BufReader::new(file), measures.spec()).map_err(runtime(path.display()))
}

pub fn cmd_heatmap(args: &HeatmapArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let manifest = sibling_manifest(&args.archive);
    let measures = measure_set(args.measures.as_deref(), manifest.as_ref())?;
    let archive = read_archive(&args.archive, measures)?;
    let (pixels, meta) = heatmap::render(&archive)?;
    heatmap::write_ppm(BufWriter::new(File::create(&args.output)?), meta.width, meta.height, &pixels)?;
    let sidecar = args.output.with_extension("json");
    fs::write(
        &sidecar,
        serde_json::to_string_pretty(&meta).map_err(|e| CliError::Runtime(e.to_string()))?,
    )?;
    writeln!(
        out,
        "wrote {} ({}x{}, {} elites) and {}",
        args.output.display(),
        meta.width,
        meta.height,
        meta.elites,
        sidecar.display()
    )?;
    Ok(())
}

pub fn cmd_eval_surrogate(args: &EvalSurrogateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let model = load_checkpoint(BufReader::new(File::open(&args.checkpoint)?)).map_err(runtime(args.checkpoint.display()))?;
    let measures = MeasureSet::parse(&args.measures)?;
    let spec = measures.spec();
    let mut data = Dataset::new();
    for path in &args.datasets {
        let part = Dataset::read_jsonl(File::open(path)?).map_err(runtime(path.display()))?;
        data.append(&part).map_err(runtime(path.display()))?;
    }
    if data.is_empty() {
        return Err(CliError::Runtime("the datasets hold no records".into()));
    }
    let dims = model.architecture().measure_dims;
    if data.measure_dims() != Some(dims) || dims != spec.dims() {
        return Err(CliError::Runtime(format!(
            "checkpoint predicts {dims} measures, the data has {:?} and `{}` has {}",
            data.measure_dims().unwrap_or(0),
            measures.name(),
            spec.dims()
        )));
    }
    let norm = model.normalization();
    if norm.lower != spec.lower() || norm.upper != spec.upper() {
        return Err(CliError::Runtime(format!(
            "checkpoint measure ranges do not match `{}`",
            measures.name()
        )));
    }
    let source = if args.true_occupancy {
        OccupancySource::Truth
    } else {
        OccupancySource::Predicted
    };
    let mae = evaluate_mae(&model, data.records(), source)?;
    let acc = cell_accuracy(&model, data.records(), &spec, &args.region)?;

    let labels = measures.labels();
    let mut header = vec!["records".to_string(), "objective_mae".to_string()];
    header.extend(labels.iter().map(|l| format!("{l}_mae")));
    header.extend(["cell_exact", "cell_same_region", "cell_mean_manhattan"].map(String::from));
    let mut values = vec![mae.records.to_string(), mae.objective.to_string()];
    values.extend(mae.measures.iter().map(f64::to_string));
    values.extend([acc.exact, acc.neighborhood, acc.mean_manhattan].map(|v| v.to_string()));

    for (h, v) in header.iter().zip(&values) {
        writeln!(out, "{h:<20} {v}")?;
    }
    let mut csv = csv::Writer::from_path(&args.report).map_err(|e| CliError::Runtime(e.to_string()))?;
    csv.write_record(&header).map_err(|e| CliError::Runtime(e.to_string()))?;
    csv.write_record(&values).map_err(|e| CliError::Runtime(e.to_string()))?;
    csv.flush()?;
    Ok(())
}

fn parse_domain(name: &str) -> Result<Domain, CliError> {
    match name {
        "direct-maze" => Ok(Domain::DirectMaze),
        "latent-maze" => Ok(Domain::latent()),
        other => Err(CliError::Usage(format!("unknown domain `{other}`"))),
    }
}

pub fn cmd_show_maze(args: &ShowMazeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let manifest = args.archive.as_deref().and_then(sibling_manifest);
    let measures = measure_set(args.measures.as_deref(), manifest.as_ref())?;
    let domain = match (&args.domain, &manifest) {
        (Some(d), _) => parse_domain(d)?,
        (None, Some(m)) => m.config.domain.clone(),
        (None, None) => Domain::DirectMaze,
    };
    let decoder = Decoder::new(&domain)?;

    let (genotype, stored) = match (&args.genotype, &args.archive, &args.cell) {
        (Some(path), _, _) => {
            let text = fs::read_to_string(path)?;
            if text.trim_start().starts_with('[') {
                let values: Vec<f64> = serde_json::from_str(&text).map_err(|e| CliError::Runtime(e.to_string()))?;
                (decoder.decode(&values)?, None)
            } else {
                (MazeGenotype::from_text(&text)?, None)
            }
        }
        (None, Some(path), Some(cell)) => {
            let archive = read_archive(path, measures)?;
            let elite = archive
                .get(cell)
                .ok_or_else(|| CliError::Runtime(format!("cell {cell:?} is empty")))?;
            (decoder.decode(&elite.solution)?, Some((elite.objective, elite.measures.clone())))
        }
        _ => return Err(CliError::Usage("give --genotype, or --archive with --cell".into())),
    };

    let env = MazeEnv::build(&genotype);
    write!(out, "{}", env.render())?;
    let Some(actions) = optimal_agent_policy(&env) else {
        writeln!(out, "unsolvable")?;
        return Ok(());
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let result = evaluate(&env, &AgentSpec::optimal(), measures, &mut rng);
    let labels = measures.labels();
    writeln!(out, "objective: {}", result.objective)?;
    for (l, v) in labels.iter().zip(&result.measures) {
        writeln!(out, "{l}: {v}")?;
    }
    if let Some((objective, m)) = stored {
        let parts: Vec<String> = labels.iter().zip(&m).map(|(l, v)| format!("{l} {v}")).collect();
        writeln!(out, "stored: objective {objective}, {}", parts.join(", "))?;
    }
    let trace: String = actions.iter().map(|a| a.symbol()).collect();
    writeln!(out, "actions ({}): {trace}", actions.len())?;
    Ok(())
}
