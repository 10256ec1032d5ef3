//! The outer loop: random initialization, surrogate-archive search, selection
//! of surrogate elites for real evaluation, and surrogate retraining. With no
//! surrogate the configured optimizer runs directly on real evaluations.

mod artifacts;

pub use artifacts::{read_metrics_csv, write_metrics_csv, Manifest, RunSummary};

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, Elite};
use crate::error::{Error, Result};
use crate::latent::{DecoderParams, DEFAULT_LATENT_DIM};
use crate::maze::{evaluate, AgentSpec, EvaluationResult, MazeEnv, MazeGenotype, MeasureSet, TILES, TIME_LIMIT};
use crate::qd_opt::{GenotypeSpace, MapElitesParams, Optimizer, OptimizerKind};
use crate::surrogate::{
    encode_tiles, Architecture, Dataset, Normalization, Prediction, Record, SurrogateMode, SurrogateModel, TileGrid,
    TrainConfig, TrainReport,
};

/// How genotypes become mazes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Domain {
    /// One binary gene per interior tile.
    DirectMaze,
    /// Real latent vector through a fixed random threshold decoder.
    LatentMaze { latent_dim: usize, decoder_seed: u64 },
}

impl Domain {
    pub fn space(&self) -> GenotypeSpace {
        match *self {
            Domain::DirectMaze => GenotypeSpace::Binary { len: TILES },
            Domain::LatentMaze { latent_dim, .. } => GenotypeSpace::Continuous { dim: latent_dim },
        }
    }

    pub fn latent() -> Self {
        Domain::LatentMaze {
            latent_dim: DEFAULT_LATENT_DIM,
            decoder_seed: 0,
        }
    }
}

/// Which surrogate elites get a real evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Selector {
    /// One random elite per block of `region` cells.
    Downsample { region: Vec<usize> },
    Random { k: usize },
    All,
}

impl Selector {
    pub fn select<R: Rng + ?Sized>(&self, archive: &Archive, rng: &mut R) -> Result<Vec<Elite>> {
        match self {
            Selector::Downsample { region } => archive.select_downsample(region, rng),
            Selector::Random { k } => Ok(archive.select_random(*k, rng)),
            Selector::All => Ok(archive.select_all()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurrogateChoice {
    TwoStage,
    Direct,
    /// No surrogate: the optimizer is driven by real evaluations.
    None,
}

impl SurrogateChoice {
    pub fn mode(self) -> Option<SurrogateMode> {
        match self {
            SurrogateChoice::TwoStage => Some(SurrogateMode::TwoStage),
            SurrogateChoice::Direct => Some(SurrogateMode::Direct),
            SurrogateChoice::None => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            head_hidden: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DsageConfig {
    /// Total real evaluations.
    pub budget: usize,
    /// Random solutions evaluated before the first outer iteration.
    pub initial_solutions: usize,
    /// Ask/tell rounds per surrogate-archive search.
    pub exploit_iterations: usize,
    /// Optimizer for the surrogate-archive search, or for the whole run when
    /// there is no surrogate.
    pub optimizer: OptimizerKind,
    pub selector: Selector,
    pub surrogate: SurrogateChoice,
    pub domain: Domain,
    pub agent: AgentSpec,
    pub measures: MeasureSet,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    /// Fill the `wall_clock_s` metrics column. Off by default so metrics files
    /// are reproducible byte for byte.
    #[serde(default)]
    pub record_wall_clock: bool,
}

impl Default for DsageConfig {
    fn default() -> Self {
        Self {
            budget: 100_000,
            initial_solutions: 100,
            exploit_iterations: 10_000,
            optimizer: OptimizerKind::MapElites(MapElitesParams::default()),
            selector: Selector::Downsample { region: vec![8, 6] },
            surrogate: SurrogateChoice::TwoStage,
            domain: Domain::DirectMaze,
            agent: AgentSpec::greedy(),
            measures: MeasureSet::WallsPath,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seed: 0,
            record_wall_clock: false,
        }
    }
}

impl DsageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::config("budget", "must be positive"));
        }
        if self.surrogate != SurrogateChoice::None {
            if self.initial_solutions == 0 || self.initial_solutions > self.budget {
                return Err(Error::config("initial_solutions", "must be in 1..=budget"));
            }
            if self.exploit_iterations == 0 {
                return Err(Error::config("exploit_iterations", "must be positive with a surrogate"));
            }
            self.train.validate()?;
            self.architecture(self.surrogate.mode().expect("surrogate present"))
                .validate()?;
        }
        if let Selector::Downsample { region } = &self.selector {
            if region.len() != self.measures.spec().dims() || region.contains(&0) {
                return Err(Error::config("selector.region", "needs one positive extent per measure"));
            }
        }
        if let Domain::LatentMaze { latent_dim: 0, .. } = self.domain {
            return Err(Error::config("domain.latent_dim", "must be positive"));
        }
        self.optimizer.validate(self.domain.space())?;
        self.agent.validate()
    }

    fn architecture(&self, mode: SurrogateMode) -> Architecture {
        Architecture {
            mode,
            channels: self.model.channels,
            head_hidden: self.model.head_hidden,
            measure_dims: self.measures.spec().dims(),
        }
    }
}

/// Decoder for a [`Domain`].
#[derive(Clone, Debug)]
pub enum Decoder {
    Direct,
    Latent(DecoderParams),
}

impl Decoder {
    pub fn new(domain: &Domain) -> Result<Self> {
        match domain {
            Domain::DirectMaze => Ok(Decoder::Direct),
            Domain::LatentMaze {
                latent_dim,
                decoder_seed,
            } => Ok(Decoder::Latent(DecoderParams::from_seed(*decoder_seed, *latent_dim)?)),
        }
    }

    pub fn space(&self) -> GenotypeSpace {
        match self {
            Decoder::Direct => GenotypeSpace::Binary { len: TILES },
            Decoder::Latent(p) => GenotypeSpace::Continuous { dim: p.dim() },
        }
    }

    pub fn decode(&self, genotype: &[f64]) -> Result<MazeGenotype> {
        match self {
            Decoder::Direct => MazeGenotype::from_values(genotype),
            Decoder::Latent(p) => p.decode(genotype),
        }
    }

    pub fn build(&self, genotype: &[f64]) -> Result<MazeEnv> {
        Ok(MazeEnv::build(&self.decode(genotype)?))
    }
}

/// Real evaluations. Evaluation `i` of a run draws from its own random
/// stream, so results do not depend on evaluation order.
#[derive(Clone, Debug)]
pub struct Evaluator {
    pub decoder: Decoder,
    pub agent: AgentSpec,
    pub measures: MeasureSet,
    seed: u64,
}

impl Evaluator {
    pub fn new(config: &DsageConfig) -> Result<Self> {
        Ok(Self {
            decoder: Decoder::new(&config.domain)?,
            agent: config.agent,
            measures: config.measures,
            seed: derive_seed(config.seed, Stream::Evaluation),
        })
    }

    pub fn evaluate(&self, genotype: &[f64], index: u64) -> Result<(MazeEnv, EvaluationResult)> {
        let env = self.decoder.build(genotype)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let result = evaluate(&env, &self.agent, self.measures, &mut rng);
        Ok((env, result))
    }

    pub fn record(&self, genotype: &[f64], index: u64) -> Result<Record> {
        let (env, r) = self.evaluate(genotype, index)?;
        Ok(Record {
            genotype: genotype.to_vec(),
            tiles: encode_tiles(&env).to_vec(),
            objective: r.objective,
            measures: r.measures,
            occupancy: r.occupancy,
        })
    }
}

/// Anything that scores environments in place of the agent.
pub trait Predictor {
    fn predict(&self, envs: &[MazeEnv]) -> Result<Vec<Prediction>>;
}

impl Predictor for SurrogateModel {
    fn predict(&self, envs: &[MazeEnv]) -> Result<Vec<Prediction>> {
        let tiles: Vec<TileGrid> = envs.iter().map(encode_tiles).collect();
        match self.mode() {
            SurrogateMode::TwoStage => {
                let occupancy = self.predict_ancillary(&tiles)?;
                SurrogateModel::predict(self, &tiles, Some(&occupancy))
            }
            SurrogateMode::Direct => SurrogateModel::predict(self, &tiles, None),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub evals: usize,
    pub qd_score: f64,
    pub coverage: f64,
    pub outer_iter: usize,
    pub wall_clock_s: f64,
}

#[derive(Clone, Copy)]
enum Stream {
    Evaluation = 1,
    Initial = 2,
    Model = 3,
    Training = 4,
    Selection = 5,
    Search = 6,
}

fn derive_seed(master: u64, stream: Stream) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream as u64);
    rng.gen()
}

/// Seed of the real-evaluation optimizer when there is no surrogate.
pub fn baseline_seed(master: u64) -> u64 {
    derive_seed(master, Stream::Search)
}

pub struct RunOutput {
    pub archive: Archive,
    pub metrics: Vec<MetricsRow>,
    pub dataset: Dataset,
    pub model: Option<SurrogateModel>,
    pub outer_iterations: usize,
}

/// State of one run. [`run`] drives it; the phases are public so they can be
/// exercised one at a time.
pub struct Dsage {
    config: DsageConfig,
    evaluator: Evaluator,
    archive: Archive,
    dataset: Dataset,
    model: Option<SurrogateModel>,
    evals: usize,
    outer_iter: usize,
    metrics: Vec<MetricsRow>,
    search_rng: ChaCha8Rng,
    selection_rng: ChaCha8Rng,
    training_rng: ChaCha8Rng,
    started: Instant,
}

impl Dsage {
    pub fn new(config: DsageConfig) -> Result<Self> {
        config.validate()?;
        let evaluator = Evaluator::new(&config)?;
        let model = match config.surrogate.mode() {
            Some(mode) => Some(SurrogateModel::new(
                config.architecture(mode),
                normalization(config.measures, config.agent.time_limit),
                derive_seed(config.seed, Stream::Model),
            )?),
            None => None,
        };
        let rng = |s| ChaCha8Rng::seed_from_u64(derive_seed(config.seed, s));
        Ok(Self {
            archive: Archive::new(config.measures.spec()),
            dataset: Dataset::new(),
            model,
            evals: 0,
            outer_iter: 0,
            metrics: Vec::new(),
            search_rng: rng(Stream::Search),
            selection_rng: rng(Stream::Selection),
            training_rng: rng(Stream::Training),
            evaluator,
            started: Instant::now(),
            config,
        })
    }

    pub fn config(&self) -> &DsageConfig {
        &self.config
    }

    pub fn archive(&self) -> &Archive {
        &self.archive
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn model(&self) -> Option<&SurrogateModel> {
        self.model.as_ref()
    }

    pub fn evaluations(&self) -> usize {
        self.evals
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    pub fn evaluator(&self) -> &Evaluator {
        &self.evaluator
    }

    fn remaining(&self) -> usize {
        self.config.budget - self.evals
    }

    /// Real evaluation of each genotype in order, feeding the dataset and the
    /// ground-truth archive. Returns objectives and measures.
    fn evaluate_batch(&mut self, genotypes: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        assert!(genotypes.len() <= self.remaining(), "evaluation budget exceeded");
        let mut objectives = Vec::with_capacity(genotypes.len());
        let mut measures = Vec::with_capacity(genotypes.len());
        for g in genotypes {
            let record = self.evaluator.record(g, self.evals as u64)?;
            self.evals += 1;
            self.archive.add(&record.genotype, record.objective, &record.measures)?;
            objectives.push(record.objective);
            measures.push(record.measures.clone());
            self.dataset.push(record)?;
        }
        Ok((objectives, measures))
    }

    fn log(&mut self) {
        self.metrics.push(MetricsRow {
            evals: self.evals,
            qd_score: self.archive.qd_score(),
            coverage: self.archive.coverage(),
            outer_iter: self.outer_iter,
            wall_clock_s: if self.config.record_wall_clock {
                self.started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
    }

    /// Evaluates `initial_solutions` uniformly random genotypes.
    pub fn initialize(&mut self) -> Result<()> {
        if self.evals != 0 {
            return Err(Error::Contract("initialize on a started run".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, Stream::Initial));
        let space = self.evaluator.decoder.space();
        let genotypes: Vec<Vec<f64>> = (0..self.config.initial_solutions).map(|_| space.random(&mut rng)).collect();
        self.evaluate_batch(&genotypes)?;
        self.log();
        Ok(())
    }

    /// Fills a fresh archive using only `predictor`.
    pub fn model_exploitation(&mut self, predictor: &dyn Predictor) -> Result<Archive> {
        let seed = self.search_rng.gen();
        let mut qd = Optimizer::new(
            &self.config.optimizer,
            Archive::new(self.config.measures.spec()),
            self.evaluator.decoder.space(),
            seed,
        )?;
        for _ in 0..self.config.exploit_iterations {
            let batch = qd.ask()?;
            let envs = batch
                .iter()
                .map(|g| self.evaluator.decoder.build(g))
                .collect::<Result<Vec<_>>>()?;
            let preds = predictor.predict(&envs)?;
            let objectives: Vec<f64> = preds.iter().map(|p| p.objective).collect();
            let measures: Vec<Vec<f64>> = preds.into_iter().map(|p| p.measures).collect();
            qd.tell(&objectives, &measures)?;
        }
        Ok(qd.into_archive())
    }

    /// Evaluates the selected surrogate elites for real, cut to the remaining
    /// budget in selection order. Returns the number evaluated.
    pub fn agent_simulation(&mut self, surrogate_archive: &Archive) -> Result<usize> {
        let mut selected = self.config.selector.select(surrogate_archive, &mut self.selection_rng)?;
        selected.truncate(self.remaining());
        if selected.is_empty() {
            return Err(Error::Contract("selection from the surrogate archive is empty".into()));
        }
        let genotypes: Vec<Vec<f64>> = selected.into_iter().map(|e| e.solution).collect();
        self.evaluate_batch(&genotypes)?;
        self.outer_iter += 1;
        self.log();
        Ok(genotypes.len())
    }

    pub fn model_improvement(&mut self) -> Result<TrainReport> {
        let model = self
            .model
            .as_mut()
            .ok_or_else(|| Error::Contract("no surrogate to train".into()))?;
        model.train(self.dataset.records(), &self.config.train, &mut self.training_rng)
    }

    /// One outer iteration. Training is skipped once the budget is spent
    /// since nothing would use the result.
    pub fn outer_iteration(&mut self) -> Result<usize> {
        let model = self
            .model
            .take()
            .ok_or_else(|| Error::Contract("outer iteration without a surrogate".into()))?;
        let searched = self.model_exploitation(&model);
        self.model = Some(model);
        let n = self.agent_simulation(&searched?)?;
        if self.remaining() > 0 {
            self.model_improvement()?;
        }
        Ok(n)
    }

    fn run_surrogate(&mut self) -> Result<()> {
        self.initialize()?;
        if self.remaining() > 0 {
            self.model_improvement()?;
        }
        while self.remaining() > 0 {
            self.outer_iteration()?;
        }
        Ok(())
    }

    /// The configured optimizer on real evaluations, one log row per batch.
    fn run_direct(&mut self) -> Result<()> {
        let mut qd = Optimizer::new(
            &self.config.optimizer,
            Archive::new(self.config.measures.spec()),
            self.evaluator.decoder.space(),
            baseline_seed(self.config.seed),
        )?;
        while self.remaining() > 0 {
            let mut batch = qd.ask()?;
            if batch.len() > self.remaining() {
                batch.truncate(self.remaining());
                qd.truncate_pending(batch.len())?;
            }
            let (objectives, measures) = self.evaluate_batch(&batch)?;
            qd.tell(&objectives, &measures)?;
            self.log();
        }
        Ok(())
    }

    pub fn finish(self) -> RunOutput {
        RunOutput {
            archive: self.archive,
            metrics: self.metrics,
            dataset: self.dataset,
            model: self.model,
            outer_iterations: self.outer_iter,
        }
    }
}

fn normalization(measures: MeasureSet, time_limit: usize) -> Normalization {
    let spec = measures.spec();
    Normalization {
        lower: spec.lower().to_vec(),
        upper: spec.upper().to_vec(),
        time_limit: time_limit as f64,
    }
}

/// Runs to the evaluation budget.
pub fn run(config: &DsageConfig) -> Result<RunOutput> {
    let mut state = Dsage::new(config.clone())?;
    match config.surrogate {
        SurrogateChoice::None => state.run_direct()?,
        _ => state.run_surrogate()?,
    }
    Ok(state.finish())
}

/// Default time limit, for callers building a surrogate outside a run.
pub fn default_normalization(measures: MeasureSet) -> Normalization {
    normalization(measures, TIME_LIMIT)
}
