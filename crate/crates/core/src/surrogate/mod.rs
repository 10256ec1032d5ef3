//! Deep surrogate of agent behavior: an occupancy predictor followed by an
//! objective/measure head, plus its direct variant without the occupancy
//! stage.

mod dataset;
mod model;

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{encode_tiles, Dataset, Record, TileGrid, EMPTY, GOAL, START, TILE_KINDS, WALL};
pub use model::{
    Architecture, LossParts, Normalization, ParamKind, Prediction, SurrogateMode, SurrogateModel, TrainConfig,
    TrainReport,
};

use crate::archive::MeasureSpec;
use crate::error::{Error, Result};

/// Which occupancy the head sees when scoring a two-stage model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OccupancySource {
    Predicted,
    Truth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaeReport {
    pub objective: f64,
    pub measures: Vec<f64>,
    pub records: usize,
}

fn predictions(model: &SurrogateModel, records: &[Record], source: OccupancySource) -> Result<Vec<Prediction>> {
    if records.is_empty() {
        return Err(Error::Contract("cannot score a surrogate on an empty dataset".into()));
    }
    let tiles: Vec<TileGrid> = records.iter().map(Record::tile_grid).collect();
    match (model.mode(), source) {
        (SurrogateMode::TwoStage, OccupancySource::Truth) => {
            let occ: Vec<Vec<f64>> = records.iter().map(|r| r.occupancy.clone()).collect();
            model.predict(&tiles, Some(&occ))
        }
        _ => model.predict_end_to_end(&tiles),
    }
}

/// Mean absolute error per output in natural units.
pub fn evaluate_mae(model: &SurrogateModel, records: &[Record], source: OccupancySource) -> Result<MaeReport> {
    let preds = predictions(model, records, source)?;
    Ok(mae_of(&preds, records))
}

pub fn mae_of(preds: &[Prediction], records: &[Record]) -> MaeReport {
    let n = records.len() as f64;
    let m = records.first().map_or(0, |r| r.measures.len());
    let mut measures = vec![0.0; m];
    let mut objective = 0.0;
    for (p, r) in preds.iter().zip(records) {
        objective += (p.objective - r.objective).abs() / n;
        for j in 0..m {
            measures[j] += (p.measures[j] - r.measures[j]).abs() / n;
        }
    }
    MaeReport {
        objective,
        measures,
        records: records.len(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellAccuracy {
    /// Fraction of predictions landing in the true cell.
    pub exact: f64,
    /// Fraction landing in the same downsampling region as the true cell.
    pub neighborhood: f64,
    pub mean_manhattan: f64,
}

pub fn cell_accuracy(model: &SurrogateModel, records: &[Record], spec: &MeasureSpec, region: &[usize]) -> Result<CellAccuracy> {
    let preds = predictions(model, records, OccupancySource::Predicted)?;
    cell_accuracy_of(&preds, records, spec, region)
}

pub fn cell_accuracy_of(preds: &[Prediction], records: &[Record], spec: &MeasureSpec, region: &[usize]) -> Result<CellAccuracy> {
    if region.len() != spec.dims() || region.contains(&0) {
        return Err(Error::InvalidInput("region shape must match the archive and be positive".into()));
    }
    let n = records.len() as f64;
    let (mut exact, mut near, mut dist) = (0.0, 0.0, 0.0);
    for (p, r) in preds.iter().zip(records) {
        let a = spec.discretize(&p.measures)?;
        let b = spec.discretize(&r.measures)?;
        if a == b {
            exact += 1.0;
        }
        if a.iter().zip(&b).zip(region).all(|((x, y), s)| x / s == y / s) {
            near += 1.0;
        }
        dist += a.iter().zip(&b).map(|(x, y)| x.abs_diff(*y) as f64).sum::<f64>();
    }
    Ok(CellAccuracy {
        exact: exact / n,
        neighborhood: near / n,
        mean_manhattan: dist / n,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Replace the zero-initialized output layers first, so that every
    /// upstream gradient is non-trivial.
    pub randomize_output_layers: bool,
    pub loss: TrainConfig,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            samples: 240,
            step: 1e-4,
            tolerance: 1e-4,
            seed: 0,
            randomize_output_layers: true,
            loss: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Parameters whose perturbation moved some leaky ReLU input across 0.
    pub excluded: usize,
    pub per_kind: BTreeMap<&'static str, usize>,
    pub passed: bool,
}

/// Compares backpropagated gradients of the full training loss against
/// central differences on a random subsample of parameters, with batch norm
/// in training mode. Needs at least two records.
pub fn gradient_check(model: &SurrogateModel, records: &[Record], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if records.len() < 2 {
        return Err(Error::InvalidInput("gradient check needs a batch of at least 2".into()));
    }
    let mut work = model.clone();
    if cfg.randomize_output_layers {
        work.randomize_output_layers(cfg.seed ^ 0x5eed);
    }
    let refs: Vec<&Record> = records.iter().collect();
    let batch = work.batch(&refs)?;
    work.zero_grad();
    work.loss_pass(&batch, &cfg.loss, true);
    let grads: Vec<(ParamKind, Vec<f64>)> = work.params_mut().into_iter().map(|(k, p)| (k, p.grad.clone())).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_tensor = cfg.samples.div_ceil(grads.len()).max(1);
    let mut picks: Vec<(usize, usize)> = Vec::new();
    for (t, (_, g)) in grads.iter().enumerate() {
        for i in index::sample(&mut rng, g.len(), per_tensor.min(g.len())) {
            picks.push((t, i));
        }
    }
    // Top up from the largest tensor when small tensors fall short.
    let largest = (0..grads.len()).max_by_key(|&t| grads[t].1.len()).unwrap_or(0);
    let mut extra = index::sample(&mut rng, grads[largest].1.len(), grads[largest].1.len()).into_iter();
    while picks.len() < cfg.samples {
        match extra.next() {
            Some(i) if !picks.contains(&(largest, i)) => picks.push((largest, i)),
            Some(_) => {}
            None => break,
        }
    }

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        excluded: 0,
        per_kind: BTreeMap::new(),
        passed: true,
    };
    let signs = |pre: &[f64]| pre.iter().map(|v| *v > 0.0).collect::<Vec<bool>>();
    for (t, i) in picks {
        let original = work.params_mut()[t].1.value[i];
        let eval = |v: f64, work: &mut SurrogateModel| {
            work.params_mut()[t].1.value[i] = v;
            let (loss, acts) = work.loss_pass(&batch, &cfg.loss, false);
            (loss.total, signs(&acts.0))
        };
        let (up, s_up) = eval(original + cfg.step, &mut work);
        let (down, s_down) = eval(original - cfg.step, &mut work);
        work.params_mut()[t].1.value[i] = original;
        if s_up != s_down {
            report.excluded += 1;
            continue;
        }
        let fd = (up - down) / (2.0 * cfg.step);
        let bp = grads[t].1[i];
        let rel = (bp - fd).abs() / bp.abs().max(fd.abs()).max(1e-8);
        report.max_relative_error = report.max_relative_error.max(rel);
        report.checked += 1;
        *report.per_kind.entry(grads[t].0.name()).or_default() += 1;
    }
    report.passed = report.max_relative_error < cfg.tolerance && report.checked > 0;
    Ok(report)
}

const CHECKPOINT_FORMAT: &str = "dsage-surrogate";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint<M> {
    format: String,
    version: u32,
    model: M,
}

/// JSON checkpoint with architecture, normalization, parameters and Adam
/// state. Floats round-trip exactly.
pub fn save_checkpoint<W: Write>(model: &SurrogateModel, writer: W) -> Result<()> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        model,
    };
    serde_json::to_writer(writer, &ck)?;
    Ok(())
}

pub fn load_checkpoint<R: Read>(reader: R) -> Result<SurrogateModel> {
    let ck: Checkpoint<SurrogateModel> = serde_json::from_reader(reader)?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(Error::InvalidInput(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
    }
    let mut model = ck.model;
    model.architecture().validate()?;
    model.zero_grad();
    Ok(model)
}
