//! Ask/tell quality-diversity optimizers over an owned [`Archive`].
//!
//! Three variants share one state machine: MAP-Elites (uniform parent
//! selection plus k-position resets), CMA-ME with improvement emitters, and
//! plain random search (domain randomization). Every `ask` must be followed by
//! exactly one `tell` carrying one evaluation per asked solution.

mod cma_es;

pub use cma_es::{cma_es_sphere_check, CmaEs, SphereReport};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::archive::{AddOutcome, AddStatus, Archive};
use crate::error::{Error, Result};

/// Shape of the search space a genotype lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GenotypeSpace {
    /// Values in `{0, 1}`.
    Binary { len: usize },
    /// Unbounded reals; random draws are standard normal.
    Continuous { dim: usize },
}

impl GenotypeSpace {
    pub fn len(&self) -> usize {
        match *self {
            GenotypeSpace::Binary { len } => len,
            GenotypeSpace::Continuous { dim } => dim,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn random_value<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            GenotypeSpace::Binary { .. } => f64::from(rng.gen::<bool>() as u8),
            GenotypeSpace::Continuous { .. } => rng.sample(StandardNormal),
        }
    }

    pub fn random<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.len()).map(|_| self.random_value(rng)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapElitesParams {
    pub batch_size: usize,
    /// Positions reset per offspring.
    pub mutations: usize,
    /// Solutions generated uniformly at random before mutation starts.
    pub initial_random: usize,
}

impl Default for MapElitesParams {
    fn default() -> Self {
        Self {
            batch_size: 150,
            mutations: 10,
            initial_random: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CmaMeParams {
    pub emitters: usize,
    pub emitter_batch: usize,
    /// Initial step size of every emitter, also used on restart.
    pub sigma0: f64,
}

impl Default for CmaMeParams {
    fn default() -> Self {
        Self {
            emitters: 5,
            emitter_batch: 30,
            sigma0: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerKind {
    MapElites(MapElitesParams),
    CmaMe(CmaMeParams),
    Random { batch_size: usize },
}

impl OptimizerKind {
    pub fn batch_size(&self) -> usize {
        match self {
            OptimizerKind::MapElites(p) => p.batch_size,
            OptimizerKind::CmaMe(p) => p.emitters * p.emitter_batch,
            OptimizerKind::Random { batch_size } => *batch_size,
        }
    }

    pub fn validate(&self, space: GenotypeSpace) -> Result<()> {
        match self {
            OptimizerKind::MapElites(p) => {
                if p.batch_size == 0 {
                    return Err(Error::config("map_elites.batch_size", "must be positive"));
                }
                if p.mutations == 0 || p.mutations > space.len() {
                    return Err(Error::config("map_elites.mutations", "must be in 1..=genotype length"));
                }
            }
            OptimizerKind::CmaMe(p) => {
                if p.emitters == 0 {
                    return Err(Error::config("cma_me.emitters", "must be positive"));
                }
                if p.emitter_batch < 2 {
                    return Err(Error::config("cma_me.emitter_batch", "must be at least 2"));
                }
                if !(p.sigma0 > 0.0) {
                    return Err(Error::config("cma_me.sigma0", "must be positive"));
                }
                if matches!(space, GenotypeSpace::Binary { .. }) {
                    return Err(Error::config("optimizer", "CMA-ME needs a continuous genotype space"));
                }
            }
            OptimizerKind::Random { batch_size } => {
                if *batch_size == 0 {
                    return Err(Error::config("batch_size", "must be positive"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct MapElitesState {
    params: MapElitesParams,
    generated: usize,
}

#[derive(Clone, Debug)]
struct Emitter {
    es: CmaEs,
    restarts: usize,
}

#[derive(Clone, Debug)]
struct EmitterPool {
    params: CmaMeParams,
    emitters: Vec<Emitter>,
    adapt_sigma: bool,
}

#[derive(Clone, Debug)]
enum Variant {
    MapElites(MapElitesState),
    CmaMe(EmitterPool),
    Random { batch_size: usize },
}

/// Per-solution archive outcomes of one `tell`, in ask order.
#[derive(Clone, Debug, Default)]
pub struct TellReport {
    pub outcomes: Vec<AddOutcome>,
    /// Emitters restarted because their batch did not improve the archive.
    pub restarts: usize,
}

impl TellReport {
    pub fn improved(&self) -> usize {
        self.outcomes.iter().filter(|o| o.status.improved_archive()).count()
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    archive: Archive,
    space: GenotypeSpace,
    rng: ChaCha8Rng,
    variant: Variant,
    pending: Option<Vec<Vec<f64>>>,
    /// Solutions kept from the pending batch after a budget truncation.
    keep: usize,
}

impl Optimizer {
    pub fn new(kind: &OptimizerKind, archive: Archive, space: GenotypeSpace, seed: u64) -> Result<Self> {
        kind.validate(space)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let variant = match kind {
            OptimizerKind::MapElites(p) => Variant::MapElites(MapElitesState {
                params: p.clone(),
                generated: 0,
            }),
            OptimizerKind::CmaMe(p) => {
                let emitters = (0..p.emitters)
                    .map(|_| Emitter {
                        es: fresh_es(&archive, space, p, &mut rng),
                        restarts: 0,
                    })
                    .collect();
                Variant::CmaMe(EmitterPool {
                    params: p.clone(),
                    emitters,
                    adapt_sigma: true,
                })
            }
            OptimizerKind::Random { batch_size } => Variant::Random {
                batch_size: *batch_size,
            },
        };
        Ok(Self {
            archive,
            space,
            rng,
            variant,
            pending: None,
            keep: 0,
        })
    }

    /// Disables step-size adaptation in every CMA-ME emitter; no-op otherwise.
    pub fn disable_sigma_adaptation(&mut self) {
        if let Variant::CmaMe(pool) = &mut self.variant {
            pool.adapt_sigma = false;
            for e in &mut pool.emitters {
                e.es = e.es.clone().with_sigma_adaptation(false);
            }
        }
    }

    pub fn archive(&self) -> &Archive {
        &self.archive
    }

    pub fn into_archive(self) -> Archive {
        self.archive
    }

    pub fn space(&self) -> GenotypeSpace {
        self.space
    }

    pub fn batch_size(&self) -> usize {
        match &self.variant {
            Variant::MapElites(s) => s.params.batch_size,
            Variant::CmaMe(p) => p.params.emitters * p.params.emitter_batch,
            Variant::Random { batch_size } => *batch_size,
        }
    }

    /// Total emitter restarts so far (CMA-ME only).
    pub fn restarts(&self) -> usize {
        match &self.variant {
            Variant::CmaMe(p) => p.emitters.iter().map(|e| e.restarts).sum(),
            _ => 0,
        }
    }

    /// Current emitter step sizes (CMA-ME only).
    pub fn emitter_sigmas(&self) -> Vec<f64> {
        match &self.variant {
            Variant::CmaMe(p) => p.emitters.iter().map(|e| e.es.sigma()).collect(),
            _ => Vec::new(),
        }
    }

    pub fn ask(&mut self) -> Result<Vec<Vec<f64>>> {
        if self.pending.is_some() {
            return Err(Error::Contract("ask called twice without an intervening tell".into()));
        }
        let batch = match &mut self.variant {
            Variant::MapElites(state) => {
                let mut out = Vec::with_capacity(state.params.batch_size);
                for _ in 0..state.params.batch_size {
                    let parent = if state.generated < state.params.initial_random {
                        None
                    } else {
                        self.archive.sample_elite(&mut self.rng)
                    };
                    let child = match parent {
                        None => self.space.random(&mut self.rng),
                        Some(elite) => {
                            let mut child = elite.solution.clone();
                            for pos in index::sample(&mut self.rng, child.len(), state.params.mutations) {
                                child[pos] = self.space.random_value(&mut self.rng);
                            }
                            child
                        }
                    };
                    state.generated += 1;
                    out.push(child);
                }
                out
            }
            Variant::CmaMe(pool) => {
                let mut out = Vec::with_capacity(pool.params.emitters * pool.params.emitter_batch);
                for e in &pool.emitters {
                    out.extend(e.es.sample(&mut self.rng));
                }
                out
            }
            Variant::Random { batch_size } => (0..*batch_size).map(|_| self.space.random(&mut self.rng)).collect(),
        };
        self.keep = batch.len();
        self.pending = Some(batch.clone());
        Ok(batch)
    }

    /// Shrinks the pending batch to its first `n` solutions, for a caller that
    /// can only afford to evaluate part of it. CMA-ME emitters whose share is
    /// cut short skip their distribution update on the following `tell`.
    pub fn truncate_pending(&mut self, n: usize) -> Result<()> {
        match &self.pending {
            None => Err(Error::Contract("truncate_pending without a pending ask".into())),
            Some(batch) if n > batch.len() => Err(Error::InvalidInput(format!(
                "cannot keep {n} of {} pending solutions",
                batch.len()
            ))),
            Some(_) => {
                self.keep = n;
                Ok(())
            }
        }
    }

    pub fn tell(&mut self, objectives: &[f64], measures: &[Vec<f64>]) -> Result<TellReport> {
        if self.pending.is_none() {
            return Err(Error::Contract("tell called without a preceding ask".into()));
        }
        if objectives.len() != self.keep || measures.len() != self.keep {
            return Err(Error::DimensionMismatch {
                expected: self.keep,
                got: objectives.len().max(measures.len()),
            });
        }
        if objectives.iter().any(|f| !f.is_finite()) {
            return Err(Error::NonFinite("objective"));
        }
        for m in measures {
            self.archive.spec().check_measures(m)?;
        }
        let batch = self.pending.take().expect("checked above");
        let mut outcomes = Vec::with_capacity(self.keep);
        for ((solution, &f), m) in batch.iter().zip(objectives).zip(measures) {
            outcomes.push(self.archive.add(solution, f, m)?);
        }

        let mut restarts = 0;
        if let Variant::CmaMe(pool) = &mut self.variant {
            let lambda = pool.params.emitter_batch;
            for (i, emitter) in pool.emitters.iter_mut().enumerate() {
                let range = i * lambda..(i + 1) * lambda;
                if range.end > outcomes.len() {
                    continue;
                }
                let ranked = rank_by_improvement(&batch[range.clone()], &outcomes[range.clone()], &objectives[range.clone()]);
                let improved = outcomes[range].iter().any(|o| o.status.improved_archive());
                if improved {
                    emitter.es.update(&ranked);
                }
                if !improved || emitter.es.is_degenerate() {
                    let es = fresh_es(&self.archive, self.space, &pool.params, &mut self.rng);
                    emitter.es = es.with_sigma_adaptation(pool.adapt_sigma);
                    emitter.restarts += 1;
                    restarts += 1;
                }
            }
        }
        Ok(TellReport { outcomes, restarts })
    }
}

fn fresh_es(archive: &Archive, space: GenotypeSpace, params: &CmaMeParams, rng: &mut ChaCha8Rng) -> CmaEs {
    let mean = match archive.sample_elite(rng) {
        Some(e) => e.solution.clone(),
        None => vec![0.0; space.len()],
    };
    CmaEs::new(mean, params.sigma0, params.emitter_batch)
}

/// Improving solutions first (by gain, then objective), then the rest by
/// objective. The sort is stable so equal keys keep ask order.
fn rank_by_improvement(solutions: &[Vec<f64>], outcomes: &[AddOutcome], objectives: &[f64]) -> Vec<Vec<f64>> {
    let mut order: Vec<usize> = (0..solutions.len()).collect();
    order.sort_by(|&a, &b| {
        let (oa, ob) = (&outcomes[a], &outcomes[b]);
        let rank = |o: &AddOutcome| u8::from(o.status == AddStatus::Rejected);
        rank(oa)
            .cmp(&rank(ob))
            .then_with(|| {
                if oa.status.improved_archive() {
                    ob.improvement.total_cmp(&oa.improvement)
                } else {
                    std::cmp::Ordering::Equal
                }
            })
            .then_with(|| objectives[b].total_cmp(&objectives[a]))
    });
    order.into_iter().map(|i| solutions[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::MeasureSpec;

    fn spec() -> MeasureSpec {
        MeasureSpec::new(&[(0.0, 10.0), (0.0, 10.0)], &[10, 10]).unwrap()
    }

    fn binary_me(seed: u64) -> Optimizer {
        let kind = OptimizerKind::MapElites(MapElitesParams {
            batch_size: 20,
            mutations: 3,
            initial_random: 20,
        });
        Optimizer::new(&kind, Archive::new(spec()), GenotypeSpace::Binary { len: 16 }, seed).unwrap()
    }

    fn ones_measures(batch: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let f = batch.iter().map(|s| s.iter().sum::<f64>() / 16.0).collect();
        let m = batch
            .iter()
            .map(|s| vec![s[..8].iter().sum::<f64>() * 1.2, s[8..].iter().sum::<f64>() * 1.2])
            .collect();
        (f, m)
    }

    #[test]
    fn defaults_follow_reported_settings() {
        let me = MapElitesParams::default();
        assert_eq!((me.batch_size, me.mutations, me.initial_random), (150, 10, 100));
        let cma = CmaMeParams::default();
        assert_eq!((cma.emitters, cma.emitter_batch, cma.sigma0), (5, 30, 0.2));
        assert_eq!(OptimizerKind::CmaMe(cma).batch_size(), 150);
    }

    #[test]
    fn ask_tell_alternation_is_enforced() {
        let mut opt = binary_me(1);
        assert!(opt.tell(&[], &[]).is_err());
        let batch = opt.ask().unwrap();
        assert_eq!(batch.len(), 20);
        assert!(matches!(opt.ask(), Err(Error::Contract(_))));
        assert!(opt.tell(&[1.0], &[vec![0.0, 0.0]]).is_err());
        let (f, m) = ones_measures(&batch);
        let report = opt.tell(&f, &m).unwrap();
        assert_eq!(report.outcomes.len(), 20);
        assert!(opt.ask().is_ok());
    }

    #[test]
    fn first_tell_on_empty_archive_inserts_everything_distinct() {
        let mut opt = binary_me(2);
        let batch = opt.ask().unwrap();
        let f = vec![1.0; batch.len()];
        let m: Vec<Vec<f64>> = (0..batch.len()).map(|i| vec![(i % 10) as f64, (i / 10) as f64]).collect();
        let report = opt.tell(&f, &m).unwrap();
        assert!(report.outcomes.iter().all(|o| o.status == AddStatus::Inserted));
    }

    #[test]
    fn map_elites_mutation_changes_at_most_k_positions() {
        let mut opt = binary_me(3);
        let batch = opt.ask().unwrap();
        let (f, m) = ones_measures(&batch);
        opt.tell(&f, &m).unwrap();
        let parents: Vec<Vec<f64>> = opt.archive().iter().map(|e| e.solution.clone()).collect();
        for _ in 0..5 {
            let children = opt.ask().unwrap();
            for child in &children {
                assert!(child.iter().all(|&v| v == 0.0 || v == 1.0));
                let closest = parents
                    .iter()
                    .map(|p| p.iter().zip(child).filter(|(a, b)| a != b).count())
                    .min()
                    .unwrap();
                assert!(closest <= 3);
            }
            // Tell with measures that never improve so parents stay fixed.
            let f = vec![-1.0; children.len()];
            let m = vec![vec![0.0, 0.0]; children.len()];
            opt.tell(&f, &m).unwrap();
        }
    }

    #[test]
    fn map_elites_falls_back_to_random_on_empty_archive() {
        let kind = OptimizerKind::MapElites(MapElitesParams {
            batch_size: 5,
            mutations: 2,
            initial_random: 0,
        });
        let mut opt = Optimizer::new(&kind, Archive::new(spec()), GenotypeSpace::Binary { len: 16 }, 0).unwrap();
        assert_eq!(opt.ask().unwrap().len(), 5);
    }

    #[test]
    fn random_search_is_reproducible_and_balanced() {
        let kind = OptimizerKind::Random { batch_size: 64 };
        let space = GenotypeSpace::Binary { len: 256 };
        let mut a = Optimizer::new(&kind, Archive::new(spec()), space, 42).unwrap();
        let mut b = Optimizer::new(&kind, Archive::new(spec()), space, 42).unwrap();
        let xa = a.ask().unwrap();
        assert_eq!(xa, b.ask().unwrap());
        let walls: f64 = xa.iter().flatten().sum();
        let frac = walls / (64.0 * 256.0);
        assert!((frac - 0.5).abs() < 0.02, "wall fraction {frac}");
    }

    fn sphere_like(batch: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let f = batch.iter().map(|x| (-x.iter().map(|v| v * v).sum::<f64>()).exp()).collect();
        let m = batch.iter().map(|x| vec![5.0 + 2.0 * x[0], 5.0 + 2.0 * x[1]]).collect();
        (f, m)
    }

    #[test]
    fn cma_me_restarts_when_nothing_improves() {
        let kind = OptimizerKind::CmaMe(CmaMeParams {
            emitters: 2,
            emitter_batch: 10,
            sigma0: 0.2,
        });
        let mut opt = Optimizer::new(&kind, Archive::new(spec()), GenotypeSpace::Continuous { dim: 4 }, 7).unwrap();
        let batch = opt.ask().unwrap();
        let (f, m) = sphere_like(&batch);
        let report = opt.tell(&f, &m).unwrap();
        assert_eq!(report.restarts, 0);

        let batch = opt.ask().unwrap();
        let f = vec![-10.0; batch.len()];
        let m = vec![vec![0.0, 0.0]; batch.len()];
        // Cell (0,0) is empty before this tell, so only the first solution inserts:
        // emitter 0 improved, emitter 1 did not.
        let report = opt.tell(&f, &m).unwrap();
        assert_eq!(report.restarts, 1);
        assert_eq!(opt.restarts(), 1);
    }

    #[test]
    fn cma_me_archive_score_monotone_without_sigma_adaptation() {
        let kind = OptimizerKind::CmaMe(CmaMeParams {
            emitters: 1,
            emitter_batch: 12,
            sigma0: 0.3,
        });
        let mut opt = Optimizer::new(&kind, Archive::new(spec()), GenotypeSpace::Continuous { dim: 3 }, 11).unwrap();
        opt.disable_sigma_adaptation();
        let mut last = 0.0;
        for _ in 0..60 {
            let batch = opt.ask().unwrap();
            let (f, m) = sphere_like(&batch);
            opt.tell(&f, &m).unwrap();
            let s = opt.archive().qd_score();
            assert!(s >= last);
            last = s;
            assert!(opt.emitter_sigmas().iter().all(|&s| s == 0.3));
        }
        assert!(opt.archive().len() > 10);
    }

    #[test]
    fn cma_me_is_seed_reproducible() {
        let kind = OptimizerKind::CmaMe(CmaMeParams::default());
        let run = |seed| {
            let mut opt = Optimizer::new(&kind, Archive::new(spec()), GenotypeSpace::Continuous { dim: 8 }, seed).unwrap();
            for _ in 0..10 {
                let batch = opt.ask().unwrap();
                let (f, m) = sphere_like(&batch);
                opt.tell(&f, &m).unwrap();
            }
            opt.into_archive().select_all()
        };
        assert_eq!(run(5), run(5));
    }

    #[test]
    fn cma_me_rejects_binary_space() {
        let kind = OptimizerKind::CmaMe(CmaMeParams::default());
        assert!(Optimizer::new(&kind, Archive::new(spec()), GenotypeSpace::Binary { len: 4 }, 0).is_err());
    }

    #[test]
    fn truncated_batches_only_add_the_kept_prefix() {
        let mut opt = binary_me(4);
        let batch = opt.ask().unwrap();
        opt.truncate_pending(3).unwrap();
        let (f, m) = ones_measures(&batch[..3]);
        let report = opt.tell(&f, &m).unwrap();
        assert_eq!(report.outcomes.len(), 3);
        assert!(opt.truncate_pending(1).is_err());
    }

    #[test]
    fn ranking_puts_improvers_first() {
        let sols: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64]).collect();
        let outcomes = [
            AddOutcome { status: AddStatus::Rejected, improvement: -0.1 },
            AddOutcome { status: AddStatus::Improved, improvement: 0.2 },
            AddOutcome { status: AddStatus::Inserted, improvement: 0.9 },
            AddOutcome { status: AddStatus::Rejected, improvement: -0.5 },
        ];
        let objectives = [0.3, 0.4, 0.9, 0.8];
        let ranked = rank_by_improvement(&sols, &outcomes, &objectives);
        assert_eq!(ranked, vec![vec![2.0], vec![1.0], vec![3.0], vec![0.0]]);
    }
}
