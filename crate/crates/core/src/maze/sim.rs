use rand::Rng;
use serde::{Deserialize, Serialize};

use super::agent::{optimal_agent_policy, Action, AgentKind, AgentSpec, AgentState, GreedyVisionAgent, START_DIRECTION};
use super::{MazeEnv, TILES, TIME_LIMIT};
use crate::archive::MeasureSpec;
use crate::error::{Error, Result};

/// One simulated episode. Every timestep adds one visit to the tile the agent
/// occupies when it acts, so the occupancy total equals the path length.
#[derive(Clone, Debug)]
pub struct Episode {
    pub occupancy: [u16; TILES],
    pub path_length: usize,
    pub reached_goal: bool,
    pub reward: f64,
    pub distinct_tiles: usize,
    pub actions: Vec<Action>,
}

enum Policy {
    Replay(Vec<Action>),
    Greedy(GreedyVisionAgent),
}

impl Policy {
    fn new(env: &MazeEnv, kind: AgentKind) -> Self {
        match kind {
            AgentKind::Optimal => Policy::Replay(optimal_agent_policy(env).unwrap_or_default()),
            AgentKind::GreedyVision { temperature } => Policy::Greedy(GreedyVisionAgent::new(env, temperature)),
        }
    }

    fn episode<R: Rng + ?Sized>(&self, env: &MazeEnv, time_limit: usize, record: bool, rng: &mut R) -> Episode {
        let start = env.start().expect("episodes need a solvable maze");
        let goal = env.goal().expect("episodes need a solvable maze").padded();
        let mut state = AgentState::new(start, START_DIRECTION);
        let mut occupancy = [0u16; TILES];
        let mut actions = Vec::new();
        let mut t = 0;
        let mut reached = false;
        while t < time_limit {
            let action = match self {
                Policy::Replay(plan) => match plan.get(t) {
                    Some(&a) => a,
                    None => break,
                },
                Policy::Greedy(agent) => agent.step(env, state, &occupancy, rng),
            };
            occupancy[state.cell().index()] += 1;
            if record {
                actions.push(action);
            }
            state = state.apply(env, action);
            t += 1;
            if state.pos == goal {
                reached = true;
                break;
            }
        }
        if !reached {
            // A replayed plan that ran out counts as a timeout.
            while t < time_limit {
                occupancy[state.cell().index()] += 1;
                t += 1;
            }
        }
        let reward = if reached {
            1.0 - 0.9 * (t as f64 / time_limit as f64)
        } else {
            0.0
        };
        Episode {
            distinct_tiles: occupancy.iter().filter(|&&v| v > 0).count(),
            occupancy,
            path_length: t,
            reached_goal: reached,
            reward,
            actions,
        }
    }
}

/// Runs a single episode; the action trace is recorded.
pub fn run_episode<R: Rng + ?Sized>(env: &MazeEnv, agent: &AgentSpec, rng: &mut R) -> Option<Episode> {
    if !env.is_solvable() {
        return None;
    }
    Some(Policy::new(env, agent.kind).episode(env, agent.time_limit, true, rng))
}

/// Aggregate of `episodes` runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub path_lengths: Vec<usize>,
    pub distinct_tiles: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Mean per-tile visit counts, row-major over the interior.
    pub occupancy: Vec<f64>,
    pub mean_path_length: f64,
    pub mean_repeats: f64,
    pub mean_reward: f64,
}

/// Simulates the agent; unsolvable mazes are not simulated and report a
/// timeout path length with zero occupancy.
pub fn simulate<R: Rng + ?Sized>(env: &MazeEnv, agent: &AgentSpec, rng: &mut R) -> Rollout {
    if !env.is_solvable() {
        let t = agent.time_limit as f64;
        return Rollout {
            path_lengths: Vec::new(),
            distinct_tiles: Vec::new(),
            rewards: Vec::new(),
            occupancy: vec![0.0; TILES],
            mean_path_length: t,
            mean_repeats: t,
            mean_reward: 0.0,
        };
    }
    let policy = Policy::new(env, agent.kind);
    let runs = match agent.kind {
        AgentKind::Optimal => 1,
        AgentKind::GreedyVision { .. } => agent.episodes,
    };
    let mut totals = [0u32; TILES];
    let mut path_lengths = Vec::with_capacity(runs);
    let mut distinct_tiles = Vec::with_capacity(runs);
    let mut rewards = Vec::with_capacity(runs);
    for _ in 0..runs {
        let ep = policy.episode(env, agent.time_limit, false, rng);
        for (t, &o) in totals.iter_mut().zip(&ep.occupancy) {
            *t += u32::from(o);
        }
        path_lengths.push(ep.path_length);
        distinct_tiles.push(ep.distinct_tiles);
        rewards.push(ep.reward);
    }
    // The optimal agent is deterministic: one run stands for all episodes.
    let n = runs as f64;
    let mean = |xs: &[usize]| xs.iter().sum::<usize>() as f64 / n;
    Rollout {
        occupancy: totals.iter().map(|&v| f64::from(v) / n).collect(),
        mean_path_length: mean(&path_lengths),
        mean_repeats: path_lengths.iter().zip(&distinct_tiles).map(|(p, d)| (p - d) as f64).sum::<f64>() / n,
        mean_reward: rewards.iter().sum::<f64>() / n,
        path_lengths,
        distinct_tiles,
        rewards,
    }
}

/// Which pair of measures spans the archive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeasureSet {
    /// Interior wall count and mean path length.
    WallsPath,
    /// Fraction of reachable tiles visited and mean repeated visits.
    ExplorationRepeats,
    /// Interior wall count and mean repeated visits.
    WallsRepeats,
}

impl MeasureSet {
    pub fn name(self) -> &'static str {
        match self {
            MeasureSet::WallsPath => "walls-path",
            MeasureSet::ExplorationRepeats => "exploration-repeats",
            MeasureSet::WallsRepeats => "walls-repeats",
        }
    }

    /// Column-friendly names of the two measures.
    pub fn labels(self) -> [&'static str; 2] {
        match self {
            MeasureSet::WallsPath => ["walls", "path_length"],
            MeasureSet::ExplorationRepeats => ["exploration", "repeats"],
            MeasureSet::WallsRepeats => ["walls", "repeats"],
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "walls-path" => Ok(MeasureSet::WallsPath),
            "exploration-repeats" => Ok(MeasureSet::ExplorationRepeats),
            "walls-repeats" => Ok(MeasureSet::WallsRepeats),
            other => Err(Error::config("measures", format!("unknown measure set `{other}`"))),
        }
    }

    /// Archive layout: 256 wall bins, 162 bins over `[0, 648]` for path
    /// length and repeats, 100 bins for exploration.
    pub fn spec(self) -> MeasureSpec {
        let t = TIME_LIMIT as f64;
        let (bounds, cells): ([(f64, f64); 2], [usize; 2]) = match self {
            MeasureSet::WallsPath => ([(0.0, 256.0), (0.0, t)], [256, 162]),
            MeasureSet::ExplorationRepeats => ([(0.0, 1.0), (0.0, t)], [100, 162]),
            MeasureSet::WallsRepeats => ([(0.0, 256.0), (0.0, t)], [256, 162]),
        };
        MeasureSpec::new(&bounds, &cells).expect("static measure layout is valid")
    }

    pub fn compute(self, rollout: &Rollout, env: &MazeEnv) -> Vec<f64> {
        let walls = env.wall_count() as f64;
        match self {
            MeasureSet::WallsPath => vec![walls, rollout.mean_path_length],
            MeasureSet::ExplorationRepeats => vec![exploration(rollout, env), rollout.mean_repeats],
            MeasureSet::WallsRepeats => vec![walls, rollout.mean_repeats],
        }
    }
}

/// Visited tiles over tiles the agent can act from (the start's component
/// minus the goal, which ends the episode on arrival).
fn exploration(rollout: &Rollout, env: &MazeEnv) -> f64 {
    let actable = env.reachable_cells().saturating_sub(1);
    if actable == 0 {
        return 0.0;
    }
    let visited = rollout.occupancy.iter().filter(|&&v| v > 0.0).count();
    visited as f64 / actable as f64
}

/// Objective, measures and occupancy of one environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub objective: f64,
    pub measures: Vec<f64>,
    pub occupancy: Vec<f64>,
    pub path_lengths: Vec<usize>,
    pub reward: f64,
}

pub fn evaluate<R: Rng + ?Sized>(env: &MazeEnv, agent: &AgentSpec, measures: MeasureSet, rng: &mut R) -> EvaluationResult {
    let rollout = simulate(env, agent, rng);
    let m = measures.compute(&rollout, env);
    debug_assert!(measures.spec().lower().iter().zip(&m).all(|(lo, v)| v >= lo));
    debug_assert!(measures.spec().upper().iter().zip(&m).all(|(hi, v)| v <= hi));
    EvaluationResult {
        objective: super::is_solvable(env),
        measures: m,
        occupancy: rollout.occupancy,
        path_lengths: rollout.path_lengths,
        reward: rollout.mean_reward,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maze::MazeGenotype;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_env(rng: &mut ChaCha8Rng, p: f64) -> MazeEnv {
        let mut walls = [false; TILES];
        for w in walls.iter_mut() {
            *w = rng.gen::<f64>() < p;
        }
        MazeEnv::build(&MazeGenotype::from_bits(walls))
    }

    #[test]
    fn optimal_on_empty_maze() {
        let env = MazeEnv::build(&MazeGenotype::empty());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = evaluate(&env, &AgentSpec::optimal(), MeasureSet::WallsPath, &mut rng);
        assert_eq!(r.objective, 1.0);
        assert_eq!(r.measures, vec![0.0, 32.0]);
        assert!((r.reward - (1.0 - 0.9 * 32.0 / 648.0)).abs() < 1e-12);
        assert!((r.reward - 0.9556).abs() < 1e-4);
        let repeats = MeasureSet::WallsRepeats.compute(&simulate(&env, &AgentSpec::optimal(), &mut rng), &env);
        assert_eq!(repeats[1], 2.0);
    }

    #[test]
    fn unsolvable_is_not_simulated() {
        let env = MazeEnv::build(&MazeGenotype::full());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = evaluate(&env, &AgentSpec::greedy(), MeasureSet::WallsPath, &mut rng);
        assert_eq!(r.objective, 0.0);
        assert_eq!(r.measures, vec![256.0, 648.0]);
        assert!(r.occupancy.iter().all(|&v| v == 0.0));
        assert!(run_episode(&env, &AgentSpec::greedy(), &mut rng).is_none());
    }

    #[test]
    fn repeats_equal_turns_for_optimal_agent() {
        // Replaying the trace: with no revisits other than turning in place,
        // repeats are exactly the non-forward actions.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut checked = 0;
        for _ in 0..200 {
            let env = random_env(&mut rng, 0.3);
            let Some(ep) = run_episode(&env, &AgentSpec::optimal(), &mut rng) else { continue };
            let turns = ep.actions.iter().filter(|a| **a != Action::Forward).count();
            let mut moved_cells = std::collections::HashSet::new();
            let mut state = AgentState::new(env.start().unwrap(), START_DIRECTION);
            let mut revisit = false;
            moved_cells.insert(state.cell());
            for a in &ep.actions {
                let next = state.apply(&env, *a);
                if next.pos != state.pos && !moved_cells.insert(next.cell()) {
                    revisit = true;
                }
                state = next;
            }
            if !revisit {
                assert_eq!(ep.path_length - ep.distinct_tiles, turns);
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn occupancy_sums_to_path_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for i in 0..60 {
            let env = random_env(&mut rng, [0.1, 0.3, 0.45][i % 3]);
            for agent in [AgentSpec::optimal(), AgentSpec::greedy()] {
                if let Some(ep) = run_episode(&env, &agent, &mut rng) {
                    let total: usize = ep.occupancy.iter().map(|&v| v as usize).sum();
                    assert_eq!(total, ep.path_length);
                    assert_eq!(ep.reward > 0.0, ep.reached_goal);
                    assert_eq!(ep.actions.len(), ep.path_length.min(ep.actions.len()));
                }
            }
        }
    }

    #[test]
    fn greedy_agent_is_seed_deterministic_and_varied() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let env = random_env(&mut rng, 0.25);
        let a = simulate(&env, &AgentSpec::greedy(), &mut ChaCha8Rng::seed_from_u64(1));
        let b = simulate(&env, &AgentSpec::greedy(), &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert_eq!(a.path_lengths.len(), 50);
        let mut lengths = a.path_lengths.clone();
        lengths.dedup();
        assert!(lengths.len() > 1);
    }

    #[test]
    fn greedy_agent_can_time_out() {
        // Open maze, goal far away: a local agent frequently fails within a
        // short limit.
        let env = MazeEnv::build(&MazeGenotype::empty());
        let agent = AgentSpec {
            time_limit: 40,
            ..AgentSpec::greedy()
        };
        let r = simulate(&env, &agent, &mut ChaCha8Rng::seed_from_u64(3));
        assert!(r.path_lengths.contains(&40));
        for (p, rw) in r.path_lengths.iter().zip(&r.rewards) {
            assert!(*p == 40 && *rw == 0.0 || *rw > 0.0);
        }
    }

    #[test]
    fn measure_ranges_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for i in 0..40 {
            let env = random_env(&mut rng, (i as f64) / 40.0);
            for set in [MeasureSet::WallsPath, MeasureSet::ExplorationRepeats, MeasureSet::WallsRepeats] {
                let r = evaluate(&env, &AgentSpec::greedy(), set, &mut rng);
                let spec = set.spec();
                for (d, v) in r.measures.iter().enumerate() {
                    assert!(*v >= spec.lower()[d] && *v <= spec.upper()[d], "{set:?} {v}");
                }
            }
        }
    }

    #[test]
    fn full_exploration_when_every_tile_visited() {
        // Straight corridor of 3 cells: start, middle, goal.
        let mut walls = [true; TILES];
        for c in 0..3 {
            walls[c] = false;
        }
        let env = MazeEnv::build(&MazeGenotype::from_bits(walls));
        let r = simulate(&env, &AgentSpec::optimal(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(MeasureSet::ExplorationRepeats.compute(&r, &env)[0], 1.0);
    }

    #[test]
    fn measure_set_names() {
        for set in [MeasureSet::WallsPath, MeasureSet::ExplorationRepeats, MeasureSet::WallsRepeats] {
            assert_eq!(MeasureSet::parse(set.name()).unwrap(), set);
        }
        assert!(matches!(MeasureSet::parse("jumps"), Err(Error::Config { .. })));
    }
}
