use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Cell, MazeEnv, SIDE, SIZE, TILES, TIME_LIMIT};
use crate::error::{Error, Result};

/// Heading of the agent. Discriminants index the padded-grid neighbor table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    East = 0,
    South = 1,
    West = 2,
    North = 3,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::East, Direction::South, Direction::West, Direction::North];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i % 4]
    }

    pub fn left(self) -> Self {
        Self::from_index(self.index() + 3)
    }

    pub fn right(self) -> Self {
        Self::from_index(self.index() + 1)
    }

    pub fn delta(self) -> (isize, isize) {
        match self {
            Direction::East => (0, 1),
            Direction::South => (1, 0),
            Direction::West => (0, -1),
            Direction::North => (-1, 0),
        }
    }

    fn padded_offset(self) -> isize {
        super::NEIGHBOR_OFFSETS[self.index()]
    }
}

/// Every episode starts facing this way.
pub const START_DIRECTION: Direction = Direction::North;

/// Agent action space. The last three leave the agent in place and are never
/// chosen by the agents in this module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Forward,
    TurnLeft,
    TurnRight,
    Pickup,
    Drop,
    Toggle,
}

impl Action {
    pub const MOVES: [Action; 3] = [Action::Forward, Action::TurnLeft, Action::TurnRight];

    pub fn symbol(self) -> char {
        match self {
            Action::Forward => 'F',
            Action::TurnLeft => 'L',
            Action::TurnRight => 'R',
            Action::Pickup => 'p',
            Action::Drop => 'd',
            Action::Toggle => 't',
        }
    }
}

/// Position and heading, position in padded-grid coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AgentState {
    pub(crate) pos: usize,
    pub dir: Direction,
}

impl AgentState {
    pub fn new(cell: Cell, dir: Direction) -> Self {
        Self { pos: cell.padded(), dir }
    }

    pub fn cell(&self) -> Cell {
        Cell::from_padded(self.pos)
    }

    /// Applies an action; moving into a wall leaves the agent in place.
    pub fn apply(self, env: &MazeEnv, action: Action) -> Self {
        match action {
            Action::Forward => {
                let next = (self.pos as isize + self.dir.padded_offset()) as usize;
                if env.is_open_padded(next) {
                    Self { pos: next, ..self }
                } else {
                    self
                }
            }
            Action::TurnLeft => Self { dir: self.dir.left(), ..self },
            Action::TurnRight => Self { dir: self.dir.right(), ..self },
            Action::Pickup | Action::Drop | Action::Toggle => self,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AgentKind {
    /// Shortest action sequence; deterministic.
    Optimal,
    /// Local 5x5 view with a softmax over visit-count scores.
    GreedyVision { temperature: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub kind: AgentKind,
    pub episodes: usize,
    pub time_limit: usize,
}

impl AgentSpec {
    pub fn optimal() -> Self {
        Self {
            kind: AgentKind::Optimal,
            episodes: 1,
            time_limit: TIME_LIMIT,
        }
    }

    pub fn greedy() -> Self {
        Self {
            kind: AgentKind::GreedyVision { temperature: 0.5 },
            episodes: 50,
            time_limit: TIME_LIMIT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::config("agent.episodes", "must be positive"));
        }
        if self.time_limit == 0 || self.time_limit > u16::MAX as usize {
            return Err(Error::config("agent.time_limit", "must be in 1..=65535"));
        }
        if let AgentKind::GreedyVision { temperature } = self.kind {
            if !(temperature > 0.0) || !temperature.is_finite() {
                return Err(Error::config("agent.temperature", "must be positive"));
            }
        }
        Ok(())
    }
}

const STATES: usize = SIDE * SIDE * 4;

/// Breadth-first search over (cell, heading) states from the start heading
/// [`START_DIRECTION`] to any heading on the goal. Actions are expanded in the
/// order forward, left, right, so the returned sequence is the first shortest
/// one in that order. `None` for unsolvable mazes.
pub fn optimal_agent_policy(env: &MazeEnv) -> Option<Vec<Action>> {
    let (start, goal) = (env.start()?, env.goal()?);
    let from = AgentState::new(start, START_DIRECTION);
    search(env, from, goal.padded())
}

/// Length of [`optimal_agent_policy`]'s sequence.
pub fn optimal_path_length(env: &MazeEnv) -> Option<usize> {
    optimal_agent_policy(env).map(|p| p.len())
}

fn state_id(s: AgentState) -> usize {
    s.pos * 4 + s.dir.index()
}

fn search(env: &MazeEnv, from: AgentState, goal: usize) -> Option<Vec<Action>> {
    if from.pos == goal {
        return Some(Vec::new());
    }
    let mut parent: Vec<Option<(usize, Action)>> = vec![None; STATES];
    let mut seen = vec![false; STATES];
    let mut queue = VecDeque::new();
    seen[state_id(from)] = true;
    queue.push_back(from);
    while let Some(s) = queue.pop_front() {
        for action in Action::MOVES {
            let next = s.apply(env, action);
            let id = state_id(next);
            if seen[id] {
                continue;
            }
            seen[id] = true;
            parent[id] = Some((state_id(s), action));
            if next.pos == goal {
                let mut actions = vec![action];
                let mut cur = state_id(s);
                while let Some((prev, a)) = parent[cur] {
                    actions.push(a);
                    cur = prev;
                }
                actions.reverse();
                return Some(actions);
            }
            queue.push_back(next);
        }
    }
    None
}

const VIEW_RADIUS: usize = 2;
const TURN_PENALTY: f64 = 1.0;
const BLOCKED_TURN_PENALTY: f64 = 2.0;

/// Stochastic agent with a 5x5 view centred on itself.
///
/// When the goal is in view and reachable through viewed cells it follows a
/// shortest in-view path. Otherwise it scores forward, left and right by the
/// visit count of the cell that action faces (forward into a wall is
/// excluded, turns pay a small penalty and a larger one when facing a wall
/// afterwards) and samples from a softmax over `score / temperature`.
#[derive(Clone, Debug)]
pub struct GreedyVisionAgent {
    temperature: f64,
    /// Shortcut action per (padded position, heading) when the goal is in view.
    goal_moves: Vec<Option<Action>>,
}

impl GreedyVisionAgent {
    pub fn new(env: &MazeEnv, temperature: f64) -> Self {
        let mut goal_moves = vec![None; STATES];
        if let Some(goal) = env.goal() {
            let lo_r = goal.row.saturating_sub(VIEW_RADIUS);
            let lo_c = goal.col.saturating_sub(VIEW_RADIUS);
            for r in lo_r..=(goal.row + VIEW_RADIUS).min(SIZE - 1) {
                for c in lo_c..=(goal.col + VIEW_RADIUS).min(SIZE - 1) {
                    let cell = Cell::new(r, c);
                    if !env.is_open_padded(cell.padded()) || cell == goal {
                        continue;
                    }
                    for dir in Direction::ALL {
                        let from = AgentState::new(cell, dir);
                        goal_moves[state_id(from)] = window_first_move(env, from, goal);
                    }
                }
            }
        }
        Self { temperature, goal_moves }
    }

    /// Shortest in-view first action toward the goal, if the goal is in view.
    pub fn goal_move(&self, state: AgentState) -> Option<Action> {
        self.goal_moves[state_id(state)]
    }

    /// Scores of forward, left, right; `-inf` marks an excluded action.
    pub fn scores(&self, env: &MazeEnv, state: AgentState, visits: &[u16; TILES]) -> [f64; 3] {
        let visit = |p: usize| f64::from(visits[Cell::from_padded(p).index()]);
        let ahead = (state.pos as isize + state.dir.padded_offset()) as usize;
        let forward = if env.is_open_padded(ahead) {
            -visit(ahead)
        } else {
            f64::NEG_INFINITY
        };
        let turn = |dir: Direction| {
            let side = (state.pos as isize + dir.padded_offset()) as usize;
            if env.is_open_padded(side) {
                -visit(side) - TURN_PENALTY
            } else {
                -visit(state.pos) - BLOCKED_TURN_PENALTY
            }
        };
        [forward, turn(state.dir.left()), turn(state.dir.right())]
    }

    pub fn step<R: Rng + ?Sized>(&self, env: &MazeEnv, state: AgentState, visits: &[u16; TILES], rng: &mut R) -> Action {
        if let Some(action) = self.goal_move(state) {
            return action;
        }
        let scores = self.scores(env, state, visits);
        let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut weights = [0.0; 3];
        let mut total = 0.0;
        for (w, s) in weights.iter_mut().zip(scores) {
            *w = ((s - top) / self.temperature).exp();
            total += *w;
        }
        let mut u = rng.gen::<f64>() * total;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                return Action::MOVES[i];
            }
            u -= w;
        }
        // Rounding fallthrough: last action with positive weight.
        let last = weights.iter().rposition(|&w| w > 0.0).unwrap_or(1);
        Action::MOVES[last]
    }
}

/// First action of a shortest path from `from` to `goal` that stays inside
/// the view window centred on `from`.
fn window_first_move(env: &MazeEnv, from: AgentState, goal: Cell) -> Option<Action> {
    const W: usize = 2 * VIEW_RADIUS + 1;
    let center = from.cell();
    let local = |s: AgentState| -> Option<usize> {
        let c = s.cell();
        let dr = c.row as isize - center.row as isize + VIEW_RADIUS as isize;
        let dc = c.col as isize - center.col as isize + VIEW_RADIUS as isize;
        if (0..W as isize).contains(&dr) && (0..W as isize).contains(&dc) {
            Some(((dr as usize * W) + dc as usize) * 4 + s.dir.index())
        } else {
            None
        }
    };
    let mut first: [Option<Action>; W * W * 4] = [None; W * W * 4];
    let mut seen = [false; W * W * 4];
    let mut queue = [from; W * W * 4];
    let (mut head, mut tail) = (0, 1);
    seen[local(from)?] = true;
    while head < tail {
        let s = queue[head];
        head += 1;
        let s_first = first[local(s).expect("queued states are local")];
        for action in Action::MOVES {
            let next = s.apply(env, action);
            let Some(id) = local(next) else { continue };
            if seen[id] {
                continue;
            }
            seen[id] = true;
            let action0 = s_first.or(Some(action));
            if next.cell() == goal {
                return action0;
            }
            first[id] = action0;
            queue[tail] = next;
            tail += 1;
        }
    }
    None
}
