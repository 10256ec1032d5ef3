//! 16x16 wall bitmaps, the bordered 18x18 environments built from them, and
//! agent simulation inside those environments.

mod agent;
mod sim;

pub use agent::{
    optimal_agent_policy, optimal_path_length, Action, AgentKind, AgentSpec, AgentState, Direction, GreedyVisionAgent,
    START_DIRECTION,
};
pub use sim::{evaluate, run_episode, simulate, Episode, EvaluationResult, MeasureSet, Rollout};

use crate::error::{Error, Result};

/// Interior side length.
pub const SIZE: usize = 16;
/// Side length including the wall border.
pub const SIDE: usize = SIZE + 2;
pub const TILES: usize = SIZE * SIZE;
pub const TIME_LIMIT: usize = 648;

/// Interior coordinate, row 0 at the top.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }

    pub fn index(self) -> usize {
        self.row * SIZE + self.col
    }

    pub(crate) fn padded(self) -> usize {
        (self.row + 1) * SIDE + self.col + 1
    }

    pub(crate) fn from_padded(p: usize) -> Self {
        Self::new(p / SIDE - 1, p % SIDE - 1)
    }
}

/// The 256-cell wall bitmap (`true` = wall), row-major.
#[derive(Clone, PartialEq, Eq, Hash, Debug)]
pub struct MazeGenotype {
    walls: [bool; TILES],
}

impl MazeGenotype {
    pub fn from_bits(walls: [bool; TILES]) -> Self {
        Self { walls }
    }

    pub fn empty() -> Self {
        Self { walls: [false; TILES] }
    }

    pub fn full() -> Self {
        Self { walls: [true; TILES] }
    }

    /// Accepts exactly 256 values, each `0` or `1`.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.len() != TILES {
            return Err(Error::DimensionMismatch {
                expected: TILES,
                got: values.len(),
            });
        }
        let mut walls = [false; TILES];
        for (w, &v) in walls.iter_mut().zip(values) {
            *w = if v == 1.0 {
                true
            } else if v == 0.0 {
                false
            } else {
                return Err(Error::InvalidInput(format!("maze genotype value {v} is not 0 or 1")));
            };
        }
        Ok(Self { walls })
    }

    pub fn to_values(&self) -> Vec<f64> {
        self.walls.iter().map(|&w| f64::from(w as u8)).collect()
    }

    pub fn is_wall(&self, cell: Cell) -> bool {
        self.walls[cell.index()]
    }

    pub fn wall_count(&self) -> usize {
        self.walls.iter().filter(|&&w| w).count()
    }

    pub fn bits(&self) -> &[bool; TILES] {
        &self.walls
    }

    /// Parses the text rendering (18 lines of 18 characters). `S` and `G`
    /// are read as empty cells; their placement is always derived.
    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if lines.len() != SIDE {
            return Err(Error::InvalidInput(format!("expected {SIDE} maze lines, got {}", lines.len())));
        }
        let mut walls = [false; TILES];
        for (r, line) in lines.iter().enumerate() {
            let chars: Vec<char> = line.trim_end().chars().collect();
            if chars.len() != SIDE {
                return Err(Error::InvalidInput(format!("maze line {r} has {} characters", chars.len())));
            }
            for (c, ch) in chars.into_iter().enumerate() {
                let border = r == 0 || c == 0 || r == SIDE - 1 || c == SIDE - 1;
                match (ch, border) {
                    ('#', true) => {}
                    (_, true) => return Err(Error::InvalidInput(format!("border cell ({r},{c}) is not a wall"))),
                    ('#', false) => walls[(r - 1) * SIZE + c - 1] = true,
                    ('.' | 'S' | 'G', false) => {}
                    (other, false) => return Err(Error::InvalidInput(format!("unknown maze character {other:?}"))),
                }
            }
        }
        Ok(Self { walls })
    }
}

/// A bordered maze with its start and goal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MazeEnv {
    genotype: MazeGenotype,
    open: [bool; SIDE * SIDE],
    endpoints: Option<(Cell, Cell)>,
    goal_distance: usize,
    reachable: usize,
}

impl MazeEnv {
    /// Builds the bordered maze. Start and goal are the pair of empty cells
    /// with the largest finite 4-connected grid distance; ties go to the
    /// row-major-first start, then the row-major-first goal.
    pub fn build(genotype: &MazeGenotype) -> Self {
        let mut open = [false; SIDE * SIDE];
        for r in 0..SIZE {
            for c in 0..SIZE {
                let cell = Cell::new(r, c);
                open[cell.padded()] = !genotype.is_wall(cell);
            }
        }
        let best = farthest_pair(&open);
        match best {
            Some(pair) => Self {
                genotype: genotype.clone(),
                open,
                endpoints: Some((Cell::from_padded(pair.start), Cell::from_padded(pair.goal))),
                goal_distance: pair.distance,
                reachable: pair.component,
            },
            None => Self {
                genotype: genotype.clone(),
                open,
                endpoints: None,
                goal_distance: 0,
                reachable: 0,
            },
        }
    }

    pub fn genotype(&self) -> &MazeGenotype {
        &self.genotype
    }

    pub fn start(&self) -> Option<Cell> {
        self.endpoints.map(|e| e.0)
    }

    pub fn goal(&self) -> Option<Cell> {
        self.endpoints.map(|e| e.1)
    }

    pub fn is_solvable(&self) -> bool {
        self.endpoints.is_some()
    }

    /// Grid distance between start and goal (0 when unsolvable).
    pub fn goal_distance(&self) -> usize {
        self.goal_distance
    }

    /// Number of cells in the start cell's connected component.
    pub fn reachable_cells(&self) -> usize {
        self.reachable
    }

    pub fn wall_count(&self) -> usize {
        self.genotype.wall_count()
    }

    /// Whether a padded-grid position is open; the border is always closed.
    pub(crate) fn is_open_padded(&self, p: usize) -> bool {
        self.open[p]
    }

    pub fn is_open(&self, row: isize, col: isize) -> bool {
        if row < 0 || col < 0 || row >= SIZE as isize || col >= SIZE as isize {
            return false;
        }
        self.open[Cell::new(row as usize, col as usize).padded()]
    }

    /// 18 lines of 18 characters: `#` wall, `.` empty, `S` start, `G` goal.
    pub fn render(&self) -> String {
        let mut out = String::with_capacity(SIDE * (SIDE + 1));
        for r in 0..SIDE {
            for c in 0..SIDE {
                let p = r * SIDE + c;
                let ch = if !self.open[p] {
                    '#'
                } else {
                    let cell = Cell::from_padded(p);
                    match self.endpoints {
                        Some((s, _)) if s == cell => 'S',
                        Some((_, g)) if g == cell => 'G',
                        _ => '.',
                    }
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }
}

/// 1 if the maze has a valid start/goal pair, 0 otherwise.
pub fn is_solvable(env: &MazeEnv) -> f64 {
    f64::from(env.is_solvable() as u8)
}

pub(crate) const NEIGHBOR_OFFSETS: [isize; 4] = [1, SIDE as isize, -1, -(SIDE as isize)];

struct FarthestPair {
    start: usize,
    goal: usize,
    distance: usize,
    component: usize,
}

/// Farthest pair via eccentricity bounds: a BFS from `w` gives every `v` in
/// its component `max(d(v,w), ecc(w) - d(v,w)) <= ecc(v) <= ecc(w) + d(v,w)`,
/// so most sources never need their own BFS.
fn farthest_pair(open: &[bool; SIDE * SIDE]) -> Option<FarthestPair> {
    const UNSEEN: u16 = u16::MAX;
    let mut bfs = Bfs::new();
    let mut comp = [UNSEEN; SIDE * SIDE];
    let mut lo = [0u16; SIDE * SIDE];
    let mut hi = [UNSEEN; SIDE * SIDE];
    let mut members: Vec<Vec<u16>> = Vec::new();

    let refine = |bfs: &mut Bfs, w: usize, lo: &mut [u16], hi: &mut [u16], members: &[u16]| {
        let (_, ecc, _) = bfs.eccentricity(open, w);
        let ecc = ecc as u16;
        for &v in members {
            let d = bfs.dist[v as usize];
            let v = v as usize;
            lo[v] = lo[v].max(d).max(ecc - d);
            hi[v] = hi[v].min(ecc + d);
        }
    };

    let mut diameter = 0u16;
    for p in 0..SIDE * SIDE {
        if !open[p] || comp[p] != UNSEEN {
            continue;
        }
        // The first BFS also labels the component.
        bfs.eccentricity(open, p);
        let id = members.len() as u16;
        let cells: Vec<u16> = bfs.queue[..bfs.len].to_vec();
        for &v in &cells {
            comp[v as usize] = id;
        }
        refine(&mut bfs, p, &mut lo, &mut hi, &cells);
        let mut pick_high = true;
        loop {
            let max_lo = cells.iter().map(|&v| lo[v as usize]).max().unwrap_or(0);
            let max_hi = cells.iter().map(|&v| hi[v as usize]).max().unwrap_or(0);
            if max_lo >= max_hi {
                diameter = diameter.max(max_lo);
                break;
            }
            let open_bounds = cells.iter().copied().filter(|&v| lo[v as usize] < hi[v as usize]);
            let w = if pick_high {
                open_bounds.max_by_key(|&v| (hi[v as usize], std::cmp::Reverse(v)))
            } else {
                open_bounds.min_by_key(|&v| (lo[v as usize], v))
            };
            pick_high = !pick_high;
            let w = w.expect("unsettled bounds imply an unsettled vertex") as usize;
            refine(&mut bfs, w, &mut lo, &mut hi, &cells);
        }
        members.push(cells);
    }
    if diameter == 0 {
        return None;
    }

    // Row-major-first vertex whose eccentricity equals the diameter.
    for p in 0..SIDE * SIDE {
        if !open[p] || hi[p] < diameter {
            continue;
        }
        if lo[p] < diameter {
            let cells = &members[comp[p] as usize];
            refine(&mut bfs, p, &mut lo, &mut hi, cells);
            if lo[p] < diameter {
                continue;
            }
        }
        let (goal, distance, component) = bfs.eccentricity(open, p);
        debug_assert_eq!(distance, diameter as usize);
        return Some(FarthestPair {
            start: p,
            goal,
            distance,
            component,
        });
    }
    unreachable!("some vertex attains the diameter")
}

/// Reusable breadth-first search buffers over the padded grid.
pub(crate) struct Bfs {
    dist: [u16; SIDE * SIDE],
    queue: [u16; SIDE * SIDE],
    len: usize,
}

impl Bfs {
    pub(crate) fn new() -> Self {
        Self {
            dist: [u16::MAX; SIDE * SIDE],
            queue: [0; SIDE * SIDE],
            len: 0,
        }
    }

    /// Returns (row-major-first farthest cell, its distance, component size).
    fn eccentricity(&mut self, open: &[bool; SIDE * SIDE], source: usize) -> (usize, usize, usize) {
        self.dist.fill(u16::MAX);
        self.dist[source] = 0;
        self.queue[0] = source as u16;
        let (mut head, mut tail) = (0, 1);
        let mut far = source;
        let mut far_d = 0u16;
        while head < tail {
            let p = self.queue[head] as usize;
            head += 1;
            let d = self.dist[p];
            if d > far_d || (d == far_d && p < far) {
                far = p;
                far_d = d;
            }
            for off in NEIGHBOR_OFFSETS {
                let q = (p as isize + off) as usize;
                if open[q] && self.dist[q] == u16::MAX {
                    self.dist[q] = d + 1;
                    self.queue[tail] = q as u16;
                    tail += 1;
                }
            }
        }
        self.len = tail;
        (far, far_d as usize, tail)
    }
}
