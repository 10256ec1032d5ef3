use std::io::{BufRead, BufReader, BufWriter, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maze::{MazeEnv, TILES};

/// Tile codes: 0 wall, 1 empty, 2 start, 3 goal.
pub type TileGrid = [u8; TILES];

pub const WALL: u8 = 0;
pub const EMPTY: u8 = 1;
pub const START: u8 = 2;
pub const GOAL: u8 = 3;
pub const TILE_KINDS: usize = 4;

pub fn encode_tiles(env: &MazeEnv) -> TileGrid {
    let mut tiles = [EMPTY; TILES];
    for (i, t) in tiles.iter_mut().enumerate() {
        if env.genotype().bits()[i] {
            *t = WALL;
        }
    }
    if let (Some(s), Some(g)) = (env.start(), env.goal()) {
        tiles[s.index()] = START;
        tiles[g.index()] = GOAL;
    }
    tiles
}

/// One ground-truth evaluation. Measures are stored in their natural units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub genotype: Vec<f64>,
    pub tiles: Vec<u8>,
    pub objective: f64,
    pub measures: Vec<f64>,
    pub occupancy: Vec<f64>,
}

impl Record {
    pub fn tile_grid(&self) -> TileGrid {
        let mut t = [0u8; TILES];
        t.copy_from_slice(&self.tiles);
        t
    }

    fn validate(&self, measure_dims: Option<usize>) -> Result<()> {
        if self.tiles.len() != TILES {
            return Err(Error::DimensionMismatch {
                expected: TILES,
                got: self.tiles.len(),
            });
        }
        if self.tiles.iter().any(|&t| t as usize >= TILE_KINDS) {
            return Err(Error::InvalidInput("tile code out of range".into()));
        }
        if self.occupancy.len() != TILES {
            return Err(Error::DimensionMismatch {
                expected: TILES,
                got: self.occupancy.len(),
            });
        }
        if let Some(m) = measure_dims {
            if self.measures.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    got: self.measures.len(),
                });
            }
        }
        let finite = self.objective.is_finite()
            && self.measures.iter().all(|v| v.is_finite())
            && self.occupancy.iter().all(|v| v.is_finite() && *v >= 0.0);
        if !finite {
            return Err(Error::NonFinite("dataset record"));
        }
        Ok(())
    }
}

/// Append-only, insertion-ordered evaluation store.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    records: Vec<Record>,
}

impl Dataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn measure_dims(&self) -> Option<usize> {
        self.records.first().map(|r| r.measures.len())
    }

    pub fn push(&mut self, record: Record) -> Result<()> {
        record.validate(self.measure_dims())?;
        self.records.push(record);
        Ok(())
    }

    /// The most recent `window` records, all of them if fewer.
    pub fn recent(&self, window: usize) -> &[Record] {
        &self.records[self.records.len().saturating_sub(window)..]
    }

    pub fn append(&mut self, other: &Dataset) -> Result<()> {
        for r in &other.records {
            self.push(r.clone())?;
        }
        Ok(())
    }

    /// One JSON record per line.
    pub fn write_jsonl<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = BufWriter::new(writer);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: Read>(reader: R) -> Result<Self> {
        let mut data = Self::new();
        for line in BufReader::new(reader).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            data.push(serde_json::from_str(&line)?)?;
        }
        Ok(data)
    }
}
