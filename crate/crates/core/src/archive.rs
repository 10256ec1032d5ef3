//! Grid archive over a discretized measure space.
//!
//! Each cell holds at most one [`Elite`]. Cells are addressed either by a
//! per-dimension index vector or by a row-major linear index (last dimension
//! fastest). Storage is sparse: elites live in a dense vector in insertion
//! order and a sorted map translates linear cell indices to slots, so
//! iteration in cell order and uniform sampling are both cheap.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bounds and resolution of a measure space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureSpec {
    lower: Vec<f64>,
    upper: Vec<f64>,
    cells: Vec<usize>,
}

impl MeasureSpec {
    pub fn new(bounds: &[(f64, f64)], cells: &[usize]) -> Result<Self> {
        if bounds.len() != cells.len() {
            return Err(Error::DimensionMismatch {
                expected: bounds.len(),
                got: cells.len(),
            });
        }
        if bounds.is_empty() {
            return Err(Error::InvalidInput("measure space needs at least one dimension".into()));
        }
        for (i, (&(lo, hi), &n)) in bounds.iter().zip(cells).enumerate() {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::NonFinite("measure bounds"));
            }
            if lo >= hi {
                return Err(Error::InvalidInput(format!(
                    "dimension {i}: lower bound {lo} must be below upper bound {hi}"
                )));
            }
            if n == 0 {
                return Err(Error::InvalidInput(format!("dimension {i}: cell count must be positive")));
            }
        }
        Ok(Self {
            lower: bounds.iter().map(|b| b.0).collect(),
            upper: bounds.iter().map(|b| b.1).collect(),
            cells: cells.to_vec(),
        })
    }

    pub fn dims(&self) -> usize {
        self.cells.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    /// Total number of cells, the product of the per-dimension counts.
    pub fn total_cells(&self) -> usize {
        self.cells.iter().product()
    }

    pub fn width(&self, dim: usize) -> f64 {
        (self.upper[dim] - self.lower[dim]) / self.cells[dim] as f64
    }

    /// Maps a measure vector to its cell. Values at or beyond the upper bound
    /// land in the last cell, values below the lower bound in cell 0.
    pub fn discretize(&self, measures: &[f64]) -> Result<Vec<usize>> {
        self.check_measures(measures)?;
        Ok((0..self.dims()).map(|i| self.bin(i, measures[i])).collect())
    }

    pub(crate) fn check_measures(&self, measures: &[f64]) -> Result<()> {
        if measures.len() != self.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                got: measures.len(),
            });
        }
        if measures.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("measures"));
        }
        Ok(())
    }

    fn bin(&self, dim: usize, value: f64) -> usize {
        let pos = ((value - self.lower[dim]) / self.width(dim)).floor();
        if pos <= 0.0 {
            0
        } else {
            (pos as usize).min(self.cells[dim] - 1)
        }
    }

    /// Row-major linear index of a cell.
    pub fn linear_index(&self, cell: &[usize]) -> usize {
        cell.iter()
            .zip(&self.cells)
            .fold(0, |acc, (&c, &n)| acc * n + c)
    }

    pub fn cell_of_linear(&self, mut linear: usize) -> Vec<usize> {
        let mut cell = vec![0; self.dims()];
        for i in (0..self.dims()).rev() {
            cell[i] = linear % self.cells[i];
            linear /= self.cells[i];
        }
        cell
    }

    /// Scales measures into `[0, 1]` by the spec ranges (no clamping).
    pub fn normalize(&self, measures: &[f64]) -> Vec<f64> {
        measures
            .iter()
            .enumerate()
            .map(|(i, m)| (m - self.lower[i]) / (self.upper[i] - self.lower[i]))
            .collect()
    }

    pub fn denormalize(&self, normalized: &[f64]) -> Vec<f64> {
        normalized
            .iter()
            .enumerate()
            .map(|(i, v)| self.lower[i] + v * (self.upper[i] - self.lower[i]))
            .collect()
    }
}

/// Best solution found so far for one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Elite {
    pub solution: Vec<f64>,
    pub objective: f64,
    pub measures: Vec<f64>,
    pub cell: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AddStatus {
    Inserted,
    Improved,
    Rejected,
}

impl AddStatus {
    pub fn improved_archive(self) -> bool {
        !matches!(self, AddStatus::Rejected)
    }
}

/// Result of offering a solution to the archive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AddOutcome {
    pub status: AddStatus,
    /// Objective gain over the previous occupant (the full objective for an
    /// empty cell). Negative or zero when rejected.
    pub improvement: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    spec: MeasureSpec,
    elites: Vec<Elite>,
    slots: BTreeMap<usize, usize>,
}

impl Archive {
    pub fn new(spec: MeasureSpec) -> Self {
        Self {
            spec,
            elites: Vec::new(),
            slots: BTreeMap::new(),
        }
    }

    pub fn spec(&self) -> &MeasureSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.elites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elites.is_empty()
    }

    /// Offers a solution. Ties keep the incumbent.
    pub fn add(&mut self, solution: &[f64], objective: f64, measures: &[f64]) -> Result<AddOutcome> {
        if !objective.is_finite() {
            return Err(Error::NonFinite("objective"));
        }
        let cell = self.spec.discretize(measures)?;
        let linear = self.spec.linear_index(&cell);
        match self.slots.get(&linear) {
            None => {
                self.slots.insert(linear, self.elites.len());
                self.elites.push(Elite {
                    solution: solution.to_vec(),
                    objective,
                    measures: measures.to_vec(),
                    cell,
                });
                Ok(AddOutcome {
                    status: AddStatus::Inserted,
                    improvement: objective,
                })
            }
            Some(&slot) => {
                let current = &mut self.elites[slot];
                let improvement = objective - current.objective;
                if objective > current.objective {
                    current.solution.clear();
                    current.solution.extend_from_slice(solution);
                    current.objective = objective;
                    current.measures.clear();
                    current.measures.extend_from_slice(measures);
                    Ok(AddOutcome {
                        status: AddStatus::Improved,
                        improvement,
                    })
                } else {
                    Ok(AddOutcome {
                        status: AddStatus::Rejected,
                        improvement,
                    })
                }
            }
        }
    }

    pub fn get(&self, cell: &[usize]) -> Option<&Elite> {
        self.slots
            .get(&self.spec.linear_index(cell))
            .map(|&slot| &self.elites[slot])
    }

    /// Elites in row-major cell order.
    pub fn iter(&self) -> impl Iterator<Item = &Elite> + '_ {
        self.slots.values().map(move |&slot| &self.elites[slot])
    }

    /// Sum of occupied-cell objectives, accumulated in cell order.
    pub fn qd_score(&self) -> f64 {
        self.iter().map(|e| e.objective).sum()
    }

    pub fn coverage(&self) -> f64 {
        self.len() as f64 / self.spec.total_cells() as f64
    }

    /// A uniformly chosen elite, `None` when empty.
    pub fn sample_elite<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<&Elite> {
        if self.elites.is_empty() {
            None
        } else {
            Some(&self.elites[rng.gen_range(0..self.elites.len())])
        }
    }

    pub fn select_all(&self) -> Vec<Elite> {
        self.iter().cloned().collect()
    }

    /// Up to `k` distinct elites drawn uniformly without replacement, returned
    /// in draw order.
    pub fn select_random<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<Elite> {
        let n = self.elites.len();
        if k >= n {
            return self.select_all();
        }
        let ordered: Vec<&Elite> = self.iter().collect();
        index::sample(rng, n, k)
            .into_iter()
            .map(|i| ordered[i].clone())
            .collect()
    }

    /// Tiles the grid with regions of `region` cells per dimension (the last
    /// region along an axis may be truncated) and returns one uniformly chosen
    /// occupant of each non-empty region, regions in row-major order.
    pub fn select_downsample<R: Rng + ?Sized>(&self, region: &[usize], rng: &mut R) -> Result<Vec<Elite>> {
        if region.len() != self.spec.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.spec.dims(),
                got: region.len(),
            });
        }
        if region.contains(&0) {
            return Err(Error::InvalidInput("downsample region extents must be positive".into()));
        }
        let regions_per_dim: Vec<usize> = self
            .spec
            .cells()
            .iter()
            .zip(region)
            .map(|(&n, &r)| n.div_ceil(r))
            .collect();
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &slot in self.slots.values() {
            let cell = &self.elites[slot].cell;
            let key = cell
                .iter()
                .zip(region)
                .zip(&regions_per_dim)
                .fold(0, |acc, ((&c, &r), &n)| acc * n + c / r);
            groups.entry(key).or_default().push(slot);
        }
        Ok(groups
            .values()
            .map(|members| self.elites[members[rng.gen_range(0..members.len())]].clone())
            .collect())
    }

    /// Writes `cell_*,objective,measure_*,solution` rows in cell order.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let dims = self.spec.dims();
        let mut out = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..dims).map(|i| format!("cell_{i}")).collect();
        header.push("objective".into());
        header.extend((0..dims).map(|i| format!("measure_{i}")));
        header.push("solution".into());
        out.write_record(&header)?;
        for elite in self.iter() {
            let mut row: Vec<String> = elite.cell.iter().map(|c| c.to_string()).collect();
            row.push(elite.objective.to_string());
            row.extend(elite.measures.iter().map(|m| m.to_string()));
            row.push(serde_json::to_string(&elite.solution)?);
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads an archive written by [`Archive::write_csv`]. Rows whose cell
    /// columns disagree with their measures are rejected.
    pub fn read_csv<R: Read>(reader: R, spec: MeasureSpec) -> Result<Self> {
        let dims = spec.dims();
        let mut input = csv::Reader::from_reader(reader);
        let headers = input.headers()?.clone();
        if headers.len() != 2 * dims + 2 {
            return Err(Error::InvalidInput(format!(
                "archive csv has {} columns, expected {}",
                headers.len(),
                2 * dims + 2
            )));
        }
        let mut archive = Archive::new(spec);
        for (line, record) in input.records().enumerate() {
            let record = record?;
            let bad = |what: &str| Error::InvalidInput(format!("row {}: bad {what}", line + 1));
            let cell = (0..dims)
                .map(|i| record[i].parse::<usize>().map_err(|_| bad("cell index")))
                .collect::<Result<Vec<_>>>()?;
            let objective: f64 = record[dims].parse().map_err(|_| bad("objective"))?;
            let measures = (0..dims)
                .map(|i| record[dims + 1 + i].parse::<f64>().map_err(|_| bad("measure")))
                .collect::<Result<Vec<_>>>()?;
            let solution: Vec<f64> = serde_json::from_str(&record[2 * dims + 1])?;
            if archive.spec.discretize(&measures)? != cell {
                return Err(bad("cell index (does not match measures)"));
            }
            let outcome = archive.add(&solution, objective, &measures)?;
            if outcome.status != AddStatus::Inserted {
                return Err(bad("cell index (duplicate cell)"));
            }
        }
        Ok(archive)
    }
}
