//! Regular cube-grid histograms and the binned KL divergence between clouds.

use std::io::Write;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

const MAX_CELLS: usize = 1 << 27;

/// The box `[lo, hi]^dim` split into `res` cells per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CubeGrid {
    pub dim: usize,
    pub lo: f64,
    pub hi: f64,
    pub res: usize,
}

impl CubeGrid {
    pub fn new(dim: usize, lo: f64, hi: f64, res: usize) -> Result<Self> {
        if dim == 0 || res == 0 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("bad grid [{lo}, {hi}]^{dim} at resolution {res}")));
        }
        if res.checked_pow(dim as u32).is_none_or(|c| c > MAX_CELLS) {
            return Err(Error::Config(format!("{res}^{dim} cells is too many")));
        }
        Ok(Self { dim, lo, hi, res })
    }

    pub fn num_cells(&self) -> usize {
        self.res.pow(self.dim as u32)
    }

    /// Row-major cell index, or `None` outside the closed box.
    pub fn cell(&self, x: &[f64]) -> Option<usize> {
        let w = (self.hi - self.lo) / self.res as f64;
        let mut idx = 0;
        for &v in x {
            if !(v >= self.lo && v <= self.hi) {
                return None;
            }
            let k = (((v - self.lo) / w) as usize).min(self.res - 1);
            idx = idx * self.res + k;
        }
        Some(idx)
    }

    fn coords(&self, mut idx: usize) -> Vec<usize> {
        let mut c = vec![0; self.dim];
        for k in (0..self.dim).rev() {
            c[k] = idx % self.res;
            idx /= self.res;
        }
        c
    }
}

/// Counts per grid cell. Points outside the box go to one overflow cell so
/// that `counts + overflow == total`.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeHistogram {
    grid: CubeGrid,
    counts: Vec<u64>,
    overflow: u64,
    total: u64,
}

impl CubeHistogram {
    pub fn from_points(grid: CubeGrid, points: ArrayView2<f64>) -> Result<Self> {
        check_dim("histogram points", grid.dim, points.ncols())?;
        let mut counts = vec![0u64; grid.num_cells()];
        let mut overflow = 0;
        for row in points.outer_iter() {
            let row = row.to_vec();
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("histogram point".into()));
            }
            match grid.cell(&row) {
                Some(i) => counts[i] += 1,
                None => overflow += 1,
            }
        }
        Ok(Self {
            grid,
            counts,
            overflow,
            total: points.nrows() as u64,
        })
    }

    pub fn grid(&self) -> &CubeGrid {
        &self.grid
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn overflow(&self) -> u64 {
        self.overflow
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Occupied cells as CSV: one index column per axis, then the count.
    /// The overflow cell is written with index `-1` on every axis.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let idx: Vec<String> = (1..=self.grid.dim).map(|k| format!("i{k}")).collect();
        writeln!(w, "{},count", idx.join(","))?;
        for (c, &n) in self.counts.iter().enumerate() {
            if n > 0 {
                let co: Vec<String> = self.grid.coords(c).iter().map(usize::to_string).collect();
                writeln!(w, "{},{n}", co.join(","))?;
            }
        }
        if self.overflow > 0 {
            writeln!(w, "{},{}", vec!["-1"; self.grid.dim].join(","), self.overflow)?;
        }
        Ok(())
    }

    fn cells_with_overflow(&self) -> impl Iterator<Item = u64> + '_ {
        self.counts.iter().copied().chain(std::iter::once(self.overflow))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinnedKl {
    pub kl: f64,
    /// Reference mass on cells the candidate also occupies (before smoothing).
    pub coverage: f64,
    /// Number of cells that received the half-count.
    pub smoothed_cells: usize,
}

/// `KL(μ_ref ‖ μ_cand)` over grid cells plus the overflow cell.
///
/// Cells with reference mass but no candidate points get half a count on the
/// candidate side, and the candidate total is enlarged accordingly.
pub fn binned_kl(reference: &CubeHistogram, candidate: &CubeHistogram) -> Result<BinnedKl> {
    if reference.grid != candidate.grid {
        return Err(Error::Config("histograms on different grids".into()));
    }
    if reference.total == 0 || candidate.total == 0 {
        return Err(Error::Empty);
    }
    let mut smoothed = 0usize;
    for (r, c) in reference.cells_with_overflow().zip(candidate.cells_with_overflow()) {
        if r > 0 && c == 0 {
            smoothed += 1;
        }
    }
    let nr = reference.total as f64;
    let nc = candidate.total as f64 + 0.5 * smoothed as f64;
    let mut kl = 0.0;
    let mut covered = 0u64;
    for (r, c) in reference.cells_with_overflow().zip(candidate.cells_with_overflow()) {
        if r == 0 {
            continue;
        }
        if c > 0 {
            covered += r;
        }
        let p = r as f64 / nr;
        let q = if c > 0 { c as f64 } else { 0.5 } / nc;
        kl += p * (p / q).ln();
    }
    Ok(BinnedKl {
        kl: kl.max(0.0),
        coverage: covered as f64 / nr,
        smoothed_cells: smoothed,
    })
}

/// Bins both clouds on `grid` and returns [`binned_kl`].
pub fn binned_kl_points(reference: ArrayView2<f64>, candidate: ArrayView2<f64>, grid: CubeGrid) -> Result<BinnedKl> {
    let r = CubeHistogram::from_points(grid, reference)?;
    let c = CubeHistogram::from_points(grid, candidate)?;
    binned_kl(&r, &c)
}
