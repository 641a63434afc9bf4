//! Uniform grids over the unit interval / unit square and probability vectors on them.
//!
//! A mean-field state is represented by the probability of a representative agent residing in
//! each cell. Two-dimensional cells are flattened row-major: cell `(i, j)` with `i` the
//! x-bin and `j` the y-bin has flat index `i * k + j`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mass entries are allowed to deviate from a unit sum by this much.
pub const MASS_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Topology {
    /// Periodic boundaries (the swarm circle).
    Torus,
    /// Hard walls; positions are clipped into `[0, 1]`.
    ClippedBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSpec {
    dim: usize,
    bins: usize,
    topology: Topology,
}

impl GridSpec {
    pub fn new(dim: usize, bins: usize, topology: Topology) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::WrongDimensionality { expected: 1, got: dim });
        }
        if bins == 0 {
            return Err(Error::Config("grid needs at least one bin per axis".into()));
        }
        Ok(Self { dim, bins, topology })
    }

    pub fn line(bins: usize, topology: Topology) -> Self {
        Self::new(1, bins, topology).expect("valid 1D grid")
    }

    pub fn square(bins: usize, topology: Topology) -> Self {
        Self::new(2, bins, topology).expect("valid 2D grid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Bins per axis (`k`).
    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn cells(&self) -> usize {
        self.bins.pow(self.dim as u32)
    }

    pub fn cell_volume(&self) -> f64 {
        (1.0 / self.bins as f64).powi(self.dim as i32)
    }

    /// Midpoint of bin `idx` along one axis.
    pub fn axis_center(&self, idx: usize) -> f64 {
        (idx as f64 + 0.5) / self.bins as f64
    }

    /// Per-axis bin indices of a flat cell index.
    pub fn axis_indices(&self, cell: usize) -> [usize; 2] {
        match self.dim {
            1 => [cell, 0],
            _ => [cell / self.bins, cell % self.bins],
        }
    }

    pub fn flat_index(&self, axes: [usize; 2]) -> usize {
        match self.dim {
            1 => axes[0],
            _ => axes[0] * self.bins + axes[1],
        }
    }

    /// Center coordinates of a cell; only the first `dim` entries are meaningful.
    pub fn center(&self, cell: usize) -> [f64; 2] {
        let [i, j] = self.axis_indices(cell);
        match self.dim {
            1 => [self.axis_center(i), 0.0],
            _ => [self.axis_center(i), self.axis_center(j)],
        }
    }

    /// Cell centers as a `cells x dim` row-major buffer.
    pub fn centers(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.cells() * self.dim);
        for c in 0..self.cells() {
            out.extend_from_slice(&self.center(c)[..self.dim]);
        }
        out
    }

    /// Bin containing a coordinate. Torus coordinates are wrapped, box coordinates clamped.
    pub fn axis_bin(&self, x: f64) -> usize {
        let k = self.bins as f64;
        let x = match self.topology {
            Topology::Torus => x.rem_euclid(1.0),
            Topology::ClippedBox => x.clamp(0.0, 1.0),
        };
        ((x * k).floor() as usize).min(self.bins - 1)
    }

    /// Cell containing a point given by its first `dim` coordinates.
    pub fn cell_of(&self, point: &[f64]) -> usize {
        match self.dim {
            1 => self.axis_bin(point[0]),
            _ => self.flat_index([self.axis_bin(point[0]), self.axis_bin(point[1])]),
        }
    }

    pub(crate) fn ensure_same(&self, other: &GridSpec) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!("{self:?} vs {other:?}")));
        }
        Ok(())
    }
}

/// A probability vector over the cells of a [`GridSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct GridDistribution {
    grid: GridSpec,
    mass: Vec<f64>,
}

impl GridDistribution {
    /// Wraps an already-normalized mass vector, validating the simplex invariants.
    pub fn new(grid: GridSpec, mass: Vec<f64>) -> Result<Self> {
        if mass.len() != grid.cells() {
            return Err(Error::ShapeMismatch { expected: grid.cells(), got: mass.len() });
        }
        if let Some((index, &value)) = mass.iter().enumerate().find(|(_, m)| m.is_nan() || **m < 0.0) {
            return Err(Error::NegativeWeight { index, value });
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::GridMismatch(format!("mass sums to {total}, expected 1")));
        }
        Ok(Self { grid, mass })
    }

    /// Scales non-negative weights to unit mass.
    pub fn normalize(weights: &[f64], grid: GridSpec) -> Result<Self> {
        if weights.len() != grid.cells() {
            return Err(Error::ShapeMismatch { expected: grid.cells(), got: weights.len() });
        }
        for (index, &value) in weights.iter().enumerate() {
            if value < 0.0 || value.is_nan() {
                return Err(Error::NegativeWeight { index, value });
            }
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::AllZero);
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("distribution weights"));
        }
        let mass = weights.iter().map(|w| w / total).collect();
        Ok(Self { grid, mass })
    }

    /// Like [`normalize`](Self::normalize) but clamps tiny negative round-off to zero first.
    pub(crate) fn from_kernel_output(weights: Vec<f64>, grid: GridSpec) -> Result<Self> {
        let cleaned: Vec<f64> = weights
            .into_iter()
            .map(|w| if w < 0.0 && w > -1e-12 { 0.0 } else { w })
            .collect();
        Self::normalize(&cleaned, grid)
    }

    pub fn uniform(grid: GridSpec) -> Self {
        let n = grid.cells();
        Self { grid, mass: vec![1.0 / n as f64; n] }
    }

    pub fn point_mass(grid: GridSpec, cell: usize) -> Self {
        let mut mass = vec![0.0; grid.cells()];
        mass[cell] = 1.0;
        Self { grid, mass }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn into_mass(self) -> Vec<f64> {
        self.mass
    }

    /// Density (mass per unit volume) of the cell containing `point`.
    pub fn density_at(&self, point: &[f64]) -> f64 {
        self.mass[self.grid.cell_of(point)] / self.grid.cell_volume()
    }

    /// Shannon entropy `-sum m log m` in nats, with `0 log 0 = 0`.
    pub fn shannon_entropy(&self) -> f64 {
        -self.mass.iter().filter(|&&m| m > 0.0).map(|&m| m * m.ln()).sum::<f64>()
    }

    /// Smoothed differential entropy `-sum log(density + eps) * mass`.
    pub fn smoothed_differential_entropy(&self, eps: f64) -> Result<f64> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::NonPositiveEpsilon(eps));
        }
        let vol = self.grid.cell_volume();
        Ok(-self.mass.iter().map(|&m| m * (m / vol + eps).ln()).sum::<f64>())
    }

    /// Empirical histogram of points (row-major `points.len() / dim` rows).
    pub fn histogram(grid: GridSpec, points: &[f64]) -> Result<Self> {
        let dim = grid.dim();
        let mut counts = vec![0.0; grid.cells()];
        for p in points.chunks_exact(dim) {
            counts[grid.cell_of(p)] += 1.0;
        }
        Self::normalize(&counts, grid)
    }

    /// Writes `cell_index,mass` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["cell_index", "mass"])?;
        for (i, m) in self.mass.iter().enumerate() {
            w.write_record([i.to_string(), format!("{m:e}")])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads `cell_index,mass` rows; missing cells are zero. The result is renormalized.
    pub fn read_csv(path: &Path, grid: GridSpec) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut weights = vec![0.0; grid.cells()];
        for rec in r.records() {
            let rec = rec?;
            let (idx, m) = parse_pair(&rec)?;
            if idx >= weights.len() {
                return Err(Error::ShapeMismatch { expected: weights.len(), got: idx + 1 });
            }
            weights[idx] = m;
        }
        Self::normalize(&weights, grid)
    }
}

fn parse_pair(rec: &csv::StringRecord) -> Result<(usize, f64)> {
    let bad = || Error::Config(format!("malformed CSV row {rec:?}"));
    let idx = rec.get(0).ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
    let m = rec.get(1).ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
    Ok((idx, m))
}

/// `sum rho_i log(rho_i / (mu_i + eps))`, cells with `rho_i = 0` contributing nothing.
pub fn kl_divergence(rho: &GridDistribution, mu: &GridDistribution, eps: f64) -> Result<f64> {
    rho.grid.ensure_same(&mu.grid)?;
    Ok(rho
        .mass
        .iter()
        .zip(&mu.mass)
        .filter(|(r, _)| **r > 0.0)
        .map(|(&r, &m)| r * (r / (m + eps)).ln())
        .sum())
}
