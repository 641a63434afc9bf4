//! Discretized mean-field transition operator.
//!
//! The mass of cell `i` moves to cell `j` with the probability that a Gaussian centred at the
//! predicted next position `m_i` falls into `j`. On the torus the Gaussian is wrapped; in the
//! clipped box the tails beyond the walls stay in the boundary cells. Two-dimensional kernels are
//! products of per-axis probabilities.

use ndarray::Array2;

use crate::autodiff::{BinSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{GridDistribution, GridSpec};

/// Row-stochastic transition kernel between grid cells.
#[derive(Clone, Debug)]
pub enum Kernel {
    /// `n x k` probabilities on a line.
    Line(Array2<f64>),
    /// Per-axis probabilities; `K_ij = kx[i, jx] * ky[i, jy]`.
    Separable { kx: Array2<f64>, ky: Array2<f64> },
}

impl Kernel {
    /// Builds the kernel from predicted means (`cells x dim`) and the noise standard deviation.
    pub fn build(grid: &GridSpec, means: &Array2<f64>, std: f64) -> Result<Self> {
        if means.nrows() != grid.cells() || means.ncols() != grid.dim() {
            return Err(Error::ShapeMismatch { expected: grid.cells() * grid.dim(), got: means.len() });
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(Error::ModelEvalFailure("non-finite predicted mean".into()));
        }
        if std.is_nan() || std <= 0.0 {
            return Err(Error::Config(format!("noise std must be positive, got {std}")));
        }
        let spec = BinSpec { bins: grid.bins(), topology: grid.topology(), std };
        Ok(match grid.dim() {
            1 => Kernel::Line(spec.matrix(means)),
            _ => Kernel::Separable {
                kx: spec.matrix(&means.column(0).to_owned().insert_axis(ndarray::Axis(1))),
                ky: spec.matrix(&means.column(1).to_owned().insert_axis(ndarray::Axis(1))),
            },
        })
    }

    pub fn sources(&self) -> usize {
        match self {
            Kernel::Line(k) => k.nrows(),
            Kernel::Separable { kx, .. } => kx.nrows(),
        }
    }

    /// Transition probabilities out of source cell `i`.
    pub fn row(&self, i: usize) -> Vec<f64> {
        match self {
            Kernel::Line(k) => k.row(i).to_vec(),
            Kernel::Separable { kx, ky } => {
                let mut out = Vec::with_capacity(kx.ncols() * ky.ncols());
                for a in kx.row(i) {
                    out.extend(ky.row(i).iter().map(|b| a * b));
                }
                out
            }
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.sources()).map(|i| self.row(i).iter().sum()).collect()
    }

    /// `mu K` as raw weights.
    pub fn push(&self, mass: &[f64]) -> Vec<f64> {
        match self {
            Kernel::Line(k) => {
                let mut out = vec![0.0; k.ncols()];
                for (i, m) in mass.iter().enumerate() {
                    if *m == 0.0 {
                        continue;
                    }
                    for (o, p) in out.iter_mut().zip(k.row(i)) {
                        *o += m * p;
                    }
                }
                out
            }
            Kernel::Separable { kx, ky } => {
                let bins = kx.ncols();
                let mut weighted = kx.clone();
                for (mut row, m) in weighted.rows_mut().into_iter().zip(mass) {
                    row *= *m;
                }
                let grid = weighted.t().dot(ky);
                let mut out = Vec::with_capacity(bins * bins);
                out.extend(grid.iter());
                out
            }
        }
    }

    /// `mu K` as a distribution.
    pub fn apply(&self, mu: &GridDistribution) -> Result<GridDistribution> {
        GridDistribution::from_kernel_output(self.push(mu.mass()), *mu.grid())
    }
}

/// Recorded counterpart of `Kernel::build(..).push(..)`: `mu` is `1 x cells`, `means` is
/// `cells x dim`. Returns the `1 x cells` pushed mass.
pub fn push_tape(tape: &mut Tape, grid: &GridSpec, mu: Var, means: Var, std: f64) -> Var {
    let spec = BinSpec { bins: grid.bins(), topology: grid.topology(), std };
    match grid.dim() {
        1 => {
            let k = tape.gaussian_bins(means, spec);
            tape.matmul(mu, k)
        }
        _ => {
            let mx = tape.slice_cols(means, 0, 1);
            let my = tape.slice_cols(means, 1, 2);
            let kx = tape.gaussian_bins(mx, spec);
            let ky = tape.gaussian_bins(my, spec);
            tape.separable_push(mu, kx, ky)
        }
    }
}
