//! Wasserstein-1 distances between grid distributions.
//!
//! One-dimensional problems use the CDF closed form (with the circular-offset minimization on
//! the torus); two-dimensional problems are solved exactly as a transportation problem with the
//! L1 ground metric between cell centers.

mod simplex;

pub use simplex::{solve_transport, TransportSolution, FEASIBILITY_SLACK};

use crate::error::{Error, Result};
use crate::grid::{GridDistribution, GridSpec, Topology};

/// W1 on a one-dimensional grid.
pub fn wasserstein1_1d(mu: &GridDistribution, nu: &GridDistribution) -> Result<f64> {
    let grid = mu.grid();
    grid.ensure_same(nu.grid())?;
    if grid.dim() != 1 {
        return Err(Error::WrongDimensionality { expected: 1, got: grid.dim() });
    }
    let mut acc = 0.0;
    let cdf_gap: Vec<f64> = mu
        .mass()
        .iter()
        .zip(nu.mass())
        .map(|(a, b)| {
            acc += a - b;
            acc
        })
        .collect();
    let k = grid.bins() as f64;
    let offset = match grid.topology() {
        Topology::ClippedBox => 0.0,
        // Sum of |D_i - t| is minimized by a median of the D_i, which is one of the candidates.
        Topology::Torus => {
            let mut sorted = cdf_gap.clone();
            sorted.sort_by(f64::total_cmp);
            sorted[(sorted.len() - 1) / 2]
        }
    };
    Ok(cdf_gap.iter().map(|d| (d - offset).abs()).sum::<f64>() / k)
}

/// Exact W1 on a two-dimensional grid under the L1 ground metric.
///
/// On the torus each axis uses the circular distance.
pub fn wasserstein1_grid(mu: &GridDistribution, nu: &GridDistribution) -> Result<f64> {
    if mu.grid().dim() != 2 {
        return Err(Error::WrongDimensionality { expected: 2, got: mu.grid().dim() });
    }
    Ok(transport_plan(mu, nu)?.map_or(0.0, |plan| plan.cost))
}

/// W1 between two distributions of any supported dimensionality.
pub fn wasserstein1(mu: &GridDistribution, nu: &GridDistribution) -> Result<f64> {
    match mu.grid().dim() {
        1 => wasserstein1_1d(mu, nu),
        _ => wasserstein1_grid(mu, nu),
    }
}

/// Optimal plan between the positive and negative parts of `mu - nu`.
///
/// For a metric ground cost, shared mass never needs to move, so the problem shrinks to the
/// cells where the two distributions differ. Returns `None` when they coincide. The solution's
/// cost is already in state-space units.
pub fn transport_plan(mu: &GridDistribution, nu: &GridDistribution) -> Result<Option<GridPlan>> {
    let grid = *mu.grid();
    grid.ensure_same(nu.grid())?;
    let mut sources = Vec::new();
    let mut sinks = Vec::new();
    let (mut supply, mut demand) = (Vec::new(), Vec::new());
    for (c, (a, b)) in mu.mass().iter().zip(nu.mass()).enumerate() {
        let d = a - b;
        if d > 0.0 {
            sources.push(c);
            supply.push(d);
        } else if d < 0.0 {
            sinks.push(c);
            demand.push(-d);
        }
    }
    let surplus: f64 = supply.iter().sum();
    let deficit: f64 = demand.iter().sum();
    if surplus.max(deficit) <= FEASIBILITY_SLACK {
        return Ok(None);
    }
    if supply.is_empty() || demand.is_empty() {
        return Err(Error::FlowInfeasible(format!(
            "one-sided mass difference ({surplus:e} vs {deficit:e}); inputs not normalized"
        )));
    }
    // Spread the round-off imbalance over the demands so the problem is exactly balanced.
    let scale = surplus / deficit;
    demand.iter_mut().for_each(|d| *d *= scale);
    let mut cost = Vec::with_capacity(sources.len() * sinks.len());
    for &s in &sources {
        for &t in &sinks {
            cost.push(cell_steps(&grid, s, t) as f64);
        }
    }
    let sol = solve_transport(&supply, &demand, &cost)?;
    Ok(Some(GridPlan { cost: sol.cost / grid.bins() as f64, sources, sinks, solution: sol }))
}

/// A 1-Lipschitz potential `f` (state-space units) with `W1(mu, nu) = sum (mu - nu) f`.
///
/// This is the gradient of `W1(., nu)` at `mu` up to an additive constant. Built from the
/// transport duals on the cells where the distributions differ and extended to every cell by
/// the c-transform over the deficit cells.
pub fn kantorovich_potential(mu: &GridDistribution, nu: &GridDistribution) -> Result<Vec<f64>> {
    let grid = *mu.grid();
    let Some(plan) = transport_plan(mu, nu)? else {
        return Ok(vec![0.0; grid.cells()]);
    };
    let k = grid.bins() as f64;
    let sink_values: Vec<f64> = plan.solution.demand_potentials.iter().map(|p| -p).collect();
    Ok((0..grid.cells())
        .map(|x| {
            plan.sinks
                .iter()
                .zip(&sink_values)
                .map(|(&j, f)| f + cell_steps(&grid, x, j) as f64)
                .fold(f64::INFINITY, f64::min)
                / k
        })
        .collect())
}

/// A solved transport problem on grid cells.
#[derive(Debug, Clone)]
pub struct GridPlan {
    /// Optimal cost in state-space units.
    pub cost: f64,
    pub sources: Vec<usize>,
    pub sinks: Vec<usize>,
    /// Underlying solution with costs measured in cell steps.
    pub solution: TransportSolution,
}

/// L1 distance between two cells measured in cell steps.
pub fn cell_steps(grid: &GridSpec, a: usize, b: usize) -> usize {
    let [ai, aj] = grid.axis_indices(a);
    let [bi, bj] = grid.axis_indices(b);
    let k = grid.bins();
    let axis = |x: usize, y: usize| {
        let d = x.abs_diff(y);
        match grid.topology() {
            Topology::ClippedBox => d,
            Topology::Torus => d.min(k - d),
        }
    };
    match grid.dim() {
        1 => axis(ai, bi),
        _ => axis(ai, bi) + axis(aj, bj),
    }
}
