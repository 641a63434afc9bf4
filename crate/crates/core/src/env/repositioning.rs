//! Vehicle repositioning on the unit square with passenger trips.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{kl_divergence, GridDistribution, GridSpec, Topology};

/// Smoothing added to the fleet distribution inside the KL reward.
pub const KL_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Repositioning {
    pub grid: GridSpec,
    pub steps: usize,
    pub noise_std: f64,
    pub action_bound: f64,
    /// Passenger demand distribution.
    pub demand: GridDistribution,
    /// Row-stochastic origin-destination matrix (`cells x cells`).
    pub trips: Array2<f64>,
}

impl Repositioning {
    pub fn new(demand: GridDistribution, trips: Array2<f64>, steps: usize, noise_std: f64) -> Result<Self> {
        let grid = *demand.grid();
        if grid.dim() != 2 || grid.topology() != Topology::ClippedBox {
            return Err(Error::GridMismatch("repositioning needs a clipped 2D grid".into()));
        }
        check_stochastic(&trips, grid.cells())?;
        Ok(Self { grid, steps, noise_std, action_bound: 1.0, demand, trips })
    }

    /// Probability that a vehicle in each cell picks up a passenger.
    pub fn occupancy(&self, mu: &[f64]) -> Vec<f64> {
        occupancy(mu, self.demand.mass())
    }

    /// Fleet distribution after passenger trips.
    pub fn demand_shift(&self, mu: &GridDistribution) -> Result<GridDistribution> {
        self.grid.ensure_same(mu.grid())?;
        let out = demand_shift(mu.mass(), self.demand.mass(), &self.trips);
        GridDistribution::normalize(&out, self.grid)
    }

    /// `-KL(demand || mu)`.
    pub fn reward(&self, mu: &GridDistribution) -> Result<f64> {
        Ok(-kl_divergence(&self.demand, mu, KL_EPS)?)
    }

    /// Noise-free repositioning move `clip(s + a, 0, 1)`.
    pub fn true_transition(&self, shifted: [f64; 2], a: [f64; 2]) -> [f64; 2] {
        [(shifted[0] + a[0]).clamp(0.0, 1.0), (shifted[1] + a[1]).clamp(0.0, 1.0)]
    }

    /// Samples the trip stage for one vehicle at `s` when the fleet is `mu`.
    pub fn sample_trip(&self, s: [f64; 2], mu: &GridDistribution, rng: &mut impl Rng) -> [f64; 2] {
        let cell = self.grid.cell_of(&s);
        let p = occupancy(&mu.mass()[cell..=cell], &self.demand.mass()[cell..=cell])[0];
        if rng.gen::<f64>() >= p {
            return s;
        }
        self.sample_destination(cell, rng)
    }

    /// Destination point for a trip starting in `cell`: a `Phi`-row cell, uniform inside it.
    pub fn sample_destination(&self, cell: usize, rng: &mut impl Rng) -> [f64; 2] {
        let u: f64 = rng.gen();
        let row = self.trips.row(cell);
        let mut acc = 0.0;
        let mut dest = row.len() - 1;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                dest = j;
                break;
            }
        }
        let [i, j] = self.grid.axis_indices(dest);
        let k = self.grid.bins() as f64;
        [(i as f64 + rng.gen::<f64>()) / k, (j as f64 + rng.gen::<f64>()) / k]
    }

    /// Adds Gaussian noise truncated so the result stays inside the square.
    pub fn add_noise(&self, mean: [f64; 2], rng: &mut impl Rng) -> [f64; 2] {
        let normal = Normal::new(0.0, self.noise_std).expect("valid std");
        mean.map(|m| loop {
            let x = m + normal.sample(rng);
            if (0.0..=1.0).contains(&x) {
                break x;
            }
        })
    }

    pub fn write_trips_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["from_cell", "to_cell", "prob"])?;
        for ((i, j), p) in self.trips.indexed_iter() {
            if *p > 0.0 {
                w.write_record([i.to_string(), j.to_string(), format!("{p:e}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `min(1, demand / fleet)` per cell, taken as 1 for empty cells.
pub fn occupancy(mu: &[f64], demand: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(demand)
        .map(|(m, d)| if *m > 0.0 { (d / m).min(1.0) } else { 1.0 })
        .collect()
}

/// `(mu * p) Phi + mu * (1 - p)` as raw weights.
pub fn demand_shift(mu: &[f64], demand: &[f64], trips: &Array2<f64>) -> Vec<f64> {
    let p = occupancy(mu, demand);
    let mut out: Vec<f64> = mu.iter().zip(&p).map(|(m, p)| m * (1.0 - p)).collect();
    for (i, (m, p)) in mu.iter().zip(&p).enumerate() {
        let busy = m * p;
        if busy == 0.0 {
            continue;
        }
        for (o, phi) in out.iter_mut().zip(trips.row(i)) {
            *o += busy * phi;
        }
    }
    out
}

/// Reads sparse `from_cell,to_cell,prob` triplets into a dense matrix.
pub fn read_trips_csv(path: &Path, cells: usize) -> Result<Array2<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut phi = Array2::zeros((cells, cells));
    for rec in r.records() {
        let rec = rec?;
        let bad = || Error::Config(format!("malformed trip row {rec:?}"));
        let field = |i: usize| rec.get(i).map(str::trim).ok_or_else(bad);
        let from: usize = field(0)?.parse().map_err(|_| bad())?;
        let to: usize = field(1)?.parse().map_err(|_| bad())?;
        let p: f64 = field(2)?.parse().map_err(|_| bad())?;
        if from >= cells || to >= cells {
            return Err(Error::ShapeMismatch { expected: cells, got: from.max(to) + 1 });
        }
        phi[[from, to]] = p;
    }
    check_stochastic(&phi, cells)?;
    Ok(phi)
}

fn check_stochastic(phi: &Array2<f64>, cells: usize) -> Result<()> {
    if phi.dim() != (cells, cells) {
        return Err(Error::ShapeMismatch { expected: cells * cells, got: phi.len() });
    }
    for (i, row) in phi.rows().into_iter().enumerate() {
        if let Some(v) = row.iter().find(|v| v.is_nan() || **v < 0.0) {
            return Err(Error::NegativeWeight { index: i, value: *v });
        }
        let s: f64 = row.sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("trip matrix row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// Parameters of the seeded synthetic demand generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandParams {
    pub seed: u64,
    pub min_bumps: usize,
    pub max_bumps: usize,
    /// Bump standard deviation range, in unit-square lengths.
    pub min_width: f64,
    pub max_width: f64,
    /// Length scale of the distance-decayed trip kernel.
    pub trip_scale: f64,
    /// Share of each trip row sent to the two attractor cells.
    pub attractor_weight: f64,
    /// Accepted demand entropy range as fractions of `log cells`.
    pub min_entropy_fraction: f64,
    pub max_entropy_fraction: f64,
}

impl Default for DemandParams {
    fn default() -> Self {
        Self {
            seed: 7,
            min_bumps: 3,
            max_bumps: 6,
            min_width: 0.06,
            max_width: 0.15,
            trip_scale: 0.15,
            attractor_weight: 0.2,
            min_entropy_fraction: 0.5,
            max_entropy_fraction: 0.95,
        }
    }
}

/// Seeded demand and trip matrix: a median-smoothed mixture of Gaussian bumps, and a
/// distance-decayed trip kernel blended with two attractor destinations.
pub fn synthetic_demand(params: &DemandParams, grid: GridSpec) -> Result<(GridDistribution, Array2<f64>)> {
    if grid.dim() != 2 {
        return Err(Error::WrongDimensionality { expected: 2, got: grid.dim() });
    }
    if params.min_bumps == 0 || params.min_bumps > params.max_bumps {
        return Err(Error::Config("bump count range is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let cells = grid.cells();
    let log_cells = (cells as f64).ln();
    let bumps = rng.gen_range(params.min_bumps..=params.max_bumps);
    let centres: Vec<[f64; 2]> =
        (0..bumps).map(|_| [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)]).collect();
    let weights: Vec<f64> = (0..bumps).map(|_| rng.gen_range(0.5..1.5)).collect();
    let base_widths: Vec<f64> =
        (0..bumps).map(|_| rng.gen_range(params.min_width..=params.max_width)).collect();

    // Widen or narrow all bumps until the entropy lands in the accepted band.
    let mut scale = 1.0;
    let mut demand = None;
    for _ in 0..60 {
        let field: Vec<f64> = (0..cells)
            .map(|c| {
                let x = grid.center(c);
                centres
                    .iter()
                    .zip(&weights)
                    .zip(&base_widths)
                    .map(|((m, w), s)| {
                        let sd = s * scale;
                        let d2 = (x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2);
                        w * (-0.5 * d2 / (sd * sd)).exp()
                    })
                    .sum::<f64>()
            })
            .collect();
        let smoothed = median_smooth(&field, grid.bins());
        let candidate = GridDistribution::normalize(&smoothed, grid)?;
        let h = candidate.shannon_entropy() / log_cells;
        if h < params.min_entropy_fraction {
            scale *= 1.15;
        } else if h > params.max_entropy_fraction {
            scale /= 1.15;
        } else {
            demand = Some(candidate);
            break;
        }
    }
    let demand = demand.ok_or_else(|| {
        Error::Config("synthetic demand could not reach the requested entropy band".into())
    })?;

    let attractors = [rng.gen_range(0..cells), rng.gen_range(0..cells)];
    let mut trips = Array2::zeros((cells, cells));
    for i in 0..cells {
        let ci = grid.center(i);
        let mut row: Vec<f64> = (0..cells)
            .map(|j| {
                let cj = grid.center(j);
                (-((ci[0] - cj[0]).abs() + (ci[1] - cj[1]).abs()) / params.trip_scale).exp()
            })
            .collect();
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v *= (1.0 - params.attractor_weight) / total);
        for a in attractors {
            row[a] += 0.5 * params.attractor_weight;
        }
        let total: f64 = row.iter().sum();
        for (j, v) in row.iter().enumerate() {
            trips[[i, j]] = v / total;
        }
    }
    Ok((demand, trips))
}

/// 3x3 median filter on a `k x k` field; border windows use the cells that exist.
fn median_smooth(field: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; field.len()];
    let mut window = Vec::with_capacity(9);
    for i in 0..k {
        for j in 0..k {
            window.clear();
            for di in i.saturating_sub(1)..=(i + 1).min(k - 1) {
                for dj in j.saturating_sub(1)..=(j + 1).min(k - 1) {
                    window.push(field[di * k + dj]);
                }
            }
            window.sort_by(f64::total_cmp);
            let n = window.len();
            out[i * k + j] = if n % 2 == 1 {
                window[n / 2]
            } else {
                0.5 * (window[n / 2 - 1] + window[n / 2])
            };
        }
    }
    out
}
