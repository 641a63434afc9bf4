//! Swarm motion on the unit circle.

use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{mean_field_step, Environment, TrueDynamics};
use crate::error::Result;
use crate::grid::{GridDistribution, GridSpec, Topology};
use crate::transport::wasserstein1_1d;

/// Density smoothing inside the crowding penalty.
pub const CROWDING_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardVariant {
    /// Positional reward, kinetic cost and a crowding penalty `-log density`.
    Penalized,
    /// Positional reward and kinetic cost only; spreading is enforced by a constraint instead.
    Safe,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Swarm {
    pub grid: GridSpec,
    pub steps: usize,
    pub action_bound: f64,
    pub variant: RewardVariant,
}

impl Swarm {
    pub fn new(bins: usize, steps: usize, variant: RewardVariant) -> Self {
        Self { grid: GridSpec::line(bins, Topology::Torus), steps, action_bound: 7.0, variant }
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    pub fn noise_std(&self) -> f64 {
        self.dt().sqrt()
    }

    /// Noise-free next position before wrapping: `s + a dt`.
    pub fn drift(&self, s: f64, a: f64) -> f64 {
        s + a * self.dt()
    }

    /// Noise-free next position on the circle.
    pub fn true_transition(&self, s: f64, a: f64) -> f64 {
        self.drift(s, a).rem_euclid(1.0)
    }

    /// Per-agent reward at position `s` with action `a` under population `mu`.
    pub fn reward(&self, s: f64, mu: &GridDistribution, a: f64) -> f64 {
        let base = positional_reward(s) - 0.5 * a * a;
        match self.variant {
            RewardVariant::Safe => base,
            RewardVariant::Penalized => base - (mu.density_at(&[s]) + CROWDING_EPS).ln(),
        }
    }
}

/// `phi(s) = 2 pi^2 (sin 2 pi s - cos^2 2 pi s) + 2 sin 2 pi s`.
pub fn positional_reward(s: f64) -> f64 {
    let (sin, cos) = (2.0 * PI * s).sin_cos();
    2.0 * PI * PI * (sin - cos * cos) + 2.0 * sin
}

/// Stationary optimal action of the continuous-time problem.
pub fn analytic_action(s: f64) -> f64 {
    2.0 * PI * (2.0 * PI * s).cos()
}

/// Unnormalized stationary density `exp(2 sin 2 pi s)`.
pub fn analytic_density_unnormalized(s: f64) -> f64 {
    (2.0 * (2.0 * PI * s).sin()).exp()
}

/// Grid estimate of `int_0^1 exp(2 sin 2 pi s) ds` by the midpoint rule.
pub fn analytic_normalizer(bins: usize) -> f64 {
    let g = GridSpec::line(bins, Topology::Torus);
    (0..bins).map(|i| analytic_density_unnormalized(g.axis_center(i))).sum::<f64>() / bins as f64
}

/// Analytic stationary distribution on the grid.
pub fn analytic_distribution(grid: GridSpec) -> GridDistribution {
    let w: Vec<f64> = (0..grid.bins())
        .map(|i| analytic_density_unnormalized(grid.axis_center(i)))
        .collect();
    GridDistribution::normalize(&w, grid).expect("positive weights")
}

/// The analytic action at every row, usable as a [`Policy`](super::Policy).
pub fn analytic_policy(states: &Array2<f64>, _mu: &GridDistribution, _t: usize) -> Result<Array2<f64>> {
    Ok(states.mapv(analytic_action))
}

/// The analytic solution on a grid and how far one true mean-field step moves it.
#[derive(Clone, Debug)]
pub struct AnalyticOracle {
    pub actions: Vec<f64>,
    pub distribution: GridDistribution,
    /// `W1(step(mu*), mu*)` under the analytic policy and true transitions.
    pub residual: f64,
}

pub fn analytic_oracle(bins: usize, steps: usize) -> Result<AnalyticOracle> {
    let env = Environment::Swarm(Swarm::new(bins, steps, RewardVariant::Penalized));
    let grid = env.grid();
    let distribution = analytic_distribution(grid);
    let next = mean_field_step(&env, &distribution, 0, &analytic_policy, &TrueDynamics(&env))?.next;
    Ok(AnalyticOracle {
        actions: grid.centers().into_iter().map(analytic_action).collect(),
        residual: wasserstein1_1d(&next, &distribution)?,
        distribution,
    })
}
