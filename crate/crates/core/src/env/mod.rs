//! Benchmark environments and the mean-field transition operator.

pub mod kernel;
pub mod repositioning;
pub mod swarm;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{GridDistribution, GridSpec};
pub use kernel::Kernel;
pub use repositioning::Repositioning;
pub use swarm::{RewardVariant, Swarm};

/// Maps agent states (`n x state_dim`) to actions (`n x action_dim`) at step `t`.
pub trait Policy {
    fn act(&self, states: &Array2<f64>, mu: &GridDistribution, t: usize) -> Result<Array2<f64>>;
}

impl<F> Policy for F
where
    F: Fn(&Array2<f64>, &GridDistribution, usize) -> Result<Array2<f64>>,
{
    fn act(&self, states: &Array2<f64>, mu: &GridDistribution, t: usize) -> Result<Array2<f64>> {
        self(states, mu, t)
    }
}

/// Predicts the mean next state (`n x state_dim`) of agents taking `actions` in `states`.
pub trait TransitionModel {
    fn predict_mean(
        &self,
        states: &Array2<f64>,
        mu: &GridDistribution,
        actions: &Array2<f64>,
    ) -> Result<Array2<f64>>;
}

/// The environment's own noise-free transition function.
pub struct TrueDynamics<'a>(pub &'a Environment);

impl TransitionModel for TrueDynamics<'_> {
    fn predict_mean(
        &self,
        states: &Array2<f64>,
        _mu: &GridDistribution,
        actions: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        Ok(self.0.true_mean(states, actions))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Environment {
    Swarm(Swarm),
    Repositioning(Repositioning),
}

/// A noise-driven sample of one agent transition.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentStep {
    /// Regression target for the dynamics model.
    pub target: Vec<f64>,
    /// New agent state inside the state space.
    pub next: Vec<f64>,
}

impl Environment {
    pub fn grid(&self) -> GridSpec {
        match self {
            Environment::Swarm(e) => e.grid,
            Environment::Repositioning(e) => e.grid,
        }
    }

    pub fn steps(&self) -> usize {
        match self {
            Environment::Swarm(e) => e.steps,
            Environment::Repositioning(e) => e.steps,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.grid().dim()
    }

    pub fn action_dim(&self) -> usize {
        self.state_dim()
    }

    pub fn action_bound(&self) -> f64 {
        match self {
            Environment::Swarm(e) => e.action_bound,
            Environment::Repositioning(e) => e.action_bound,
        }
    }

    pub fn noise_std(&self) -> f64 {
        match self {
            Environment::Swarm(e) => e.noise_std(),
            Environment::Repositioning(e) => e.noise_std,
        }
    }

    /// Cell centers as `cells x dim`.
    pub fn cell_centers(&self) -> Array2<f64> {
        let g = self.grid();
        Array2::from_shape_vec((g.cells(), g.dim()), g.centers()).expect("centers")
    }

    /// Distribution the policy acts on: passenger trips for repositioning, identity otherwise.
    pub fn shift(&self, mu: &GridDistribution) -> Result<GridDistribution> {
        match self {
            Environment::Swarm(_) => Ok(mu.clone()),
            Environment::Repositioning(e) => e.demand_shift(mu),
        }
    }

    /// Recorded counterpart of [`shift`](Self::shift) for a `1 x cells` mass row.
    pub fn shift_tape(&self, tape: &mut Tape, mu: Var) -> Var {
        match self {
            Environment::Swarm(_) => mu,
            Environment::Repositioning(e) => {
                let demand = tape.constant(row(e.demand.mass()));
                let trips = tape.constant(e.trips.clone());
                let busy = tape.min(mu, demand);
                let travelled = tape.matmul(busy, trips);
                let idle = tape.sub(mu, busy);
                tape.add(travelled, idle)
            }
        }
    }

    /// Noise-free transition `f(s, a)`; swarm positions are left unwrapped.
    pub fn true_mean(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
        match self {
            Environment::Swarm(e) => states + &(actions * e.dt()),
            Environment::Repositioning(_) => (states + actions).mapv(|v| v.clamp(0.0, 1.0)),
        }
    }

    /// Recorded counterpart of [`true_mean`](Self::true_mean).
    pub fn true_mean_tape(&self, tape: &mut Tape, states: Var, actions: Var) -> Var {
        match self {
            Environment::Swarm(e) => {
                let drift = tape.scale(actions, e.dt());
                tape.add(states, drift)
            }
            Environment::Repositioning(_) => {
                let moved = tape.add(states, actions);
                tape.clip(moved, 0.0, 1.0)
            }
        }
    }

    /// Grid quadrature of the per-agent reward: `sum_i mu_i r(c_i, mu, a_i)`.
    pub fn expected_reward(&self, mu: &GridDistribution, actions: &Array2<f64>) -> Result<f64> {
        match self {
            Environment::Swarm(e) => {
                let g = self.grid();
                Ok((0..g.cells())
                    .map(|i| mu.mass()[i] * e.reward(g.axis_center(i), mu, actions[[i, 0]]))
                    .sum())
            }
            Environment::Repositioning(e) => e.reward(mu),
        }
    }

    /// Recorded counterpart of [`expected_reward`](Self::expected_reward); `mu` is `1 x cells`,
    /// `actions` is `cells x action_dim`.
    pub fn expected_reward_tape(&self, tape: &mut Tape, mu: Var, actions: Var) -> Var {
        match self {
            Environment::Swarm(e) => {
                let g = self.grid();
                let phi: Vec<f64> =
                    (0..g.cells()).map(|i| swarm::positional_reward(g.axis_center(i))).collect();
                let phi = tape.constant(row(&phi));
                let a = tape.transpose(actions);
                let kinetic = tape.square(a);
                let kinetic = tape.scale(kinetic, -0.5);
                let mut per_cell = tape.add(phi, kinetic);
                if e.variant == RewardVariant::Penalized {
                    let density = tape.scale(mu, g.cells() as f64);
                    let density = tape.offset(density, swarm::CROWDING_EPS);
                    let crowd = tape.log(density);
                    per_cell = tape.sub(per_cell, crowd);
                }
                let weighted = tape.mul(per_cell, mu);
                tape.sum(weighted)
            }
            Environment::Repositioning(e) => {
                // -sum rho log(rho / (mu + eps)) = sum rho log(mu + eps) - sum rho log rho
                let rho = e.demand.mass();
                let neg_entropy: f64 =
                    rho.iter().filter(|r| **r > 0.0).map(|r| r * r.ln()).sum();
                let weights = tape.constant(row(rho));
                let smoothed = tape.offset(mu, repositioning::KL_EPS);
                let log_mu = tape.log(smoothed);
                let cross = tape.mul(weights, log_mu);
                let cross = tape.sum(cross);
                tape.offset(cross, -neg_entropy)
            }
        }
    }

    /// Trip stage for one agent; identity for the swarm.
    pub fn shift_agent(&self, s: &[f64], mu: &GridDistribution, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            Environment::Swarm(_) => s.to_vec(),
            Environment::Repositioning(e) => e.sample_trip([s[0], s[1]], mu, rng).to_vec(),
        }
    }

    /// Samples the noisy transition of one agent from its (shifted) state.
    pub fn sample_step(&self, s: &[f64], a: &[f64], rng: &mut impl Rng) -> AgentStep {
        match self {
            Environment::Swarm(e) => {
                let noise = Normal::new(0.0, e.noise_std()).expect("valid std");
                let target = e.drift(s[0], a[0]) + noise.sample(rng);
                AgentStep { target: vec![target], next: vec![target.rem_euclid(1.0)] }
            }
            Environment::Repositioning(e) => {
                let mean = e.true_transition([s[0], s[1]], [a[0], a[1]]);
                let next = e.add_noise(mean, rng).to_vec();
                AgentStep { target: next.clone(), next }
            }
        }
    }

    /// Samples an agent state from a grid distribution: a cell, then uniform inside it.
    pub fn sample_state(&self, mu: &GridDistribution, rng: &mut impl Rng) -> Vec<f64> {
        let g = self.grid();
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut cell = g.cells() - 1;
        for (i, m) in mu.mass().iter().enumerate() {
            acc += m;
            if u < acc {
                cell = i;
                break;
            }
        }
        let k = g.bins() as f64;
        let axes = g.axis_indices(cell);
        (0..g.dim()).map(|d| (axes[d] as f64 + rng.gen::<f64>()) / k).collect()
    }
}

/// `1 x n` matrix from a slice.
pub fn row(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row")
}

/// One application of the mean-field operator with its kernel.
pub struct StepOutcome {
    /// Distribution the policy acted on (after passenger trips).
    pub shifted: GridDistribution,
    /// Actions at the cell centers.
    pub actions: Array2<f64>,
    pub kernel: Kernel,
    pub next: GridDistribution,
}

/// Propagates `mu` one step: trips (if any), policy at cell centers, model means, Gaussian
/// kernel.
pub fn mean_field_step(
    env: &Environment,
    mu: &GridDistribution,
    t: usize,
    policy: &dyn Policy,
    model: &dyn TransitionModel,
) -> Result<StepOutcome> {
    env.grid().ensure_same(mu.grid())?;
    let shifted = env.shift(mu)?;
    let centers = env.cell_centers();
    let actions = policy.act(&centers, &shifted, t)?;
    let means = model.predict_mean(&centers, &shifted, &actions)?;
    if means.dim() != centers.dim() {
        return Err(Error::ModelEvalFailure(format!(
            "model returned {:?} means for {:?} states",
            means.dim(),
            centers.dim()
        )));
    }
    let kernel = Kernel::build(&env.grid(), &means, env.noise_std())?;
    let next = kernel.apply(&shifted)?;
    Ok(StepOutcome { shifted, actions, kernel, next })
}

/// A full-horizon propagation of the mean field.
#[derive(Clone, Debug)]
pub struct Rollout {
    /// `mu_0 ..= mu_T`.
    pub distributions: Vec<GridDistribution>,
    /// Expected reward at each of the `T` steps.
    pub rewards: Vec<f64>,
}

impl Rollout {
    pub fn objective(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Rolls `mu0` forward for the environment horizon and scores it.
pub fn rollout(
    env: &Environment,
    mu0: &GridDistribution,
    policy: &dyn Policy,
    model: &dyn TransitionModel,
) -> Result<Rollout> {
    let mut distributions = vec![mu0.clone()];
    let mut rewards = Vec::with_capacity(env.steps());
    for t in 0..env.steps() {
        let mu = distributions.last().expect("non-empty");
        let out = mean_field_step(env, mu, t, policy, model)?;
        rewards.push(env.expected_reward(mu, &out.actions)?);
        distributions.push(out.next);
    }
    Ok(Rollout { distributions, rewards })
}
