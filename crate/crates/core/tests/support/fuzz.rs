//! Random mean fields, policies and transition models for operator fuzzing.

use meadow::env::repositioning::{synthetic_demand, DemandParams};
use meadow::env::{mean_field_step, Environment, Policy, Repositioning, RewardVariant, Swarm, TransitionModel};
use meadow::grid::{GridDistribution, GridSpec, Topology};
use meadow::Result;
use ndarray::Array2;
use rand::Rng;

pub fn swarm(bins: usize, steps: usize) -> Environment {
    Environment::Swarm(Swarm::new(bins, steps, RewardVariant::Penalized))
}

pub fn repositioning(bins: usize, steps: usize, seed: u64) -> Environment {
    let grid = GridSpec::square(bins, Topology::ClippedBox);
    let params = DemandParams { seed, ..DemandParams::default() };
    let (demand, trips) = synthetic_demand(&params, grid).expect("demand");
    Environment::Repositioning(Repositioning::new(demand, trips, steps, 0.0175).expect("env"))
}

/// Sparse-ish random distribution: some cells are exactly empty.
pub fn random_distribution(grid: GridSpec, rng: &mut impl Rng) -> GridDistribution {
    let w: Vec<f64> = (0..grid.cells())
        .map(|_| if rng.gen_bool(0.3) { 0.0 } else { rng.gen::<f64>().powi(3) })
        .collect();
    if w.iter().all(|v| *v == 0.0) {
        return GridDistribution::uniform(grid);
    }
    GridDistribution::normalize(&w, grid).expect("positive mass")
}

/// `bound * tanh(w s + b + c * mass_at_first_cell + t / 10)` per action coordinate.
pub struct RandomPolicy {
    w: Vec<f64>,
    b: Vec<f64>,
    c: f64,
    bound: f64,
    action_dim: usize,
}

impl RandomPolicy {
    pub fn new(env: &Environment, rng: &mut impl Rng) -> Self {
        let action_dim = env.action_dim();
        Self {
            w: (0..action_dim * env.state_dim()).map(|_| rng.gen_range(-20.0..20.0)).collect(),
            b: (0..action_dim).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            c: rng.gen_range(-5.0..5.0),
            bound: env.action_bound(),
            action_dim,
        }
    }
}

impl Policy for RandomPolicy {
    fn act(&self, states: &Array2<f64>, mu: &GridDistribution, t: usize) -> Result<Array2<f64>> {
        let d = states.ncols();
        Ok(Array2::from_shape_fn((states.nrows(), self.action_dim), |(r, a)| {
            let z: f64 = (0..d).map(|j| self.w[a * d + j] * states[[r, j]]).sum::<f64>()
                + self.b[a]
                + self.c * mu.mass()[0]
                + t as f64 / 10.0;
            self.bound * z.tanh()
        }))
    }
}

/// Means `gain * (s + a dt) + offset + wobble * sin(7 s)`; may leave the state space.
pub struct RandomModel {
    gain: f64,
    dt: f64,
    offset: Vec<f64>,
    wobble: f64,
}

impl RandomModel {
    pub fn new(env: &Environment, rng: &mut impl Rng) -> Self {
        Self {
            gain: rng.gen_range(0.5..1.5),
            dt: rng.gen_range(0.0..0.5),
            offset: (0..env.state_dim()).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            wobble: rng.gen_range(0.0..0.5),
        }
    }
}

impl TransitionModel for RandomModel {
    fn predict_mean(&self, states: &Array2<f64>, _mu: &GridDistribution, actions: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(Array2::from_shape_fn(states.dim(), |(r, j)| {
            let s = states[[r, j]];
            let a = actions[[r, j.min(actions.ncols() - 1)]];
            self.gain * (s + a * self.dt) + self.offset[j] + self.wobble * (7.0 * s).sin()
        }))
    }
}

/// One fuzz case: kernel rows sum to one and the output is a distribution.
pub fn check_random_step(env: &Environment, rng: &mut impl Rng) -> std::result::Result<(), String> {
    let mu = random_distribution(env.grid(), rng);
    let policy = RandomPolicy::new(env, rng);
    let model = RandomModel::new(env, rng);
    let t = rng.gen_range(0..env.steps());
    let out = mean_field_step(env, &mu, t, &policy, &model).map_err(|e| e.to_string())?;
    for (i, s) in out.kernel.row_sums().iter().enumerate() {
        if (s - 1.0).abs() > 1e-9 {
            return Err(format!("kernel row {i} sums to {s}"));
        }
    }
    let mass = out.next.mass();
    if mass.iter().any(|m| m.is_nan() || *m < 0.0) {
        return Err("negative or non-finite mass".into());
    }
    let total: f64 = mass.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(format!("output mass {total}"));
    }
    Ok(())
}
