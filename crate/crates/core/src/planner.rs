//! Policy optimization by back-propagation through the mean-field rollout.
//!
//! The policy network also emits a hallucination signal `eta` in `[-1, 1]` per state
//! coordinate that selects a transition inside the ensemble's confidence band:
//! `f(z) = M(z) + beta * sigma(z) * eta(z)`.

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, warn};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::ensemble::Ensemble;
use crate::env::{kernel, row, Environment, Policy};
use crate::error::{Error, Result};
use crate::grid::GridDistribution;
use crate::nn::{clip_global_norm, AdamW, DenseNet, Head, HeadActivation, NetVars};
use crate::safety::{
    constraint_tape, evaluate_constraint, log_barrier_tape, slack_from_value, LipschitzBundle,
    MarginSchedule, SafetySpec, BARRIER_DELTA,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Epochs without a relative improvement of `min_improvement` before stopping.
    pub patience: usize,
    pub min_improvement: f64,
    pub clip_norm: f64,
    /// Weight of the log barrier.
    pub barrier_weight: f64,
    pub barrier_delta: f64,
    /// Keep training the previous episode's policy instead of starting afresh.
    pub warm_start: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            learning_rate: 1e-4,
            weight_decay: 5e-4,
            max_epochs: 20_000,
            patience: 500,
            min_improvement: 0.005,
            clip_norm: 1.0,
            barrier_weight: 1.0,
            barrier_delta: BARRIER_DELTA,
            warm_start: true,
        }
    }
}

/// Time-dependent policy with an extra hallucination head.
///
/// Inputs are the agent state per row plus the shared cell masses and `t / T`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyProfile {
    net: DenseNet,
    action_bound: f64,
    steps: usize,
    cells: usize,
}

impl PolicyProfile {
    pub fn new(env: &Environment, hidden: &[usize], seed: u64) -> Result<Self> {
        let (sizes, heads) = Self::layout(env, hidden);
        Self::from_net(env, DenseNet::xavier(&sizes, &heads, seed)?)
    }

    /// All-zero weights: zero actions and zero hallucination everywhere.
    pub fn zeros(env: &Environment, hidden: &[usize]) -> Result<Self> {
        let (sizes, heads) = Self::layout(env, hidden);
        Self::from_net(env, DenseNet::zeros(&sizes, &heads)?)
    }

    fn layout(env: &Environment, hidden: &[usize]) -> (Vec<usize>, [Head; 2]) {
        let mut sizes = vec![env.state_dim() + env.grid().cells() + 1];
        sizes.extend(hidden);
        sizes.push(env.action_dim() + env.state_dim());
        let heads = [
            Head::new(env.action_dim(), HeadActivation::Tanh),
            Head::new(env.state_dim(), HeadActivation::Tanh),
        ];
        (sizes, heads)
    }

    pub fn from_net(env: &Environment, net: DenseNet) -> Result<Self> {
        let (sizes, heads) = Self::layout(env, &[]);
        let ok = net.input_width() == sizes[0]
            && net.heads().len() == 2
            && net.heads()[0] == heads[0]
            && net.heads()[1] == heads[1];
        if !ok {
            return Err(Error::Config("policy network does not fit the environment".into()));
        }
        Ok(Self { net, action_bound: env.action_bound(), steps: env.steps(), cells: env.grid().cells() })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut DenseNet {
        &mut self.net
    }

    fn shared(&self, mu: &[f64], t: usize) -> Array2<f64> {
        Array2::from_shape_fn((1, self.cells + 1), |(_, j)| {
            if j < self.cells {
                mu[j]
            } else {
                t as f64 / self.steps as f64
            }
        })
    }

    /// Actions and hallucination signals at `states`.
    pub fn evaluate(
        &self,
        states: &Array2<f64>,
        mu: &GridDistribution,
        t: usize,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let mut out = self.net.forward(states, Some(&self.shared(mu.mass(), t)))?;
        let eta = out.pop().expect("two heads");
        let actions = out.pop().expect("two heads") * self.action_bound;
        Ok((actions, eta))
    }

    /// Recorded actions and hallucination signals; `mu` is the `1 x cells` mass row.
    pub fn evaluate_tape(
        &self,
        tape: &mut Tape,
        vars: &NetVars,
        states: Var,
        mu: Var,
        t: usize,
    ) -> Result<(Var, Var)> {
        let time = tape.scalar(t as f64 / self.steps as f64);
        let shared = tape.concat_cols(&[mu, time]);
        let out = self.net.forward_tape(tape, vars, states, Some(shared))?;
        Ok((tape.scale(out[0], self.action_bound), out[1]))
    }

    pub fn to_checkpoint(&self) -> String {
        let mut out = String::new();
        writeln!(out, "policy: bound={} steps={} cells={}", self.action_bound, self.steps, self.cells)
            .expect("write to string");
        out.push_str(&self.net.to_checkpoint());
        out
    }

    pub fn from_checkpoint(env: &Environment, text: &str) -> Result<Self> {
        let (header, body) = text
            .split_once('\n')
            .ok_or_else(|| Error::Checkpoint("empty policy checkpoint".into()))?;
        let expected = format!(
            "policy: bound={} steps={} cells={}",
            env.action_bound(),
            env.steps(),
            env.grid().cells()
        );
        if header.trim() != expected {
            return Err(Error::Checkpoint(format!(
                "policy header {header:?} does not match the environment ({expected:?})"
            )));
        }
        Self::from_net(env, DenseNet::from_checkpoint(body)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(env: &Environment, path: &Path) -> Result<Self> {
        Self::from_checkpoint(env, &std::fs::read_to_string(path)?)
    }
}

impl Policy for PolicyProfile {
    fn act(&self, states: &Array2<f64>, mu: &GridDistribution, t: usize) -> Result<Array2<f64>> {
        Ok(self.evaluate(states, mu, t)?.0)
    }
}

/// Transition model used inside the differentiable rollout.
#[derive(Clone, Copy, Debug)]
pub enum PlanningModel<'a> {
    /// The environment's own transition function.
    Known,
    /// Ensemble mean shifted inside its confidence band by the policy's `eta`.
    Hallucinated(&'a Ensemble),
}

/// Everything fixed during one policy optimization.
#[derive(Clone, Copy, Debug)]
pub struct PlanningProblem<'a> {
    pub env: &'a Environment,
    pub mu0: &'a GridDistribution,
    pub model: PlanningModel<'a>,
    pub spec: &'a SafetySpec,
    pub bundle: &'a LipschitzBundle,
    pub margins: &'a MarginSchedule,
    pub barrier_weight: f64,
    pub barrier_delta: f64,
}

/// Band quantities recorded at one step of a hallucinated rollout.
#[derive(Clone, Copy, Debug)]
pub struct BandVars {
    pub model_mean: Var,
    pub spread: Var,
    pub transition: Var,
}

/// Values of one differentiable rollout.
#[derive(Clone, Debug)]
pub struct RolloutTrace {
    /// Recorded objective; differentiate this.
    pub objective: Var,
    /// The objective plus the policy-independent constant `lambda L_h sum_t C_t / delta`.
    ///
    /// With large margins the barrier sits on its linear extension and the raw objective is
    /// dominated by that constant, so values are compared in this shifted form.
    pub shifted_objective: f64,
    /// `mu_0 ..= mu_T` as `1 x cells` rows.
    pub distributions: Vec<Var>,
    pub rewards: Vec<f64>,
    /// Pessimistic slack at steps `1..=T`; `+inf` when unconstrained.
    pub slacks: Vec<f64>,
    /// Constraint value at steps `1..=T`.
    pub h_values: Vec<f64>,
    pub bands: Vec<BandVars>,
}

impl RolloutTrace {
    pub fn min_slack(&self) -> f64 {
        self.slacks.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

/// Rolls the mean field forward on the tape and assembles the barrier objective
/// `sum_t r(mu_t, pi_t) + lambda log(h_C(mu_{t+1}) - L_h C_{t+1})`.
pub fn differentiable_rollout(
    problem: &PlanningProblem,
    policy: &PolicyProfile,
    tape: &mut Tape,
    vars: &NetVars,
) -> Result<RolloutTrace> {
    let env = problem.env;
    let grid = env.grid();
    let steps = env.steps();
    if problem.margins.len() != steps {
        return Err(Error::ShapeMismatch { expected: steps, got: problem.margins.len() });
    }
    let h0 = evaluate_constraint(problem.spec, problem.mu0)?;
    if h0 < 0.0 {
        return Err(Error::UnsafeInitialDistribution(h0));
    }
    let centers = tape.constant(env.cell_centers());
    let members = match problem.model {
        PlanningModel::Known => Vec::new(),
        PlanningModel::Hallucinated(ens) => ens.record_constants(tape),
    };
    let (lambda, delta) = (problem.barrier_weight, problem.barrier_delta);
    let mut mu = tape.constant(row(problem.mu0.mass()));
    let mut distributions = vec![mu];
    let mut rewards = Vec::with_capacity(steps);
    let mut slacks = Vec::with_capacity(steps);
    let mut h_values = Vec::with_capacity(steps);
    let mut bands = Vec::new();
    let mut objective: Option<Var> = None;
    let mut shifted = 0.0;
    for t in 0..steps {
        let shifted_mu = env.shift_tape(tape, mu);
        let (actions, eta) = policy.evaluate_tape(tape, vars, centers, shifted_mu, t)?;
        let means = match problem.model {
            PlanningModel::Known => env.true_mean_tape(tape, centers, actions),
            PlanningModel::Hallucinated(ens) => {
                let (mean, spread) = ens.predict_tape(tape, &members, centers, shifted_mu, actions)?;
                let offset = tape.mul(spread, eta);
                let offset = tape.scale(offset, ens.beta());
                let transition = tape.add(mean, offset);
                bands.push(BandVars { model_mean: mean, spread, transition });
                transition
            }
        };
        let next = kernel::push_tape(tape, &grid, shifted_mu, means, env.noise_std());
        let reward = env.expected_reward_tape(tape, mu, actions);
        let reward_value = tape.scalar_value(reward);
        rewards.push(reward_value);
        shifted += reward_value;
        let mut step_total = reward;

        let margin = problem.margins.at(t + 1);
        let penalty = problem.bundle.l_h * margin;
        match constraint_tape(tape, problem.spec, next) {
            Some(h) => {
                let h_value = tape.scalar_value(h);
                let slack = tape.offset(h, -penalty);
                let barrier = log_barrier_tape(tape, slack, lambda, delta);
                step_total = tape.add(step_total, barrier);
                let slack_value = slack_from_value(h_value, problem.bundle, margin);
                shifted += if slack_value >= delta {
                    lambda * slack_value.ln() + lambda * penalty / delta
                } else {
                    lambda * (delta.ln() + (h_value - delta) / delta)
                };
                h_values.push(h_value);
                slacks.push(slack_value);
            }
            None => {
                let h_value = if problem.spec.is_constrained() {
                    let dist = GridDistribution::from_kernel_output(tape.value(next).iter().cloned().collect(), grid)?;
                    evaluate_constraint(problem.spec, &dist)?
                } else {
                    f64::INFINITY
                };
                h_values.push(h_value);
                slacks.push(slack_from_value(h_value, problem.bundle, margin));
            }
        }
        objective = Some(match objective {
            None => step_total,
            Some(acc) => tape.add(acc, step_total),
        });
        distributions.push(next);
        mu = next;
    }
    let objective = objective.unwrap_or_else(|| tape.scalar(0.0));
    Ok(RolloutTrace { objective, shifted_objective: shifted, distributions, rewards, slacks, h_values, bands })
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub epoch: usize,
    /// Shifted objective, see [`RolloutTrace::shifted_objective`].
    pub objective: f64,
    pub min_slack: f64,
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Clone, Debug)]
pub struct PlanOutcome {
    pub policy: PolicyProfile,
    pub log: Vec<TrainingRecord>,
    /// Shifted objective of the returned parameters.
    pub objective: f64,
    /// Whether the returned parameters had positive pessimistic slack at every step.
    pub feasible: bool,
}

/// Gradient ascent on the barrier objective with AdamW and global-norm clipping.
///
/// Returns the best iterate with positive slack at every step. If no iterate is feasible, the
/// best iterate overall is returned with `feasible = false`.
pub fn optimize_policy(
    config: &OptimizerConfig,
    problem: &PlanningProblem,
    initial: PolicyProfile,
) -> Result<PlanOutcome> {
    let mut policy = initial;
    let mut params = policy.net.params_flat();
    let mut adam = AdamW::new(params.len(), config.learning_rate, config.weight_decay);
    let mut log = Vec::new();
    let mut best_feasible: Option<(f64, Vec<f64>)> = None;
    let mut best_any: Option<(f64, Vec<f64>)> = None;
    let mut reference = f64::NEG_INFINITY;
    let mut since_improvement = 0;
    for epoch in 0..config.max_epochs {
        policy.net.set_params_flat(&params)?;
        let mut tape = Tape::new();
        let vars = policy.net.record(&mut tape, true);
        let trace = differentiable_rollout(problem, &policy, &mut tape, &vars)?;
        let value = trace.shifted_objective;
        if !value.is_finite() {
            return Err(Error::DivergedObjective { epoch, value });
        }
        let min_slack = trace.min_slack();
        if min_slack > 0.0 && best_feasible.as_ref().is_none_or(|(b, _)| value > *b) {
            best_feasible = Some((value, params.clone()));
        }
        if best_any.as_ref().is_none_or(|(b, _)| value > *b) {
            best_any = Some((value, params.clone()));
        }
        let grads = tape.backward(trace.objective, None)?;
        let mut ascent: Vec<f64> = policy.net.grads_flat(&grads, &vars).iter().map(|g| -g).collect();
        let (grad_norm, clipped) = clip_global_norm(&mut ascent, config.clip_norm);
        log.push(TrainingRecord { epoch, objective: value, min_slack, grad_norm, clipped });
        if !grad_norm.is_finite() {
            return Err(Error::DivergedObjective { epoch, value: grad_norm });
        }
        if value > reference + config.min_improvement * reference.abs() || epoch == 0 {
            reference = value;
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= config.patience {
                debug!("early stop at epoch {epoch}, objective {value:.4}");
                break;
            }
        }
        adam.step(&mut params, &ascent)?;
    }
    let (feasible, (objective, best)) = match (best_feasible, best_any) {
        (Some(b), _) => (true, b),
        (None, Some(b)) => {
            if problem.spec.is_constrained() {
                warn!("no iterate had positive pessimistic slack at every step");
            }
            (false, b)
        }
        (None, None) => (false, (f64::NEG_INFINITY, params)),
    };
    policy.net.set_params_flat(&best)?;
    Ok(PlanOutcome { policy, log, objective, feasible })
}

pub fn write_training_log(path: &Path, log: &[TrainingRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in log {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{rollout, RewardVariant, Swarm, TrueDynamics};
    use crate::safety::{compute_margins, ConstraintKind};

    fn bundle() -> LipschitzBundle {
        LipschitzBundle { l_f: 1.0, l_pi: 1.0, l_sigma: 1.0, l_h: 1.0, beta: 1.0, delta: 0.05 }
    }

    fn swarm(bins: usize, steps: usize, variant: RewardVariant) -> Environment {
        Environment::Swarm(Swarm::new(bins, steps, variant))
    }

    #[test]
    fn known_rollout_matches_environment_rollout() {
        let env = swarm(16, 6, RewardVariant::Penalized);
        let policy = PolicyProfile::new(&env, &[8], 3).unwrap();
        let mu0 = GridDistribution::uniform(env.grid());
        let spec = SafetySpec::none();
        let margins = MarginSchedule::zeros(6);
        let problem = PlanningProblem {
            env: &env,
            mu0: &mu0,
            model: PlanningModel::Known,
            spec: &spec,
            bundle: &bundle(),
            margins: &margins,
            barrier_weight: 1.0,
            barrier_delta: BARRIER_DELTA,
        };
        let mut tape = Tape::new();
        let vars = policy.net().record(&mut tape, true);
        let trace = differentiable_rollout(&problem, &policy, &mut tape, &vars).unwrap();
        let plain = rollout(&env, &mu0, &policy, &TrueDynamics(&env)).unwrap();
        for (v, d) in trace.distributions.iter().zip(&plain.distributions) {
            for (a, b) in tape.value(*v).iter().zip(d.mass()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
        for (a, b) in trace.rewards.iter().zip(&plain.rewards) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
        assert!((trace.shifted_objective - plain.objective()).abs() < 1e-9 * plain.objective().abs());
    }

    #[test]
    fn zero_policy_acts_with_zero() {
        let env = swarm(10, 4, RewardVariant::Safe);
        let policy = PolicyProfile::zeros(&env, &[4, 4]).unwrap();
        let u = GridDistribution::uniform(env.grid());
        let (a, eta) = policy.evaluate(&env.cell_centers(), &u, 2).unwrap();
        assert!(a.iter().chain(eta.iter()).all(|v| *v == 0.0));
    }

    #[test]
    fn unsafe_start_is_rejected() {
        let env = swarm(10, 3, RewardVariant::Safe);
        let policy = PolicyProfile::zeros(&env, &[4]).unwrap();
        let mu0 = GridDistribution::point_mass(env.grid(), 0);
        let spec = SafetySpec::entropy(1.0).unwrap();
        let margins = MarginSchedule::zeros(3);
        let problem = PlanningProblem {
            env: &env,
            mu0: &mu0,
            model: PlanningModel::Known,
            spec: &spec,
            bundle: &bundle(),
            margins: &margins,
            barrier_weight: 1.0,
            barrier_delta: BARRIER_DELTA,
        };
        let mut tape = Tape::new();
        let vars = policy.net().record(&mut tape, true);
        assert!(matches!(
            differentiable_rollout(&problem, &policy, &mut tape, &vars),
            Err(Error::UnsafeInitialDistribution(_))
        ));
    }

    #[test]
    fn shifted_objective_tracks_raw_objective() {
        let env = swarm(12, 5, RewardVariant::Safe);
        let policy = PolicyProfile::new(&env, &[6], 9).unwrap();
        let mu0 = GridDistribution::uniform(env.grid());
        let spec = SafetySpec::entropy(0.5 * 12f64.ln()).unwrap();
        assert_eq!(spec.kind(), ConstraintKind::Entropy);
        let b = bundle();
        for max_sigma in [0.0, 1e-4, 0.3] {
            let margins = compute_margins(&b, max_sigma, 5);
            let problem = PlanningProblem {
                env: &env,
                mu0: &mu0,
                model: PlanningModel::Known,
                spec: &spec,
                bundle: &b,
                margins: &margins,
                barrier_weight: 2.0,
                barrier_delta: BARRIER_DELTA,
            };
            let mut tape = Tape::new();
            let vars = policy.net().record(&mut tape, true);
            let trace = differentiable_rollout(&problem, &policy, &mut tape, &vars).unwrap();
            let constant: f64 = margins.as_slice().iter().map(|c| 2.0 * b.l_h * c / BARRIER_DELTA).sum();
            let raw = tape.scalar_value(trace.objective);
            assert!((raw + constant - trace.shifted_objective).abs() < 1e-6 * (1.0 + constant));
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let env = swarm(10, 4, RewardVariant::Safe);
        let policy = PolicyProfile::new(&env, &[5], 1).unwrap();
        let back = PolicyProfile::from_checkpoint(&env, &policy.to_checkpoint()).unwrap();
        assert_eq!(back, policy);
        let other = swarm(12, 4, RewardVariant::Safe);
        assert!(PolicyProfile::from_checkpoint(&other, &policy.to_checkpoint()).is_err());
    }
}
