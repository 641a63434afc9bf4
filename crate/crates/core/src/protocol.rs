//! The episodic learning protocol: plan on the model, execute in the environment, refit.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::RunConfig;
use crate::ensemble::{calibration_coverage, max_epistemic_norm, Ensemble, ScanPlan, TransitionSample};
use crate::env::{rollout, row, Environment, Policy, TrueDynamics};
use crate::error::{Error, Result};
use crate::grid::{GridDistribution, GridSpec};
use crate::nn::stack_rows;
use crate::planner::{
    differentiable_rollout, optimize_policy, PlanOutcome, PlanningModel, PlanningProblem,
    PolicyProfile, TrainingRecord,
};
use crate::safety::{
    compute_margins, evaluate_constraint, max_entropy_safe_init, validate_lipschitz, LipschitzBundle,
    MarginSchedule, SafetyRecord, SafetySpec,
};
use crate::transport::wasserstein1;

/// Independent random streams derived from the master seed.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Policy = 1,
    Execution = 2,
    Fit = 3,
    EnsembleInit = 4,
    Evaluation = 5,
    Lipschitz = 6,
}

/// Seed for `stream` at `index`, so changing one count does not shift the others.
pub fn derive_seed(master: u64, stream: Stream, index: u64) -> u64 {
    let mut z = master
        .wrapping_add((stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Transitions of the most recent episodes, evicted oldest episode first.
#[derive(Clone, Debug, Default)]
pub struct ReplayBuffer {
    capacity: usize,
    samples: Vec<TransitionSample>,
}

impl ReplayBuffer {
    pub fn new(capacity_episodes: usize) -> Self {
        Self { capacity: capacity_episodes.max(1), samples: Vec::new() }
    }

    pub fn push_episode(&mut self, samples: Vec<TransitionSample>) {
        self.samples.extend(samples);
        let mut episodes: Vec<usize> = self.samples.iter().map(|s| s.episode).collect();
        episodes.dedup();
        if episodes.len() > self.capacity {
            let keep_from = episodes[episodes.len() - self.capacity];
            self.samples.retain(|s| s.episode >= keep_from);
        }
    }

    pub fn samples(&self) -> &[TransitionSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// One executed episode in the true environment.
#[derive(Clone, Debug)]
pub struct Execution {
    pub samples: Vec<TransitionSample>,
    /// Exact mean field `mu_0 ..= mu_T` under the true dynamics.
    pub true_mu: Vec<GridDistribution>,
    /// Histograms of the representative agents, `T + 1` snapshots.
    pub agent_mu: Vec<GridDistribution>,
    pub rewards: Vec<f64>,
}

impl Execution {
    pub fn objective(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Runs `policy` in the environment with `agents` representative agents drawn from `mu0`.
///
/// Agents act on their own (post-trip) state and the true mean field; the recorded model input
/// is that state, the action, and the mean field after trips.
pub fn execute_policy(
    env: &Environment,
    policy: &dyn Policy,
    mu0: &GridDistribution,
    agents: usize,
    episode: usize,
    rng: &mut impl Rng,
) -> Result<Execution> {
    let truth = rollout(env, mu0, policy, &TrueDynamics(env))?;
    let grid = env.grid();
    let mut states: Vec<Vec<f64>> = (0..agents).map(|_| env.sample_state(mu0, rng)).collect();
    let mut agent_mu = vec![GridDistribution::histogram(grid, &states.concat())?];
    let mut samples = Vec::with_capacity(agents * env.steps());
    for t in 0..env.steps() {
        let mu = &truth.distributions[t];
        let shifted = env.shift(mu)?;
        let moved: Vec<Vec<f64>> = states.iter().map(|s| env.shift_agent(s, mu, rng)).collect();
        let batch = stack_rows(&moved.iter().map(|s| row(s)).collect::<Vec<_>>());
        let actions = policy.act(&batch, &shifted, t)?;
        for (r, s) in moved.iter().enumerate() {
            let a = actions.row(r).to_vec();
            let step = env.sample_step(s, &a, rng);
            samples.push(TransitionSample {
                state: s.clone(),
                action: a,
                mu: shifted.mass().to_vec(),
                next: step.target,
                episode,
            });
            states[r] = step.next;
        }
        agent_mu.push(GridDistribution::histogram(grid, &states.concat())?);
    }
    Ok(Execution { samples, true_mu: truth.distributions, agent_mu, rewards: truth.rewards })
}

/// Share of executed transitions whose noise-free target lies in the ensemble's band.
pub fn episode_coverage(ensemble: &Ensemble, env: &Environment, samples: &[TransitionSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(1.0);
    }
    let mut inside = 0.0;
    for s in samples {
        let state = row(&s.state);
        let action = row(&s.action);
        let pred = ensemble.predict(&state, &s.mu, &action)?;
        let truth = env.true_mean(&state, &action);
        inside += calibration_coverage(&pred, &truth, ensemble.beta()) * truth.len() as f64;
    }
    Ok(inside / (samples.len() * env.state_dim()) as f64)
}

/// Model rollout values of a fixed policy.
#[derive(Clone, Debug)]
pub struct ModelTrace {
    pub distributions: Vec<GridDistribution>,
    /// Slack at steps `1..=T`.
    pub slacks: Vec<f64>,
    pub objective: f64,
}

pub fn model_trace(problem: &PlanningProblem, policy: &PolicyProfile) -> Result<ModelTrace> {
    let mut tape = Tape::new();
    let vars = policy.net().record(&mut tape, false);
    let trace = differentiable_rollout(problem, policy, &mut tape, &vars)?;
    let grid = problem.env.grid();
    let distributions = trace
        .distributions
        .iter()
        .map(|v| GridDistribution::from_kernel_output(tape.value(*v).iter().cloned().collect(), grid))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelTrace { distributions, slacks: trace.slacks, objective: trace.shifted_objective })
}

/// Aggregates of one protocol episode, one row of `episodes.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: usize,
    /// Expected reward of the executed policy under the true mean field.
    pub objective: f64,
    /// Shifted barrier objective on the model.
    pub model_objective: f64,
    pub max_sigma: f64,
    pub coverage: f64,
    pub min_h_value: f64,
    pub min_slack: f64,
    pub plan_feasible: bool,
    pub plan_epochs: usize,
    pub buffer_size: usize,
    pub wall_time_s: f64,
}

/// Per-step record of one episode.
#[derive(Clone, Debug)]
pub struct EpisodeLog {
    pub summary: EpisodeSummary,
    pub true_mu: Vec<GridDistribution>,
    pub model_mu: Vec<GridDistribution>,
    pub margins: MarginSchedule,
    pub safety: Vec<SafetyRecord>,
    /// `W1(model mu_t, true mu_t)` for `t = 0..=T`.
    pub gaps: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub mu0: GridDistribution,
    pub episodes: Vec<EpisodeLog>,
    pub policy: PolicyProfile,
    pub ensemble: Ensemble,
}

/// Everything a run needs besides the per-episode state.
pub struct Setup {
    pub env: Environment,
    pub spec: SafetySpec,
    pub bundle: LipschitzBundle,
    pub mu0: GridDistribution,
}

/// Builds the environment and constraint, checks `l_h`, and finds the safe initial state.
pub fn setup(config: &RunConfig) -> Result<Setup> {
    let env = config.build_env()?;
    let spec = config.build_spec(&env)?;
    let bundle = config.bundle(&env)?;
    let seed = derive_seed(config.protocol.seed, Stream::Lipschitz, 0);
    let worst = validate_lipschitz(&spec, env.grid(), bundle.l_h, config.safety.lipschitz_pairs, seed)?;
    info!("largest observed constraint/W1 ratio {worst:.4} (l_h = {})", bundle.l_h);
    let mu0 = max_entropy_safe_init(&spec, env.grid())?;
    Ok(Setup { env, spec, bundle, mu0 })
}

/// CSV sinks of a run directory.
struct Artifacts {
    episodes: csv::Writer<File>,
    safety: csv::Writer<File>,
    distributions: csv::Writer<File>,
    model_distributions: csv::Writer<File>,
    agent_distributions: csv::Writer<File>,
    training: csv::Writer<File>,
}

#[derive(Serialize)]
struct TrainingRow {
    episode: usize,
    epoch: usize,
    objective: f64,
    min_slack: f64,
    grad_norm: f64,
    clipped: bool,
}

impl Artifacts {
    fn create(dir: &Path, config: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.snapshot"), config.to_toml())?;
        let open = |name: &str| csv::Writer::from_path(dir.join(name));
        let mut out = Self {
            episodes: open("episodes.csv")?,
            safety: open("safety.csv")?,
            distributions: open("distributions.csv")?,
            model_distributions: open("model_distributions.csv")?,
            agent_distributions: open("agent_distributions.csv")?,
            training: open("training_log.csv")?,
        };
        for w in [&mut out.distributions, &mut out.model_distributions, &mut out.agent_distributions] {
            w.write_record(["episode", "step", "cell_index", "mass"])?;
        }
        Ok(out)
    }

    fn write_training(&mut self, episode: usize, log: &[TrainingRecord]) -> Result<()> {
        for record in log {
            self.training.serialize(TrainingRow {
                episode,
                epoch: record.epoch,
                objective: record.objective,
                min_slack: record.min_slack,
                grad_norm: record.grad_norm,
                clipped: record.clipped,
            })?;
        }
        self.training.flush()?;
        Ok(())
    }

    fn write_episode(&mut self, log: &EpisodeLog, agent_mu: &[GridDistribution]) -> Result<()> {
        let n = log.summary.episode;
        self.episodes.serialize(&log.summary)?;
        for r in &log.safety {
            self.safety.serialize(r)?;
        }
        write_distribution_rows(&mut self.distributions, n, &log.true_mu)?;
        write_distribution_rows(&mut self.model_distributions, n, &log.model_mu)?;
        write_distribution_rows(&mut self.agent_distributions, n, agent_mu)?;
        for w in [
            &mut self.episodes,
            &mut self.safety,
            &mut self.distributions,
            &mut self.model_distributions,
            &mut self.agent_distributions,
        ] {
            w.flush()?;
        }
        Ok(())
    }
}

fn write_distribution_rows(
    w: &mut csv::Writer<File>,
    episode: usize,
    steps: &[GridDistribution],
) -> Result<()> {
    for (t, mu) in steps.iter().enumerate() {
        for (i, m) in mu.mass().iter().enumerate() {
            w.write_record([episode.to_string(), t.to_string(), i.to_string(), format!("{m:e}")])?;
        }
    }
    Ok(())
}

/// Reads an `episode,step,cell_index,mass` file keyed by `(episode, step)`.
pub fn read_distributions_csv(
    path: &Path,
    grid: GridSpec,
) -> Result<BTreeMap<(usize, usize), GridDistribution>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut raw: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for record in reader.deserialize() {
        let (episode, step, cell, mass): (usize, usize, usize, f64) = record?;
        let entry = raw.entry((episode, step)).or_insert_with(|| vec![0.0; grid.cells()]);
        let slot = entry
            .get_mut(cell)
            .ok_or_else(|| Error::GridMismatch(format!("cell {cell} outside a {}-cell grid", grid.cells())))?;
        *slot = mass;
    }
    raw.into_iter().map(|(k, v)| Ok((k, GridDistribution::new(grid, v)?))).collect()
}

pub fn read_episodes_csv(path: &Path) -> Result<Vec<EpisodeSummary>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// The episodic protocol as a stepper: [`start`](Self::start) runs the warm-up episode with
/// the initial policy, each [`next_episode`](Self::next_episode) computes margins from the
/// current ensemble, optimizes the policy on the model, executes it and refits.
pub struct Protocol<'c> {
    config: &'c RunConfig,
    setup: Setup,
    out_dir: Option<PathBuf>,
    artifacts: Option<Artifacts>,
    ensemble: Ensemble,
    policy: PolicyProfile,
    buffer: ReplayBuffer,
    last_true_mu: Vec<GridDistribution>,
    episode: usize,
}

impl<'c> Protocol<'c> {
    pub fn start(config: &'c RunConfig, out_dir: Option<&Path>) -> Result<Self> {
        let setup = setup(config)?;
        let env = &setup.env;
        let master = config.protocol.seed;
        let artifacts = out_dir.map(|d| Artifacts::create(d, config)).transpose()?;
        let mut ensemble = Ensemble::new(
            &config.ensemble,
            env.state_dim(),
            env.action_dim(),
            env.action_bound(),
            env.grid().cells(),
            derive_seed(master, Stream::EnsembleInit, 0),
        )?;
        let policy =
            PolicyProfile::new(env, &config.optimizer.hidden, derive_seed(master, Stream::Policy, 0))?;
        let mut buffer = ReplayBuffer::new(config.ensemble.buffer_episodes);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master, Stream::Execution, 0));
        let warmup = execute_policy(env, &policy, &setup.mu0, config.protocol.agents, 0, &mut rng)?;
        buffer.push_episode(warmup.samples);
        ensemble.fit(buffer.samples(), &config.ensemble, derive_seed(master, Stream::Fit, 0))?;
        Ok(Self {
            config,
            setup,
            out_dir: out_dir.map(Path::to_path_buf),
            artifacts,
            ensemble,
            policy,
            buffer,
            last_true_mu: warmup.true_mu,
            episode: 0,
        })
    }

    pub fn env(&self) -> &Environment {
        &self.setup.env
    }

    pub fn spec(&self) -> &SafetySpec {
        &self.setup.spec
    }

    pub fn mu0(&self) -> &GridDistribution {
        &self.setup.mu0
    }

    pub fn policy(&self) -> &PolicyProfile {
        &self.policy
    }

    pub fn ensemble(&self) -> &Ensemble {
        &self.ensemble
    }

    /// Number of completed learning episodes.
    pub fn episode(&self) -> usize {
        self.episode
    }

    pub fn next_episode(&mut self) -> Result<EpisodeLog> {
        let config = self.config;
        let Setup { env, spec, bundle, mu0 } = &self.setup;
        let master = config.protocol.seed;
        let n = self.episode + 1;
        let start = Instant::now();
        let plan = ScanPlan::lattice(
            env.cell_centers(),
            env.action_dim(),
            env.action_bound(),
            config.protocol.scan_actions,
            self.last_true_mu.iter().cloned().chain([GridDistribution::uniform(env.grid())]).collect(),
        );
        let max_sigma = max_epistemic_norm(&self.ensemble, &plan)?;
        let margins = compute_margins(bundle, max_sigma, env.steps());
        let problem = PlanningProblem {
            env,
            mu0,
            model: PlanningModel::Hallucinated(&self.ensemble),
            spec,
            bundle,
            margins: &margins,
            barrier_weight: config.optimizer.barrier_weight,
            barrier_delta: config.optimizer.barrier_delta,
        };
        let initial = if config.optimizer.warm_start {
            self.policy.clone()
        } else {
            PolicyProfile::new(env, &config.optimizer.hidden, derive_seed(master, Stream::Policy, n as u64))?
        };
        let PlanOutcome { policy, log: training, feasible, .. } =
            optimize_policy(&config.optimizer, &problem, initial)?;
        let model = model_trace(&problem, &policy)?;

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master, Stream::Execution, n as u64));
        let execution = execute_policy(env, &policy, mu0, config.protocol.agents, n, &mut rng)?;
        let coverage = episode_coverage(&self.ensemble, env, &execution.samples)?;

        let mut safety = Vec::with_capacity(env.steps() + 1);
        let mut gaps = Vec::with_capacity(env.steps() + 1);
        for (t, (truth, modelled)) in execution.true_mu.iter().zip(&model.distributions).enumerate() {
            let h = evaluate_constraint(spec, truth)?;
            let slack = if t == 0 { evaluate_constraint(spec, modelled)? } else { model.slacks[t - 1] };
            safety.push(SafetyRecord {
                episode: n,
                step: t,
                h_value: h,
                margin: margins.at(t),
                slack,
                violated: h < 0.0,
            });
            gaps.push(wasserstein1(modelled, truth)?);
        }

        self.buffer.push_episode(execution.samples.clone());
        self.ensemble.fit(self.buffer.samples(), &config.ensemble, derive_seed(master, Stream::Fit, n as u64))?;

        let summary = EpisodeSummary {
            episode: n,
            objective: execution.objective(),
            model_objective: model.objective,
            max_sigma,
            coverage,
            min_h_value: safety.iter().map(|r| r.h_value).fold(f64::INFINITY, f64::min),
            min_slack: model.slacks.iter().cloned().fold(f64::INFINITY, f64::min),
            plan_feasible: feasible,
            plan_epochs: training.len(),
            buffer_size: self.buffer.len(),
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        info!(
            "episode {n}: objective {:.4}, max sigma {:.3e}, coverage {:.3}, min h {:.4}, {} epochs, {:.1}s",
            summary.objective, max_sigma, coverage, summary.min_h_value, summary.plan_epochs, summary.wall_time_s
        );
        let log = EpisodeLog {
            summary,
            true_mu: execution.true_mu.clone(),
            model_mu: model.distributions,
            margins,
            safety,
            gaps,
        };
        if let Some(a) = self.artifacts.as_mut() {
            a.write_training(n, &training)?;
            a.write_episode(&log, &execution.agent_mu)?;
        }
        self.policy = policy;
        self.last_true_mu = execution.true_mu;
        self.episode = n;
        Ok(log)
    }

    /// Writes the final checkpoints and returns the trained policy and ensemble.
    pub fn finish(self) -> Result<(PolicyProfile, Ensemble)> {
        if let Some(dir) = &self.out_dir {
            self.policy.save(&dir.join("policy.ckpt"))?;
            self.ensemble.save(&dir.join("ensemble.ckpt"))?;
        }
        Ok((self.policy, self.ensemble))
    }
}

/// Runs the configured number of episodes.
pub fn run_protocol(config: &RunConfig, out_dir: Option<&Path>) -> Result<RunOutcome> {
    let mut protocol = Protocol::start(config, out_dir)?;
    let episodes = (0..config.protocol.episodes)
        .map(|_| protocol.next_episode())
        .collect::<Result<Vec<_>>>()?;
    let mu0 = protocol.mu0().clone();
    let (policy, ensemble) = protocol.finish()?;
    Ok(RunOutcome { mu0, episodes, policy, ensemble })
}

/// Result of planning with the true transitions.
#[derive(Clone, Debug)]
pub struct KnownPlan {
    pub policy: PolicyProfile,
    pub training: Vec<TrainingRecord>,
    pub feasible: bool,
    pub mu0: GridDistribution,
    /// Executed mean field `mu_0 ..= mu_T` and its objective.
    pub distributions: Vec<GridDistribution>,
    pub objective: f64,
}

/// Optimizes the policy once on the true transitions with zero margins.
pub fn plan_known(config: &RunConfig, out_dir: Option<&Path>) -> Result<KnownPlan> {
    let Setup { env, spec, bundle, mu0 } = setup(config)?;
    let margins = MarginSchedule::zeros(env.steps());
    let problem = PlanningProblem {
        env: &env,
        mu0: &mu0,
        model: PlanningModel::Known,
        spec: &spec,
        bundle: &bundle,
        margins: &margins,
        barrier_weight: config.optimizer.barrier_weight,
        barrier_delta: config.optimizer.barrier_delta,
    };
    let initial = PolicyProfile::new(&env, &config.optimizer.hidden, derive_seed(config.protocol.seed, Stream::Policy, 0))?;
    let outcome = optimize_policy(&config.optimizer, &problem, initial)?;
    let executed = rollout(&env, &mu0, &outcome.policy, &TrueDynamics(&env))?;
    if let Some(dir) = out_dir {
        let mut a = Artifacts::create(dir, config)?;
        a.write_training(0, &outcome.log)?;
        let h: Vec<f64> = executed.distributions.iter().map(|m| evaluate_constraint(&spec, m)).collect::<Result<_>>()?;
        let safety: Vec<SafetyRecord> = h
            .iter()
            .enumerate()
            .map(|(t, &h_value)| SafetyRecord { episode: 0, step: t, h_value, margin: 0.0, slack: h_value, violated: h_value < 0.0 })
            .collect();
        let summary = EpisodeSummary {
            episode: 0,
            objective: executed.objective(),
            model_objective: outcome.objective,
            max_sigma: 0.0,
            coverage: 1.0,
            min_h_value: h.iter().cloned().fold(f64::INFINITY, f64::min),
            min_slack: h.iter().skip(1).cloned().fold(f64::INFINITY, f64::min),
            plan_feasible: outcome.feasible,
            plan_epochs: outcome.log.len(),
            buffer_size: 0,
            wall_time_s: 0.0,
        };
        let log = EpisodeLog {
            summary,
            true_mu: executed.distributions.clone(),
            model_mu: executed.distributions.clone(),
            margins,
            safety,
            gaps: vec![0.0; executed.distributions.len()],
        };
        a.write_episode(&log, &[])?;
        outcome.policy.save(&dir.join("policy.ckpt"))?;
    }
    Ok(KnownPlan {
        policy: outcome.policy,
        training: outcome.log,
        feasible: outcome.feasible,
        mu0,
        objective: executed.objective(),
        distributions: executed.distributions,
    })
}

/// Outcome of a finite-population run.
#[derive(Clone, Debug)]
pub struct FiniteRun {
    pub objective: f64,
    /// Agent histograms `mu_0 ..= mu_T`.
    pub empirical: Vec<GridDistribution>,
    pub h_values: Vec<f64>,
}

/// Runs `m` agents with the policy acting on their own histogram instead of the mean field.
pub fn finite_regime_eval(
    env: &Environment,
    policy: &dyn Policy,
    spec: &SafetySpec,
    mu0: &GridDistribution,
    m: usize,
    seed: u64,
) -> Result<FiniteRun> {
    if m == 0 {
        return Err(Error::Config("finite-regime evaluation needs at least one agent".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = env.grid();
    let centers = env.cell_centers();
    let mut states: Vec<Vec<f64>> = (0..m).map(|_| env.sample_state(mu0, &mut rng)).collect();
    let mut empirical = Vec::with_capacity(env.steps() + 1);
    let mut objective = 0.0;
    for t in 0..env.steps() {
        let hist = GridDistribution::histogram(grid, &states.concat())?;
        let shifted = env.shift(&hist)?;
        let at_centers = policy.act(&centers, &shifted, t)?;
        objective += env.expected_reward(&hist, &at_centers)?;
        let moved: Vec<Vec<f64>> = states.iter().map(|s| env.shift_agent(s, &hist, &mut rng)).collect();
        let batch = Array2::from_shape_vec((m, env.state_dim()), moved.concat()).expect("agent states");
        let actions = policy.act(&batch, &shifted, t)?;
        for (r, s) in moved.iter().enumerate() {
            states[r] = env.sample_step(s, &actions.row(r).to_vec(), &mut rng).next;
        }
        empirical.push(hist);
    }
    empirical.push(GridDistribution::histogram(grid, &states.concat())?);
    let h_values = empirical.iter().map(|mu| evaluate_constraint(spec, mu)).collect::<Result<_>>()?;
    Ok(FiniteRun { objective, empirical, h_values })
}

/// One row of the finite-population sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteRow {
    pub agents: usize,
    pub seed_index: usize,
    pub objective: f64,
    pub mean_field_objective: f64,
    pub abs_gap: f64,
    pub min_h_value: f64,
}

/// Evaluates every `(m, seed)` pair, spreading work over `jobs` threads.
#[allow(clippy::too_many_arguments)]
pub fn finite_regime_sweep(
    env: &Environment,
    policy: &PolicyProfile,
    spec: &SafetySpec,
    mu0: &GridDistribution,
    agent_counts: &[usize],
    seeds: usize,
    master: u64,
    jobs: usize,
) -> Result<Vec<FiniteRow>> {
    let limit = rollout(env, mu0, policy, &TrueDynamics(env))?.objective();
    let tasks: Vec<(usize, usize)> =
        agent_counts.iter().flat_map(|&m| (0..seeds).map(move |s| (m, s))).collect();
    let run = |&(m, s): &(usize, usize)| -> Result<FiniteRow> {
        let seed = derive_seed(master, Stream::Evaluation, (m as u64) << 20 | s as u64);
        let out = finite_regime_eval(env, policy, spec, mu0, m, seed)?;
        Ok(FiniteRow {
            agents: m,
            seed_index: s,
            objective: out.objective,
            mean_field_objective: limit,
            abs_gap: (out.objective - limit).abs(),
            min_h_value: out.h_values.iter().cloned().fold(f64::INFINITY, f64::min),
        })
    };
    let jobs = jobs.clamp(1, tasks.len().max(1));
    let chunk = tasks.len().div_ceil(jobs).max(1);
    let results: Vec<Result<Vec<FiniteRow>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = tasks
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(run).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut rows = Vec::with_capacity(tasks.len());
    for part in results {
        rows.extend(part?);
    }
    Ok(rows)
}

/// Writes the sweep as `agents,seed_index,objective,mean_field_objective,abs_gap,min_h_value`.
pub fn write_finite_csv(path: &Path, rows: &[FiniteRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_finite_csv(path: &Path) -> Result<Vec<FiniteRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
