//! Probabilistic neural-network ensemble of the unknown transition function.
//!
//! Each member maps `(s, a, mu)` to a Gaussian over the next state: a linear head predicts the
//! displacement from `s` and a softplus head the variance. The spread of member means is the
//! epistemic uncertainty that scales the confidence band.

use std::path::Path;

use log::debug;
use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Unary, Var};
use crate::env::TransitionModel;
use crate::error::{Error, Result};
use crate::grid::GridDistribution;
use crate::nn::{AdamW, DenseNet, Head, HeadActivation, NetVars};

/// Floor added to the softplus variance head.
pub const MIN_VARIANCE: f64 = 1e-6;

/// One observed transition: the model input and the next state.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionSample {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    /// Mean-field distribution the agent acted in.
    pub mu: Vec<f64>,
    pub next: Vec<f64>,
    pub episode: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleConfig {
    pub members: usize,
    pub hidden: Vec<usize>,
    pub beta: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Epochs without a 0.5% validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    /// Continue from the previous fit instead of re-initializing every episode.
    pub warm_start: bool,
    /// Replay buffer capacity in episodes.
    pub buffer_episodes: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            members: 10,
            hidden: vec![16, 16],
            beta: 1.0,
            learning_rate: 1e-4,
            weight_decay: 5e-4,
            max_epochs: 10_000,
            patience: 100,
            batch_size: 128,
            warm_start: true,
            buffer_episodes: 100,
        }
    }
}

/// Ensemble prediction at a batch of inputs, all `n x state_dim`.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub mean: Array2<f64>,
    pub epistemic_std: Array2<f64>,
    pub aleatoric_var: Array2<f64>,
}

/// Per-member outcome of [`Ensemble::fit`].
#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub validation_nll: Vec<f64>,
    pub epochs: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    members: Vec<DenseNet>,
    beta: f64,
    state_dim: usize,
    action_dim: usize,
    action_scale: f64,
    cells: usize,
}

impl Ensemble {
    pub fn new(
        config: &EnsembleConfig,
        state_dim: usize,
        action_dim: usize,
        action_scale: f64,
        cells: usize,
        seed: u64,
    ) -> Result<Self> {
        if config.members == 0 {
            return Err(Error::Config("ensemble needs at least one member".into()));
        }
        let mut sizes = vec![state_dim + action_dim + cells];
        sizes.extend(&config.hidden);
        sizes.push(2 * state_dim);
        let heads = [
            Head::new(state_dim, HeadActivation::Linear),
            Head::new(state_dim, HeadActivation::Softplus),
        ];
        let members = (0..config.members)
            .map(|k| DenseNet::xavier(&sizes, &heads, seed.wrapping_add(k as u64)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { members, beta: config.beta, state_dim, action_dim, action_scale, cells })
    }

    /// Builds an ensemble from explicit members (all sharing one architecture).
    pub fn from_members(
        members: Vec<DenseNet>,
        beta: f64,
        state_dim: usize,
        action_dim: usize,
        action_scale: f64,
    ) -> Result<Self> {
        let first = members.first().ok_or_else(|| Error::Config("no ensemble members".into()))?;
        if members.iter().any(|m| m.sizes() != first.sizes() || m.heads() != first.heads()) {
            return Err(Error::Config("ensemble members differ in architecture".into()));
        }
        let cells = first.input_width() - state_dim - action_dim;
        Ok(Self { members, beta, state_dim, action_dim, action_scale, cells })
    }

    pub fn members(&self) -> &[DenseNet] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Per-row features `[s, a / scale]`.
    fn row_features(&self, states: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
        concatenate(Axis(1), &[states.view(), (actions / self.action_scale).view()])
            .expect("states and actions share rows")
    }

    /// Shared mean-field features: the cell masses as one row.
    pub fn mu_features(&self, mu: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((1, mu.len()), mu.to_vec()).expect("one row")
    }

    fn member_outputs(
        &self,
        member: &DenseNet,
        states: &Array2<f64>,
        rows: &Array2<f64>,
        shared: Option<&Array2<f64>>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let out = member.forward(rows, shared)?;
        let mean = states + &out[0];
        let var = out[1].mapv(|v| v + MIN_VARIANCE);
        Ok((mean, var))
    }

    /// Member means and variances at `n` inputs sharing one mean field.
    pub fn member_predictions(
        &self,
        states: &Array2<f64>,
        mu: &[f64],
        actions: &Array2<f64>,
    ) -> Result<Vec<(Array2<f64>, Array2<f64>)>> {
        if mu.len() != self.cells {
            return Err(Error::ShapeMismatch { expected: self.cells, got: mu.len() });
        }
        let rows = self.row_features(states, actions);
        let shared = self.mu_features(mu);
        self.members.iter().map(|m| self.member_outputs(m, states, &rows, Some(&shared))).collect()
    }

    /// Mean, epistemic standard deviation and aleatoric variance.
    pub fn predict(
        &self,
        states: &Array2<f64>,
        mu: &[f64],
        actions: &Array2<f64>,
    ) -> Result<Prediction> {
        if self.members.len() < 2 {
            return Err(Error::SingleMember);
        }
        Ok(aggregate(&self.member_predictions(states, mu, actions)?))
    }

    /// Places all member parameters on the tape as constants.
    pub fn record_constants(&self, tape: &mut Tape) -> Vec<NetVars> {
        self.members.iter().map(|m| m.record(tape, false)).collect()
    }

    /// Recorded mean and epistemic standard deviation (`n x state_dim` each).
    ///
    /// `mu` is the `1 x cells` mass row; `vars` comes from
    /// [`record_constants`](Self::record_constants) or per-member parameter recordings.
    pub fn predict_tape(
        &self,
        tape: &mut Tape,
        vars: &[NetVars],
        states: Var,
        mu: Var,
        actions: Var,
    ) -> Result<(Var, Var)> {
        let k = self.members.len();
        if k < 2 {
            return Err(Error::SingleMember);
        }
        let scaled = tape.scale(actions, 1.0 / self.action_scale);
        let rows = tape.concat_cols(&[states, scaled]);
        let mut means = Vec::with_capacity(k);
        for (member, v) in self.members.iter().zip(vars) {
            let out = member.forward_tape(tape, v, rows, Some(mu))?;
            means.push(tape.add(states, out[0]));
        }
        let mut total = means[0];
        for m in &means[1..] {
            total = tape.add(total, *m);
        }
        let mean = tape.scale(total, 1.0 / k as f64);
        let mut spread = None;
        for m in &means {
            let d = tape.sub(*m, mean);
            let d2 = tape.square(d);
            spread = Some(match spread {
                None => d2,
                Some(acc) => tape.add(acc, d2),
            });
        }
        let var = tape.scale(spread.expect("k >= 2"), 1.0 / (k - 1) as f64);
        let std = tape.unary(var, Unary::Sqrt);
        Ok((mean, std))
    }

    /// Fits every member on the buffer with its own seed and train/validation split.
    pub fn fit(
        &mut self,
        samples: &[TransitionSample],
        config: &EnsembleConfig,
        seed: u64,
    ) -> Result<FitReport> {
        if samples.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let (inputs, targets, states) = self.design_matrices(samples)?;
        let mut report = FitReport { validation_nll: Vec::new(), epochs: Vec::new() };
        for k in 0..self.members.len() {
            let member_seed = seed.wrapping_mul(1_000_003).wrapping_add(k as u64);
            if !config.warm_start {
                self.members[k].init_xavier(member_seed);
            }
            let (nll, epochs) =
                train_member(&mut self.members[k], &inputs, &targets, &states, config, member_seed)?;
            debug!("member {k}: {epochs} epochs, validation nll {nll:.4}");
            report.validation_nll.push(nll);
            report.epochs.push(epochs);
        }
        Ok(report)
    }

    fn design_matrices(
        &self,
        samples: &[TransitionSample],
    ) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
        let width = self.state_dim + self.action_dim + self.cells;
        let n = samples.len();
        let mut inputs = Array2::zeros((n, width));
        let mut targets = Array2::zeros((n, self.state_dim));
        let mut states = Array2::zeros((n, self.state_dim));
        for (i, s) in samples.iter().enumerate() {
            if s.state.len() != self.state_dim
                || s.action.len() != self.action_dim
                || s.mu.len() != self.cells
                || s.next.len() != self.state_dim
            {
                return Err(Error::ShapeMismatch { expected: width, got: s.state.len() + s.action.len() + s.mu.len() });
            }
            let mut row = inputs.row_mut(i);
            let mut col = 0;
            for v in &s.state {
                row[col] = *v;
                col += 1;
            }
            for v in &s.action {
                row[col] = v / self.action_scale;
                col += 1;
            }
            for v in &s.mu {
                row[col] = *v;
                col += 1;
            }
            for d in 0..self.state_dim {
                targets[[i, d]] = s.next[d];
                states[[i, d]] = s.state[d];
            }
        }
        Ok((inputs, targets, states))
    }

    /// Summed Gaussian negative log-likelihood of one member on samples.
    pub fn nll_loss(&self, member: usize, samples: &[TransitionSample]) -> Result<f64> {
        let (inputs, targets, states) = self.design_matrices(samples)?;
        let out = self.members[member].forward(&inputs, None)?;
        let mean = &states + &out[0];
        let var = out[1].mapv(|v| v + MIN_VARIANCE);
        Ok(gaussian_nll(&mean, &var, &targets))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = format!(
            "ensemble: K={} beta={}\nstate_dim={} action_dim={} action_scale={:e}\n",
            self.members.len(),
            self.beta,
            self.state_dim,
            self.action_dim,
            self.action_scale
        );
        std::fs::write(dir.join("manifest"), manifest)?;
        for (k, m) in self.members.iter().enumerate() {
            m.save(&dir.join(format!("member_{k}.ckpt")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = std::fs::read_to_string(dir.join("manifest"))?;
        let bad = || Error::Checkpoint(format!("bad ensemble manifest {manifest:?}"));
        let mut fields = std::collections::HashMap::new();
        for token in manifest.split_whitespace().filter(|t| t.contains('=')) {
            let (k, v) = token.split_once('=').ok_or_else(bad)?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| fields.get(k).ok_or_else(bad);
        let members: usize = get("K")?.parse().map_err(|_| bad())?;
        let beta: f64 = get("beta")?.parse().map_err(|_| bad())?;
        let state_dim: usize = get("state_dim")?.parse().map_err(|_| bad())?;
        let action_dim: usize = get("action_dim")?.parse().map_err(|_| bad())?;
        let action_scale: f64 = get("action_scale")?.parse().map_err(|_| bad())?;
        let nets = (0..members)
            .map(|k| DenseNet::load(&dir.join(format!("member_{k}.ckpt"))))
            .collect::<Result<Vec<_>>>()?;
        Self::from_members(nets, beta, state_dim, action_dim, action_scale)
    }
}

/// Combines member means/variances into the ensemble prediction.
pub fn aggregate(members: &[(Array2<f64>, Array2<f64>)]) -> Prediction {
    let k = members.len() as f64;
    let mut mean = Array2::zeros(members[0].0.dim());
    let mut aleatoric = Array2::zeros(members[0].1.dim());
    for (m, v) in members {
        mean += m;
        aleatoric += v;
    }
    mean /= k;
    aleatoric /= k;
    let mut spread: Array2<f64> = Array2::zeros(mean.dim());
    for (m, _) in members {
        spread += &(m - &mean).mapv(|d| d * d);
    }
    let epistemic_std = (spread / (k - 1.0)).mapv(f64::sqrt);
    Prediction { mean, epistemic_std, aleatoric_var: aleatoric }
}

/// `sum 0.5 log(2 pi v) + (y - m)^2 / (2 v)` over all entries.
pub fn gaussian_nll(mean: &Array2<f64>, var: &Array2<f64>, target: &Array2<f64>) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    ndarray::Zip::from(mean)
        .and(var)
        .and(target)
        .fold(0.0, |acc, m, v, y| acc + 0.5 * (two_pi * v).ln() + (y - m).powi(2) / (2.0 * v))
}

/// Relative improvement required to reset early stopping.
const MIN_IMPROVEMENT: f64 = 0.005;

fn train_member(
    net: &mut DenseNet,
    inputs: &Array2<f64>,
    targets: &Array2<f64>,
    states: &Array2<f64>,
    config: &EnsembleConfig,
    seed: u64,
) -> Result<(f64, usize)> {
    let n = inputs.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = (n / 10).max(1).min(n);
    // With fewer than two samples the single sample serves both roles.
    let (val_idx, train_idx) = if n > 1 {
        let (v, t) = order.split_at(n_val);
        (v.to_vec(), t.to_vec())
    } else {
        (order.clone(), order.clone())
    };
    let pick = |idx: &[usize], m: &Array2<f64>| m.select(Axis(0), idx);
    let (val_x, val_y, val_s) = (pick(&val_idx, inputs), pick(&val_idx, targets), pick(&val_idx, states));
    let val_loss = |net: &DenseNet| -> Result<f64> {
        let out = net.forward(&val_x, None)?;
        let mean = &val_s + &out[0];
        let var = out[1].mapv(|v| v + MIN_VARIANCE);
        Ok(gaussian_nll(&mean, &var, &val_y) / val_x.nrows() as f64)
    };

    let batch = config.batch_size.max(1).min(train_idx.len());
    let mut opt = AdamW::new(net.param_count(), config.learning_rate, config.weight_decay);
    let mut best = val_loss(net)?;
    let mut best_params = net.params_flat();
    let mut since_best = 0;
    let mut epochs = 0;
    let mut train_order = train_idx.clone();
    let mut params = net.params_flat();
    // Early stopping needs a meaningful validation set.
    let early_stop = n >= 10;
    for _ in 0..config.max_epochs {
        epochs += 1;
        train_order.shuffle(&mut rng);
        for chunk in train_order.chunks(batch) {
            let x = pick(chunk, inputs);
            let y = pick(chunk, targets);
            let s = pick(chunk, states);
            let mut tape = Tape::new();
            let vars = net.record(&mut tape, true);
            let xv = tape.constant(x);
            let out = net.forward_tape(&mut tape, &vars, xv, None)?;
            let loss = nll_tape(&mut tape, out[0], out[1], s, y);
            let grads = tape.backward(loss, None)?;
            let g = net.grads_flat(&grads, &vars);
            opt.step(&mut params, &g)?;
            net.set_params_flat(&params)?;
        }
        let loss = val_loss(net)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("validation loss"));
        }
        if loss < best - MIN_IMPROVEMENT * best.abs() {
            best = loss;
            best_params.clone_from(&params);
            since_best = 0;
        } else {
            since_best += 1;
            if early_stop && since_best >= config.patience {
                break;
            }
        }
    }
    if early_stop {
        net.set_params_flat(&best_params)?;
    } else {
        best = val_loss(net)?;
    }
    Ok((best, epochs))
}

fn nll_tape(tape: &mut Tape, delta: Var, raw_var: Var, states: Array2<f64>, targets: Array2<f64>) -> Var {
    let n = states.nrows() as f64;
    let s = tape.constant(states);
    let y = tape.constant(targets);
    let mean = tape.add(s, delta);
    let var = tape.offset(raw_var, MIN_VARIANCE);
    let resid = tape.sub(y, mean);
    let r2 = tape.square(resid);
    let quad = tape.div(r2, var);
    let quad = tape.scale(quad, 0.5);
    let logv = tape.log(var);
    let logv = tape.scale(logv, 0.5);
    let per = tape.add(quad, logv);
    let total = tape.sum(per);
    let total = tape.offset(total, 0.5 * (2.0 * std::f64::consts::PI).ln() * tape.value(per).len() as f64);
    tape.scale(total, 1.0 / n)
}

/// Fraction of coordinates where the noise-free target lies within `beta` epistemic standard
/// deviations of the ensemble mean.
pub fn calibration_coverage(
    prediction: &Prediction,
    truth: &Array2<f64>,
    beta: f64,
) -> f64 {
    let total = truth.len();
    if total == 0 {
        return 1.0;
    }
    let inside = ndarray::Zip::from(&prediction.mean)
        .and(&prediction.epistemic_std)
        .and(truth)
        .fold(0usize, |acc, m, s, f| acc + usize::from((f - m).abs() <= beta * s));
    inside as f64 / total as f64
}

/// Finite set over which the epistemic spread is maximized.
#[derive(Clone, Debug)]
pub struct ScanPlan {
    /// `n x state_dim` states.
    pub states: Array2<f64>,
    /// `m x action_dim` actions.
    pub actions: Array2<f64>,
    pub distributions: Vec<GridDistribution>,
}

impl ScanPlan {
    /// Cell centers x a per-axis action lattice x the given distributions.
    pub fn lattice(
        centers: Array2<f64>,
        action_dim: usize,
        bound: f64,
        points_per_axis: usize,
        distributions: Vec<GridDistribution>,
    ) -> Self {
        let p = points_per_axis.max(1);
        let axis: Vec<f64> = if p == 1 {
            vec![0.0]
        } else {
            (0..p).map(|i| -bound + 2.0 * bound * i as f64 / (p - 1) as f64).collect()
        };
        let count = p.pow(action_dim as u32);
        let actions = Array2::from_shape_fn((count, action_dim), |(i, d)| {
            axis[(i / p.pow(d as u32)) % p]
        });
        Self { states: centers, actions, distributions }
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0 || self.actions.nrows() == 0 || self.distributions.is_empty()
    }
}

/// Largest `||sigma_e(z)||_2` over the scan plan.
pub fn max_epistemic_norm(ensemble: &Ensemble, plan: &ScanPlan) -> Result<f64> {
    if plan.is_empty() {
        return Err(Error::EmptyScanPlan);
    }
    let n = plan.states.nrows();
    let m = plan.actions.nrows();
    // every state paired with every action
    let states = Array2::from_shape_fn((n * m, plan.states.ncols()), |(r, d)| plan.states[[r % n, d]]);
    let actions = Array2::from_shape_fn((n * m, plan.actions.ncols()), |(r, d)| plan.actions[[r / n, d]]);
    let mut best: f64 = 0.0;
    for mu in &plan.distributions {
        let pred = ensemble.predict(&states, mu.mass(), &actions)?;
        for row in pred.epistemic_std.rows() {
            best = best.max(row.iter().map(|v| v * v).sum::<f64>().sqrt());
        }
    }
    Ok(best)
}

/// Ensemble mean used as a transition model.
pub struct EnsembleMean<'a>(pub &'a Ensemble);

impl TransitionModel for EnsembleMean<'_> {
    fn predict_mean(
        &self,
        states: &Array2<f64>,
        mu: &GridDistribution,
        actions: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        let members = self.0.member_predictions(states, mu.mass(), actions)?;
        Ok(aggregate(&members).mean)
    }
}
