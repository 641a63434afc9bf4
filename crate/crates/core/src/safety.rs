//! Safety constraints on the mean field, pessimistic margins and the log barrier.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Unary, Var};
use crate::error::{Error, Result};
use crate::grid::{GridDistribution, GridSpec};
use crate::transport::{kantorovich_potential, wasserstein1};

/// Linear-extension point of the barrier.
pub const BARRIER_DELTA: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintKind {
    /// No constraint; every distribution is safe.
    None,
    /// Shannon entropy at least the threshold (nats).
    Entropy,
    /// W1 distance to a reference at most the threshold.
    Similarity,
}

/// The safe set `{mu : h(mu) - C >= 0}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SafetySpec {
    kind: ConstraintKind,
    threshold: f64,
    reference: Option<GridDistribution>,
}

impl SafetySpec {
    pub fn none() -> Self {
        Self { kind: ConstraintKind::None, threshold: 0.0, reference: None }
    }

    pub fn entropy(threshold: f64) -> Result<Self> {
        if !threshold.is_finite() {
            return Err(Error::Config(format!("entropy threshold {threshold} is not finite")));
        }
        Ok(Self { kind: ConstraintKind::Entropy, threshold, reference: None })
    }

    pub fn similarity(threshold: f64, reference: GridDistribution) -> Result<Self> {
        if !(threshold >= 0.0 && threshold.is_finite()) {
            return Err(Error::Config(format!("similarity threshold {threshold} must be >= 0")));
        }
        Ok(Self { kind: ConstraintKind::Similarity, threshold, reference: Some(reference) })
    }

    pub fn kind(&self) -> ConstraintKind {
        self.kind
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn reference(&self) -> Option<&GridDistribution> {
        self.reference.as_ref()
    }

    pub fn is_constrained(&self) -> bool {
        self.kind != ConstraintKind::None
    }
}

/// `h_C(mu)`; non-negative iff `mu` is safe. Unconstrained specs return `+inf`.
pub fn evaluate_constraint(spec: &SafetySpec, mu: &GridDistribution) -> Result<f64> {
    match spec.kind {
        ConstraintKind::None => Ok(f64::INFINITY),
        ConstraintKind::Entropy => Ok(mu.shannon_entropy() - spec.threshold),
        ConstraintKind::Similarity => {
            let nu = spec.reference.as_ref().expect("similarity spec has a reference");
            Ok(spec.threshold - wasserstein1(mu, nu)?)
        }
    }
}

/// Recorded `h_C` for a `1 x cells` mass row.
///
/// Only entropy constraints are differentiated; the others return `None`.
pub fn constraint_tape(tape: &mut Tape, spec: &SafetySpec, mu: Var) -> Option<Var> {
    match spec.kind {
        ConstraintKind::Entropy => {
            let plogp = tape.unary(mu, Unary::XLogX);
            let neg = tape.sum(plogp);
            let h = tape.scale(neg, -1.0);
            Some(tape.offset(h, -spec.threshold))
        }
        ConstraintKind::None | ConstraintKind::Similarity => None,
    }
}

/// Regularity constants of the dynamics, policy, model spread and constraint.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LipschitzBundle {
    pub l_f: f64,
    pub l_pi: f64,
    pub l_sigma: f64,
    pub l_h: f64,
    pub beta: f64,
    /// Calibration failure probability; informational only.
    pub delta: f64,
}

impl LipschitzBundle {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l_f, self.l_pi, self.l_sigma, self.l_h, self.beta, self.delta];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("Lipschitz constants must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }

    /// Per-step growth factor of the model error, `1 + 2(1 + L_pi)(L_f + 2 beta L_sigma)`.
    pub fn growth(&self) -> f64 {
        1.0 + 2.0 * (1.0 + self.l_pi) * (self.l_f + 2.0 * self.beta * self.l_sigma)
    }
}

/// Upper bounds on `W1(model mean field, true mean field)` for steps `1..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginSchedule {
    margins: Vec<f64>,
}

impl MarginSchedule {
    pub fn zeros(steps: usize) -> Self {
        Self { margins: vec![0.0; steps] }
    }

    /// Margin at step `t` (1-based); step 0 needs none.
    pub fn at(&self, t: usize) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.margins[t - 1]
        }
    }

    pub fn len(&self) -> usize {
        self.margins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.margins.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.margins
    }
}

/// `C_t = t * 2 beta * growth^(t-1) * max_sigma` for `t = 1..=steps`.
pub fn compute_margins(bundle: &LipschitzBundle, max_sigma: f64, steps: usize) -> MarginSchedule {
    let growth = bundle.growth();
    let margins = (1..=steps)
        .map(|t| {
            if max_sigma == 0.0 {
                0.0
            } else {
                t as f64 * 2.0 * bundle.beta * growth.powi(t as i32 - 1) * max_sigma
            }
        })
        .collect();
    MarginSchedule { margins }
}

/// `h_C(mu_model) - L_h * margin`.
pub fn pessimistic_slack(
    spec: &SafetySpec,
    mu_model: &GridDistribution,
    bundle: &LipschitzBundle,
    margin: f64,
) -> Result<f64> {
    Ok(slack_from_value(evaluate_constraint(spec, mu_model)?, bundle, margin))
}

pub(crate) fn slack_from_value(h: f64, bundle: &LipschitzBundle, margin: f64) -> f64 {
    if margin == 0.0 {
        h
    } else {
        h - bundle.l_h * margin
    }
}

/// `lambda log(slack)`, continued linearly below `delta`.
pub fn log_barrier(slack: f64, lambda: f64, delta: f64) -> f64 {
    lambda * Unary::Barrier { delta }.apply(slack)
}

/// Recorded counterpart of [`log_barrier`].
pub fn log_barrier_tape(tape: &mut Tape, slack: Var, lambda: f64, delta: f64) -> Var {
    let b = tape.unary(slack, Unary::Barrier { delta });
    tape.scale(b, lambda)
}

/// Checks `|h(mu) - h(nu)| <= L_h W1(mu, nu)` on seeded random pairs and returns the largest
/// observed ratio. Fails with a config error when `l_h` is below it.
///
/// Pairs are smooth random fields (a few low Fourier modes through a softmax), compared either
/// with an independent field or with a small mixture perturbation of themselves.
pub fn validate_lipschitz(
    spec: &SafetySpec,
    grid: GridSpec,
    l_h: f64,
    pairs: usize,
    seed: u64,
) -> Result<f64> {
    if !spec.is_constrained() {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..pairs {
        let mu = random_field(grid, &mut rng);
        let nu = if i % 2 == 0 {
            random_field(grid, &mut rng)
        } else {
            let other = random_field(grid, &mut rng);
            let w: f64 = rng.gen_range(0.01..0.2);
            let mixed: Vec<f64> =
                mu.mass().iter().zip(other.mass()).map(|(a, b)| (1.0 - w) * a + w * b).collect();
            GridDistribution::normalize(&mixed, grid)?
        };
        let dist = wasserstein1(&mu, &nu)?;
        if dist <= 1e-12 {
            continue;
        }
        let gap = (evaluate_constraint(spec, &mu)? - evaluate_constraint(spec, &nu)?).abs();
        worst = worst.max(gap / dist);
    }
    if worst > l_h * (1.0 + 1e-9) {
        return Err(Error::Config(format!(
            "l_h = {l_h} is too small for this grid: observed |h(mu) - h(nu)| / W1 up to {worst:.4}"
        )));
    }
    Ok(worst)
}

fn random_field(grid: GridSpec, rng: &mut impl Rng) -> GridDistribution {
    let amplitude: f64 = rng.gen_range(0.0..3.0);
    let modes: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(1..=3) as f64,
                rng.gen_range(0..=2) as f64,
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.sample::<f64, _>(StandardNormal),
            )
        })
        .collect();
    let logits: Vec<f64> = (0..grid.cells())
        .map(|c| {
            let [x, y] = grid.center(c);
            let y = if grid.dim() == 1 { 0.0 } else { y };
            modes
                .iter()
                .map(|(fx, fy, phase, w)| {
                    w * (std::f64::consts::TAU * (fx * x + fy * y) + phase).sin()
                })
                .sum::<f64>()
                * amplitude
        })
        .collect();
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    GridDistribution::normalize(&weights, grid).expect("positive weights")
}

const MIRROR_ITERATIONS: usize = 500;
const MIRROR_STEP: f64 = 0.1;
const MAX_PENALTY: f64 = 1e8;

/// The highest-entropy distribution in the safe set.
///
/// Entropy constraints: uniform, if `C <= log(cells)`. Similarity constraints: entropic mirror
/// ascent on the simplex with a quadratic penalty on `W1(mu, nu0) - C`, starting from `nu0`
/// and keeping the best feasible iterate.
pub fn max_entropy_safe_init(spec: &SafetySpec, grid: GridSpec) -> Result<GridDistribution> {
    let uniform = GridDistribution::uniform(grid);
    let chosen = match spec.kind {
        ConstraintKind::None => uniform,
        ConstraintKind::Entropy => {
            let top = (grid.cells() as f64).ln();
            if spec.threshold > top {
                return Err(Error::InfeasibleConstraint(format!(
                    "entropy threshold {} exceeds log(#cells) = {top}",
                    spec.threshold
                )));
            }
            uniform
        }
        ConstraintKind::Similarity => {
            let nu = spec.reference.as_ref().expect("similarity spec has a reference");
            grid.ensure_same(nu.grid())?;
            if evaluate_constraint(spec, &uniform)? >= 0.0 {
                uniform
            } else {
                mirror_ascent(spec, nu)?
            }
        }
    };
    let h = evaluate_constraint(spec, &chosen)?;
    if h < 0.0 {
        return Err(Error::InfeasibleConstraint(format!(
            "initial distribution violates the constraint (h = {h:e})"
        )));
    }
    Ok(chosen)
}

fn mirror_ascent(spec: &SafetySpec, nu: &GridDistribution) -> Result<GridDistribution> {
    let grid = *nu.grid();
    let floor = 1e-12;
    let mut logits: Vec<f64> = nu.mass().iter().map(|m| m.max(floor).ln()).collect();
    let mut best = nu.clone();
    let mut best_entropy = nu.shannon_entropy();
    let mut penalty: f64 = 1.0;
    for _ in 0..MIRROR_ITERATIONS {
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let mu = GridDistribution::normalize(&weights, grid)?;
        let excess = -evaluate_constraint(spec, &mu)?;
        let entropy = mu.shannon_entropy();
        if excess <= 0.0 && entropy > best_entropy {
            best_entropy = entropy;
            best = mu.clone();
        }
        let mut grad: Vec<f64> = mu.mass().iter().map(|m| -(m.max(floor).ln() + 1.0)).collect();
        if excess > 0.0 {
            penalty = (penalty * 2.0).min(MAX_PENALTY);
            let potential = kantorovich_potential(&mu, nu)?;
            for (g, f) in grad.iter_mut().zip(&potential) {
                *g -= 2.0 * penalty * excess * f;
            }
        }
        let scale = grad.iter().fold(1.0_f64, |acc, g| acc.max(g.abs()));
        for (l, g) in logits.iter_mut().zip(&grad) {
            *l += MIRROR_STEP * g / scale;
        }
    }
    Ok(best)
}

/// One row of the per-step safety telemetry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafetyRecord {
    pub episode: usize,
    pub step: usize,
    pub h_value: f64,
    pub margin: f64,
    pub slack: f64,
    pub violated: bool,
}

pub fn write_safety_csv(path: &Path, records: &[SafetyRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_safety_csv(path: &Path) -> Result<Vec<SafetyRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Topology;

    fn bundle() -> LipschitzBundle {
        LipschitzBundle { l_f: 1.0, l_pi: 1.0, l_sigma: 1.0, l_h: 0.5, beta: 1.0, delta: 0.05 }
    }

    #[test]
    fn constraint_examples() {
        let g = GridSpec::line(20, Topology::Torus);
        let log_k = 20f64.ln();
        let spec = SafetySpec::entropy(0.95 * log_k).unwrap();
        let u = GridDistribution::uniform(g);
        assert!((evaluate_constraint(&spec, &u).unwrap() - 0.05 * log_k).abs() < 1e-12);
        let p = GridDistribution::point_mass(g, 3);
        assert!((evaluate_constraint(&spec, &p).unwrap() + 0.95 * log_k).abs() < 1e-12);
        let sim = SafetySpec::similarity(0.2, p.clone()).unwrap();
        assert!((evaluate_constraint(&sim, &p).unwrap() - 0.2).abs() < 1e-15);
        let other = GridDistribution::uniform(GridSpec::line(10, Topology::Torus));
        assert!(matches!(evaluate_constraint(&sim, &other), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn margin_examples() {
        let b = bundle();
        assert_eq!(b.growth(), 13.0);
        let m = compute_margins(&b, 0.0, 5);
        assert!(m.as_slice().iter().all(|v| *v == 0.0));
        let m = compute_margins(&b, 0.1, 5);
        assert!((m.at(1) - 0.2).abs() < 1e-15);
        assert!((m.at(2) - 52.0 * 0.1).abs() < 1e-12);
        assert_eq!(m.at(0), 0.0);
        assert!(m.as_slice().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn slack_examples() {
        let g = GridSpec::line(10, Topology::Torus);
        let spec = SafetySpec::entropy(0.5 * 10f64.ln()).unwrap();
        let u = GridDistribution::uniform(g);
        let h = evaluate_constraint(&spec, &u).unwrap();
        assert_eq!(pessimistic_slack(&spec, &u, &bundle(), 0.0).unwrap(), h);
        let boundary = h / bundle().l_h;
        assert!(pessimistic_slack(&spec, &u, &bundle(), boundary).unwrap().abs() < 1e-12);
        assert!(pessimistic_slack(&spec, &u, &bundle(), 0.01).unwrap() > 0.0);
    }

    #[test]
    fn barrier_examples() {
        assert_eq!(log_barrier(1.0, 1.0, BARRIER_DELTA), 0.0);
        assert!((log_barrier(std::f64::consts::E, 2.0, BARRIER_DELTA) - 2.0).abs() < 1e-12);
        assert!((log_barrier(0.0, 1.0, 1e-3) - ((1e-3f64).ln() - 1.0)).abs() < 1e-12);
        assert!((log_barrier(0.0, 1.0, 1e-3) + 7.9078).abs() < 1e-4);
        let d = 1e-3;
        let h = 1e-9;
        let left = (log_barrier(d, 1.0, d) - log_barrier(d - h, 1.0, d)) / h;
        let right = (log_barrier(d + h, 1.0, d) - log_barrier(d, 1.0, d)) / h;
        assert!((left - right).abs() / left < 1e-4);
    }

    #[test]
    fn entropy_init() {
        let g = GridSpec::square(4, Topology::ClippedBox);
        let ok = SafetySpec::entropy(16f64.ln()).unwrap();
        assert_eq!(max_entropy_safe_init(&ok, g).unwrap(), GridDistribution::uniform(g));
        let too_much = SafetySpec::entropy(16f64.ln() + 1e-9).unwrap();
        assert!(matches!(max_entropy_safe_init(&too_much, g), Err(Error::InfeasibleConstraint(_))));
    }

    #[test]
    fn similarity_init_stays_feasible_and_spreads() {
        let g = GridSpec::line(12, Topology::ClippedBox);
        let nu = GridDistribution::point_mass(g, 2);
        let spec = SafetySpec::similarity(0.1, nu.clone()).unwrap();
        let mu = max_entropy_safe_init(&spec, g).unwrap();
        assert!(evaluate_constraint(&spec, &mu).unwrap() >= 0.0);
        assert!(mu.shannon_entropy() > 0.5, "entropy {}", mu.shannon_entropy());
        let loose = SafetySpec::similarity(10.0, nu).unwrap();
        assert_eq!(max_entropy_safe_init(&loose, g).unwrap(), GridDistribution::uniform(g));
    }

    #[test]
    fn lipschitz_validation_rejects_tiny_constant() {
        let g = GridSpec::line(20, Topology::Torus);
        let spec = SafetySpec::entropy(2.0).unwrap();
        let worst = validate_lipschitz(&spec, g, f64::INFINITY, 50, 1).unwrap();
        assert!(worst > 1e-4);
        assert!(matches!(validate_lipschitz(&spec, g, 1e-4, 50, 1), Err(Error::Config(_))));
        let sim = SafetySpec::similarity(0.1, GridDistribution::uniform(g)).unwrap();
        assert!(validate_lipschitz(&sim, g, 1.0, 50, 1).unwrap() <= 1.0 + 1e-9);
    }

    #[test]
    fn telemetry_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("safety.csv");
        let rows = vec![SafetyRecord { episode: 1, step: 0, h_value: 0.25, margin: 0.0, slack: 0.25, violated: false }];
        write_safety_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("episode,step,h_value,margin,slack,violated\n"));
        assert_eq!(read_safety_csv(&path).unwrap(), rows);
    }
}
