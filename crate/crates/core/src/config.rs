//! Run configuration: a TOML file with sections `[env] [safety] [ensemble] [optimizer]
//! [protocol]`, plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleConfig;
use crate::env::repositioning::{read_trips_csv, synthetic_demand, DemandParams};
use crate::env::{Environment, Repositioning, RewardVariant, Swarm};
use crate::error::{Error, Result};
use crate::grid::GridDistribution;
use crate::planner::OptimizerConfig;
use crate::safety::{ConstraintKind, LipschitzBundle, SafetySpec};

/// Environment variable overriding `protocol.seed`.
pub const SEED_ENV: &str = "MEADOW_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    #[serde(default)]
    pub safety: SafetyConfig,
    #[serde(default)]
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub protocol: ProtocolConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvConfig {
    Swarm(SwarmConfig),
    Repositioning(RepositioningConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwarmConfig {
    pub bins: usize,
    pub steps: usize,
    pub reward: RewardVariant,
}

impl Default for SwarmConfig {
    fn default() -> Self {
        Self { bins: 100, steps: 100, reward: RewardVariant::Safe }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RepositioningConfig {
    /// Cells per axis.
    pub bins: usize,
    pub steps: usize,
    pub noise_std: f64,
    /// Demand CSV (`cell_index,mass`); synthetic when absent.
    pub demand_file: Option<PathBuf>,
    /// Trip matrix CSV (`origin,destination,probability`); synthetic when absent.
    pub trips_file: Option<PathBuf>,
    pub demand: DemandParams,
}

impl Default for RepositioningConfig {
    fn default() -> Self {
        Self {
            bins: 25,
            steps: 12,
            noise_std: 0.0175,
            demand_file: None,
            trips_file: None,
            demand: DemandParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SafetyConfig {
    pub kind: ConstraintKind,
    /// Threshold as a share of `log(cells)` (entropy kind).
    pub fraction: f64,
    /// Absolute threshold; overrides `fraction` when set.
    pub threshold: Option<f64>,
    /// Similarity reference CSV (`cell_index,mass`); the demand distribution when absent.
    pub reference: Option<PathBuf>,
    /// Dynamics constant; environment default when absent.
    pub l_f: Option<f64>,
    pub l_pi: f64,
    pub l_sigma: f64,
    pub l_h: f64,
    pub delta: f64,
    /// Random pairs used to check `l_h` before a run.
    pub lipschitz_pairs: usize,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            kind: ConstraintKind::Entropy,
            fraction: 0.95,
            threshold: None,
            reference: None,
            l_f: None,
            l_pi: 1.0,
            l_sigma: 1.0,
            l_h: 0.1,
            delta: 0.05,
            lipschitz_pairs: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub episodes: usize,
    /// Representative agents per episode.
    pub agents: usize,
    pub seed: u64,
    /// Action lattice points per axis in the epistemic-spread scan.
    pub scan_actions: usize,
    /// Agent count for finite-population evaluation.
    pub eval_agents: usize,
    pub eval_seeds: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self { episodes: 200, agents: 1, seed: 0, scan_actions: 21, eval_agents: 1000, eval_seeds: 20 }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads a config file, applies `key=value` overrides, then the seed environment variable.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut table: toml::Table =
            text.parse().map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", path.display())))?;
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        let mut config: RunConfig =
            table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            config.protocol.seed = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={seed:?} is not an unsigned integer")))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let (bins, steps) = match &self.env {
            EnvConfig::Swarm(s) => (s.bins, s.steps),
            EnvConfig::Repositioning(r) => (r.bins, r.steps),
        };
        if bins == 0 || steps == 0 {
            return Err(Error::Config("env.bins and env.steps must be positive".into()));
        }
        if self.protocol.agents == 0 {
            return Err(Error::Config("protocol.agents must be at least 1".into()));
        }
        if self.ensemble.members < 2 {
            return Err(Error::Config("ensemble.members must be at least 2".into()));
        }
        let o = &self.optimizer;
        if !(o.barrier_weight > 0.0 && o.barrier_delta > 0.0 && o.learning_rate > 0.0) {
            return Err(Error::Config(
                "optimizer.barrier_weight, barrier_delta and learning_rate must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn build_env(&self) -> Result<Environment> {
        match &self.env {
            EnvConfig::Swarm(s) => Ok(Environment::Swarm(Swarm::new(s.bins, s.steps, s.reward))),
            EnvConfig::Repositioning(r) => {
                let grid = crate::grid::GridSpec::square(r.bins, crate::grid::Topology::ClippedBox);
                let (mut demand, mut trips) = synthetic_demand(&r.demand, grid)?;
                if let Some(path) = &r.demand_file {
                    demand = GridDistribution::read_csv(path, grid)?;
                }
                if let Some(path) = &r.trips_file {
                    trips = read_trips_csv(path, grid.cells())?;
                }
                Ok(Environment::Repositioning(Repositioning::new(demand, trips, r.steps, r.noise_std)?))
            }
        }
    }

    pub fn build_spec(&self, env: &Environment) -> Result<SafetySpec> {
        let s = &self.safety;
        let threshold = s.threshold.unwrap_or(s.fraction * (env.grid().cells() as f64).ln());
        match s.kind {
            ConstraintKind::None => Ok(SafetySpec::none()),
            ConstraintKind::Entropy => SafetySpec::entropy(threshold),
            ConstraintKind::Similarity => {
                let reference = match (&s.reference, env) {
                    (Some(path), _) => GridDistribution::read_csv(path, env.grid())?,
                    (None, Environment::Repositioning(r)) => r.demand.clone(),
                    (None, Environment::Swarm(_)) => {
                        return Err(Error::Config("similarity constraint needs safety.reference".into()))
                    }
                };
                SafetySpec::similarity(s.threshold.unwrap_or(s.fraction), reference)
            }
        }
    }

    /// Lipschitz constants with environment defaults filled in.
    pub fn bundle(&self, env: &Environment) -> Result<LipschitzBundle> {
        let l_f = self.safety.l_f.unwrap_or(match env {
            Environment::Swarm(s) => 1.0 + s.dt() * s.action_bound,
            Environment::Repositioning(_) => 1.0,
        });
        let bundle = LipschitzBundle {
            l_f,
            l_pi: self.safety.l_pi,
            l_sigma: self.safety.l_sigma,
            l_h: self.safety.l_h,
            beta: self.ensemble.beta,
            delta: self.safety.delta,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

/// Applies one `key=value` override. Bare keys must name exactly one field across sections;
/// dotted keys (`protocol.episodes`) address a section directly. Values use TOML syntax and
/// fall back to plain strings.
pub fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    let value = parse_value(raw);
    let path: Vec<String> = if key.contains('.') {
        key.split('.').map(str::to_string).collect()
    } else {
        let sections = known_sections(table);
        let hits: Vec<&str> = sections
            .iter()
            .filter(|(_, fields)| fields.contains(&key))
            .map(|(name, _)| *name)
            .collect();
        match hits.as_slice() {
            [one] => vec![one.to_string(), key.to_string()],
            [] => return Err(Error::Config(format!("unknown config key {key:?}"))),
            many => {
                return Err(Error::Config(format!(
                    "config key {key:?} is ambiguous ({}); qualify it with a section",
                    many.join(", ")
                )))
            }
        }
    };
    let (last, parents) = path.split_last().expect("non-empty key");
    let mut node = table;
    for part in parents {
        node = node
            .entry(part.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{part:?} in {key:?} is not a section")))?;
    }
    node.insert(last.clone(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Field names accepted in each section, taken from the serialized defaults.
fn known_sections(table: &toml::Table) -> Vec<(&'static str, Vec<&'static str>)> {
    let env_fields: &[&str] = match table.get("env").and_then(|e| e.get("kind")).and_then(|k| k.as_str()) {
        Some("repositioning") => &["kind", "bins", "steps", "noise_std", "demand_file", "trips_file"],
        _ => &["kind", "bins", "steps", "reward"],
    };
    vec![
        ("env", env_fields.to_vec()),
        (
            "safety",
            vec![
                "kind", "fraction", "threshold", "reference", "l_f", "l_pi", "l_sigma", "l_h", "delta",
                "lipschitz_pairs",
            ],
        ),
        (
            "ensemble",
            vec![
                "members", "hidden", "beta", "learning_rate", "weight_decay", "max_epochs", "patience",
                "batch_size", "warm_start", "buffer_episodes",
            ],
        ),
        (
            "optimizer",
            vec![
                "hidden", "learning_rate", "weight_decay", "max_epochs", "patience", "min_improvement",
                "clip_norm", "barrier_weight", "barrier_delta", "warm_start",
            ],
        ),
        ("protocol", vec!["episodes", "agents", "seed", "scan_actions", "eval_agents", "eval_seeds"]),
    ]
}
