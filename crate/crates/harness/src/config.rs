//! Experiment configuration: a TOML document with dot-path overrides.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use startsel::envs::{make_dynamics, NoiseKind, NoiseSpec};
use startsel::metric::MetricSpec;
use startsel::sac::SacConfig;
use startsel::selector::SelectorConfig;

use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// The environment's own narrow start distribution.
    #[default]
    Default,
    /// One uniform draw over the full state box per episode.
    UniformWide,
    /// GP-regressed condition-number selection.
    GpCondition,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Default, Strategy::UniformWide, Strategy::GpCondition];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Default => "default",
            Strategy::UniformWide => "uniform-wide",
            Strategy::GpCondition => "gp-condition",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Observation noise used while collecting training data and while evaluating.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSlots {
    pub train: NoiseSpec,
    pub eval: NoiseSpec,
}

/// One noise kind and the levels to sweep it over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub kind: NoiseKind,
    pub levels: Vec<f64>,
    #[serde(default = "yes")]
    pub relative: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub axes: Vec<SweepAxis>,
    pub noise_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let axis = |kind, levels: &[f64]| SweepAxis {
            kind,
            levels: levels.to_vec(),
            relative: true,
        };
        Self {
            axes: vec![
                axis(NoiseKind::Gaussian, &[0.0, 0.05, 0.1]),
                axis(NoiseKind::Linf, &[0.05, 0.1]),
                axis(NoiseKind::L2, &[0.1, 0.2]),
                axis(NoiseKind::L0, &[1.0]),
            ],
            noise_seed: 0,
        }
    }
}

impl SweepConfig {
    /// Every (kind, level) cell as a noise spec, in axis order.
    pub fn cells(&self) -> Vec<NoiseSpec> {
        self.axes
            .iter()
            .flat_map(|a| {
                a.levels.iter().map(move |&level| NoiseSpec {
                    kind: a.kind,
                    level,
                    seed: self.noise_seed,
                    relative: a.relative,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env_id: String,
    #[serde(default)]
    pub strategy: Strategy,
    pub total_steps: usize,
    pub eval_interval: usize,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub sac: SacConfig,
    #[serde(default)]
    pub metric: MetricSpec,
    #[serde(default)]
    pub selector: SelectorConfig,
    #[serde(default)]
    pub noise: NoiseSlots,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Stop a seed once an evaluation reaches this mean reward.
    #[serde(default)]
    pub stop_at_eval_reward: Option<f64>,
    #[serde(default = "yes")]
    pub checkpoints: bool,
    #[serde(default)]
    pub precision: Precision,
}

fn default_eval_episodes() -> usize {
    100
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    /// Minimal valid config for `env_id`; everything else at defaults.
    pub fn new(env_id: &str, strategy: Strategy, total_steps: usize, eval_interval: usize) -> Self {
        Self {
            env_id: env_id.to_string(),
            strategy,
            total_steps,
            eval_interval,
            eval_episodes: default_eval_episodes(),
            seeds: default_seeds(),
            sac: SacConfig::default(),
            metric: MetricSpec::default(),
            selector: SelectorConfig::default(),
            noise: NoiseSlots::default(),
            sweep: SweepConfig::default(),
            output_dir: default_output_dir(),
            stop_at_eval_reward: None,
            checkpoints: true,
            precision: Precision::default(),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let cfg = |m: String| Err(HarnessError::Config(m));
        let dynamics = match make_dynamics(&self.env_id) {
            Ok(d) => d,
            Err(e) => return cfg(e.to_string()),
        };
        if self.eval_interval == 0 {
            return cfg("eval_interval must be positive".into());
        }
        if self.eval_episodes == 0 {
            return cfg("eval_episodes must be positive".into());
        }
        if self.seeds.is_empty() {
            return cfg("seeds must not be empty".into());
        }
        if let Err(e) = self.sac.validate() {
            return cfg(format!("sac: {e}"));
        }
        if let Err(e) = self.metric.validate() {
            return cfg(format!("metric: {e}"));
        }
        if let Err(e) = self.selector.validate() {
            return cfg(format!("selector: {e}"));
        }
        let obs_dim = dynamics.observation_bounds().dim();
        for (slot, spec) in [("noise.train", &self.noise.train), ("noise.eval", &self.noise.eval)] {
            if let Err(e) = spec.validate(obs_dim) {
                return cfg(format!("{slot}: {e}"));
            }
        }
        for spec in self.sweep.cells() {
            if let Err(e) = spec.validate(obs_dim) {
                return cfg(format!("sweep: {e}"));
            }
        }
        if let Some(r) = self.stop_at_eval_reward {
            if !r.is_finite() {
                return cfg("stop_at_eval_reward must be finite".into());
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let config: Self = doc
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Apply `a.b.c=value`. The value is parsed as a TOML value when possible
/// (numbers, booleans, arrays, quoted strings) and taken as a bare string
/// otherwise.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), HarnessError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| HarnessError::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(HarnessError::Config(format!("bad override key `{path}`")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("non-empty");
    let mut table = doc;
    for k in parents {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("override `{path}`: `{k}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
