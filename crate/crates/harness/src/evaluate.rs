//! Deterministic-policy evaluation and observation-noise sweeps.

use std::path::Path;

use startsel::envs::{Env, NoiseSpec};
use startsel::rng::{derive_seed, rng_from};
use startsel::sac::{load_agent, ActMode, SacAgent};
use startsel::Scalar;

use crate::config::ExperimentConfig;
use crate::records::fmt_real;
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub mean: f64,
    /// Population standard deviation of the episode returns.
    pub std: f64,
    pub returns: Vec<f64>,
}

impl EvalResult {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            returns,
        }
    }
}

/// Roll out `episodes` canonical-reset episodes with deterministic actions.
/// Episode `i` resets with seed `derive_seed(seed, i)`.
pub fn evaluate<T: Scalar>(
    agent: &SacAgent<T>,
    env: &mut Env,
    noise: NoiseSpec,
    episodes: usize,
    seed: u64,
) -> Result<EvalResult, HarnessError> {
    if episodes == 0 {
        return Err(HarnessError::Config("evaluation needs at least one episode".into()));
    }
    env.set_noise(noise)?;
    // deterministic mode draws nothing from this
    let mut rng = rng_from(seed);
    let mut returns = Vec::with_capacity(episodes);
    for i in 0..episodes {
        let mut obs = env.reset_canonical(derive_seed(seed, i as u64))?;
        let mut total = 0.0;
        loop {
            let o: Vec<T> = obs.iter().map(|&v| T::lit(v)).collect();
            let action: Vec<f64> = agent
                .act(&o, ActMode::Deterministic, &mut rng)?
                .into_iter()
                .map(|v| v.as_f64())
                .collect();
            let step = env.step(&action)?;
            total += step.reward;
            obs = step.observation;
            if step.done || step.truncated {
                break;
            }
        }
        returns.push(total);
    }
    Ok(EvalResult::from_returns(returns))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub env_id: String,
    pub strategy: String,
    pub seed: u64,
    pub checkpoint: String,
    pub noise: NoiseSpec,
    pub result: EvalResult,
}

pub const SWEEP_COLUMNS: [&str; 10] = [
    "env_id",
    "strategy",
    "seed",
    "checkpoint",
    "noise_kind",
    "noise_level",
    "relative",
    "eval_mean_reward",
    "eval_std_reward",
    "episodes_in_eval",
];

impl SweepRow {
    pub fn to_record(&self) -> Vec<String> {
        vec![
            self.env_id.clone(),
            self.strategy.clone(),
            self.seed.to_string(),
            self.checkpoint.clone(),
            self.noise.kind.as_str().to_string(),
            fmt_real(self.noise.level),
            self.noise.relative.to_string(),
            fmt_real(self.result.mean),
            fmt_real(self.result.std),
            self.result.returns.len().to_string(),
        ]
    }
}

/// Evaluate the checkpointed policy on every cell of the config's sweep grid.
/// The checkpoint is checked against the config's environment and network
/// shape before anything runs.
pub fn noise_sweep(config: &ExperimentConfig, checkpoint: &Path, eval_seed: u64) -> Result<Vec<SweepRow>, HarnessError> {
    let (agent, manifest) = load_agent::<f64>(checkpoint)?;
    let mut env = Env::make(&config.env_id)?;
    let mismatch = |what: &str| {
        HarnessError::Config(format!(
            "checkpoint {} does not match the config: {what}",
            checkpoint.display()
        ))
    };
    if manifest.obs_dim != env.observation_dim() || manifest.action_dim != env.action_dim() {
        return Err(mismatch("observation/action dimensions"));
    }
    if manifest.config.hidden != config.sac.hidden || manifest.config.activation != config.sac.activation {
        return Err(mismatch("network shape"));
    }
    let strategy = manifest.meta.get("strategy").cloned().unwrap_or_default();
    let seed = manifest.meta.get("seed").and_then(|s| s.parse().ok()).unwrap_or(0);
    let name = checkpoint.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    config
        .sweep
        .cells()
        .into_iter()
        .map(|noise| {
            let result = evaluate(&agent, &mut env, noise, config.eval_episodes, eval_seed)?;
            Ok(SweepRow {
                env_id: config.env_id.clone(),
                strategy: strategy.clone(),
                seed,
                checkpoint: name.clone(),
                noise,
                result,
            })
        })
        .collect()
}

pub fn write_sweep(rows: &[SweepRow], path: &Path) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    w.write_record(SWEEP_COLUMNS)?;
    for r in rows {
        w.write_record(r.to_record())?;
    }
    w.flush()?;
    Ok(())
}
