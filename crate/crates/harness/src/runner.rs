//! Seeded training runs: SAC with a pluggable episode start-state chooser.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use startsel::envs::{make_dynamics, Dynamics, Env};
use startsel::metric::{score_batch, MetricSpec};
use startsel::rng::{derive_seed, rng_from, stream, Rng};
use startsel::sac::{save_agent, ActMode, ReplayBuffer, SacAgent};
use startsel::selector::SelectorState;
use startsel::Scalar;

use crate::config::{ExperimentConfig, Precision, Strategy};
use crate::evaluate::evaluate;
use crate::records::{RecordWriter, RunRow, SelectionEntry, SelectionLog};
use crate::HarnessError;

// Sub-seed indices for the independent streams of one run.
const RESET_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
const SELECTOR_STREAM: u64 = 3;
const METRIC_STREAM: u64 = 4;
const UNIFORM_STREAM: u64 = 5;

/// Where an episode starts. `state: None` means the canonical reset.
#[derive(Debug, Clone, PartialEq)]
pub struct Choice {
    pub state: Option<Vec<f64>>,
    pub branch: &'static str,
    pub log: Option<SelectionEntry>,
}

impl Choice {
    pub fn canonical() -> Self {
        Self {
            state: None,
            branch: "canonical",
            log: None,
        }
    }
}

/// Picks the start state of each post-warmup episode.
pub trait StartChooser<T: Scalar> {
    fn choose(&mut self, agent: &SacAgent<T>) -> Result<Choice, HarnessError>;
}

pub struct CanonicalStart;

impl<T: Scalar> StartChooser<T> for CanonicalStart {
    fn choose(&mut self, _agent: &SacAgent<T>) -> Result<Choice, HarnessError> {
        Ok(Choice::canonical())
    }
}

/// One uniform draw over the full state box per episode.
pub struct UniformStart {
    dynamics: Box<dyn Dynamics>,
    rng: Rng,
}

impl UniformStart {
    pub fn new(dynamics: Box<dyn Dynamics>, seed: u64) -> Self {
        Self {
            dynamics,
            rng: rng_from(seed),
        }
    }
}

impl<T: Scalar> StartChooser<T> for UniformStart {
    fn choose(&mut self, _agent: &SacAgent<T>) -> Result<Choice, HarnessError> {
        Ok(Choice {
            state: Some(self.dynamics.state_bounds().sample(&mut self.rng)),
            branch: "uniform",
            log: None,
        })
    }
}

/// Score the candidate pool with the current agent, fit the GP, shift and
/// select. One selector epoch per episode.
pub struct GpConditionStart {
    dynamics: Box<dyn Dynamics>,
    selector: SelectorState,
    metric: MetricSpec,
    metric_seed: u64,
}

impl GpConditionStart {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self, HarnessError> {
        let dynamics = make_dynamics(&config.env_id)?;
        let selector = SelectorState::new(
            config.selector.clone(),
            dynamics.state_bounds().clone(),
            derive_seed(seed, SELECTOR_STREAM),
        )?;
        Ok(Self {
            dynamics,
            selector,
            metric: config.metric.clone(),
            metric_seed: derive_seed(derive_seed(seed, METRIC_STREAM), config.metric.seed),
        })
    }
}

impl<T: Scalar> StartChooser<T> for GpConditionStart {
    fn choose(&mut self, agent: &SacAgent<T>) -> Result<Choice, HarnessError> {
        let epoch = self.selector.epoch();
        let states = self.selector.pool_states();
        let t = Instant::now();
        let samples = score_batch(
            agent,
            &states,
            self.dynamics.as_ref(),
            &self.metric,
            derive_seed(self.metric_seed, epoch as u64),
        )?;
        let metric_ms = ms(t);
        let scores: Vec<f64> = samples.iter().map(|s| s.score.as_f64()).collect();
        let report = self.selector.epoch_step(&scores)?;
        Ok(Choice {
            state: Some(report.selection.state.clone()),
            branch: report.selection.branch.as_str(),
            log: Some(SelectionEntry {
                episode: 0,
                env_step: 0,
                epoch,
                branch: report.selection.branch.as_str().to_string(),
                max_variance: report.selection.max_variance,
                state: report.selection.state,
                score_min: report.score_min,
                score_mean: report.score_mean,
                score_max: report.score_max,
                degenerate: report.degenerate,
                metric_ms,
                fit_ms: report.fit_ms,
                predict_ms: report.predict_ms,
            }),
        })
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub seed: u64,
    pub strategy: Strategy,
    pub csv: PathBuf,
    pub rows: Vec<RunRow>,
    pub final_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub best_eval: Option<f64>,
    pub steps: u64,
    /// Diagnostic for a seed stopped by a non-finite training signal.
    pub aborted: Option<String>,
}

impl RunOutcome {
    /// Env step of the first evaluation whose mean reaches `threshold`.
    pub fn steps_to(&self, threshold: f64) -> Option<u64> {
        self.rows
            .iter()
            .find(|r| r.eval_mean_reward.is_some_and(|m| m >= threshold))
            .map(|r| r.env_step)
    }

    pub fn eval_rows(&self) -> impl Iterator<Item = &RunRow> {
        self.rows.iter().filter(|r| r.eval_mean_reward.is_some())
    }
}

pub fn run_stem(config: &ExperimentConfig, seed: u64) -> String {
    format!("{}_{}_{}", config.env_id, config.strategy, seed)
}

pub fn csv_path(config: &ExperimentConfig, seed: u64) -> PathBuf {
    config.output_dir.join(format!("{}.csv", run_stem(config, seed)))
}

pub fn checkpoint_dir(config: &ExperimentConfig) -> PathBuf {
    config.output_dir.join("checkpoints")
}

/// Train one seed with the strategy named in the config.
pub fn run_training(config: &ExperimentConfig, seed: u64) -> Result<RunOutcome, HarnessError> {
    config.validate()?;
    match config.precision {
        Precision::F64 => run_with_strategy::<f64>(config, seed),
        Precision::F32 => run_with_strategy::<f32>(config, seed),
    }
}

fn run_with_strategy<T: Scalar>(config: &ExperimentConfig, seed: u64) -> Result<RunOutcome, HarnessError> {
    match config.strategy {
        Strategy::Default => run_training_with::<T>(config, seed, &mut CanonicalStart),
        Strategy::UniformWide => {
            let mut c = UniformStart::new(make_dynamics(&config.env_id)?, derive_seed(seed, UNIFORM_STREAM));
            run_training_with::<T>(config, seed, &mut c)
        }
        Strategy::GpCondition => {
            let mut c = GpConditionStart::new(config, seed)?;
            run_training_with::<T>(config, seed, &mut c)
        }
    }
}

struct Checkpointer {
    dir: PathBuf,
    stem: String,
    meta: BTreeMap<String, String>,
    best: Option<(f64, PathBuf)>,
}

impl Checkpointer {
    fn save<T: Scalar>(&self, agent: &SacAgent<T>, step: u64) -> Result<PathBuf, HarnessError> {
        let mut meta = self.meta.clone();
        meta.insert("step".into(), step.to_string());
        Ok(save_agent(agent, &self.dir, &format!("{}_{step}", self.stem), meta)?)
    }

    fn offer_best<T: Scalar>(&mut self, agent: &SacAgent<T>, step: u64, mean: f64) -> Result<(), HarnessError> {
        if self.best.as_ref().is_some_and(|(b, _)| mean <= *b) {
            return Ok(());
        }
        let path = self.save(agent, step)?;
        if let Some((_, old)) = self.best.take() {
            if old != path {
                remove_agent_files(&old);
            }
        }
        self.best = Some((mean, path));
        Ok(())
    }
}

fn remove_agent_files(manifest: &Path) {
    let (Some(dir), Some(stem)) = (manifest.parent(), manifest.file_stem()) else {
        return;
    };
    let stem = stem.to_string_lossy();
    if let Ok(entries) = std::fs::read_dir(dir) {
        for e in entries.flatten() {
            let name = e.file_name().to_string_lossy().into_owned();
            if name == format!("{stem}.ckpt") || (name.starts_with(&format!("{stem}.")) && name.ends_with(".net")) {
                let _ = std::fs::remove_file(e.path());
            }
        }
    }
}

/// Train one seed, taking post-warmup start states from `chooser`. Warmup
/// episodes always use the canonical reset and never consult the chooser.
pub fn run_training_with<T: Scalar>(
    config: &ExperimentConfig,
    seed: u64,
    chooser: &mut dyn StartChooser<T>,
) -> Result<RunOutcome, HarnessError> {
    config.validate()?;
    let mut env = Env::make(&config.env_id)?;
    env.set_noise(config.noise.train)?;
    let mut eval_env = Env::make(&config.env_id)?;
    let obs_dim = env.observation_dim();
    let action_dim = env.action_dim();
    let scale: Vec<T> = env.dynamics().action_bounds().high.iter().map(|&v| T::lit(v)).collect();
    let mut agent = SacAgent::<T>::new(obs_dim, scale, config.sac.clone(), &mut stream(seed, "init"))?;
    let mut buffer = ReplayBuffer::<T>::new(config.sac.buffer_capacity, obs_dim, action_dim);
    let mut act_rng = stream(seed, "act");
    let mut update_rng = stream(seed, "update");
    let reset_seed = derive_seed(seed, RESET_STREAM);
    let eval_seed = derive_seed(seed, EVAL_STREAM);

    let csv = csv_path(config, seed);
    let mut writer = RecordWriter::create(&csv, config)?;
    let mut selection_log = None;
    let mut ckpt = Checkpointer {
        dir: checkpoint_dir(config),
        stem: run_stem(config, seed),
        meta: BTreeMap::from([
            ("env_id".to_string(), config.env_id.clone()),
            ("strategy".to_string(), config.strategy.to_string()),
            ("seed".to_string(), seed.to_string()),
        ]),
        best: None,
    };

    let warmup = config.sac.warmup_steps as u64;
    let total = config.total_steps as u64;
    let interval = config.eval_interval as u64;
    let mut outcome = RunOutcome {
        seed,
        strategy: config.strategy,
        csv: csv.clone(),
        rows: Vec::new(),
        final_checkpoint: None,
        best_checkpoint: None,
        best_eval: None,
        steps: 0,
        aborted: None,
    };
    let mut env_step = 0u64;
    let mut episode = 0u64;
    let mut next_eval = interval;
    let mut stop = false;

    let base_row = |episode: u64, env_step: u64| RunRow {
        env_id: config.env_id.clone(),
        strategy: config.strategy.to_string(),
        seed,
        env_step,
        episode,
        eval_mean_reward: None,
        eval_std_reward: None,
        episodes_in_eval: None,
        selection_branch: String::new(),
        selection_overhead_ms: 0.0,
        episode_return: 0.0,
        noise_kind: config.noise.eval.kind.as_str().to_string(),
        noise_level: config.noise.eval.level,
        wall_ms: 0.0,
    };

    while env_step < total && !stop {
        episode += 1;
        let mut row = base_row(episode, env_step);

        let t_sel = Instant::now();
        let choice = if env_step < warmup {
            Ok(Choice {
                branch: "warmup",
                ..Choice::canonical()
            })
        } else {
            chooser.choose(&agent)
        };
        row.selection_overhead_ms = ms(t_sel);
        let choice = match choice {
            Ok(c) => c,
            Err(e) if e.is_training_fault() => {
                row.selection_branch = "abort".into();
                writer.write(&row)?;
                outcome.rows.push(row);
                outcome.aborted = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        row.selection_branch = choice.branch.to_string();
        if let Some(mut entry) = choice.log {
            entry.episode = episode;
            entry.env_step = env_step;
            let log = match &mut selection_log {
                Some(l) => l,
                None => selection_log.insert(SelectionLog::create(
                    &config.output_dir.join(format!("{}.selection.csv", run_stem(config, seed))),
                )?),
            };
            log.write(&entry)?;
        }

        let episode_seed = derive_seed(reset_seed, episode);
        let mut obs = match &choice.state {
            None => env.reset_canonical(episode_seed)?,
            Some(s) => env.reset_to(s, episode_seed)?,
        };

        let t_ep = Instant::now();
        let mut eval_due = false;
        let mut fault = None;
        loop {
            let o: Vec<T> = obs.iter().map(|&v| T::lit(v)).collect();
            let unit = if env_step < warmup {
                agent.random_unit(&mut act_rng)
            } else {
                match agent.sample_unit(&o, ActMode::Stochastic, &mut act_rng) {
                    Ok((u, _)) => u,
                    Err(e) => {
                        fault = Some(HarnessError::from(e));
                        break;
                    }
                }
            };
            let action: Vec<f64> = agent.scale_action(&unit).iter().map(|v| v.as_f64()).collect();
            let step = env.step(&action)?;
            row.episode_return += step.reward;
            let next: Vec<T> = step.observation.iter().map(|&v| T::lit(v)).collect();
            buffer.push(&o, &unit, T::lit(step.reward), &next, step.done);
            env_step += 1;
            if env_step >= warmup && buffer.len() >= config.sac.batch_size {
                for _ in 0..config.sac.updates_per_step {
                    let batch = buffer.sample(config.sac.batch_size, &mut update_rng)?;
                    if let Err(e) = agent.update(&batch, &mut update_rng) {
                        fault = Some(HarnessError::from(e));
                        break;
                    }
                }
                if fault.is_some() {
                    break;
                }
            }
            if env_step >= next_eval {
                eval_due = true;
                while next_eval <= env_step {
                    next_eval += interval;
                }
            }
            if step.done || step.truncated || env_step >= total {
                break;
            }
            obs = step.observation;
        }
        row.wall_ms = ms(t_ep);
        row.env_step = env_step;

        if let Some(e) = fault {
            if !e.is_training_fault() {
                return Err(e);
            }
            row.selection_branch = "abort".into();
            writer.write(&row)?;
            outcome.rows.push(row);
            outcome.aborted = Some(e.to_string());
            break;
        }

        if eval_due {
            let res = evaluate(&agent, &mut eval_env, config.noise.eval, config.eval_episodes, eval_seed)?;
            row.eval_mean_reward = Some(res.mean);
            row.eval_std_reward = Some(res.std);
            row.episodes_in_eval = Some(res.returns.len() as u64);
            if outcome.best_eval.is_none_or(|b| res.mean > b) {
                outcome.best_eval = Some(res.mean);
            }
            if config.checkpoints {
                ckpt.offer_best(&agent, env_step, res.mean)?;
            }
            if config.stop_at_eval_reward.is_some_and(|t| res.mean >= t) {
                stop = true;
            }
        }
        writer.write(&row)?;
        outcome.rows.push(row);
    }

    outcome.steps = env_step;
    if config.checkpoints && env_step > 0 && outcome.aborted.is_none() {
        outcome.final_checkpoint = Some(ckpt.save(&agent, env_step)?);
    }
    outcome.best_checkpoint = ckpt.best.map(|(_, p)| p);
    Ok(outcome)
}

/// Run every configured seed on its own worker thread (at most `jobs` at a
/// time). A failing seed does not affect the others.
pub fn run_seeds(config: &ExperimentConfig, jobs: usize) -> Vec<(u64, Result<RunOutcome, HarnessError>)> {
    let jobs = jobs.max(1);
    let mut results = Vec::new();
    for chunk in config.seeds.chunks(jobs) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&seed| (seed, s.spawn(move || run_training(config, seed))))
                .collect();
            for (seed, h) in handles {
                let r = h
                    .join()
                    .unwrap_or_else(|_| Err(HarnessError::Aborted(format!("seed {seed} panicked"))));
                results.push((seed, r));
            }
        });
    }
    results
}
