//! Deterministic classic-control environments that can be reset to any state,
//! plus observation-noise perturbations.

mod mountain_car;
mod noise;
mod pendulum;

pub use mountain_car::MountainCar;
pub use noise::{apply_noise, NoiseKind, NoiseSpec};
pub use pendulum::Pendulum;

use rand::Rng as _;
use thiserror::Error;

use crate::rng::{derive_seed, rng_from, Rng};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("unknown environment id `{0}` (known: pendulum-v1, mountaincar-continuous-v0)")]
    UnknownId(String),
    #[error("{what} has dimension {actual}, expected {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("state coordinate {index} = {value} is outside [{low}, {high}] by more than 1% of the range")]
    OutOfBounds { index: usize, value: f64, low: f64, high: f64 },
    #[error("non-finite {what}")]
    NonFinite { what: &'static str },
    #[error("step called before reset or after the episode ended")]
    NeedsReset,
    #[error("invalid noise spec: {0}")]
    Noise(String),
    #[error("n must be at least 1")]
    EmptySample,
}

/// Per-dimension closed box.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl Bounds {
    pub fn new(low: Vec<f64>, high: Vec<f64>) -> Self {
        debug_assert_eq!(low.len(), high.len());
        Self { low, high }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(self.low.iter().zip(&self.high)).all(|(v, (l, h))| v >= l && v <= h)
    }

    pub fn clip(&self, x: &mut [f64]) {
        for ((v, &l), &h) in x.iter_mut().zip(&self.low).zip(&self.high) {
            *v = v.clamp(l, h);
        }
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.low.iter().zip(&self.high).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.low.iter().zip(&self.high).map(|(&l, &h)| rng.random_range(l..=h)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
}

/// Pure environment physics; [`Env`] adds episode bookkeeping and noise.
pub trait Dynamics: Send + Sync {
    fn id(&self) -> &'static str;
    fn state_bounds(&self) -> &Bounds;
    fn observation_bounds(&self) -> &Bounds;
    /// Physical action range; agents emit `[-1, 1]` and scale by the upper bound.
    fn action_bounds(&self) -> &Bounds;
    fn time_limit(&self) -> usize;
    fn observe(&self, state: &[f64]) -> Vec<f64>;
    /// Draw from the environment's standard (narrow) reset distribution.
    fn canonical_reset(&self, rng: &mut Rng) -> Vec<f64>;
    /// `action` is already clipped to the action bounds.
    fn transition(&self, state: &[f64], action: &[f64]) -> Transition;
}

pub const PENDULUM_ID: &str = "pendulum-v1";
pub const MOUNTAIN_CAR_ID: &str = "mountaincar-continuous-v0";

pub fn make_dynamics(id: &str) -> Result<Box<dyn Dynamics>, EnvError> {
    match id {
        PENDULUM_ID => Ok(Box::new(Pendulum::new())),
        MOUNTAIN_CAR_ID => Ok(Box::new(MountainCar::new())),
        other => Err(EnvError::UnknownId(other.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub truncated: bool,
}

/// An environment instance: dynamics, current state, step counter and
/// observation noise.
pub struct Env {
    dynamics: Box<dyn Dynamics>,
    state: Vec<f64>,
    steps: usize,
    needs_reset: bool,
    noise: NoiseSpec,
    noise_rng: Rng,
}

impl Env {
    pub fn make(id: &str) -> Result<Self, EnvError> {
        Ok(Self::new(make_dynamics(id)?))
    }

    pub fn new(dynamics: Box<dyn Dynamics>) -> Self {
        let state = dynamics.state_bounds().midpoint();
        Self {
            dynamics,
            state,
            steps: 0,
            needs_reset: true,
            noise: NoiseSpec::none(),
            noise_rng: rng_from(0),
        }
    }

    pub fn set_noise(&mut self, noise: NoiseSpec) -> Result<(), EnvError> {
        noise.validate(self.dynamics.observation_bounds().dim())?;
        self.noise = noise;
        Ok(())
    }

    pub fn noise(&self) -> &NoiseSpec {
        &self.noise
    }

    pub fn dynamics(&self) -> &dyn Dynamics {
        self.dynamics.as_ref()
    }

    pub fn id(&self) -> &'static str {
        self.dynamics.id()
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn observation_dim(&self) -> usize {
        self.dynamics.observation_bounds().dim()
    }

    pub fn action_dim(&self) -> usize {
        self.dynamics.action_bounds().dim()
    }

    fn observe_noisy(&mut self) -> Vec<f64> {
        let clean = self.dynamics.observe(&self.state);
        apply_noise(&clean, &self.noise, self.dynamics.observation_bounds(), &mut self.noise_rng)
    }

    /// Put the environment exactly in `state`. Coordinates outside the bounds
    /// by at most 1% of the range are clipped (with a warning); further out is
    /// an error. `seed` keys the observation-noise stream for the episode.
    pub fn reset_to(&mut self, state: &[f64], seed: u64) -> Result<Vec<f64>, EnvError> {
        let bounds = self.dynamics.state_bounds();
        if state.len() != bounds.dim() {
            return Err(EnvError::Dimension {
                what: "state",
                expected: bounds.dim(),
                actual: state.len(),
            });
        }
        let mut s = state.to_vec();
        for (i, v) in s.iter_mut().enumerate() {
            if !v.is_finite() {
                return Err(EnvError::NonFinite { what: "state" });
            }
            let (l, h) = (bounds.low[i], bounds.high[i]);
            let slack = 0.01 * (h - l);
            if *v < l - slack || *v > h + slack {
                return Err(EnvError::OutOfBounds {
                    index: i,
                    value: *v,
                    low: l,
                    high: h,
                });
            }
            if *v < l || *v > h {
                log::warn!("clipping state coordinate {i} = {v} into [{l}, {h}]");
                *v = v.clamp(l, h);
            }
        }
        self.state = s;
        self.steps = 0;
        self.needs_reset = false;
        self.noise_rng = rng_from(derive_seed(self.noise.seed, seed));
        Ok(self.observe_noisy())
    }

    /// Reset from the environment's standard start distribution.
    pub fn reset_canonical(&mut self, seed: u64) -> Result<Vec<f64>, EnvError> {
        let mut rng = rng_from(seed);
        let state = self.dynamics.canonical_reset(&mut rng);
        self.reset_to(&state, seed)
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if self.needs_reset {
            return Err(EnvError::NeedsReset);
        }
        let bounds = self.dynamics.action_bounds();
        if action.len() != bounds.dim() {
            return Err(EnvError::Dimension {
                what: "action",
                expected: bounds.dim(),
                actual: action.len(),
            });
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(EnvError::NonFinite { what: "action" });
        }
        let mut a = action.to_vec();
        bounds.clip(&mut a);
        let t = self.dynamics.transition(&self.state, &a);
        self.state = t.next_state;
        self.steps += 1;
        let truncated = !t.terminal && self.steps >= self.dynamics.time_limit();
        self.needs_reset = t.terminal || truncated;
        Ok(StepResult {
            observation: self.observe_noisy(),
            reward: t.reward,
            done: t.terminal,
            truncated,
        })
    }
}

/// `n` states drawn uniformly over the full state box.
pub fn sample_states(dynamics: &dyn Dynamics, n: usize, seed: u64) -> Result<Vec<Vec<f64>>, EnvError> {
    if n == 0 {
        return Err(EnvError::EmptySample);
    }
    let mut rng = rng_from(seed);
    Ok((0..n).map(|_| dynamics.state_bounds().sample(&mut rng)).collect())
}
