use rand::Rng as _;

use super::{Bounds, Dynamics, Transition, MOUNTAIN_CAR_ID};
use crate::rng::Rng;

const MIN_POSITION: f64 = -1.2;
const MAX_POSITION: f64 = 0.6;
const MAX_SPEED: f64 = 0.07;
const GOAL_POSITION: f64 = 0.45;
const POWER: f64 = 0.0015;
const GRAVITY: f64 = 0.0025;

/// Under-powered car in a valley with a sparse +100 goal reward.
/// State and observation are both `(position, velocity)`.
pub struct MountainCar {
    bounds: Bounds,
    action_bounds: Bounds,
}

impl Default for MountainCar {
    fn default() -> Self {
        Self::new()
    }
}

impl MountainCar {
    pub fn new() -> Self {
        Self {
            bounds: Bounds::new(vec![MIN_POSITION, -MAX_SPEED], vec![MAX_POSITION, MAX_SPEED]),
            action_bounds: Bounds::new(vec![-1.0], vec![1.0]),
        }
    }
}

impl Dynamics for MountainCar {
    fn id(&self) -> &'static str {
        MOUNTAIN_CAR_ID
    }

    fn state_bounds(&self) -> &Bounds {
        &self.bounds
    }

    fn observation_bounds(&self) -> &Bounds {
        &self.bounds
    }

    fn action_bounds(&self) -> &Bounds {
        &self.action_bounds
    }

    fn time_limit(&self) -> usize {
        999
    }

    fn observe(&self, state: &[f64]) -> Vec<f64> {
        state.to_vec()
    }

    fn canonical_reset(&self, rng: &mut Rng) -> Vec<f64> {
        vec![rng.random_range(-0.6..=-0.4), 0.0]
    }

    fn transition(&self, state: &[f64], action: &[f64]) -> Transition {
        let (x, v) = (state[0], state[1]);
        let a = action[0];
        let mut v = (v + POWER * a - GRAVITY * (3.0 * x).cos()).clamp(-MAX_SPEED, MAX_SPEED);
        let x = (x + v).clamp(MIN_POSITION, MAX_POSITION);
        if x == MIN_POSITION && v < 0.0 {
            v = 0.0;
        }
        let terminal = x >= GOAL_POSITION;
        let mut reward = -0.1 * a * a;
        if terminal {
            reward += 100.0;
        }
        Transition {
            next_state: vec![x, v],
            reward,
            terminal,
        }
    }
}
