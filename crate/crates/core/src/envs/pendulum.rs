use std::f64::consts::PI;

use rand::Rng as _;

use super::{Bounds, Dynamics, Transition, PENDULUM_ID};
use crate::rng::Rng;

const MAX_SPEED: f64 = 8.0;
const MAX_TORQUE: f64 = 2.0;
const DT: f64 = 0.05;
const G: f64 = 10.0;
const M: f64 = 1.0;
const L: f64 = 1.0;

/// Torque-limited pendulum swing-up. State `(theta, theta_dot)` with
/// `theta = 0` upright; observation `(cos theta, sin theta, theta_dot)`.
pub struct Pendulum {
    state_bounds: Bounds,
    obs_bounds: Bounds,
    action_bounds: Bounds,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

impl Pendulum {
    pub fn new() -> Self {
        Self {
            state_bounds: Bounds::new(vec![-PI, -MAX_SPEED], vec![PI, MAX_SPEED]),
            obs_bounds: Bounds::new(vec![-1.0, -1.0, -MAX_SPEED], vec![1.0, 1.0, MAX_SPEED]),
            action_bounds: Bounds::new(vec![-MAX_TORQUE], vec![MAX_TORQUE]),
        }
    }
}

/// Wrap an angle into `[-pi, pi)`.
pub fn wrap_angle(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

impl Dynamics for Pendulum {
    fn id(&self) -> &'static str {
        PENDULUM_ID
    }

    fn state_bounds(&self) -> &Bounds {
        &self.state_bounds
    }

    fn observation_bounds(&self) -> &Bounds {
        &self.obs_bounds
    }

    fn action_bounds(&self) -> &Bounds {
        &self.action_bounds
    }

    fn time_limit(&self) -> usize {
        200
    }

    fn observe(&self, state: &[f64]) -> Vec<f64> {
        vec![state[0].cos(), state[0].sin(), state[1]]
    }

    fn canonical_reset(&self, rng: &mut Rng) -> Vec<f64> {
        vec![rng.random_range(-PI..=PI), rng.random_range(-1.0..=1.0)]
    }

    fn transition(&self, state: &[f64], action: &[f64]) -> Transition {
        let (th, thdot) = (state[0], state[1]);
        let u = action[0];
        let th_norm = wrap_angle(th);
        let cost = th_norm * th_norm + 0.1 * thdot * thdot + 0.001 * u * u;
        let new_thdot = (thdot + (3.0 * G / (2.0 * L) * th.sin() + 3.0 / (M * L * L) * u) * DT).clamp(-MAX_SPEED, MAX_SPEED);
        let new_th = wrap_angle(th + new_thdot * DT);
        Transition {
            next_state: vec![new_th, new_thdot],
            reward: -cost,
            terminal: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upright_fixed_point() {
        let t = Pendulum::new().transition(&[0.0, 0.0], &[0.0]);
        assert_eq!(t.next_state, vec![0.0, 0.0]);
        assert_eq!(t.reward, 0.0);
    }

    #[test]
    fn one_step_from_horizontal() {
        // theta_dot' = 15 * 0.05, theta' = pi/2 + 0.75 * 0.05
        let t = Pendulum::new().transition(&[PI / 2.0, 0.0], &[0.0]);
        assert!((t.next_state[1] - 0.75).abs() < 1e-12);
        assert!((t.next_state[0] - (PI / 2.0 + 0.0375)).abs() < 1e-12);
        assert!((t.reward + 2.467_401_100_272_339_7).abs() < 1e-12);
    }

    #[test]
    fn wrap_angle_range() {
        for x in [-10.0, -PI, -1.0, 0.0, 3.0, PI, 7.5] {
            let w = wrap_angle(x);
            assert!((-PI..PI).contains(&w));
            assert!(((x - w) / (2.0 * PI)).fract().abs() < 1e-9 || ((x - w) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9);
        }
    }
}
