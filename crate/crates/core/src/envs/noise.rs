use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Bounds, EnvError};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    None,
    L0,
    L2,
    Linf,
    Gaussian,
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::None => "none",
            NoiseKind::L0 => "l0",
            NoiseKind::L2 => "l2",
            NoiseKind::Linf => "linf",
            NoiseKind::Gaussian => "gaussian",
        }
    }
}

/// Observation perturbation. `level` is the coordinate budget for `l0`, the
/// radius for `l2`/`linf` and the standard deviation for `gaussian`. With
/// `relative`, radius/deviation are fractions of each observation
/// coordinate's nominal range (the `l2` ball is taken in range-scaled
/// coordinates).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    #[serde(default)]
    pub level: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub relative: bool,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            kind: NoiseKind::None,
            level: 0.0,
            seed: 0,
            relative: false,
        }
    }

    pub fn new(kind: NoiseKind, level: f64, seed: u64) -> Self {
        Self {
            kind,
            level,
            seed,
            relative: false,
        }
    }

    pub fn relative(mut self) -> Self {
        self.relative = true;
        self
    }

    pub fn is_identity(&self) -> bool {
        self.kind == NoiseKind::None || self.level == 0.0
    }

    pub fn validate(&self, obs_dim: usize) -> Result<(), EnvError> {
        if !(self.level >= 0.0) || !self.level.is_finite() {
            return Err(EnvError::Noise(format!("level must be finite and >= 0, got {}", self.level)));
        }
        if self.kind == NoiseKind::L0 && (self.level.fract() != 0.0 || self.level > obs_dim as f64) {
            return Err(EnvError::Noise(format!(
                "l0 budget must be an integer <= observation dimension {obs_dim}, got {}",
                self.level
            )));
        }
        Ok(())
    }
}

/// Perturb an observation. Identity (no draws consumed) when the spec is.
pub fn apply_noise(obs: &[f64], spec: &NoiseSpec, bounds: &Bounds, rng: &mut Rng) -> Vec<f64> {
    let mut out = obs.to_vec();
    if spec.is_identity() {
        return out;
    }
    let scale = |i: usize| {
        if spec.relative {
            bounds.high[i] - bounds.low[i]
        } else {
            1.0
        }
    };
    let dim = obs.len();
    match spec.kind {
        NoiseKind::None => {}
        NoiseKind::Gaussian => {
            for (i, o) in out.iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(rng);
                *o += spec.level * scale(i) * z;
            }
        }
        NoiseKind::Linf => {
            for (i, o) in out.iter_mut().enumerate() {
                *o += scale(i) * rng.random_range(-spec.level..=spec.level);
            }
        }
        NoiseKind::L2 => {
            // uniform in the ball: Gaussian direction, radius eps * U^(1/d)
            let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
            let u: f64 = rng.random();
            let radius = spec.level * u.powf(1.0 / dim as f64);
            if norm > 0.0 {
                for (i, o) in out.iter_mut().enumerate() {
                    *o += scale(i) * radius * dir[i] / norm;
                }
            }
        }
        NoiseKind::L0 => {
            let k = (spec.level as usize).min(dim);
            for i in sample(rng, dim, k) {
                out[i] = rng.random_range(bounds.low[i]..=bounds.high[i]);
            }
        }
    }
    out
}
