//! Relative condition number of the policy's state-value estimate with
//! respect to the policy parameters: `||grad_theta V(s)|| / |V(s)|`.
//!
//! `V(s)` is estimated from `n` actions sampled from the policy's Gaussian
//! (reparameterized as `mu + sigma z`), squashed, and scored by the critic.
//! The sampled-action densities are turned into self-normalized weights, so
//! the estimate is a weighted mean of critic values. Critic parameters are
//! constants; only the policy is differentiated.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::Dynamics;
use crate::nn::{ModelId, NnError, Tape, Var};
use crate::rng::{derive_seed, rng_from};
use crate::sac::{SacAgent, LOG_STD_MAX, LOG_STD_MIN};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite {what} at state {state:?}")]
    NonFinite { what: &'static str, state: Vec<f64> },
    #[error("state {state:?} is outside the environment bounds")]
    OutOfBounds { state: Vec<f64> },
    #[error("importance weights underflowed to zero; use more actions or a narrower log-std clamp")]
    WeightUnderflow,
    #[error("state {index}: {source}")]
    AtIndex {
        index: usize,
        #[source]
        source: Box<MetricError>,
    },
    #[error("empty state list")]
    Empty,
    #[error("invalid metric spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricVariant {
    /// `||grad|| / |V|`.
    GradientRatio,
    /// `||grad|| * ||s|| / |V|`.
    StateScaledRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriticValue {
    /// `min(Q1, Q2)`.
    MinTwin,
    Q1Only,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricSpec {
    pub n_actions: usize,
    pub variant: MetricVariant,
    pub critic: CriticValue,
    /// Lower bound on `|V|` in the denominator.
    pub denom_floor: f64,
    pub seed: u64,
}

impl Default for MetricSpec {
    fn default() -> Self {
        Self {
            n_actions: 32,
            variant: MetricVariant::GradientRatio,
            critic: CriticValue::MinTwin,
            denom_floor: 1e-6,
            seed: 0,
        }
    }
}

impl MetricSpec {
    pub fn validate(&self) -> Result<(), MetricError> {
        if self.n_actions < 2 {
            return Err(MetricError::InvalidSpec(format!("n_actions must be >= 2, got {}", self.n_actions)));
        }
        if !(self.denom_floor > 0.0) {
            return Err(MetricError::InvalidSpec("denom_floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSample<T> {
    pub state: Vec<f64>,
    pub score: T,
    pub value_estimate: T,
    pub grad_norm: T,
}

/// Value estimate with its gradient and the normalized action weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGradient<T> {
    pub value: T,
    pub gradient: Vec<T>,
    pub weights: Vec<T>,
}

/// Standard-normal draws for `n` actions of dimension `k`.
pub fn draw_action_noise<T: Scalar, R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Array2<T> {
    Array2::from_shape_simple_fn((n, k), || {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z)
    })
}

/// Record the weighted value estimate for one observation on `tape`, given
/// pre-drawn noise `z` (`n x k`). Returns the `1 x 1` value node.
fn record_value<'a, T: Scalar>(
    tape: &mut Tape<'a, T>,
    agent: &'a SacAgent<T>,
    policy_trainable: bool,
    obs: &[T],
    z: Array2<T>,
    critic: CriticValue,
) -> Result<(Var, ModelId), NnError> {
    let k = agent.action_dim;
    let pm = tape.model(&agent.policy_spec, &agent.policy, policy_trainable)?;
    let c1 = tape.model(&agent.critic_spec, &agent.q1, false)?;
    let c2 = tape.model(&agent.critic_spec, &agent.q2, false)?;
    let o = tape.constant_row(obs);
    let out = tape.mlp(pm, o);
    let mu = tape.slice_cols(out, 0, k);
    let ls = tape.slice_cols(out, k, 2 * k);
    let ls = tape.clamp(ls, T::lit(LOG_STD_MIN), T::lit(LOG_STD_MAX));
    let sd = tape.exp(ls);
    let z = tape.constant(z);
    let spread = tape.mul(sd, z);
    let actions = tape.add(mu, spread);
    let logp = tape.gaussian_log_density(actions, mu, sd);
    let squashed = tape.tanh(actions);
    let x = tape.concat_cols(o, squashed);
    let q = match critic {
        CriticValue::MinTwin => {
            let q1 = tape.mlp(c1, x);
            let q2 = tape.mlp(c2, x);
            tape.min(q1, q2)
        }
        CriticValue::Q1Only => tape.mlp(c1, x),
    };
    Ok((tape.softmax_weighted_sum(logp, q), pm))
}

/// Value estimate and its gradient w.r.t. the policy parameters, using the
/// given action noise.
pub fn value_gradient_with_noise<T: Scalar>(
    agent: &SacAgent<T>,
    obs: &[T],
    z: Array2<T>,
    critic: CriticValue,
) -> Result<ValueGradient<T>, NnError> {
    let mut tape = Tape::new();
    let (v, pm) = record_value(&mut tape, agent, true, obs, z, critic)?;
    let value = tape.scalar(v);
    let weights = tape.softmax_weights(v).map(<[T]>::to_vec).unwrap_or_default();
    let mut grads = tape.backward(v)?;
    let gradient = grads.take_model(pm);
    Ok(ValueGradient {
        value,
        gradient,
        weights,
    })
}

/// Weighted value estimate with freshly drawn action noise.
pub fn value_estimate<T: Scalar, R: Rng + ?Sized>(
    agent: &SacAgent<T>,
    obs: &[T],
    spec: &MetricSpec,
    rng: &mut R,
) -> Result<ValueGradient<T>, MetricError> {
    let z = draw_action_noise(spec.n_actions, agent.action_dim, rng);
    let mut tape = Tape::new();
    let (v, _) = record_value(&mut tape, agent, false, obs, z, spec.critic)?;
    tape.check()?;
    let weights = tape.softmax_weights(v).map(<[T]>::to_vec).unwrap_or_default();
    if weights.iter().all(|&w| w == T::zero()) {
        return Err(MetricError::WeightUnderflow);
    }
    Ok(ValueGradient {
        value: tape.scalar(v),
        gradient: Vec::new(),
        weights,
    })
}

fn l2<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// Score from a value and gradient under `spec`.
pub fn score_from<T: Scalar>(value: T, gradient: &[T], state: &[f64], spec: &MetricSpec) -> (T, T) {
    let grad_norm = l2(gradient);
    let denom = value.abs().max(T::lit(spec.denom_floor));
    let mut score = grad_norm / denom;
    if spec.variant == MetricVariant::StateScaledRatio {
        score = score * T::lit(state.iter().map(|x| x * x).sum::<f64>().sqrt());
    }
    (score, grad_norm)
}

/// Condition-number score of one environment state.
pub fn condition_number<T: Scalar, R: Rng + ?Sized>(
    agent: &SacAgent<T>,
    state: &[f64],
    dynamics: &dyn Dynamics,
    spec: &MetricSpec,
    rng: &mut R,
) -> Result<MetricSample<T>, MetricError> {
    if !dynamics.state_bounds().contains(state) {
        return Err(MetricError::OutOfBounds { state: state.to_vec() });
    }
    let obs: Vec<T> = dynamics.observe(state).into_iter().map(T::lit).collect();
    let z = draw_action_noise(spec.n_actions, agent.action_dim, rng);
    let vg = value_gradient_with_noise(agent, &obs, z, spec.critic).map_err(|e| match e {
        NnError::NonFinite { primitive } => MetricError::NonFinite {
            what: primitive,
            state: state.to_vec(),
        },
        other => MetricError::Nn(other),
    })?;
    if !vg.value.is_finite() {
        return Err(MetricError::NonFinite {
            what: "value estimate",
            state: state.to_vec(),
        });
    }
    let (score, grad_norm) = score_from(vg.value, &vg.gradient, state, spec);
    if !score.is_finite() {
        return Err(MetricError::NonFinite {
            what: "gradient",
            state: state.to_vec(),
        });
    }
    Ok(MetricSample {
        state: state.to_vec(),
        score,
        value_estimate: vg.value,
        grad_norm,
    })
}

/// Score every state; state `i` uses the stream `derive_seed(seed, i)`.
pub fn score_batch<T: Scalar>(
    agent: &SacAgent<T>,
    states: &[Vec<f64>],
    dynamics: &dyn Dynamics,
    spec: &MetricSpec,
    seed: u64,
) -> Result<Vec<MetricSample<T>>, MetricError> {
    if states.is_empty() {
        return Err(MetricError::Empty);
    }
    states
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = rng_from(derive_seed(seed, i as u64));
            condition_number(agent, s, dynamics, spec, &mut rng).map_err(|e| MetricError::AtIndex {
                index: i,
                source: Box::new(e),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
