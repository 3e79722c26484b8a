//! Soft actor-critic with a tanh-squashed Gaussian policy, twin critics,
//! Polyak-averaged targets and automatic entropy temperature.
//!
//! The policy emits unit actions in `[-1, 1]^k`; critics see unit actions and
//! the environment receives `unit * action_scale`.

mod buffer;
mod checkpoint;

pub use buffer::{Batch, ReplayBuffer};
pub use checkpoint::{load_agent, save_agent, AgentManifest};

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{mlp_forward_batch, Activation, Adam, MlpSpec, NnError, ParameterVector, Tape, Var};
use crate::scalar::Scalar;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Guard inside `log(1 - tanh(u)^2 + eps)`.
pub const SQUASH_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SacError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite policy output; first non-finite policy parameter: {first_bad_param:?}")]
    NonFinitePolicy { first_bad_param: Option<usize> },
    #[error("non-finite {what} during update (q1_loss={q1_loss}, q2_loss={q2_loss}, policy_loss={policy_loss}, alpha={alpha})")]
    NonFiniteLoss {
        what: &'static str,
        q1_loss: f64,
        q2_loss: f64,
        policy_loss: f64,
        alpha: f64,
    },
    #[error("observation has dimension {actual}, expected {expected}")]
    ObservationDim { expected: usize, actual: usize },
    #[error("non-finite observation")]
    NonFiniteObservation,
    #[error("replay buffer holds {size} transitions, batch needs {batch}")]
    BufferTooSmall { size: usize, batch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub policy_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Uniform-random action steps before learning starts.
    pub warmup_steps: usize,
    pub updates_per_step: usize,
    pub auto_alpha: bool,
    pub initial_alpha: f64,
    /// Defaults to `-(action dim)`.
    pub target_entropy: Option<f64>,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Relu,
            policy_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            gamma: 0.99,
            tau: 0.005,
            batch_size: 256,
            buffer_capacity: 100_000,
            warmup_steps: 1000,
            updates_per_step: 1,
            auto_alpha: true,
            initial_alpha: 1.0,
            target_entropy: None,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<(), String> {
        let mut problems = Vec::new();
        if self.hidden.iter().any(|&h| h == 0) {
            problems.push("hidden widths must be positive".to_string());
        }
        for (name, v) in [("policy_lr", self.policy_lr), ("critic_lr", self.critic_lr), ("alpha_lr", self.alpha_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be finite and >= 0"));
            }
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            problems.push("gamma must lie in (0, 1)".into());
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            problems.push("tau must lie in (0, 1]".into());
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            problems.push("need 1 <= batch_size <= buffer_capacity".into());
        }
        if !(self.initial_alpha > 0.0 && self.initial_alpha.is_finite()) {
            problems.push("initial_alpha must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems.join("; "))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Stochastic,
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub q1_loss: f64,
    pub q2_loss: f64,
    pub policy_loss: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SacAgent<T> {
    pub config: SacConfig,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub action_scale: Vec<T>,
    pub policy_spec: MlpSpec,
    pub critic_spec: MlpSpec,
    pub policy: ParameterVector<T>,
    pub q1: ParameterVector<T>,
    pub q2: ParameterVector<T>,
    pub q1_target: ParameterVector<T>,
    pub q2_target: ParameterVector<T>,
    pub log_alpha: T,
    policy_opt: Adam<T>,
    q1_opt: Adam<T>,
    q2_opt: Adam<T>,
    alpha_opt: Adam<T>,
}

fn standard_normal_matrix<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z)
    })
}

/// Log-density of `tanh(u)` for `u ~ N(mu, sigma)`, per row of `u`.
fn squashed_log_prob_rows<T: Scalar>(u: &Array2<T>, mu: &Array2<T>, sigma: &Array2<T>) -> Vec<T> {
    let half_log_2pi = T::lit(0.5) * (T::lit(2.0) * T::PI()).ln();
    let eps = T::lit(SQUASH_EPS);
    u.axis_iter(Axis(0))
        .zip(mu.axis_iter(Axis(0)))
        .zip(sigma.axis_iter(Axis(0)))
        .map(|((u, m), s)| {
            let mut lp = T::zero();
            for j in 0..u.len() {
                let z = (u[j] - m[j]) / s[j];
                let a = u[j].tanh();
                lp += -T::lit(0.5) * z * z - s[j].ln() - half_log_2pi - (T::one() - a * a + eps).ln();
            }
            lp
        })
        .collect()
}

impl<T: Scalar> SacAgent<T> {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        action_scale: Vec<T>,
        config: SacConfig,
        rng: &mut R,
    ) -> Result<Self, SacError> {
        let action_dim = action_scale.len();
        let policy_spec = MlpSpec::new(obs_dim, config.hidden.clone(), 2 * action_dim, config.activation);
        let critic_spec = MlpSpec::new(obs_dim + action_dim, config.hidden.clone(), 1, config.activation);
        policy_spec.validate()?;
        critic_spec.validate()?;
        let policy = policy_spec.init(rng);
        let q1 = critic_spec.init(rng);
        let q2 = critic_spec.init(rng);
        Ok(Self {
            obs_dim,
            action_dim,
            action_scale,
            policy_opt: Adam::new(policy.len()),
            q1_opt: Adam::new(q1.len()),
            q2_opt: Adam::new(q2.len()),
            alpha_opt: Adam::new(1),
            log_alpha: T::lit(config.initial_alpha.ln()),
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            policy,
            q1,
            q2,
            policy_spec,
            critic_spec,
            config,
        })
    }

    pub fn alpha(&self) -> T {
        self.log_alpha.exp()
    }

    pub fn target_entropy(&self) -> f64 {
        self.config.target_entropy.unwrap_or(-(self.action_dim as f64))
    }

    fn check_obs(&self, obs: &[T]) -> Result<(), SacError> {
        if obs.len() != self.obs_dim {
            return Err(SacError::ObservationDim {
                expected: self.obs_dim,
                actual: obs.len(),
            });
        }
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(SacError::NonFiniteObservation);
        }
        Ok(())
    }

    /// Split raw policy output rows into `(mu, sigma)` with clamped log-std.
    fn split_policy_output(&self, out: &Array2<T>) -> (Array2<T>, Array2<T>) {
        let k = self.action_dim;
        let mu = out.slice(ndarray::s![.., ..k]).to_owned();
        let sigma = out
            .slice(ndarray::s![.., k..])
            .mapv(|ls| ls.max(T::lit(LOG_STD_MIN)).min(T::lit(LOG_STD_MAX)).exp());
        (mu, sigma)
    }

    fn policy_batch(&self, obs: ArrayView2<T>) -> Result<(Array2<T>, Array2<T>), SacError> {
        let out = mlp_forward_batch(&self.policy_spec, &self.policy, obs)?;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(SacError::NonFinitePolicy {
                first_bad_param: self.policy.values.iter().position(|v| !v.is_finite()),
            });
        }
        Ok(self.split_policy_output(&out))
    }

    /// Pre-squash Gaussian `(mu, sigma)` for one observation.
    pub fn policy_distribution(&self, obs: &[T]) -> Result<(Vec<T>, Vec<T>), SacError> {
        self.check_obs(obs)?;
        let view = ArrayView2::from_shape((1, obs.len()), obs).expect("row");
        let (mu, sigma) = self.policy_batch(view)?;
        Ok((mu.into_raw_vec_and_offset().0, sigma.into_raw_vec_and_offset().0))
    }

    /// Unit action in `[-1, 1]^k` plus its squashed log-density (zero in
    /// deterministic mode).
    pub fn sample_unit<R: Rng + ?Sized>(&self, obs: &[T], mode: ActMode, rng: &mut R) -> Result<(Vec<T>, T), SacError> {
        let (mu, sigma) = self.policy_distribution(obs)?;
        match mode {
            ActMode::Deterministic => Ok((mu.iter().map(|m| m.tanh()).collect(), T::zero())),
            ActMode::Stochastic => {
                let z: Array2<T> = standard_normal_matrix(1, self.action_dim, rng);
                let mu = Array2::from_shape_vec((1, self.action_dim), mu).expect("row");
                let sigma = Array2::from_shape_vec((1, self.action_dim), sigma).expect("row");
                let u = &mu + &(&sigma * &z);
                let lp = squashed_log_prob_rows(&u, &mu, &sigma)[0];
                Ok((u.iter().map(|v| v.tanh()).collect(), lp))
            }
        }
    }

    /// Environment-scale action.
    pub fn act<R: Rng + ?Sized>(&self, obs: &[T], mode: ActMode, rng: &mut R) -> Result<Vec<T>, SacError> {
        let (unit, _) = self.sample_unit(obs, mode, rng)?;
        Ok(self.scale_action(&unit))
    }

    pub fn scale_action(&self, unit: &[T]) -> Vec<T> {
        unit.iter().zip(&self.action_scale).map(|(&a, &s)| a * s).collect()
    }

    /// Uniform unit action, used during warmup.
    pub fn random_unit<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        (0..self.action_dim).map(|_| T::lit(rng.random_range(-1.0..=1.0))).collect()
    }

    /// `min(Q1, Q2)` of the online critics for each `(obs, unit action)` row.
    pub fn min_q(&self, obs: ArrayView2<T>, unit_actions: ArrayView2<T>) -> Result<Array2<T>, SacError> {
        let x = ndarray::concatenate(Axis(1), &[obs, unit_actions]).map_err(|e| {
            SacError::Nn(NnError::Shape {
                what: "critic input",
                expected: format!("{} rows", obs.nrows()),
                actual: e.to_string(),
            })
        })?;
        let a = mlp_forward_batch(&self.critic_spec, &self.q1, x.view())?;
        let b = mlp_forward_batch(&self.critic_spec, &self.q2, x.view())?;
        Ok(ndarray::Zip::from(&a).and(&b).map_collect(|&p, &q| p.min(q)))
    }

    /// One gradient step on critics, policy and (optionally) temperature, then
    /// a Polyak step of the targets.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &Batch<T>, rng: &mut R) -> Result<LossReport, SacError> {
        let (q1_loss, q2_loss) = self.update_critics(batch, rng)?;
        let policy_loss = self
            .update_actor(batch, rng)
            .map_err(|e| self.loss_error(e, q1_loss, q2_loss, f64::NAN))?;
        self.update_targets();
        let report = LossReport {
            q1_loss,
            q2_loss,
            policy_loss,
            alpha: self.alpha().as_f64(),
        };
        if ![report.q1_loss, report.q2_loss, report.policy_loss, report.alpha]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(SacError::NonFiniteLoss {
                what: "loss",
                q1_loss: report.q1_loss,
                q2_loss: report.q2_loss,
                policy_loss: report.policy_loss,
                alpha: report.alpha,
            });
        }
        Ok(report)
    }

    /// Soft TD target `r + gamma (1 - done) (min Q_target(s', a') - alpha log pi(a'|s'))`.
    pub fn td_target<R: Rng + ?Sized>(&self, batch: &Batch<T>, rng: &mut R) -> Result<Array2<T>, SacError> {
        let n = batch.len();
        let alpha = self.alpha();
        let gamma = T::lit(self.config.gamma);
        let (mu_n, sd_n) = self.policy_batch(batch.next_obs.view())?;
        let z_n: Array2<T> = standard_normal_matrix(n, self.action_dim, rng);
        let u_n = &mu_n + &(&sd_n * &z_n);
        let logp_n = squashed_log_prob_rows(&u_n, &mu_n, &sd_n);
        let a_n = u_n.mapv(|v| v.tanh());
        let x_n = ndarray::concatenate(Axis(1), &[batch.next_obs.view(), a_n.view()]).expect("rows match");
        let qt1 = mlp_forward_batch(&self.critic_spec, &self.q1_target, x_n.view())?;
        let qt2 = mlp_forward_batch(&self.critic_spec, &self.q2_target, x_n.view())?;
        Ok(Array2::from_shape_fn((n, 1), |(i, _)| {
            let soft = qt1[(i, 0)].min(qt2[(i, 0)]) - alpha * logp_n[i];
            batch.reward[(i, 0)] + gamma * (T::one() - batch.done[(i, 0)]) * soft
        }))
    }

    /// Regress both critics onto the TD target; returns their mean squared errors
    /// before the step.
    pub fn update_critics<R: Rng + ?Sized>(&mut self, batch: &Batch<T>, rng: &mut R) -> Result<(f64, f64), SacError> {
        let y = self.td_target(batch, rng)?;
        let (q1_loss, q2_loss, g1, g2) = {
            let mut tape = Tape::new();
            let m1 = tape.model(&self.critic_spec, &self.q1, true)?;
            let m2 = tape.model(&self.critic_spec, &self.q2, true)?;
            let x = ndarray::concatenate(Axis(1), &[batch.obs.view(), batch.action.view()]).expect("rows match");
            let x = tape.constant(x);
            let y = tape.constant(y);
            let p1 = tape.mlp(m1, x);
            let p2 = tape.mlp(m2, x);
            let d1 = tape.sub(p1, y);
            let d2 = tape.sub(p2, y);
            let s1 = tape.square(d1);
            let s2 = tape.square(d2);
            let l1 = tape.mean(s1);
            let l2 = tape.mean(s2);
            let total = tape.add(l1, l2);
            let (v1, v2) = (tape.scalar(l1).as_f64(), tape.scalar(l2).as_f64());
            let mut g = tape.backward(total).map_err(|e| self.loss_error(e, v1, v2, f64::NAN))?;
            (v1, v2, g.take_model(m1), g.take_model(m2))
        };
        let critic_lr = T::lit(self.config.critic_lr);
        self.q1_opt.step_vector(&mut self.q1, &g1, critic_lr)?;
        self.q2_opt.step_vector(&mut self.q2, &g2, critic_lr)?;
        Ok((q1_loss, q2_loss))
    }

    /// Reparameterized policy step against the current critics, then the
    /// temperature step. Returns the policy loss before the step.
    pub fn update_actor<R: Rng + ?Sized>(&mut self, batch: &Batch<T>, rng: &mut R) -> Result<f64, NnError> {
        let n = batch.len();
        let alpha = self.alpha();
        let z: Array2<T> = standard_normal_matrix(n, self.action_dim, rng);
        let (policy_loss, g_pi, mean_logp) = {
            let k = self.action_dim;
            let mut tape = Tape::new();
            let pm = tape.model(&self.policy_spec, &self.policy, true)?;
            let c1 = tape.model(&self.critic_spec, &self.q1, false)?;
            let c2 = tape.model(&self.critic_spec, &self.q2, false)?;
            let obs = tape.constant(batch.obs.clone());
            let out = tape.mlp(pm, obs);
            let mu = tape.slice_cols(out, 0, k);
            let ls = tape.slice_cols(out, k, 2 * k);
            let ls = tape.clamp(ls, T::lit(LOG_STD_MIN), T::lit(LOG_STD_MAX));
            let sd = tape.exp(ls);
            let z = tape.constant(z);
            let noise = tape.mul(sd, z);
            let u = tape.add(mu, noise);
            let logp = squashed_log_prob(&mut tape, u, mu, sd);
            let a = tape.tanh(u);
            let x = tape.concat_cols(obs, a);
            let q1 = tape.mlp(c1, x);
            let q2 = tape.mlp(c2, x);
            let q = tape.min(q1, q2);
            let ent = tape.scale(logp, alpha);
            let obj = tape.sub(ent, q);
            let loss = tape.mean(obj);
            let mean_logp = tape.value(logp).mean().unwrap_or_else(T::nan);
            let lv = tape.scalar(loss).as_f64();
            let mut g = tape.backward(loss)?;
            (lv, g.take_model(pm), mean_logp)
        };
        self.policy_opt
            .step_vector(&mut self.policy, &g_pi, T::lit(self.config.policy_lr))?;
        if self.config.auto_alpha {
            // d/d(log alpha) of -log_alpha * (log pi + target_entropy)
            let grad = -(mean_logp + T::lit(self.target_entropy()));
            let mut la = [self.log_alpha];
            self.alpha_opt.step(&mut la, &[grad], T::lit(self.config.alpha_lr))?;
            self.log_alpha = la[0];
        }
        Ok(policy_loss)
    }

    pub fn update_targets(&mut self) {
        let tau = T::lit(self.config.tau);
        polyak(&mut self.q1_target, &self.q1, tau);
        polyak(&mut self.q2_target, &self.q2, tau);
    }

    fn loss_error(&self, e: NnError, q1: f64, q2: f64, pl: f64) -> SacError {
        match e {
            NnError::NonFinite { primitive } => SacError::NonFiniteLoss {
                what: primitive,
                q1_loss: q1,
                q2_loss: q2,
                policy_loss: pl,
                alpha: self.alpha().as_f64(),
            },
            other => SacError::Nn(other),
        }
    }
}

/// `target <- target + tau (online - target)`; exact copy when `tau = 1`.
pub fn polyak<T: Scalar>(target: &mut ParameterVector<T>, online: &ParameterVector<T>, tau: T) {
    if tau == T::one() {
        target.values.copy_from_slice(&online.values);
        return;
    }
    for (t, &o) in target.values.iter_mut().zip(&online.values) {
        *t += tau * (o - *t);
    }
}

/// Tape version of the squashed log-density: Gaussian log-density of `u`
/// minus `sum log(1 - tanh(u)^2 + eps)`, one value per row.
pub fn squashed_log_prob<T: Scalar>(tape: &mut Tape<'_, T>, u: Var, mu: Var, sd: Var) -> Var {
    let lp = tape.gaussian_log_density(u, mu, sd);
    let a = tape.tanh(u);
    let a2 = tape.square(a);
    let one_minus = tape.neg(a2);
    let one_minus = tape.add_scalar(one_minus, T::one() + T::lit(SQUASH_EPS));
    let corr = tape.log(one_minus);
    let corr = tape.sum_cols(corr);
    tape.sub(lp, corr)
}
