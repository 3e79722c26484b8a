use ndarray::Array2;
use rand::Rng;

use super::SacError;
use crate::scalar::Scalar;

/// Minibatch of transitions, one row each. `done` is 1 only for true
/// terminations (time-limit truncations bootstrap).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub obs: Array2<T>,
    pub action: Array2<T>,
    pub reward: Array2<T>,
    pub next_obs: Array2<T>,
    pub done: Array2<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One transition repeated `n` times.
    pub fn repeated(obs: &[T], action: &[T], reward: T, next_obs: &[T], done: bool, n: usize) -> Self {
        let rows = |v: &[T]| Array2::from_shape_fn((n, v.len()), |(_, j)| v[j]);
        Self {
            obs: rows(obs),
            action: rows(action),
            reward: Array2::from_elem((n, 1), reward),
            next_obs: rows(next_obs),
            done: Array2::from_elem((n, 1), if done { T::one() } else { T::zero() }),
        }
    }
}

/// Fixed-capacity ring of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    obs_dim: usize,
    action_dim: usize,
    obs: Vec<T>,
    action: Vec<T>,
    reward: Vec<T>,
    next_obs: Vec<T>,
    done: Vec<T>,
    next: usize,
    len: usize,
}

impl<T: Scalar> ReplayBuffer<T> {
    pub fn new(capacity: usize, obs_dim: usize, action_dim: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            obs_dim,
            action_dim,
            obs: vec![T::zero(); capacity * obs_dim],
            action: vec![T::zero(); capacity * action_dim],
            reward: vec![T::zero(); capacity],
            next_obs: vec![T::zero(); capacity * obs_dim],
            done: vec![T::zero(); capacity],
            next: 0,
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// `done_for_bootstrap` must be false for time-limit truncation.
    pub fn push(&mut self, obs: &[T], action: &[T], reward: T, next_obs: &[T], done_for_bootstrap: bool) {
        debug_assert_eq!(obs.len(), self.obs_dim);
        debug_assert_eq!(action.len(), self.action_dim);
        let i = self.next;
        self.obs[i * self.obs_dim..(i + 1) * self.obs_dim].copy_from_slice(obs);
        self.action[i * self.action_dim..(i + 1) * self.action_dim].copy_from_slice(action);
        self.reward[i] = reward;
        self.next_obs[i * self.obs_dim..(i + 1) * self.obs_dim].copy_from_slice(next_obs);
        self.done[i] = if done_for_bootstrap { T::one() } else { T::zero() };
        self.next = (self.next + 1) % self.capacity;
        self.len = (self.len + 1).min(self.capacity);
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Batch<T>, SacError> {
        if batch == 0 || self.len < batch {
            return Err(SacError::BufferTooSmall { size: self.len, batch });
        }
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..self.len)).collect();
        let gather = |src: &[T], width: usize| {
            Array2::from_shape_fn((batch, width), |(r, c)| src[idx[r] * width + c])
        };
        Ok(Batch {
            obs: gather(&self.obs, self.obs_dim),
            action: gather(&self.action, self.action_dim),
            reward: gather(&self.reward, 1),
            next_obs: gather(&self.next_obs, self.obs_dim),
            done: gather(&self.done, 1),
        })
    }
}
