//! GP-guided choice of episode start states.
//!
//! Each epoch: the caller scores the current candidate pool; the scores are
//! standardized and regressed with a GP over normalized state space; the pool
//! is shifted to make test candidates; the next start is the candidate with the
//! largest posterior variance if that exceeds the threshold, else the one with
//! the largest posterior mean. The shifted pool becomes the next epoch's pool.

mod gp;

pub use gp::{cholesky, gp_fit, solve_lower, solve_upper_t, GpHyper, GpModel};

use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::Bounds;
use crate::rng::{rng_from, Rng};

#[derive(Debug, Error)]
pub enum SelectorError {
    #[error("{what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("kernel matrix not positive definite after jitter escalation to 1e-4")]
    NotPositiveDefinite,
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// Max posterior variance exceeded the threshold.
    Variance,
    /// Otherwise: max posterior mean.
    Mean,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Variance => "variance",
            Branch::Mean => "mean",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectorConfig {
    pub pool_size: usize,
    /// Threshold on posterior variance of standardized scores.
    pub variance_threshold: f64,
    /// Std of the Gaussian shift in normalized coordinates.
    pub shift_sigma: f64,
    /// Fraction of candidates replaced by fresh uniform draws each shift.
    pub resample_fraction: f64,
    pub gp: GpHyper<f64>,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            pool_size: 64,
            variance_threshold: 0.25,
            shift_sigma: 0.1,
            resample_fraction: 0.2,
            gp: GpHyper::default(),
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<(), SelectorError> {
        self.gp.validate()?;
        if self.pool_size == 0 {
            return Err(SelectorError::Invalid("pool_size must be positive".into()));
        }
        if !(self.variance_threshold >= 0.0) {
            return Err(SelectorError::Invalid("variance_threshold must be >= 0".into()));
        }
        if !(self.shift_sigma >= 0.0 && self.shift_sigma.is_finite()) {
            return Err(SelectorError::Invalid("shift_sigma must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.resample_fraction) {
            return Err(SelectorError::Invalid("resample_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-dimension affine map between state bounds and `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    bounds: Bounds,
}

impl Normalizer {
    pub fn new(bounds: Bounds) -> Result<Self, SelectorError> {
        if bounds.low.iter().zip(&bounds.high).any(|(l, h)| !(h > l)) {
            return Err(SelectorError::Invalid("state bounds must have positive width".into()));
        }
        Ok(Self { bounds })
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn normalize(&self, states: &[Vec<f64>]) -> Result<Array2<f64>, SelectorError> {
        let d = self.dim();
        let mut z = Array2::zeros((states.len(), d));
        for (r, s) in states.iter().enumerate() {
            if s.len() != d {
                return Err(SelectorError::Shape {
                    what: "state dimension",
                    expected: d,
                    actual: s.len(),
                });
            }
            for j in 0..d {
                let (l, h) = (self.bounds.low[j], self.bounds.high[j]);
                z[(r, j)] = 2.0 * (s[j] - l) / (h - l) - 1.0;
            }
        }
        Ok(z)
    }

    /// Inverse map, clipped to the state bounds.
    pub fn unnormalize(&self, z: ArrayView2<f64>) -> Result<Vec<Vec<f64>>, SelectorError> {
        if z.ncols() != self.dim() {
            return Err(SelectorError::Shape {
                what: "normalized columns",
                expected: self.dim(),
                actual: z.ncols(),
            });
        }
        Ok(z.rows()
            .into_iter()
            .map(|row| {
                let mut s: Vec<f64> = row
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let (l, h) = (self.bounds.low[j], self.bounds.high[j]);
                        l + (v + 1.0) * 0.5 * (h - l)
                    })
                    .collect();
                self.bounds.clip(&mut s);
                s
            })
            .collect())
    }
}

/// Two-branch rule: argmax variance if it exceeds `threshold`, else argmax
/// mean. Ties go to the lowest index; NaNs never win.
pub fn select_index(means: &[f64], variances: &[f64], threshold: f64) -> (usize, Branch) {
    assert!(!means.is_empty() && means.len() == variances.len(), "non-empty, equal-length predictions");
    let argmax = |v: &[f64]| {
        let mut best = 0;
        for (i, &x) in v.iter().enumerate() {
            if x > v[best] || (v[best].is_nan() && !x.is_nan()) {
                best = i;
            }
        }
        best
    };
    let iv = argmax(variances);
    if variances[iv] > threshold {
        (iv, Branch::Variance)
    } else {
        (argmax(means), Branch::Mean)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub state: Vec<f64>,
    pub index: usize,
    pub branch: Branch,
    pub max_variance: f64,
}

/// Summary of one selection epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub selection: Selection,
    pub score_min: f64,
    pub score_mean: f64,
    pub score_max: f64,
    /// All scores equal; targets were left unstandardized and the variance
    /// branch was forced.
    pub degenerate: bool,
    pub fit_ms: f64,
    pub predict_ms: f64,
}

pub struct SelectorState {
    config: SelectorConfig,
    normalizer: Normalizer,
    pool: Array2<f64>,
    rng: Rng,
    epoch: usize,
}

impl SelectorState {
    /// Start from `pool_size` uniform states (in normalized space).
    pub fn new(config: SelectorConfig, bounds: Bounds, seed: u64) -> Result<Self, SelectorError> {
        config.validate()?;
        let normalizer = Normalizer::new(bounds)?;
        let mut rng = rng_from(seed);
        let d = normalizer.dim();
        let pool = Array2::from_shape_simple_fn((config.pool_size, d), || rng.random_range(-1.0..=1.0));
        Ok(Self {
            config,
            normalizer,
            pool,
            rng,
            epoch: 0,
        })
    }

    /// Start from explicit states.
    pub fn with_pool(config: SelectorConfig, bounds: Bounds, states: &[Vec<f64>], seed: u64) -> Result<Self, SelectorError> {
        config.validate()?;
        let normalizer = Normalizer::new(bounds)?;
        let pool = normalizer.normalize(states)?;
        if pool.nrows() == 0 {
            return Err(SelectorError::Invalid("empty candidate pool".into()));
        }
        Ok(Self {
            config,
            normalizer,
            pool,
            rng: rng_from(seed),
            epoch: 0,
        })
    }

    pub fn config(&self) -> &SelectorConfig {
        &self.config
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn pool(&self) -> &Array2<f64> {
        &self.pool
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Current pool in state coordinates (what the caller scores).
    pub fn pool_states(&self) -> Vec<Vec<f64>> {
        self.normalizer.unnormalize(self.pool.view()).expect("pool width matches bounds")
    }

    /// Gaussian jitter of every row (clipped to `[-1, 1]`), then a
    /// `resample_fraction` of rows replaced by fresh uniform draws.
    pub fn shift_candidates(&mut self) -> Array2<f64> {
        let mut z = self.pool.clone();
        let sigma = self.config.shift_sigma;
        if sigma > 0.0 {
            for v in z.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut self.rng);
                *v = (*v + sigma * e).clamp(-1.0, 1.0);
            }
        }
        let n = z.nrows();
        let k = (self.config.resample_fraction * n as f64).round() as usize;
        if k > 0 {
            let rows = rand::seq::index::sample(&mut self.rng, n, k.min(n));
            for r in rows {
                for v in z.row_mut(r) {
                    *v = self.rng.random_range(-1.0..=1.0);
                }
            }
        }
        z
    }

    /// Apply the branch rule to predictions on `z_test` and return the
    /// unnormalized, clipped start state.
    pub fn select_initial_state(&self, means: &[f64], variances: &[f64], z_test: ArrayView2<f64>) -> Selection {
        let (index, branch) = select_index(means, variances, self.config.variance_threshold);
        self.selection_at(index, branch, variances, z_test)
    }

    fn selection_at(&self, index: usize, branch: Branch, variances: &[f64], z_test: ArrayView2<f64>) -> Selection {
        let row = z_test.slice(ndarray::s![index..index + 1, ..]);
        let state = self
            .normalizer
            .unnormalize(row)
            .expect("test width matches bounds")
            .remove(0);
        Selection {
            state,
            index,
            branch,
            max_variance: variances.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }

    /// Replace the pool with the shifted candidates.
    pub fn advance(&mut self, z_test: Array2<f64>) -> Result<(), SelectorError> {
        if z_test.dim() != self.pool.dim() {
            return Err(SelectorError::Shape {
                what: "candidate pool rows",
                expected: self.pool.nrows(),
                actual: z_test.nrows(),
            });
        }
        self.pool = z_test;
        self.epoch += 1;
        Ok(())
    }

    /// One full epoch given scores for [`Self::pool_states`]: fit, shift,
    /// predict, select, advance.
    pub fn epoch_step(&mut self, scores: &[f64]) -> Result<EpochReport, SelectorError> {
        if scores.len() != self.pool.nrows() {
            return Err(SelectorError::Shape {
                what: "pool scores",
                expected: self.pool.nrows(),
                actual: scores.len(),
            });
        }
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        let degenerate = !(sd > 0.0) || !sd.is_finite();
        let (targets, hyper) = if degenerate {
            let mut h = self.config.gp;
            h.signal_var = 1.0;
            (scores.to_vec(), h)
        } else {
            (scores.iter().map(|s| (s - mean) / sd).collect(), self.config.gp)
        };

        let t0 = Instant::now();
        let model = gp_fit(self.pool.view(), &targets, hyper)?;
        let fit_ms = t0.elapsed().as_secs_f64() * 1e3;

        let z_test = self.shift_candidates();
        let t1 = Instant::now();
        let (means, vars) = model.predict(z_test.view())?;
        let predict_ms = t1.elapsed().as_secs_f64() * 1e3;

        let selection = if degenerate {
            let (i, _) = select_index(&vars, &vars, f64::INFINITY);
            self.selection_at(i, Branch::Variance, &vars, z_test.view())
        } else {
            self.select_initial_state(&means, &vars, z_test.view())
        };
        let epoch = self.epoch;
        self.advance(z_test)?;
        Ok(EpochReport {
            epoch,
            selection,
            score_min: scores.iter().copied().fold(f64::INFINITY, f64::min),
            score_mean: mean,
            score_max: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            degenerate,
            fit_ms,
            predict_ms,
        })
    }
}

#[cfg(test)]
mod tests;
