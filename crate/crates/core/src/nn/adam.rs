use serde::{Deserialize, Serialize};

use super::{shape_err, NnError, ParameterVector};
use crate::scalar::Scalar;

/// Adam optimizer state for one parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam<T> {
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Vec<T>,
    v: Vec<T>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update in place. Rejects non-finite gradients without touching
    /// parameters or moments.
    pub fn step(&mut self, params: &mut [T], grad: &[T], lr: T) -> Result<(), NnError> {
        if grad.len() != params.len() || grad.len() != self.m.len() {
            return Err(shape_err("adam gradient", params.len(), grad.len()));
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(NnError::NonFinite { primitive: "adam" });
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let one = T::one();
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * g * g;
            if lr != T::zero() {
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    pub fn step_vector(&mut self, params: &mut ParameterVector<T>, grad: &[T], lr: T) -> Result<(), NnError> {
        self.step(&mut params.values, grad, lr)
    }
}
