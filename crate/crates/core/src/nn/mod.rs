//! Dense-network engine: fixed-shape MLPs over a flat parameter store, a small
//! reverse-mode tape for the primitives the learners need, and Adam.

mod adam;
mod checkpoint;
mod tape;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_SCHEMA, CHECKPOINT_VERSION};
pub use tape::{grad_scalar, Gradients, ModelId, Tape, Var};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: String,
        actual: String,
    },
    #[error("non-finite value produced by `{primitive}`")]
    NonFinite { primitive: &'static str },
    #[error("domain error in {primitive}: {detail}")]
    Domain {
        primitive: &'static str,
        detail: String,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_err(what: &'static str, expected: impl ToString, actual: impl ToString) -> NnError {
    NnError::Shape {
        what,
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
        }
    }
}

/// Shape of a fully connected network. Hidden layers use `activation`; the
/// output layer is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

/// Location of one layer's weights and bias inside a [`ParameterVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Start of the `fan_out x fan_in` row-major weight block.
    pub weight_offset: usize,
    /// Start of the `fan_out` bias block, directly after the weights.
    pub bias_offset: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            hidden,
            output_dim,
            activation,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(NnError::Domain {
                primitive: "mlp_spec",
                detail: format!("all layer widths must be positive: {self:?}"),
            });
        }
        Ok(())
    }

    /// Layer widths including input and output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden);
        w.push(self.output_dim);
        w
    }

    pub fn layers(&self) -> Vec<LayerSlot> {
        let widths = self.widths();
        let mut offset = 0;
        widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let slot = LayerSlot {
                    fan_in,
                    fan_out,
                    weight_offset: offset,
                    bias_offset: offset + fan_in * fan_out,
                };
                offset += (fan_in + 1) * fan_out;
                slot
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.widths().windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ParameterVector<T> {
        let mut values = vec![T::zero(); self.parameter_count()];
        for slot in self.layers() {
            let bound = (6.0 / (slot.fan_in + slot.fan_out) as f64).sqrt();
            for w in &mut values[slot.weight_offset..slot.bias_offset] {
                *w = T::lit(rng.random_range(-bound..bound));
            }
        }
        ParameterVector { values }
    }

    pub fn zeros<T: Scalar>(&self) -> ParameterVector<T> {
        ParameterVector {
            values: vec![T::zero(); self.parameter_count()],
        }
    }

    pub fn check_params<T: Scalar>(&self, params: &ParameterVector<T>) -> Result<(), NnError> {
        if params.len() != self.parameter_count() {
            return Err(shape_err("parameter vector", self.parameter_count(), params.len()));
        }
        Ok(())
    }
}

/// Flat parameter store in layer-major order (row-major weights, then bias).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> ParameterVector<T> {
    pub fn from_vec(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self <- tau * online + (1 - tau) * self`.
    pub fn polyak_from(&mut self, online: &ParameterVector<T>, tau: T) {
        debug_assert_eq!(self.len(), online.len());
        if tau == T::one() {
            self.values.copy_from_slice(&online.values);
            return;
        }
        let keep = T::one() - tau;
        for (t, &o) in self.values.iter_mut().zip(&online.values) {
            *t = tau * o + keep * *t;
        }
    }

    pub fn max_abs_diff(&self, other: &ParameterVector<T>) -> T {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}

pub(crate) fn weight_view<'a, T: Scalar>(params: &'a [T], slot: &LayerSlot) -> ArrayView2<'a, T> {
    ArrayView2::from_shape((slot.fan_out, slot.fan_in), &params[slot.weight_offset..slot.bias_offset])
        .expect("layer slot matches parameter layout")
}

/// One affine layer on a batch: `x * W^T + b`, optionally followed by the activation.
pub(crate) fn layer_forward<T: Scalar>(
    params: &[T],
    slot: &LayerSlot,
    x: &ArrayView2<T>,
    activation: Option<Activation>,
) -> Array2<T> {
    let w = weight_view(params, slot);
    let bias = &params[slot.bias_offset..slot.bias_offset + slot.fan_out];
    let bias = ArrayView1::from(bias);
    let mut out = bias.broadcast((x.nrows(), slot.fan_out)).expect("bias row").to_owned();
    general_mat_mul(T::one(), x, &w.t(), T::one(), &mut out);
    if let Some(act) = activation {
        out.mapv_inplace(|v| act.apply(v));
    }
    out
}

/// Batched forward pass; each row of `x` is one input.
pub fn mlp_forward_batch<T: Scalar>(
    spec: &MlpSpec,
    params: &ParameterVector<T>,
    x: ArrayView2<T>,
) -> Result<Array2<T>, NnError> {
    spec.check_params(params)?;
    if x.ncols() != spec.input_dim {
        return Err(shape_err("mlp input", spec.input_dim, x.ncols()));
    }
    let layers = spec.layers();
    let last = layers.len() - 1;
    let mut h = x.to_owned();
    for (i, slot) in layers.iter().enumerate() {
        let act = (i < last).then_some(spec.activation);
        h = layer_forward(&params.values, slot, &h.view(), act);
    }
    Ok(h)
}

/// Forward pass of a single input vector.
pub fn mlp_forward<T: Scalar>(spec: &MlpSpec, params: &ParameterVector<T>, x: &[T]) -> Result<Vec<T>, NnError> {
    if x.len() != spec.input_dim {
        return Err(shape_err("mlp input", spec.input_dim, x.len()));
    }
    let view = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
    Ok(mlp_forward_batch(spec, params, view)?.into_raw_vec_and_offset().0)
}

/// Sum over `i` of `-0.5 ((a_i - mu_i) / sigma_i)^2 - ln sigma_i - 0.5 ln(2 pi)`.
pub fn gaussian_log_density<T: Scalar>(a: &[T], mu: &[T], sigma: &[T]) -> Result<T, NnError> {
    if a.len() != mu.len() || a.len() != sigma.len() {
        return Err(shape_err(
            "gaussian_log_density",
            a.len(),
            format!("mu {} sigma {}", mu.len(), sigma.len()),
        ));
    }
    let half_log_2pi = T::lit(0.5) * (T::lit(2.0) * T::PI()).ln();
    let mut total = T::zero();
    for ((&a, &m), &s) in a.iter().zip(mu).zip(sigma) {
        if !(s > T::zero()) {
            return Err(NnError::Domain {
                primitive: "gaussian_log_density",
                detail: format!("sigma must be positive, got {s}"),
            });
        }
        let z = (a - m) / s;
        total += -T::lit(0.5) * z * z - s.ln() - half_log_2pi;
    }
    Ok(total)
}
