//! Reverse-mode differentiation over a fixed set of batched primitives.
//!
//! Every node holds a 2-D value (rows = batch). Binary elementwise ops
//! broadcast an operand with a single row and/or column. Faults (shape
//! mismatches, non-finite values) are latched on the tape and surface from
//! [`Tape::check`] or [`Tape::backward`], so graph construction stays
//! infallible at each call site.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayViewMut2, Axis, Zip};

use super::{layer_forward, shape_err, weight_view, Activation, LayerSlot, MlpSpec, NnError, ParameterVector};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelId(usize);

#[derive(Debug, Clone)]
enum Fault {
    NonFinite(&'static str),
    Shape {
        what: &'static str,
        expected: String,
        actual: String,
    },
}

impl From<Fault> for NnError {
    fn from(f: Fault) -> Self {
        match f {
            Fault::NonFinite(primitive) => NnError::NonFinite { primitive },
            Fault::Shape { what, expected, actual } => NnError::Shape { what, expected, actual },
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Min,
}

#[derive(Debug, Clone, Copy)]
enum Unary<T> {
    Neg,
    Scale(T),
    AddScalar(T),
    Tanh,
    Relu,
    Exp,
    Log,
    Square,
    Clamp(T, T),
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Mlp {
        model: usize,
        input: usize,
        hidden: Vec<Array2<T>>,
    },
    Binary(Binary, usize, usize),
    Unary(Unary<T>, usize),
    SumCols(usize),
    SumAll(usize),
    MeanAll(usize),
    ConcatCols(usize, usize),
    SliceCols(usize, usize, usize),
    GaussianLogDensity {
        a: usize,
        mu: usize,
        sigma: usize,
    },
    SoftmaxWeightedSum {
        logits: usize,
        values: usize,
        weights: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Mlp { .. } => "affine",
            Op::Binary(b, ..) => match b {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "product",
                Binary::Div => "div",
                Binary::Min => "min",
            },
            Op::Unary(u, _) => match u {
                Unary::Neg => "neg",
                Unary::Scale(_) => "scale",
                Unary::AddScalar(_) => "add_scalar",
                Unary::Tanh => "tanh",
                Unary::Relu => "relu",
                Unary::Exp => "exp",
                Unary::Log => "log",
                Unary::Square => "square",
                Unary::Clamp(..) => "clamp",
            },
            Op::SumCols(_) => "sum",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::ConcatCols(..) => "concat",
            Op::SliceCols(..) => "slice",
            Op::GaussianLogDensity { .. } => "gaussian_log_density",
            Op::SoftmaxWeightedSum { .. } => "softmax_weighted_sum",
        }
    }
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    needs_grad: bool,
}

struct ModelEntry<'a, T> {
    spec: &'a MlpSpec,
    params: &'a [T],
    layers: Vec<LayerSlot>,
    trainable: bool,
}

pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<T>>,
    models: Vec<ModelEntry<'a, T>>,
    fault: Option<Fault>,
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    params: Vec<Vec<T>>,
    nodes: Vec<Option<Array2<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. a model's parameters. All zeros for frozen or unused models.
    pub fn wrt_model(&self, model: ModelId) -> &[T] {
        &self.params[model.0]
    }

    pub fn take_model(&mut self, model: ModelId) -> Vec<T> {
        std::mem::take(&mut self.params[model.0])
    }

    /// Gradient w.r.t. a node created by [`Tape::variable`] (or any node on the
    /// path to the output that required a gradient).
    pub fn wrt(&self, var: Var) -> Option<&Array2<T>> {
        self.nodes[var.0].as_ref()
    }
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

/// Sum `g` down to `shape` along the axes that were broadcast.
fn reduce_to<T: Scalar>(g: Array2<T>, shape: (usize, usize)) -> Array2<T> {
    let mut g = g;
    if shape.0 != g.nrows() {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 != g.ncols() {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn accumulate<T: Scalar>(grads: &mut [Option<Array2<T>>], idx: usize, contrib: Array2<T>) {
    match &mut grads[idx] {
        Some(g) => *g += &contrib,
        slot @ None => *slot = Some(contrib),
    }
}

impl<'a, T: Scalar> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            models: Vec::new(),
            fault: None,
        }
    }

    /// Register a network. Frozen (`trainable = false`) models still pass
    /// gradients through to their inputs but get no parameter gradient.
    pub fn model(
        &mut self,
        spec: &'a MlpSpec,
        params: &'a ParameterVector<T>,
        trainable: bool,
    ) -> Result<ModelId, NnError> {
        spec.validate()?;
        spec.check_params(params)?;
        self.models.push(ModelEntry {
            spec,
            params: params.as_slice(),
            layers: spec.layers(),
            trainable,
        });
        Ok(ModelId(self.models.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    /// First element of a node; intended for 1x1 outputs.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.iter().next().copied().unwrap_or_else(T::nan)
    }

    /// Latched fault, if any.
    pub fn check(&self) -> Result<(), NnError> {
        match &self.fault {
            Some(f) => Err(f.clone().into()),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, needs_grad: bool) -> Var {
        if self.fault.is_none() && !value.iter().all(|v| v.is_finite()) {
            self.fault = Some(Fault::NonFinite(op.name()));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn fail(&mut self, what: &'static str, expected: impl ToString, actual: impl ToString) -> Var {
        if self.fault.is_none() {
            self.fault = Some(Fault::Shape {
                what,
                expected: expected.to_string(),
                actual: actual.to_string(),
            });
        }
        self.nodes.push(Node {
            value: Array2::zeros((0, 0)),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// A value that is not differentiated.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant_row(&mut self, row: &[T]) -> Var {
        self.constant(Array2::from_shape_vec((1, row.len()), row.to_vec()).expect("row"))
    }

    pub fn mlp(&mut self, model: ModelId, x: Var) -> Var {
        let entry = &self.models[model.0];
        let (rows, cols) = self.dims(x);
        if cols != entry.spec.input_dim {
            let expected = entry.spec.input_dim;
            return self.fail("mlp input columns", expected, cols);
        }
        let last = entry.layers.len() - 1;
        let mut hidden: Vec<Array2<T>> = Vec::with_capacity(last);
        let mut out = Array2::zeros((rows, 0));
        for (i, slot) in entry.layers.iter().enumerate() {
            let act = (i < last).then_some(entry.spec.activation);
            let input = if i == 0 {
                self.nodes[x.0].value.view()
            } else {
                hidden[i - 1].view()
            };
            let h = layer_forward(entry.params, slot, &input, act);
            if i < last {
                hidden.push(h);
            } else {
                out = h;
            }
        }
        let needs = entry.trainable || self.needs(x.0);
        self.push(
            out,
            Op::Mlp {
                model: model.0,
                input: x.0,
                hidden,
            },
            needs,
        )
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Var {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        let (Some(r), Some(c)) = (broadcast_dim(ra, rb), broadcast_dim(ca, cb)) else {
            return self.fail("broadcast", format!("{ra}x{ca}"), format!("{rb}x{cb}"));
        };
        let av = self.nodes[a.0].value.broadcast((r, c)).expect("broadcastable");
        let bv = self.nodes[b.0].value.broadcast((r, c)).expect("broadcastable");
        let mut out = Array2::zeros((r, c));
        Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| {
            *o = match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
                Binary::Min => x.min(y),
            }
        });
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(out, Op::Binary(kind, a.0, b.0), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Div, a, b)
    }
    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(Binary::Min, a, b)
    }

    fn unary(&mut self, kind: Unary<T>, a: Var) -> Var {
        let out = self.nodes[a.0].value.mapv(|x| match kind {
            Unary::Neg => -x,
            Unary::Scale(c) => c * x,
            Unary::AddScalar(c) => x + c,
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(T::zero()),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
            Unary::Clamp(lo, hi) => x.max(lo).min(hi),
        });
        let needs = self.needs(a.0);
        self.push(out, Op::Unary(kind, a.0), needs)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }
    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(Unary::Scale(c), a)
    }
    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(Unary::AddScalar(c), a)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }
    /// Clamp to `[lo, hi]`; the gradient passes only strictly inside the interval.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(Unary::Clamp(lo, hi), a)
    }

    /// Row sums: `n x k -> n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        let needs = self.needs(a.0);
        self.push(out, Op::SumCols(a.0), needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        let needs = self.needs(a.0);
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a.0), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        if v.is_empty() {
            return self.fail("mean", "non-empty", "empty");
        }
        let m = v.sum() / T::lit(v.len() as f64);
        let needs = self.needs(a.0);
        self.push(Array2::from_elem((1, 1), m), Op::MeanAll(a.0), needs)
    }

    /// Column concatenation. A single-row operand is repeated to match the other.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        let Some(r) = broadcast_dim(ra, rb) else {
            return self.fail("concat rows", ra, rb);
        };
        let mut out = Array2::zeros((r, ca + cb));
        out.slice_mut(ndarray::s![.., ..ca])
            .assign(&self.nodes[a.0].value.broadcast((r, ca)).expect("rows"));
        out.slice_mut(ndarray::s![.., ca..])
            .assign(&self.nodes[b.0].value.broadcast((r, cb)).expect("rows"));
        let needs = self.needs(a.0) || self.needs(b.0);
        self.push(out, Op::ConcatCols(a.0, b.0), needs)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let (_, c) = self.dims(a);
        if start > end || end > c {
            return self.fail("slice columns", format!("range within 0..{c}"), format!("{start}..{end}"));
        }
        let out = self.nodes[a.0].value.slice(ndarray::s![.., start..end]).to_owned();
        let needs = self.needs(a.0);
        self.push(out, Op::SliceCols(a.0, start, end), needs)
    }

    /// Row-wise diagonal Gaussian log-density `n x 1`. `mu` and `sigma`
    /// broadcast against `a`.
    pub fn gaussian_log_density(&mut self, a: Var, mu: Var, sigma: Var) -> Var {
        let shape = self.dims(a);
        let (mu_v, sd_v) = match (
            self.nodes[mu.0].value.broadcast(shape),
            self.nodes[sigma.0].value.broadcast(shape),
        ) {
            (Some(m), Some(s)) => (m, s),
            _ => {
                let (m, s) = (self.dims(mu), self.dims(sigma));
                return self.fail(
                    "gaussian_log_density",
                    format!("{}x{}", shape.0, shape.1),
                    format!("mu {}x{} sigma {}x{}", m.0, m.1, s.0, s.1),
                );
            }
        };
        if sd_v.iter().any(|&s| !(s > T::zero())) {
            if self.fault.is_none() {
                self.fault = Some(Fault::NonFinite("gaussian_log_density"));
            }
        }
        let half_log_2pi = T::lit(0.5) * (T::lit(2.0) * T::PI()).ln();
        let av = &self.nodes[a.0].value;
        let mut out = Array2::zeros((shape.0, 1));
        for i in 0..shape.0 {
            let mut acc = T::zero();
            for j in 0..shape.1 {
                let s = sd_v[(i, j)];
                let z = (av[(i, j)] - mu_v[(i, j)]) / s;
                acc += -T::lit(0.5) * z * z - s.ln() - half_log_2pi;
            }
            out[(i, 0)] = acc;
        }
        let needs = self.needs(a.0) || self.needs(mu.0) || self.needs(sigma.0);
        self.push(
            out,
            Op::GaussianLogDensity {
                a: a.0,
                mu: mu.0,
                sigma: sigma.0,
            },
            needs,
        )
    }

    /// `sum_i w_i v_i` with `w = softmax(logits)`; both inputs are `n x 1`.
    /// Equal values give exactly that value and an exactly-zero logit gradient.
    pub fn softmax_weighted_sum(&mut self, logits: Var, values: Var) -> Var {
        let (rl, cl) = self.dims(logits);
        let (rv, cv) = self.dims(values);
        if cl != 1 || cv != 1 || rl != rv || rl == 0 {
            return self.fail("softmax_weighted_sum", format!("{rl}x1 and {rl}x1"), format!("{rl}x{cl} and {rv}x{cv}"));
        }
        let l = &self.nodes[logits.0].value;
        let q = &self.nodes[values.0].value;
        let max = l.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = l.iter().map(|&x| (x - max).exp()).collect();
        let total: T = e.iter().copied().sum();
        let weights: Vec<T> = e.iter().map(|&x| x / total).collect();
        let q0 = q[(0, 0)];
        let centered: T = weights.iter().zip(q.iter()).map(|(&w, &qi)| w * (qi - q0)).sum();
        let out = Array2::from_elem((1, 1), q0 + centered);
        let needs = self.needs(logits.0) || self.needs(values.0);
        self.push(
            out,
            Op::SoftmaxWeightedSum {
                logits: logits.0,
                values: values.0,
                weights,
            },
            needs,
        )
    }

    /// Softmax weights recorded by a [`Tape::softmax_weighted_sum`] node.
    pub fn softmax_weights(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::SoftmaxWeightedSum { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>, NnError> {
        self.check()?;
        let (r, c) = self.dims(output);
        if (r, c) != (1, 1) {
            return Err(shape_err("backward output", "1x1", format!("{r}x{c}")));
        }
        let mut params: Vec<Vec<T>> = self
            .models
            .iter()
            .map(|m| vec![T::zero(); if m.trainable { m.params.len() } else { 0 }])
            .collect();
        let mut grads: Vec<Option<Array2<T>>> = vec![None; self.nodes.len()];
        if !self.nodes[output.0].needs_grad {
            // constant output: every gradient is zero
            for (p, m) in params.iter_mut().zip(&self.models) {
                p.resize(m.params.len(), T::zero());
            }
            return Ok(Gradients { params, nodes: grads });
        }
        grads[output.0] = Some(Array2::from_elem((1, 1), T::one()));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads, &mut params)?;
            grads[idx] = Some(g);
        }
        for (p, m) in params.iter_mut().zip(&self.models) {
            if !m.trainable {
                p.resize(m.params.len(), T::zero());
            } else if !p.iter().all(|v| v.is_finite()) {
                return Err(NnError::NonFinite { primitive: "affine" });
            }
        }
        Ok(Gradients { params, nodes: grads })
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: &Array2<T>,
        grads: &mut [Option<Array2<T>>],
        params: &mut [Vec<T>],
    ) -> Result<(), NnError> {
        let node = &self.nodes[idx];
        let finite = |a: &Array2<T>| -> Result<(), NnError> {
            if a.iter().all(|v| v.is_finite()) {
                Ok(())
            } else {
                Err(NnError::NonFinite { primitive: node.op.name() })
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Mlp { model, input, hidden } => {
                let entry = &self.models[*model];
                let input_needs = self.needs(*input);
                let act: Activation = entry.spec.activation;
                let mut delta = g.clone();
                for l in (0..entry.layers.len()).rev() {
                    let slot = &entry.layers[l];
                    let h_in = if l == 0 {
                        self.nodes[*input].value.view()
                    } else {
                        hidden[l - 1].view()
                    };
                    if entry.trainable {
                        let pg = &mut params[*model];
                        let mut dw = ArrayViewMut2::from_shape(
                            (slot.fan_out, slot.fan_in),
                            &mut pg[slot.weight_offset..slot.bias_offset],
                        )
                        .expect("slot layout");
                        general_mat_mul(T::one(), &delta.t(), &h_in, T::one(), &mut dw);
                        let db = &mut pg[slot.bias_offset..slot.bias_offset + slot.fan_out];
                        for row in delta.rows() {
                            for (b, &d) in db.iter_mut().zip(row) {
                                *b += d;
                            }
                        }
                    }
                    if l == 0 && !input_needs {
                        break;
                    }
                    let w = weight_view(entry.params, slot);
                    let mut dh = delta.dot(&w);
                    if l > 0 {
                        dh.zip_mut_with(&hidden[l - 1], |d, &y| *d *= act.derivative_from_output(y));
                    }
                    delta = dh;
                    if l == 0 {
                        finite(&delta)?;
                        accumulate(grads, *input, delta);
                        break;
                    }
                }
            }
            Op::Binary(kind, a, b) => {
                let shape = g.dim();
                let av = self.nodes[*a].value.broadcast(shape).expect("forward shape");
                let bv = self.nodes[*b].value.broadcast(shape).expect("forward shape");
                if self.needs(*a) {
                    let mut da = Array2::zeros(shape);
                    Zip::from(&mut da).and(g).and(&av).and(&bv).for_each(|d, &g, &x, &y| {
                        *d = match kind {
                            Binary::Add | Binary::Sub => g,
                            Binary::Mul => g * y,
                            Binary::Div => g / y,
                            Binary::Min => {
                                if x <= y {
                                    g
                                } else {
                                    T::zero()
                                }
                            }
                        }
                    });
                    let da = reduce_to(da, self.nodes[*a].value.dim());
                    finite(&da)?;
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = Array2::zeros(shape);
                    Zip::from(&mut db).and(g).and(&av).and(&bv).for_each(|d, &g, &x, &y| {
                        *d = match kind {
                            Binary::Add => g,
                            Binary::Sub => -g,
                            Binary::Mul => g * x,
                            Binary::Div => -g * x / (y * y),
                            Binary::Min => {
                                if x <= y {
                                    T::zero()
                                } else {
                                    g
                                }
                            }
                        }
                    });
                    let db = reduce_to(db, self.nodes[*b].value.dim());
                    finite(&db)?;
                    accumulate(grads, *b, db);
                }
            }
            Op::Unary(kind, a) => {
                if self.needs(*a) {
                    let x = &self.nodes[*a].value;
                    let y = &node.value;
                    let mut da = Array2::zeros(g.dim());
                    Zip::from(&mut da).and(g).and(x).and(y).for_each(|d, &g, &x, &y| {
                        *d = match *kind {
                            Unary::Neg => -g,
                            Unary::Scale(c) => c * g,
                            Unary::AddScalar(_) => g,
                            Unary::Tanh => g * (T::one() - y * y),
                            Unary::Relu => {
                                if x > T::zero() {
                                    g
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Exp => g * y,
                            Unary::Log => g / x,
                            Unary::Square => g * (x + x),
                            Unary::Clamp(lo, hi) => {
                                if x > lo && x < hi {
                                    g
                                } else {
                                    T::zero()
                                }
                            }
                        }
                    });
                    finite(&da)?;
                    accumulate(grads, *a, da);
                }
            }
            Op::SumCols(a) => {
                if self.needs(*a) {
                    let shape = self.nodes[*a].value.dim();
                    let da = g.broadcast(shape).expect("column broadcast").to_owned();
                    accumulate(grads, *a, da);
                }
            }
            Op::SumAll(a) | Op::MeanAll(a) => {
                if self.needs(*a) {
                    let shape = self.nodes[*a].value.dim();
                    let mut s = g[(0, 0)];
                    if matches!(node.op, Op::MeanAll(_)) {
                        s = s / T::lit((shape.0 * shape.1) as f64);
                    }
                    accumulate(grads, *a, Array2::from_elem(shape, s));
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[*a].value.ncols();
                if self.needs(*a) {
                    let da = g.slice(ndarray::s![.., ..ca]).to_owned();
                    accumulate(grads, *a, reduce_to(da, self.nodes[*a].value.dim()));
                }
                if self.needs(*b) {
                    let db = g.slice(ndarray::s![.., ca..]).to_owned();
                    accumulate(grads, *b, reduce_to(db, self.nodes[*b].value.dim()));
                }
            }
            Op::SliceCols(a, start, end) => {
                if self.needs(*a) {
                    let mut da = Array2::zeros(self.nodes[*a].value.dim());
                    da.slice_mut(ndarray::s![.., *start..*end]).assign(g);
                    accumulate(grads, *a, da);
                }
            }
            Op::GaussianLogDensity { a, mu, sigma } => {
                let shape = self.nodes[*a].value.dim();
                let av = &self.nodes[*a].value;
                let mv = self.nodes[*mu].value.broadcast(shape).expect("forward shape");
                let sv = self.nodes[*sigma].value.broadcast(shape).expect("forward shape");
                let mut da = Array2::zeros(shape);
                let mut ds = Array2::zeros(shape);
                for i in 0..shape.0 {
                    let gi = g[(i, 0)];
                    for j in 0..shape.1 {
                        let s = sv[(i, j)];
                        let diff = av[(i, j)] - mv[(i, j)];
                        da[(i, j)] = -gi * diff / (s * s);
                        ds[(i, j)] = gi * (diff * diff / (s * s * s) - T::one() / s);
                    }
                }
                finite(&da)?;
                finite(&ds)?;
                if self.needs(*mu) {
                    accumulate(grads, *mu, reduce_to(da.mapv(|x| -x), self.nodes[*mu].value.dim()));
                }
                if self.needs(*sigma) {
                    accumulate(grads, *sigma, reduce_to(ds, self.nodes[*sigma].value.dim()));
                }
                if self.needs(*a) {
                    accumulate(grads, *a, da);
                }
            }
            Op::SoftmaxWeightedSum { logits, values, weights } => {
                let g0 = g[(0, 0)];
                let q = &self.nodes[*values].value;
                if self.needs(*values) {
                    let dq = Array2::from_shape_fn(q.dim(), |(i, _)| g0 * weights[i]);
                    accumulate(grads, *values, dq);
                }
                if self.needs(*logits) {
                    // d/dl_j = w_j * sum_i w_i (q_j - q_i)
                    let dl = Array2::from_shape_fn(q.dim(), |(j, _)| {
                        let qj = q[(j, 0)];
                        let inner: T = weights.iter().zip(q.iter()).map(|(&w, &qi)| w * (qj - qi)).sum();
                        g0 * weights[j] * inner
                    });
                    finite(&dl)?;
                    accumulate(grads, *logits, dl);
                }
            }
        }
        Ok(())
    }
}

/// Gradient of a scalar built on a fresh tape w.r.t. one network's parameters.
///
/// `build` receives the tape and the id of the differentiated network; it may
/// register further (frozen) networks and must return a `1 x 1` node.
pub fn grad_scalar<'a, T, F>(spec: &'a MlpSpec, params: &'a ParameterVector<T>, build: F) -> Result<Vec<T>, NnError>
where
    T: Scalar,
    F: FnOnce(&mut Tape<'a, T>, ModelId) -> Var,
{
    let mut tape = Tape::new();
    let model = tape.model(spec, params, true)?;
    let out = build(&mut tape, model);
    let mut grads = tape.backward(out)?;
    Ok(grads.take_model(model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn central_diff(f: &dyn Fn(&ParameterVector<f64>) -> f64, p: &ParameterVector<f64>, i: usize) -> f64 {
        let h = 1e-4 * p.values[i].abs().max(1.0);
        let mut plus = p.clone();
        plus.values[i] += h;
        let mut minus = p.clone();
        minus.values[i] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    #[test]
    fn constant_scalar_has_zero_gradient() {
        let spec = MlpSpec::new(2, vec![4], 1, Activation::Relu);
        let p = spec.init::<f64, _>(&mut ChaCha8Rng::seed_from_u64(0));
        let g = grad_scalar(&spec, &p, |t, _| t.constant(array![[3.5]])).unwrap();
        assert_eq!(g.len(), spec.parameter_count());
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_weight_linear_gradient() {
        let spec = MlpSpec::new(1, vec![], 1, Activation::Relu);
        let p = ParameterVector::from_vec(vec![0.7, 0.2]);
        let g = grad_scalar(&spec, &p, |t, m| {
            let x = t.constant(array![[1.0]]);
            t.mlp(m, x)
        })
        .unwrap();
        assert_eq!(g, vec![1.0, 1.0]);
    }

    #[test]
    fn unused_model_gets_exact_zero() {
        let spec = MlpSpec::new(2, vec![3], 1, Activation::Tanh);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p1 = spec.init::<f64, _>(&mut rng);
        let p2 = spec.init::<f64, _>(&mut rng);
        let mut tape = Tape::new();
        let m1 = tape.model(&spec, &p1, true).unwrap();
        let m2 = tape.model(&spec, &p2, true).unwrap();
        let x = tape.constant(array![[0.3, -0.2]]);
        let y = tape.mlp(m1, x);
        let _unused = tape.mlp(m2, x);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.wrt_model(m2).iter().all(|&v| v == 0.0));
        assert!(g.wrt_model(m1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn primitives_match_finite_differences() {
        // exercises every primitive in one composite scalar
        let spec = MlpSpec::new(3, vec![16, 16], 4, Activation::Tanh);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = spec.init::<f64, _>(&mut rng);
        let x = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let z = Array2::from_shape_fn((5, 2), |_| rng.random_range(-1.0..1.0));
        let build = |t: &mut Tape<f64>, m: ModelId| -> Var {
            let xi = t.constant(x.clone());
            let out = t.mlp(m, xi);
            let mu = t.slice_cols(out, 0, 2);
            let ls = t.slice_cols(out, 2, 4);
            let ls = t.clamp(ls, -5.0, 2.0);
            let sd = t.exp(ls);
            let zc = t.constant(z.clone());
            let noise = t.mul(sd, zc);
            let u = t.add(mu, noise);
            let a = t.tanh(u);
            let lp = t.gaussian_log_density(u, mu, sd);
            let sq = t.square(a);
            let one_minus = t.neg(sq);
            let one_minus = t.add_scalar(one_minus, 1.0 + 1e-6);
            let corr = t.log(one_minus);
            let corr = t.sum_cols(corr);
            let lp = t.sub(lp, corr);
            let r = t.relu(u);
            let r = t.sum_cols(r);
            let m2 = t.min(lp, r);
            let two = t.constant(array![[2.0]]);
            let d = t.div(m2, two);
            let w = t.softmax_weighted_sum(lp, d);
            let mm = t.mean(d);
            let s = t.add(w, mm);
            t.scale(s, 1.5)
        };
        let g = grad_scalar(&spec, &p, build).unwrap();
        let f = |q: &ParameterVector<f64>| {
            let mut tape = Tape::new();
            let m = tape.model(&spec, q, true).unwrap();
            let out = build(&mut tape, m);
            tape.scalar(out)
        };
        let mut worst: f64 = 0.0;
        for i in 0..spec.parameter_count() {
            let fd = central_diff(&f, &p, i);
            let err = (g[i] - fd).abs() / fd.abs().max(g[i].abs()).max(1e-3);
            worst = worst.max(err);
        }
        assert!(worst < 1e-5, "max relative error {worst}");
    }

    #[test]
    fn input_gradient_through_frozen_model() {
        let spec = MlpSpec::new(2, vec![8], 1, Activation::Tanh);
        let p = spec.init::<f64, _>(&mut ChaCha8Rng::seed_from_u64(9));
        let x0 = array![[0.4, -0.3]];
        let mut tape = Tape::new();
        let m = tape.model(&spec, &p, false).unwrap();
        let x = tape.variable(x0.clone());
        let y = tape.mlp(m, x);
        let g = tape.backward(y).unwrap();
        assert!(g.wrt_model(m).iter().all(|&v| v == 0.0));
        let gx = g.wrt(x).unwrap().clone();
        for j in 0..2 {
            let h = 1e-6;
            let mut xp = x0.clone();
            xp[(0, j)] += h;
            let mut xm = x0.clone();
            xm[(0, j)] -= h;
            let fp = crate::nn::mlp_forward(&spec, &p, xp.as_slice().unwrap()).unwrap()[0];
            let fm = crate::nn::mlp_forward(&spec, &p, xm.as_slice().unwrap()).unwrap()[0];
            assert!((gx[(0, j)] - (fp - fm) / (2.0 * h)).abs() < 1e-8);
        }
    }

    #[test]
    fn faults_surface_with_primitive_name() {
        let spec = MlpSpec::new(1, vec![], 1, Activation::Relu);
        let p = ParameterVector::from_vec(vec![1.0, 0.0]);
        let err = grad_scalar(&spec, &p, |t, m| {
            let x = t.constant(array![[-1.0]]);
            let y = t.mlp(m, x);
            let l = t.log(y);
            t.sum(l)
        })
        .unwrap_err();
        assert!(matches!(err, NnError::NonFinite { primitive: "log" }), "{err}");

        let err = grad_scalar(&spec, &p, |t, m| {
            let x = t.constant(array![[1.0, 2.0]]);
            t.mlp(m, x)
        })
        .unwrap_err();
        assert!(matches!(err, NnError::Shape { .. }), "{err}");
    }

    #[test]
    fn softmax_weighted_sum_constant_values_exact() {
        let mut tape: Tape<f64> = Tape::new();
        let l = tape.variable(array![[0.3], [-1.7], [2.2]]);
        let q = tape.variable(array![[4.25], [4.25], [4.25]]);
        let v = tape.softmax_weighted_sum(l, q);
        assert_eq!(tape.scalar(v), 4.25);
        let w: f64 = tape.softmax_weights(v).unwrap().iter().sum();
        assert!((w - 1.0).abs() < 1e-12);
        let g = tape.backward(v).unwrap();
        assert!(g.wrt(l).unwrap().iter().all(|&x| x == 0.0));
    }
}
