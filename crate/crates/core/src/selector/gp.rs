//! Exact GP regression with an isotropic RBF kernel.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::SelectorError;
use crate::scalar::Scalar;

const MAX_JITTER: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpHyper<T> {
    pub lengthscale: T,
    pub signal_var: T,
    pub noise_var: T,
    /// Initial diagonal jitter; escalated x10 up to 1e-4 if the factorization fails.
    pub jitter: T,
}

impl<T: Scalar> Default for GpHyper<T> {
    fn default() -> Self {
        Self {
            lengthscale: T::lit(0.3),
            signal_var: T::one(),
            noise_var: T::lit(1e-4),
            jitter: T::lit(1e-8),
        }
    }
}

impl<T: Scalar> GpHyper<T> {
    pub fn validate(&self) -> Result<(), SelectorError> {
        if !(self.lengthscale > T::zero() && self.signal_var > T::zero() && self.noise_var >= T::zero() && self.jitter > T::zero()) {
            return Err(SelectorError::Invalid(format!(
                "GP hyperparameters must be positive (noise_var >= 0): {self:?}"
            )));
        }
        Ok(())
    }

    pub fn kernel(&self, a: ArrayView1<T>, b: ArrayView1<T>) -> T {
        let d2: T = a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        self.signal_var * (-d2 / (T::lit(2.0) * self.lengthscale * self.lengthscale)).exp()
    }
}

#[derive(Debug, Clone)]
pub struct GpModel<T> {
    pub hyper: GpHyper<T>,
    pub z_train: Array2<T>,
    /// Targets minus `y_mean`.
    pub y: Array1<T>,
    pub y_mean: T,
    /// Lower Cholesky factor of `K + (noise_var + jitter_used) I`.
    pub chol: Array2<T>,
    /// `(K + s I)^-1 y`.
    pub alpha: Array1<T>,
    pub jitter_used: T,
}

/// Lower Cholesky factor, or `None` if a pivot is not positive.
pub fn cholesky<T: Scalar>(a: &Array2<T>) -> Option<Array2<T>> {
    let n = a.nrows();
    let mut l = Array2::<T>::zeros((n, n));
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

/// Solve `L x = b` for lower-triangular `L`.
pub fn solve_lower<T: Scalar>(l: &Array2<T>, b: ArrayView1<T>) -> Array1<T> {
    let n = b.len();
    let mut x = Array1::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solve `L^T x = b` for lower-triangular `L`.
pub fn solve_upper_t<T: Scalar>(l: &Array2<T>, b: ArrayView1<T>) -> Array1<T> {
    let n = b.len();
    let mut x = Array1::zeros(n);
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Fit with prior mean `mean(y)`.
pub fn gp_fit<T: Scalar>(z_train: ArrayView2<T>, y: &[T], hyper: GpHyper<T>) -> Result<GpModel<T>, SelectorError> {
    hyper.validate()?;
    let n = z_train.nrows();
    if n == 0 {
        return Err(SelectorError::Invalid("GP needs at least one training row".into()));
    }
    if y.len() != n {
        return Err(SelectorError::Shape {
            what: "GP targets",
            expected: n,
            actual: y.len(),
        });
    }
    if y.iter().any(|v| !v.is_finite()) || z_train.iter().any(|v| !v.is_finite()) {
        return Err(SelectorError::Invalid("non-finite GP training data".into()));
    }
    let y_mean = y.iter().copied().sum::<T>() / T::lit(n as f64);
    let yc = Array1::from_iter(y.iter().map(|&v| v - y_mean));
    let mut k = Array2::from_shape_fn((n, n), |(i, j)| hyper.kernel(z_train.row(i), z_train.row(j)));
    let mut jitter = hyper.jitter;
    let chol = loop {
        for i in 0..n {
            k[(i, i)] = hyper.signal_var + hyper.noise_var + jitter;
        }
        if let Some(l) = cholesky(&k) {
            break l;
        }
        jitter = jitter * T::lit(10.0);
        if jitter > T::lit(MAX_JITTER) * T::lit(1.000_001) {
            return Err(SelectorError::NotPositiveDefinite);
        }
    };
    let alpha = solve_upper_t(&chol, solve_lower(&chol, yc.view()).view());
    Ok(GpModel {
        hyper,
        z_train: z_train.to_owned(),
        y: yc,
        y_mean,
        chol,
        alpha,
        jitter_used: jitter,
    })
}

impl<T: Scalar> GpModel<T> {
    /// Posterior means and unclipped latent variances.
    pub fn predict_raw(&self, z_test: ArrayView2<T>) -> Result<(Vec<T>, Vec<T>), SelectorError> {
        if z_test.ncols() != self.z_train.ncols() {
            return Err(SelectorError::Shape {
                what: "GP test columns",
                expected: self.z_train.ncols(),
                actual: z_test.ncols(),
            });
        }
        let n = self.z_train.nrows();
        let mut means = Vec::with_capacity(z_test.nrows());
        let mut vars = Vec::with_capacity(z_test.nrows());
        for row in z_test.rows() {
            let ks = Array1::from_shape_fn(n, |i| self.hyper.kernel(self.z_train.row(i), row));
            means.push(self.y_mean + ks.dot(&self.alpha));
            let v = solve_lower(&self.chol, ks.view());
            vars.push(self.hyper.signal_var - v.dot(&v));
        }
        Ok((means, vars))
    }

    /// Posterior means and variances clipped at zero, in input order.
    pub fn predict(&self, z_test: ArrayView2<T>) -> Result<(Vec<T>, Vec<T>), SelectorError> {
        let (m, v) = self.predict_raw(z_test)?;
        Ok((m, v.into_iter().map(|x| x.max(T::zero())).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn exact() -> GpHyper<f64> {
        GpHyper {
            lengthscale: 0.5,
            signal_var: 1.3,
            noise_var: 0.0,
            jitter: 1e-8,
        }
    }

    #[test]
    fn single_point_interpolates() {
        let z = array![[0.2, -0.4]];
        let m = gp_fit(z.view(), &[2.5], exact()).unwrap();
        let (mu, var) = m.predict(z.view()).unwrap();
        assert!((mu[0] - 2.5).abs() < 1e-7);
        assert!(var[0] <= 1e-8);
    }

    #[test]
    fn far_points_revert_to_prior() {
        let z = array![[0.0, 0.0], [0.1, 0.0]];
        let m = gp_fit(z.view(), &[1.0, 3.0], exact()).unwrap();
        let (mu, var) = m.predict(array![[50.0, 50.0]].view()).unwrap();
        assert!((mu[0] - 2.0).abs() < 1e-6);
        assert!((var[0] - 1.3).abs() < 1e-6);
    }

    #[test]
    fn two_points_closed_form() {
        // K = [[s, c], [c, s]] + j I, inverse by the 2x2 adjugate
        let h = exact();
        let z = array![[0.0], [0.4]];
        let y = [1.0, -0.5];
        let m = gp_fit(z.view(), &y, h).unwrap();
        let x = 0.15f64;
        let ybar = 0.25;
        let s = h.signal_var + h.jitter;
        let c = h.signal_var * (-(0.4f64).powi(2) / (2.0 * 0.25)).exp();
        let det = s * s - c * c;
        let k1 = h.signal_var * (-(x * x) / 0.5).exp();
        let k2 = h.signal_var * (-((x - 0.4) * (x - 0.4)) / 0.5).exp();
        let (r1, r2) = (y[0] - ybar, y[1] - ybar);
        let w1 = (s * r1 - c * r2) / det;
        let w2 = (-c * r1 + s * r2) / det;
        let mean = ybar + k1 * w1 + k2 * w2;
        let quad = (k1 * (s * k1 - c * k2) + k2 * (-c * k1 + s * k2)) / det;
        let var = h.signal_var - quad;
        let (mu, v) = m.predict(array![[x]].view()).unwrap();
        assert!((mu[0] - mean).abs() < 1e-8, "{} vs {mean}", mu[0]);
        assert!((v[0] - var).abs() < 1e-8);
    }

    #[test]
    fn duplicate_rows_need_noise_or_jitter() {
        let z = array![[0.3], [0.3], [0.3]];
        let m = gp_fit(z.view(), &[1.0, 1.1, 0.9], exact()).unwrap();
        let (mu, _) = m.predict(array![[0.3]].view()).unwrap();
        assert!((mu[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn shape_and_hyper_errors() {
        let z = array![[0.0, 1.0]];
        assert!(gp_fit(z.view(), &[1.0, 2.0], exact()).is_err());
        let m = gp_fit(z.view(), &[1.0], exact()).unwrap();
        assert!(m.predict(array![[0.0]].view()).is_err());
        let mut bad = exact();
        bad.lengthscale = 0.0;
        assert!(gp_fit(z.view(), &[1.0], bad).is_err());
    }

    #[test]
    fn cholesky_reconstructs() {
        let a: Array2<f64> = array![[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]];
        let l = cholesky(&a).unwrap();
        let back = l.dot(&l.t());
        assert!((back - &a).iter().all(|v| v.abs() < 1e-12));
        assert!(cholesky(&array![[1.0, 2.0], [2.0, 1.0]]).is_none());
    }
}
