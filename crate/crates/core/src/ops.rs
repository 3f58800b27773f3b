//! Small numeric kernels shared across modules.

use ndarray::Array1;

pub const NORM_EPS: f64 = 1e-12;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Returns `(v / max(|v|, eps), max(|v|, eps))`.
pub fn l2_normalize(v: &Array1<f64>) -> (Array1<f64>, f64) {
    let n = v.dot(v).sqrt().max(NORM_EPS);
    (v / n, n)
}

/// Pulls a gradient on the unit vector back to the unnormalized vector.
pub fn l2_normalize_backward(unit: &Array1<f64>, norm: f64, grad: &Array1<f64>) -> Array1<f64> {
    if norm <= NORM_EPS {
        return grad / norm;
    }
    (grad - &(unit * unit.dot(grad))) / norm
}
