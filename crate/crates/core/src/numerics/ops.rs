//! Scalar activations and row-wise layer normalization with their adjoints.

use super::Tensor;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

/// d silu / dx = σ(x)·(1 + x·(1 − σ(x)))
pub fn silu_grad_scalar(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `ln(1 + eˣ)`, switching to `x + ln(1 + e⁻ˣ)` above 20 so large inputs
/// neither overflow nor lose the identity `softplus(x) ≈ x`.
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 20.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of softplus on `(0, ∞)`: `ln(eʸ − 1)`.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

pub fn softplus(x: &Tensor) -> Tensor {
    x.map(softplus_scalar)
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Per-row statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

/// Layer norm over the last axis without learned affine parameters.
pub fn layer_norm(x: &Tensor) -> LayerNormCache {
    let d = x.cols();
    let mut normalized = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = normalized.row_mut(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * is);
        inv_std.push(is);
    }
    LayerNormCache {
        normalized,
        inv_std,
    }
}

/// Adjoint of [`layer_norm`]: `dx = is·(g − mean(g) − n·mean(g⊙n))` per row.
pub fn layer_norm_backward(cache: &LayerNormCache, grad: &Tensor) -> Tensor {
    let d = grad.cols();
    let mut out = grad.clone();
    for r in 0..grad.rows() {
        let n = cache.normalized.row(r);
        let g = grad.row(r);
        let mg = g.iter().sum::<f64>() / d as f64;
        let mgn = g.iter().zip(n).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let is = cache.inv_std[r];
        for ((o, &gi), &ni) in out.row_mut(r).iter_mut().zip(g).zip(n) {
            *o = is * (gi - mg - ni * mgn);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, grad_rel_error, randn, Rng};

    #[test]
    fn activation_closed_forms() {
        assert_eq!(silu_scalar(0.0), 0.0);
        assert!((softplus_scalar(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        // softplus(50) = 50 + ln(1 + e^-50) = 50 + 1.9287e-22
        assert!((softplus_scalar(50.0) - 50.0).abs() < 1e-12);
        assert!(softplus_scalar(1000.0).is_finite());
        assert!(softplus_scalar(-800.0) >= 0.0);
        for y in [0.001, 0.05, 0.1, 3.0] {
            assert!((softplus_scalar(softplus_inv(y)) - y).abs() < 1e-14 * y.max(1.0));
        }
    }

    #[test]
    fn silu_derivative_matches_differences() {
        for x in [-7.0, -1.3, 0.0, 0.4, 5.0] {
            let h = 1e-6;
            let fd = (silu_scalar(x + h) - silu_scalar(x - h)) / (2.0 * h);
            assert!((fd - silu_grad_scalar(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_adjoint() {
        let mut rng = Rng::new(5);
        let x = randn(&mut rng, &[3, 6]).unwrap();
        let w = randn(&mut rng, &[3, 6]).unwrap();
        let f = |x: &Tensor| -> crate::Result<f64> {
            let n = layer_norm(x).normalized;
            Ok(n.data().iter().zip(w.data()).map(|(a, b)| a * b).sum())
        };
        let fd = finite_diff_grad(f, &x, 1e-5).unwrap();
        let an = layer_norm_backward(&layer_norm(&x), &w);
        assert!(grad_rel_error(&an, &fd) < 1e-6);
    }
}
