use super::Tensor;
use crate::error::{invalid, DimError, Result};

/// Central-difference gradient of a scalar function, one coordinate at a time.
///
/// This is the reference every hand-written adjoint in the crate is checked
/// against; it shares no code with any backward pass.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(invalid(format!("finite-difference step {eps} outside [1e-6, 1e-3]")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(DimError::NonFinite(format!(
                "objective at coordinate {i} (f(x+eps)={up}, f(x-eps)={down})"
            )));
        }
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}

/// Largest coordinate-wise relative error `|a − n| / max(|a|, |n|, floor)`,
/// with `floor = 1e-6·max(1, ‖n‖∞)` so coordinates whose true gradient is
/// zero are judged against the scale of the whole gradient.
pub fn grad_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let floor = 1e-6 * numeric.max_abs().max(1.0);
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(vec![3.0]);
        let g = finite_diff_grad(|x| Ok(x.sum_sq()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn sine_matches_cosine() {
        let x = Tensor::vector(vec![0.0, std::f64::consts::FRAC_PI_2]);
        let g = finite_diff_grad(|x| Ok(x.data().iter().map(|v| v.sin()).sum()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-9);
        assert!(g.data()[1].abs() < 1e-9);
    }

    #[test]
    fn non_finite_objective_names_coordinate() {
        let x = Tensor::vector(vec![1.0, 5e-6]);
        let err = finite_diff_grad(|x| Ok(x.data()[1].ln()), &x, 1e-5).unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
    }

    #[test]
    fn step_outside_range_rejected() {
        let x = Tensor::vector(vec![1.0]);
        assert!(finite_diff_grad(|x| Ok(x.sum()), &x, 1e-2).is_err());
    }
}
