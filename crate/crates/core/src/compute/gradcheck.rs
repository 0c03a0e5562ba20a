use ndarray::Array2;

use crate::error::{DamError, Result};

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &Array2<f64>, eps: f64) -> Result<Array2<f64>>
where
    F: FnMut(&Array2<f64>) -> f64,
{
    if !(eps > 0.0) {
        return Err(DamError::Config(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Array2::zeros(x.dim());
    for (idx, g) in grad.indexed_iter_mut() {
        let orig = probe[idx];
        probe[idx] = orig + eps;
        let up = f(&probe);
        probe[idx] = orig - eps;
        let down = f(&probe);
        probe[idx] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(DamError::Numeric(format!(
                "non-finite function value while perturbing {idx:?}"
            )));
        }
        *g = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}

/// Largest elementwise relative error, with an absolute floor for entries
/// near zero.
pub fn max_relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}
