use crate::error::{Error, Result};

/// Compares `analytic` against central differences of `f` at `point`.
///
/// Returns `max_i |fd_i - analytic_i| / max(1, |analytic_i|)` where
/// `fd_i = (f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
pub fn grad_check<F>(mut f: F, point: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if point.len() != analytic.len() {
        return Err(Error::Shape {
            op: "grad_check",
            left: format!("point of length {}", point.len()),
            right: format!("gradient of length {}", analytic.len()),
        });
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "eps must be positive, got {eps}"
        )));
    }
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(&x);
        x[i] = orig - eps;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                context: "grad_check objective",
                index: i,
            });
        }
        let fd = (plus - minus) / (2.0 * eps);
        let err = (fd - analytic[i]).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
