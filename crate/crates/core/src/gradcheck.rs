//! Finite-difference verification of analytic gradients.

use crate::scalar::Scalar;

/// Max relative error between central finite differences of `f` and the
/// supplied analytic gradient, over up to `max_coords` coordinates of
/// `theta` (evenly strided when theta is larger, so the check stays cheap
/// on big parameter vectors but touches every tensor region).
///
/// Relative error per coordinate: |fd_i - g_i| / max(|fd_i|, |g_i|, 1e-6).
/// The floor absorbs central-difference roundoff (~|f|·u/eps), which
/// otherwise dominates coordinates whose true gradient sits below what
/// finite differences can resolve. A non-finite function value reports as
/// infinity (a failing check), never as a panic.
pub fn finite_diff_check<T, F>(mut f: F, theta: &[T], grad: &[T], eps: T, max_coords: usize) -> T
where
    T: Scalar,
    F: FnMut(&[T]) -> T,
{
    assert_eq!(theta.len(), grad.len());
    assert!(eps > T::zero());
    let n = theta.len();
    if n == 0 {
        return T::zero();
    }
    let stride = if n <= max_coords { 1 } else { n.div_ceil(max_coords) };
    let mut buf = theta.to_vec();
    let mut worst = T::zero();
    let mut i = 0;
    while i < n {
        let orig = buf[i];
        buf[i] = orig + eps;
        let up = f(&buf);
        buf[i] = orig - eps;
        let dn = f(&buf);
        buf[i] = orig;
        if !up.is_finite() || !dn.is_finite() {
            return T::infinity();
        }
        let fd = (up - dn) / (T::from_f64(2.0) * eps);
        let denom = fd.abs().max(grad[i].abs()).max(T::from_f64(1e-6));
        worst = worst.max((fd - grad[i]).abs() / denom);
        i += stride;
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_checks_out() {
        let theta = [1.0f64, 2.0];
        let grad = [2.0, 4.0];
        let err = finite_diff_check(
            |t| t.iter().map(|x| x * x).sum(),
            &theta,
            &grad,
            1e-5,
            usize::MAX,
        );
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let theta = [0.3f64, -0.7, 2.0];
        let grad = [0.0; 3];
        let err = finite_diff_check(|_| 5.0, &theta, &grad, 1e-5, usize::MAX);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let theta = [1.0f64];
        let grad = [3.0]; // true derivative is 2.0
        let err = finite_diff_check(|t| t[0] * t[0], &theta, &grad, 1e-5, usize::MAX);
        assert!(err > 0.1);
    }

    #[test]
    fn non_finite_value_reports_as_failure() {
        let theta = [0.0f64];
        let grad = [0.0];
        let err = finite_diff_check(|t| (1.0 / t[0]).ln(), &theta, &grad, 1e-5, usize::MAX);
        assert!(err.is_infinite());
    }

    #[test]
    fn coordinate_sampling_still_covers_the_vector() {
        let theta: Vec<f64> = (0..1000).map(|i| i as f64 * 0.01).collect();
        let grad: Vec<f64> = theta.iter().map(|x| 2.0 * x).collect();
        let err = finite_diff_check(
            |t| t.iter().map(|x| x * x).sum(),
            &theta,
            &grad,
            1e-5,
            50,
        );
        assert!(err < 1e-6);
    }
}
