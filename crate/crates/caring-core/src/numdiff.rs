//! Central finite-difference helpers.
//!
//! Shared by the theory checks and the evaluation metrics, and used in tests
//! as the independent oracle against the tape's analytic gradients.

/// Central first derivative of `f` at `x` with step `h`.
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Gradient of a multivariate scalar function by central differences.
pub fn central_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let hi = f(&probe);
        probe[i] = orig - h;
        let lo = f(&probe);
        probe[i] = orig;
        out.push((hi - lo) / (2.0 * h));
    }
    out
}

/// Jacobian of a vector-valued map by central differences; rows index
/// outputs, columns index inputs. `steps[j]` is the probe step for input j.
pub fn central_jacobian(
    f: impl Fn(&[f64]) -> Vec<f64>,
    x: &[f64],
    steps: &[f64],
) -> Vec<Vec<f64>> {
    assert_eq!(x.len(), steps.len());
    let base = f(x);
    let m = base.len();
    let mut jac = vec![vec![0.0; x.len()]; m];
    let mut probe = x.to_vec();
    for (j, &h) in steps.iter().enumerate() {
        let orig = probe[j];
        probe[j] = orig + h;
        let hi = f(&probe);
        probe[j] = orig - h;
        let lo = f(&probe);
        probe[j] = orig;
        for i in 0..m {
            jac[i][j] = (hi[i] - lo[i]) / (2.0 * h);
        }
    }
    jac
}

/// One Richardson extrapolation of an O(h²) estimator: combines E(h) and
/// E(h/2) into a fourth-order estimate.
pub fn richardson_once(estimate: impl Fn(f64) -> f64, h: f64) -> f64 {
    let coarse = estimate(h);
    let fine = estimate(h / 2.0);
    (4.0 * fine - coarse) / 3.0
}

/// Relative error with an absolute floor, as used by the gradient checks.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivative_of_cubic() {
        let d = central_diff(|x| x * x * x, 2.0, 1e-5);
        assert!((d - 12.0).abs() < 1e-8);
    }

    #[test]
    fn richardson_improves_second_derivative() {
        // Second central difference of exp at 0 → 1.
        let f = f64::exp;
        let est = |h: f64| (f(h) - 2.0 * f(0.0) + f(-h)) / (h * h);
        let plain = est(1e-2);
        let better = richardson_once(est, 1e-2);
        assert!((better - 1.0).abs() < (plain - 1.0).abs());
        assert!((better - 1.0).abs() < 1e-8);
    }

    #[test]
    fn jacobian_of_linear_map_is_its_matrix() {
        let f = |x: &[f64]| vec![2.0 * x[0] + x[1], -x[0] + 3.0 * x[1]];
        let jac = central_jacobian(f, &[0.3, -0.7], &[1e-5, 1e-5]);
        assert!((jac[0][0] - 2.0).abs() < 1e-9);
        assert!((jac[0][1] - 1.0).abs() < 1e-9);
        assert!((jac[1][0] + 1.0).abs() < 1e-9);
        assert!((jac[1][1] - 3.0).abs() < 1e-9);
    }
}
