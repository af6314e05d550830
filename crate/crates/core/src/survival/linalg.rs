//! Small dense symmetric solvers for Newton steps and test statistics.

/// Cholesky factorisation in place (lower triangle of row-major `a`).
/// Returns `false` if `a` is not numerically positive definite.
pub fn cholesky(a: &mut [f64], n: usize) -> bool {
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max).max(1.0);
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 1e-13 * scale) {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

/// Solves `L Lᵀ x = b` given the factor from [`cholesky`].
pub fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i * n + k] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[k * n + i] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    y
}

/// `bᵀ V⁻ b` for a positive semi-definite `V`, using a generalised inverse
/// that drops directions with a vanishing pivot.
pub fn psd_quadratic_form(v: &[f64], n: usize, b: &[f64]) -> f64 {
    let mut a = v.to_vec();
    let mut rhs = b.to_vec();
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    let mut total = 0.0;
    for j in 0..n {
        let pivot = a[j * n + j];
        if pivot <= tol {
            continue;
        }
        total += rhs[j] * rhs[j] / pivot;
        for i in j + 1..n {
            let f = a[i * n + j] / pivot;
            rhs[i] -= f * rhs[j];
            for k in j..n {
                a[i * n + k] -= f * a[j * n + k];
            }
        }
    }
    total
}
