//! Small dense solvers for normal equations and covariance factors.

use crate::error::{Result, VitlError};
use crate::real::Real;

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix
/// stored row-major. Fails when a pivot drops below `rel_tol * max_diag`.
pub fn cholesky<T: Real>(a: &[T], dim: usize, rel_tol: T) -> Result<Vec<T>> {
    debug_assert_eq!(a.len(), dim * dim);
    let max_diag = (0..dim).map(|i| a[i * dim + i].abs()).fold(T::zero(), T::max);
    let floor = rel_tol * max_diag.max(T::min_positive_value());
    let mut l = vec![T::zero(); dim * dim];
    for i in 0..dim {
        for j in 0..=i {
            let mut s = a[i * dim + j];
            for k in 0..j {
                s = s - l[i * dim + k] * l[j * dim + k];
            }
            if i == j {
                if !(s > floor) {
                    return Err(VitlError::Singular(format!(
                        "pivot {i} is {} (threshold {})",
                        s.to_f64_lossy(),
                        floor.to_f64_lossy()
                    )));
                }
                l[i * dim + i] = s.sqrt();
            } else {
                l[i * dim + j] = s / l[j * dim + j];
            }
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` given the factor from [`cholesky`].
pub fn cholesky_solve<T: Real>(l: &[T], dim: usize, b: &[T]) -> Vec<T> {
    let mut y = vec![T::zero(); dim];
    for i in 0..dim {
        let mut s = b[i];
        for k in 0..i {
            s = s - l[i * dim + k] * y[k];
        }
        y[i] = s / l[i * dim + i];
    }
    let mut x = vec![T::zero(); dim];
    for i in (0..dim).rev() {
        let mut s = y[i];
        for k in i + 1..dim {
            s = s - l[k * dim + i] * x[k];
        }
        x[i] = s / l[i * dim + i];
    }
    x
}

/// Least squares with an unpenalized intercept and ridge penalty on the slopes.
///
/// `rows` yields one feature vector per observation. Returns `(intercept, slopes)`.
pub fn ridge_fit<T: Real>(rows: &[Vec<T>], target: &[T], penalty: T) -> Result<(T, Vec<T>)> {
    let n = rows.len();
    let p = rows.first().map_or(0, |r| r.len());
    let nf = T::from_usize_lossy(n);
    let ybar = target.iter().copied().sum::<T>() / nf;
    let mut means = vec![T::zero(); p];
    for r in rows {
        for (m, &v) in means.iter_mut().zip(r) {
            *m = *m + v;
        }
    }
    for m in &mut means {
        *m = *m / nf;
    }
    if p == 0 {
        return Ok((ybar, Vec::new()));
    }
    let mut gram = vec![T::zero(); p * p];
    let mut rhs = vec![T::zero(); p];
    for (r, &y) in rows.iter().zip(target) {
        for a in 0..p {
            let ca = r[a] - means[a];
            rhs[a] = rhs[a] + ca * (y - ybar);
            for b in 0..=a {
                gram[a * p + b] = gram[a * p + b] + ca * (r[b] - means[b]);
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[b * p + a] = gram[a * p + b];
        }
        gram[a * p + a] = gram[a * p + a] + penalty;
    }
    let l = cholesky(&gram, p, T::lit(1e-12)).map_err(|e| match e {
        VitlError::Singular(msg) if penalty == T::zero() => VitlError::Singular(format!(
            "normal equations are singular ({msg}); use a ridge penalty > 0"
        )),
        other => other,
    })?;
    let beta = cholesky_solve(&l, p, &rhs);
    let intercept = ybar - beta.iter().zip(&means).map(|(&b, &m)| b * m).sum::<T>();
    Ok((intercept, beta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_spd_system() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let l = cholesky(&a, 2, 1e-12).unwrap();
        let x = cholesky_solve(&l, 2, &[2.0, 1.0]);
        assert!((4.0 * x[0] + 2.0 * x[1] - 2.0_f64).abs() < 1e-12);
        assert!((2.0 * x[0] + 3.0 * x[1] - 1.0_f64).abs() < 1e-12);
    }

    #[test]
    fn singular_detected() {
        let a = [1.0, 1.0, 1.0, 1.0];
        assert!(matches!(cholesky(&a, 2, 1e-12), Err(VitlError::Singular(_))));
    }

    #[test]
    fn ridge_recovers_exact_line() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| 3.0 + 2.0 * i as f64).collect();
        let (b0, b) = ridge_fit(&rows, &y, 0.0).unwrap();
        assert!((b0 - 3.0).abs() < 1e-10 && (b[0] - 2.0).abs() < 1e-10);
    }
}
