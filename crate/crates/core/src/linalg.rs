//! Cholesky factorization and triangular solves for symmetric positive-definite systems.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower-triangular factor `L` with `A = L Lᵀ`.
///
/// Fails with [`Error::NotPositiveDefinite`] on the first non-positive pivot;
/// no jitter is ever added.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::ShapeMismatch {
            op: "cholesky",
            left: a.shape().to_vec(),
            right: a.shape().to_vec(),
        });
    }
    let src = a.data();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut diag = src[j * n + j];
        for k in 0..j {
            diag -= l[j * n + k] * l[j * n + k];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: diag });
        }
        let ljj = diag.sqrt();
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = src[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    Ok(Tensor::matrix(n, n, l))
}

/// Solves `L Lᵀ X = B` given the Cholesky factor `L`.
pub fn cholesky_solve(l: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = l.rows();
    if b.rows() != n {
        return Err(Error::ShapeMismatch {
            op: "cholesky_solve",
            left: l.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let m = b.cols();
    let ld = l.data();
    let mut x = b.data().to_vec();
    for col in 0..m {
        // forward: L y = b
        for i in 0..n {
            let mut s = x[i * m + col];
            for k in 0..i {
                s -= ld[i * n + k] * x[k * m + col];
            }
            x[i * m + col] = s / ld[i * n + i];
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = x[i * m + col];
            for k in i + 1..n {
                s -= ld[k * n + i] * x[k * m + col];
            }
            x[i * m + col] = s / ld[i * n + i];
        }
    }
    Ok(Tensor::matrix(n, m, x))
}

/// Solves `A X = B` for symmetric positive-definite `A`.
pub fn solve_spd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    cholesky_solve(&cholesky(a)?, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_reconstructs() {
        let a = Tensor::from_rows(&[
            vec![4.0, 2.0, 0.4],
            vec![2.0, 5.0, 1.0],
            vec![0.4, 1.0, 3.0],
        ])
        .unwrap();
        let l = cholesky(&a).unwrap();
        let back = l.matmul_nt(&l).unwrap();
        assert!(back.max_abs_diff(&a) < 1e-14);
        for i in 0..3 {
            for j in i + 1..3 {
                assert_eq!(l.get(i, j), 0.0);
            }
        }
    }

    #[test]
    fn solve_recovers_rhs() {
        let a = Tensor::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, -1.0], vec![3.0, 0.25]]).unwrap();
        let x = solve_spd(&a, &b).unwrap();
        assert!(a.matmul(&x).unwrap().max_abs_diff(&b) < 1e-14);
    }

    #[test]
    fn indefinite_reported() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(
            cholesky(&a),
            Err(Error::NotPositiveDefinite { pivot: 1, .. })
        ));
        let zero = Tensor::zeros(2, 2);
        assert!(matches!(
            cholesky(&zero),
            Err(Error::NotPositiveDefinite { pivot: 0, .. })
        ));
    }
}
