//! Small dense solves used by the analytic classifier and the gradient
//! projection QP. Everything here is plain f64 and deterministic.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} at column {col})")]
    NotPositiveDefinite { col: usize, pivot: f64 },
    #[error("matrix is singular at column {0}")]
    Singular(usize),
    #[error("dimension mismatch: {0}")]
    Shape(String),
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: ArrayView2<f64>) -> Result<Array2<f64>, LinalgError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(LinalgError::Shape(format!(
            "cholesky needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(LinalgError::NotPositiveDefinite {
                col: j,
                pivot: diag,
            });
        }
        let dj = diag.sqrt();
        l[[j, j]] = dj;
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / dj;
        }
    }
    Ok(l)
}

/// Solves `A x = b` for SPD `A` given its Cholesky factor `L`.
pub fn cholesky_solve_vec(l: &Array2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = b.to_owned();
    for i in 0..n {
        for k in 0..i {
            let v = y[k];
            y[i] -= l[[i, k]] * v;
        }
        y[i] /= l[[i, i]];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            let v = y[k];
            y[i] -= l[[k, i]] * v;
        }
        y[i] /= l[[i, i]];
    }
    y
}

/// Solves `A X = B` column by column for SPD `A` via its Cholesky factor.
pub fn cholesky_solve_mat(l: &Array2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(b.raw_dim());
    for (j, col) in b.columns().into_iter().enumerate() {
        out.column_mut(j).assign(&cholesky_solve_vec(l, col));
    }
    out
}

/// Solves a small dense system by Gaussian elimination with partial pivoting.
pub fn solve_dense(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>, LinalgError> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(LinalgError::Shape(format!(
            "solve_dense: A is {}x{}, b has {}",
            n,
            a.ncols(),
            b.len()
        )));
    }
    let mut m = a.clone();
    let mut rhs = b.clone();
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| {
                m[[i, col]]
                    .abs()
                    .partial_cmp(&m[[j, col]].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap();
        if m[[pivot_row, col]].abs() < 1e-300 {
            return Err(LinalgError::Singular(col));
        }
        if pivot_row != col {
            for k in 0..n {
                m.swap([col, k], [pivot_row, k]);
            }
            rhs.swap(col, pivot_row);
        }
        let pivot = m[[col, col]];
        for row in col + 1..n {
            let factor = m[[row, col]] / pivot;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                m[[row, k]] -= factor * m[[col, k]];
            }
            rhs[row] -= factor * rhs[col];
        }
    }
    let mut x = Array1::zeros(n);
    for row in (0..n).rev() {
        let mut s = rhs[row];
        for k in row + 1..n {
            s -= m[[row, k]] * x[k];
        }
        x[row] = s / m[[row, row]];
    }
    Ok(x)
}

/// Ridge solve `(X^T X + gamma I) W = X^T Y`; the dense reference route.
pub fn ridge_solve(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    gamma: f64,
) -> Result<Array2<f64>, LinalgError> {
    let d = x.ncols();
    let mut gram = x.t().dot(&x);
    for i in 0..d {
        gram[[i, i]] += gamma;
    }
    let l = cholesky(gram.view())?;
    Ok(cholesky_solve_mat(&l, x.t().dot(&y).view()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cholesky_reconstructs() {
        let a = array![[4.0, 2.0, 0.4], [2.0, 5.0, 1.0], [0.4, 1.0, 3.0]];
        let l = cholesky(a.view()).unwrap();
        let back = l.dot(&l.t());
        for (x, y) in a.iter().zip(back.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(cholesky(a.view()).is_err());
    }

    #[test]
    fn spd_solve_matches_direct() {
        let a = array![[4.0, 2.0], [2.0, 5.0]];
        let b = array![1.0, -2.0];
        let l = cholesky(a.view()).unwrap();
        let x = cholesky_solve_vec(&l, b.view());
        let r = a.dot(&x) - &b;
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dense_solve_with_pivoting() {
        let a = array![[0.0, 1.0], [2.0, 1.0]];
        let b = array![3.0, 5.0];
        let x = solve_dense(&a, &b).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn ridge_limit_shrinks_weights() {
        let x = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let y = array![[1.0], [1.0], [2.0]];
        let small = ridge_solve(x.view(), y.view(), 1e-9).unwrap();
        let large = ridge_solve(x.view(), y.view(), 1e6).unwrap();
        assert!((small[[0, 0]] - 1.0).abs() < 1e-3);
        assert!(large.iter().all(|v| v.abs() < 1e-5));
    }
}
