//! Dense matrices, SVD, and seeded randomness.

mod matrix;
mod rng;
mod svd;

pub use matrix::Matrix;
pub(crate) use matrix::{dot, norm};
pub use rng::Rng;
pub use svd::{svd, Svd, JACOBI_TOL, MAX_SWEEPS, NEGLIGIBLE_COLUMN};

use crate::error::{Error, Result};

/// Standard-normal `rows x cols` matrix.
pub fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

/// Haar-ish random `d x d` orthogonal matrix: Gram–Schmidt (two passes) on the
/// columns of a standard-normal matrix.
pub fn random_orthogonal(d: usize, rng: &mut Rng) -> Result<Matrix> {
    if d == 0 {
        return Err(Error::arg("random_orthogonal needs d >= 1"));
    }
    loop {
        let g = gaussian(d, d, rng);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
        for j in 0..d {
            let mut v = g.column(j);
            for _ in 0..2 {
                for q in &basis {
                    let p = dot(&v, q);
                    v.iter_mut().zip(q).for_each(|(x, y)| *x -= p * y);
                }
            }
            let len = norm(&v);
            if len < 1e-8 {
                break;
            }
            v.iter_mut().for_each(|x| *x /= len);
            basis.push(v);
        }
        // a numerically dependent draw is astronomically unlikely; redraw if it happens
        if basis.len() == d {
            return Ok(Matrix::from_fn(d, d, |i, j| basis[j][i]));
        }
    }
}

/// Random `d x d` permutation matrix.
pub fn random_permutation_matrix(d: usize, rng: &mut Rng) -> Result<Matrix> {
    if d == 0 {
        return Err(Error::arg("random_permutation_matrix needs d >= 1"));
    }
    Ok(permutation_matrix(&rng.permutation(d)))
}

/// Matrix with `P[i, perm[i]] = 1`, so `x·P` sends coordinate `i` to `perm[i]`.
pub fn permutation_matrix(perm: &[usize]) -> Matrix {
    let mut p = Matrix::zeros(perm.len(), perm.len());
    for (i, &j) in perm.iter().enumerate() {
        p[(i, j)] = 1.0;
    }
    p
}
