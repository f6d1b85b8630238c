//! Thin SVD by one-sided Jacobi rotations.

use super::matrix::{dot, norm, Matrix};
use crate::error::{Error, Result};

/// Off-diagonal convergence threshold, relative to the column norms.
pub const JACOBI_TOL: f64 = 1e-12;
pub const MAX_SWEEPS: usize = 60;
/// Columns below this fraction of the Frobenius norm are treated as converged.
pub const NEGLIGIBLE_COLUMN: f64 = 1e-14;

/// `A = U · diag(S) · Vᵀ` with `k = min(m, n)`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `m x k`, orthonormal columns.
    pub u: Matrix,
    /// Nonincreasing, nonnegative.
    pub s: Vec<f64>,
    /// `n x k`, orthonormal columns.
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (x, s) in us.row_mut(i).iter_mut().zip(&self.s) {
                *x *= s;
            }
        }
        us.matmul_t(&self.v).expect("consistent svd factors")
    }

    /// Count of singular values above `rel_tol · σ_max`.
    pub fn rank(&self, rel_tol: f64) -> usize {
        let top = self.s.first().copied().unwrap_or(0.0);
        if top == 0.0 {
            return 0;
        }
        self.s.iter().filter(|&&s| s > rel_tol * top).count()
    }
}

pub fn svd(a: &Matrix) -> Result<Svd> {
    a.ensure_finite("svd input")?;
    let mut out = if a.rows() < a.cols() {
        let t = svd_tall(&a.transpose())?;
        Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        }
    } else {
        svd_tall(a)?
    };
    fix_signs(&mut out);
    Ok(out)
}

/// Flips each singular pair so the largest-magnitude entry of the U column is
/// positive; ties go to the lowest row index.
fn fix_signs(svd: &mut Svd) {
    for j in 0..svd.s.len() {
        let mut best = 0;
        for i in 0..svd.u.rows() {
            if svd.u[(i, j)].abs() > svd.u[(best, j)].abs() {
                best = i;
            }
        }
        if svd.u[(best, j)] < 0.0 {
            for i in 0..svd.u.rows() {
                svd.u[(i, j)] = -svd.u[(i, j)];
            }
            for i in 0..svd.v.rows() {
                svd.v[(i, j)] = -svd.v[(i, j)];
            }
        }
    }
}

fn svd_tall(a: &Matrix) -> Result<Svd> {
    let (m, n) = a.shape();
    debug_assert!(m >= n);

    // column-major working copies
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    // columns this small are rounding noise of a rank-deficient input;
    // rotating them against large columns never settles
    let negligible = (NEGLIGIBLE_COLUMN * a.frobenius_norm()).powi(2);
    let mut converged = n < 2;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0
                    || alpha <= negligible
                    || beta <= negligible
                    || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "jacobi svd of {m}x{n} did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let sigmas: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps lower original index first on ties
    order.sort_by(|&i, &j| sigmas[j].partial_cmp(&sigmas[i]).unwrap());

    let s: Vec<f64> = order.iter().map(|&i| sigmas[i]).collect();
    let top = s.first().copied().unwrap_or(0.0);
    let floor = top * 1e-13;

    let mut ucols: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&i| {
            let sigma = sigmas[i];
            if sigma > floor && sigma > f64::MIN_POSITIVE {
                Some(cols[i].iter().map(|x| x / sigma).collect())
            } else {
                None
            }
        })
        .collect();
    let vsorted: Vec<Vec<f64>> = order.iter().map(|&i| vcols[i].clone()).collect();
    complete_basis(&mut ucols, m);
    let ucols: Vec<Vec<f64>> = ucols.into_iter().map(Option::unwrap).collect();

    Ok(Svd {
        u: Matrix::from_fn(m, n, |i, j| ucols[j][i]),
        s,
        v: Matrix::from_fn(n, n, |i, j| vsorted[j][i]),
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills missing columns with unit vectors orthogonal to every present one:
/// each time the standard basis vector with the largest residual after two
/// passes of Gram–Schmidt (lowest index on ties).
fn complete_basis(cols: &mut [Option<Vec<f64>>], m: usize) {
    for j in 0..cols.len() {
        if cols[j].is_some() {
            continue;
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for candidate in 0..m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            for _ in 0..2 {
                for other in cols.iter().flatten() {
                    let proj = dot(&e, other);
                    e.iter_mut().zip(other).for_each(|(x, o)| *x -= proj * o);
                }
            }
            let len = norm(&e);
            if best.as_ref().is_none_or(|(l, _)| len > *l) {
                best = Some((len, e));
            }
        }
        let (len, mut e) = best.expect("at least one candidate");
        e.iter_mut().for_each(|x| *x /= len);
        cols[j] = Some(e);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;

    fn check(a: &Matrix) -> Svd {
        let r = svd(a).unwrap();
        let k = a.rows().min(a.cols());
        assert_eq!(r.u.shape(), (a.rows(), k));
        assert_eq!(r.v.shape(), (a.cols(), k));
        assert!(r.u.column_orthonormality_error() <= 1e-10);
        assert!(r.v.column_orthonormality_error() <= 1e-10);
        let err = r.reconstruct().sub(a).unwrap().frobenius_norm();
        assert!(err <= 1e-9 * (1.0 + a.frobenius_norm()), "recon err {err}");
        assert!(r.s.windows(2).all(|w| w[0] >= w[1]));
        assert!(r.s.iter().all(|&s| s >= 0.0));
        r
    }

    #[test]
    fn diagonal() {
        let r = check(&Matrix::diag(&[3.0, 1.0]));
        assert_eq!(r.s, vec![3.0, 1.0]);
        assert_eq!(r.u, Matrix::identity(2));
        assert_eq!(r.v, Matrix::identity(2));
    }

    #[test]
    fn identity() {
        let r = check(&Matrix::identity(3));
        assert_eq!(r.s, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn swap_matrix() {
        let a = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        let r = check(&a);
        assert!((r.s[0] - 1.0).abs() < 1e-15 && (r.s[1] - 1.0).abs() < 1e-15);
        let p = r.u.matmul_t(&r.v).unwrap();
        for i in 0..2 {
            let nonzero: Vec<f64> = p
                .row(i)
                .iter()
                .copied()
                .filter(|x| x.abs() > 1e-12)
                .collect();
            assert_eq!(nonzero.len(), 1);
            assert!((nonzero[0].abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wide_and_tall() {
        let mut rng = Rng::new(11);
        for (m, n) in [(5, 3), (3, 5), (1, 4), (4, 1), (16, 16), (7, 12)] {
            let a = Matrix::from_fn(m, n, |_, _| rng.normal());
            check(&a);
        }
    }

    #[test]
    fn rank_deficient_and_zero() {
        let r = check(&Matrix::zeros(3, 4));
        assert_eq!(r.s, vec![0.0; 3]);
        assert_eq!(r.rank(1e-10), 0);
        let mut rng = Rng::new(5);
        let x = Matrix::from_fn(6, 2, |_, _| rng.normal());
        let y = Matrix::from_fn(2, 5, |_, _| rng.normal());
        let r = check(&x.matmul(&y).unwrap());
        assert_eq!(r.rank(1e-10), 2);
    }

    #[test]
    fn rejects_non_finite() {
        let a = Matrix::from_rows(&[[1.0, f64::INFINITY]]);
        assert!(matches!(svd(&a), Err(Error::Numeric(_))));
    }

    #[test]
    fn sign_convention() {
        let mut rng = Rng::new(8);
        let a = Matrix::from_fn(6, 4, |_, _| rng.normal());
        let r = svd(&a).unwrap();
        for j in 0..4 {
            let col = r.u.column(j);
            let big = col
                .iter()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { *x } else { m });
            assert!(big > 0.0);
        }
    }
}
