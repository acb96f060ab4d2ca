//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Cholesky factorization that reports `context` when the matrix is not PD.
pub fn cholesky<T: Real>(m: DMatrix<T>, context: impl FnOnce() -> String) -> Result<Cholesky<T, Dyn>> {
    Cholesky::new(m).ok_or_else(|| Error::NotPositiveDefinite(context()))
}

/// `log det` of the factored matrix.
pub fn log_det<T: Real>(chol: &Cholesky<T, Dyn>) -> T {
    let l = chol.l_dirty();
    let mut acc = T::zero();
    for i in 0..l.nrows() {
        acc += l[(i, i)].ln();
    }
    acc + acc
}

pub fn symmetrize<T: Real>(m: &mut DMatrix<T>) {
    let n = m.nrows();
    let half = T::cst(0.5);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (m[(i, j)] + m[(j, i)]) * half;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// decreasing order (eigenvectors permuted accordingly).
pub fn sorted_eigen<T: Real>(m: DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
    let eig = SymmetricEigen::new(m);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Singular values in decreasing order.
pub fn singular_values<T: Real>(m: &DMatrix<T>) -> Vec<T> {
    let mut s: Vec<T> = m.clone().singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    s
}

/// Number of singular values above `rel_tol * s_max`.
pub fn numerical_rank<T: Real>(m: &DMatrix<T>, rel_tol: T) -> usize {
    let s = singular_values(m);
    match s.first() {
        Some(&s1) if s1 > T::zero() => s.iter().filter(|&&v| v > rel_tol * s1).count(),
        _ => 0,
    }
}

/// Lower Cholesky factor of `m`.
pub fn lower_factor<T: Real>(m: &DMatrix<T>, context: impl FnOnce() -> String) -> Result<DMatrix<T>> {
    Ok(cholesky(m.clone(), context)?.l())
}

/// Inverse of a lower-triangular matrix.
pub fn invert_lower<T: Real>(l: &DMatrix<T>) -> Result<DMatrix<T>> {
    let n = l.nrows();
    let mut inv = DMatrix::<T>::identity(n, n);
    if !l.solve_lower_triangular_mut(&mut inv) {
        return Err(Error::NotPositiveDefinite("singular triangular factor".into()));
    }
    Ok(inv)
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse<T: Real>(m: &DMatrix<T>, context: impl FnOnce() -> String) -> Result<DMatrix<T>> {
    let mut inv = cholesky(m.clone(), context)?.inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

/// Builds a block-diagonal matrix from square blocks.
pub fn block_diag<T: Real>(blocks: &[DMatrix<T>]) -> DMatrix<T> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut off = 0;
    for b in blocks {
        let k = b.nrows();
        out.view_mut((off, off), (k, k)).copy_from(b);
        off += k;
    }
    out
}
