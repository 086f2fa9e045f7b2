//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_traits::Float;

use crate::error::{Error, Result};
use crate::grid::{Grid, GridFunction};
use crate::scalar::Real;

/// Pairwise inner products `(vs[i], vs[j])`.
pub fn gram_matrix<T: Real>(vs: &[GridFunction<T>]) -> Result<DMatrix<T>> {
    let k = vs.len();
    if let Some(first) = vs.first() {
        for v in vs {
            first.grid().ensure_same(&v.grid())?;
        }
    }
    let mut m = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..=i {
            let ip = vs[i].inner_unchecked(&vs[j]);
            m[(i, j)] = ip;
            m[(j, i)] = ip;
        }
    }
    Ok(m)
}

/// Eigenvalues sorted ascending together with matching eigenvector columns.
pub fn sorted_eigen<T: Real>(m: DMatrix<T>) -> (Vec<T>, DMatrix<T>) {
    let n = m.nrows();
    if n == 0 {
        return (Vec::new(), m);
    }
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Modified Gram–Schmidt with one reorthogonalisation pass. Fails on
/// (numerically) dependent input.
pub fn orthonormalize<T: Real>(vs: &[GridFunction<T>]) -> Result<Vec<GridFunction<T>>> {
    let mut out: Vec<GridFunction<T>> = Vec::with_capacity(vs.len());
    for v in vs {
        let original = v.norm();
        match orthogonalize_against(v, &out) {
            Some(w) if w.norm() > T::structural_tol() * Float::max(original, T::one()) => {
                let n = w.norm();
                out.push(w.scaled(T::one() / n));
            }
            _ => return Err(Error::Dependent),
        }
    }
    Ok(out)
}

/// Like [`orthonormalize`] but silently drops directions already spanned.
pub fn orthonormal_span<T: Real>(vs: &[GridFunction<T>], rel_tol: T) -> Vec<GridFunction<T>> {
    let mut out: Vec<GridFunction<T>> = Vec::new();
    for v in vs {
        let original = v.norm();
        if original.is_zero() {
            continue;
        }
        if let Some(w) = orthogonalize_against(v, &out) {
            let n = w.norm();
            if n > rel_tol * original {
                out.push(w.scaled(T::one() / n));
            }
        }
    }
    out
}

fn orthogonalize_against<T: Real>(
    v: &GridFunction<T>,
    basis: &[GridFunction<T>],
) -> Option<GridFunction<T>> {
    let mut w = v.clone();
    for _ in 0..2 {
        for b in basis {
            let c = w.inner_unchecked(b);
            w.axpy(-c, b).ok()?;
        }
    }
    Some(w)
}

/// Largest deviation of the Gram matrix of `vs` from the identity.
pub fn orthonormality_defect<T: Real>(vs: &[GridFunction<T>]) -> Result<T> {
    let g = gram_matrix(vs)?;
    let k = vs.len();
    let mut worst = T::zero();
    for i in 0..k {
        for j in 0..k {
            let target = if i == j { T::one() } else { T::zero() };
            worst = Float::max(worst, Float::abs(g[(i, j)] - target));
        }
    }
    Ok(worst)
}

/// Orthogonal projection of `f` onto the span of the orthonormal `basis`.
pub fn project<T: Real>(f: &GridFunction<T>, basis: &[GridFunction<T>]) -> GridFunction<T> {
    let mut out = GridFunction::zeros(f.grid());
    for b in basis {
        let c = f.inner_unchecked(b);
        out.axpy(c, b).expect("same grid");
    }
    out
}

/// Grid functions from the columns of `coords` in the given basis.
pub fn combine_columns<T: Real>(
    grid: Grid,
    basis: &[GridFunction<T>],
    coords: &DMatrix<T>,
) -> Vec<GridFunction<T>> {
    (0..coords.ncols())
        .map(|c| {
            let w: Vec<T> = coords.column(c).iter().copied().collect();
            GridFunction::combination(grid, &w, basis).expect("same grid")
        })
        .collect()
}

/// Solves the symmetric positive definite system `m x = b` (Cholesky, with
/// an LU fallback for marginal cases).
pub fn solve_spd<T: Real>(m: &DMatrix<T>, b: &DVector<T>) -> Option<DVector<T>> {
    if let Some(ch) = m.clone().cholesky() {
        return Some(ch.solve(b));
    }
    m.clone().lu().solve(b)
}
