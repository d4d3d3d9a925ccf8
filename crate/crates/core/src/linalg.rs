//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::scalar::Scalar;

/// Indices of columns that are (numerically) linear combinations of earlier
/// columns, found by modified Gram-Schmidt in column order.
pub fn dependent_columns<T: Scalar>(x: &DMatrix<T>) -> Vec<usize> {
    let tol = T::eps().sqrt() * T::lit(0.01);
    let mut basis: Vec<DVector<T>> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        if norm <= T::zero() || !norm.is_finite() {
            dependent.push(j);
            continue;
        }
        let mut v = col;
        for q in &basis {
            let proj = q.dot(&v);
            v.axpy(-proj, q, T::one());
        }
        // second pass for numerical orthogonality
        for q in &basis {
            let proj = q.dot(&v);
            v.axpy(-proj, q, T::one());
        }
        let r = v.norm();
        if r <= tol * norm {
            dependent.push(j);
        } else {
            basis.push(v / r);
        }
    }
    dependent
}

/// Inverse of a lower-triangular matrix.
pub fn lower_triangular_inverse<T: Scalar>(l: &DMatrix<T>) -> Option<DMatrix<T>> {
    let n = l.nrows();
    l.solve_lower_triangular(&DMatrix::identity(n, n))
}

/// Symmetric square-root factor `F` with `F F' = S` for a positive
/// semidefinite `S`; eigen-directions with non-positive eigenvalues are
/// dropped. Returns `None` if nothing positive remains.
pub fn psd_factor<T: Scalar>(s: &DMatrix<T>) -> Option<DMatrix<T>> {
    let sym = (s + s.transpose()) * T::lit(0.5);
    let eig = SymmetricEigen::new(sym);
    let max_ev = eig.eigenvalues.iter().fold(T::zero(), |m, &v| m.max(v));
    if max_ev <= T::zero() {
        return None;
    }
    let cutoff = max_ev * T::eps() * T::from_count(s.nrows().max(1));
    let keep: Vec<usize> = (0..eig.eigenvalues.len())
        .filter(|&i| eig.eigenvalues[i] > cutoff)
        .collect();
    let mut f = DMatrix::zeros(s.nrows(), keep.len());
    for (c, &i) in keep.iter().enumerate() {
        let scale = eig.eigenvalues[i].sqrt();
        for r in 0..s.nrows() {
            f[(r, c)] = eig.eigenvectors[(r, i)] * scale;
        }
    }
    Some(f)
}

/// Selects the given columns of `m`, in order.
pub fn select_columns<T: Scalar>(m: &DMatrix<T>, cols: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(m.nrows(), cols.len(), |i, j| m[(i, cols[j])])
}

/// Selects the principal submatrix with the given row/column indices.
pub fn principal_submatrix<T: Scalar>(m: &DMatrix<T>, idx: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(idx.len(), idx.len(), |i, j| m[(idx[i], idx[j])])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_duplicated_column() {
        let x = DMatrix::from_row_slice(4, 3, &[1.0, 2.0, 2.0, 1.0, 3.0, 3.0, 1.0, 5.0, 5.0, 1.0, 0.0, 0.0]);
        assert_eq!(dependent_columns(&x), vec![2]);
    }

    #[test]
    fn full_rank_has_no_dependent_columns() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        assert!(dependent_columns(&x).is_empty());
    }

    #[test]
    fn psd_factor_reconstructs_rank_deficient_matrix() {
        let v = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, -1.0]);
        let s = &v * v.transpose();
        let f = psd_factor(&s).unwrap();
        assert_eq!(f.ncols(), 1);
        assert!((&f * f.transpose() - &s).abs().max() < 1e-12);
    }
}
