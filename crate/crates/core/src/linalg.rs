use alloc::vec::Vec;

use crate::{Matrix, Vector};

pub(crate) fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Eigenpairs of a symmetric matrix, eigenvalues descending.
pub(crate) fn symmetric_eigen_desc(m: &Matrix) -> (Vec<f64>, Matrix) {
    let eig = symmetrize(m).symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Modified Gram-Schmidt, run twice for stability. Returns the index of the
/// first column whose residual norm falls below `tol` times its original
/// norm (or is zero).
pub(crate) fn orthonormalize(columns: &mut [Vector], tol: f64) -> core::result::Result<(), usize> {
    for j in 0..columns.len() {
        let original = columns[j].norm();
        for _ in 0..2 {
            for i in 0..j {
                let (head, tail) = columns.split_at_mut(j);
                let proj = head[i].dot(&tail[0]);
                tail[0].axpy(-proj, &head[i], 1.0);
            }
        }
        let norm = columns[j].norm();
        if !(norm > tol * original) || norm == 0.0 || !norm.is_finite() {
            return Err(j);
        }
        columns[j] /= norm;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_sorted_descending() {
        let m = Matrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 3.0]);
        let (values, vectors) = symmetric_eigen_desc(&m);
        assert_eq!(values, [5.0, 3.0, 1.0]);
        assert!((vectors[(1, 0)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gram_schmidt_flags_dependent_columns() {
        let mut cols = alloc::vec![
            Vector::from_vec(alloc::vec![1.0, 1.0, 0.0]),
            Vector::from_vec(alloc::vec![2.0, 2.0, 0.0]),
        ];
        assert_eq!(orthonormalize(&mut cols, 1e-10), Err(1));
        let mut cols = alloc::vec![
            Vector::from_vec(alloc::vec![1.0, 1.0, 0.0]),
            Vector::from_vec(alloc::vec![1.0, 0.0, 1.0]),
        ];
        orthonormalize(&mut cols, 1e-10).unwrap();
        assert!(cols[0].dot(&cols[1]).abs() < 1e-15);
        assert!((cols[1].norm() - 1.0).abs() < 1e-15);
    }
}
