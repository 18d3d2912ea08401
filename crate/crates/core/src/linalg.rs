//! Small dense helpers on top of nalgebra for symmetric positive-definite work.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::scalar::Scalar;

/// Inverse and log-determinant of a symmetric positive-definite matrix.
pub fn spd_inverse_logdet<T: Scalar>(m: &DMatrix<T>) -> Option<(DMatrix<T>, T)> {
    let chol = m.clone().cholesky()?;
    let logdet = chol
        .l_dirty()
        .diagonal()
        .iter()
        .fold(T::zero(), |acc, &v| acc + v.ln())
        * T::lit(2.0);
    let mut inv = chol.inverse();
    symmetrize(&mut inv);
    Some((inv, logdet))
}

pub fn symmetrize<T: Scalar>(m: &mut DMatrix<T>) {
    let n = m.nrows();
    let half = T::lit(0.5);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (m[(i, j)] + m[(j, i)]) * half;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Eigen-decomposition with eigenvalues sorted in decreasing order and each
/// eigenvector's largest-magnitude entry made positive.
pub fn sorted_eigen<T: Scalar>(m: &DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        let mut best = 0;
        for k in 1..n {
            if v[k].abs() > v[best].abs() {
                best = k;
            }
        }
        if v[best] < T::zero() {
            v = -v;
        }
        vectors.set_column(col, &v);
    }
    (values, vectors)
}

/// Symmetric square root via eigen-decomposition. Negative eigenvalues are
/// treated as zero.
pub fn sym_sqrt<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    let (values, vectors) = sorted_eigen(m);
    let roots = values.map(|v| if v > T::zero() { v.sqrt() } else { T::zero() });
    &vectors * DMatrix::from_diagonal(&roots) * vectors.transpose()
}

/// Clamps eigenvalues below `rel_floor * max_eigenvalue`. Returns `None` when
/// the matrix already satisfies the floor.
pub fn floor_eigenvalues<T: Scalar>(m: &DMatrix<T>, rel_floor: T) -> Option<DMatrix<T>> {
    let (values, vectors) = sorted_eigen(m);
    let top = values[0].max(T::zero());
    let floor = if top > T::zero() { top * rel_floor } else { rel_floor };
    if values.iter().all(|&v| v >= floor) {
        return None;
    }
    let clamped = values.map(|v| v.max(floor));
    let mut out = &vectors * DMatrix::from_diagonal(&clamped) * vectors.transpose();
    symmetrize(&mut out);
    Some(out)
}

/// `x' A x`.
pub fn quad_form<T: Scalar>(a: &DMatrix<T>, x: &DVector<T>) -> T {
    let n = x.len();
    let mut acc = T::zero();
    for i in 0..n {
        let mut row = T::zero();
        for j in 0..n {
            row += a[(i, j)] * x[j];
        }
        acc += x[i] * row;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_and_logdet_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0_f64, 8.0]));
        let (inv, logdet) = spd_inverse_logdet(&m).unwrap();
        assert!((inv[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((inv[(1, 1)] - 0.125).abs() < 1e-15);
        assert!((logdet - 16.0_f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn indefinite_matrix_has_no_inverse() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(spd_inverse_logdet(&m).is_none());
    }

    #[test]
    fn eigen_sorted_and_signed() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0_f64, 1.0, 1.0, 2.0]);
        let (vals, vecs) = sorted_eigen(&m);
        assert!((vals[0] - 3.0).abs() < 1e-12 && (vals[1] - 1.0).abs() < 1e-12);
        for c in 0..2 {
            let col = vecs.column(c);
            let big = col.iter().copied().fold(0.0_f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(big > 0.0);
        }
    }

    #[test]
    fn sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let r = sym_sqrt(&m);
        assert!((&r * &r - &m).abs().max() < 1e-12);
    }
}
