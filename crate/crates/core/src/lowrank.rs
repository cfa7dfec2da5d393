//! Snapshot matrices and the truncated SVD.
//!
//! The factorization follows the method of snapshots: the symmetric
//! eigenproblem is solved on the smaller of the two Gram matrices `MᵀM`
//! (K×K) and `MMᵀ` (N×N). Singular values are absorbed into the right
//! factor, so a rank-k approximation is simply `U·V` with `U` orthonormal.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid_arg, Error, Result};

/// An N×K matrix whose column `j` holds the state at parameter/time index `j`.
///
/// For two-dimensional data the rows are the flattened spatial grid with the
/// x index running fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotMatrix {
    data: DMatrix<f64>,
}

impl SnapshotMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(invalid_arg(format!(
                "snapshot matrix must be non-empty, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % data.nrows(), pos / data.nrows());
            return Err(Error::InvalidData(format!("non-finite entry at ({r}, {c})")));
        }
        Ok(Self { data })
    }

    pub fn from_row_major(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(invalid_arg(format!(
                "expected {} values for a {rows}x{cols} matrix, got {}",
                rows * cols,
                values.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(rows, cols, values))
    }

    /// Builds the matrix from equally long columns.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return Err(invalid_arg("columns have different lengths"));
        }
        let mut data = DMatrix::zeros(rows, cols);
        for (j, c) in columns.iter().enumerate() {
            data.column_mut(j).copy_from_slice(c);
        }
        Self::new(data)
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    /// Column `j` as a contiguous slice.
    pub fn column(&self, j: usize) -> &[f64] {
        let n = self.rows();
        &self.data.as_slice()[j * n..(j + 1) * n]
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.norm()
    }

    /// Row-major copy of the entries.
    pub fn to_row_major(&self) -> Vec<f64> {
        self.data.transpose().as_slice().to_vec()
    }
}

/// Rank-k factors `U` (N×k, orthonormal columns) and `V` (k×K) with
/// `V = Σ·[v_1 … v_k]ᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors {
    left: DMatrix<f64>,
    right: DMatrix<f64>,
    singular_values: Vec<f64>,
}

impl LowRankFactors {
    pub fn new(left: DMatrix<f64>, right: DMatrix<f64>, singular_values: Vec<f64>) -> Result<Self> {
        let k = left.ncols();
        if right.nrows() != k || singular_values.len() != k {
            return Err(invalid_arg(format!(
                "factor shapes disagree: U is {}x{}, V is {}x{}, {} singular values",
                left.nrows(),
                k,
                right.nrows(),
                right.ncols(),
                singular_values.len()
            )));
        }
        Ok(Self { left, right, singular_values })
    }

    pub fn left(&self) -> &DMatrix<f64> {
        &self.left
    }

    pub fn right(&self) -> &DMatrix<f64> {
        &self.right
    }

    pub fn rank(&self) -> usize {
        self.left.ncols()
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }
}

/// Eckart–Young optimal rank-`k` factors of `m`.
pub fn truncated_svd(m: &SnapshotMatrix, k: usize) -> Result<LowRankFactors> {
    let (n, steps) = (m.rows(), m.cols());
    if k == 0 || k > n.min(steps) {
        return Err(invalid_arg(format!(
            "rank {k} outside 1..={} for a {n}x{steps} matrix",
            n.min(steps)
        )));
    }
    let a = m.matrix();
    let mut left = if steps <= n {
        let (vecs, order) = sorted_eigen(gram_of_columns(a));
        let mut u = DMatrix::zeros(n, k);
        for (c, &i) in order.iter().take(k).enumerate() {
            u.set_column(c, &(a * vecs.column(i)));
        }
        u
    } else {
        let (vecs, order) = sorted_eigen(a * a.transpose());
        let mut u = DMatrix::zeros(n, k);
        for (c, &i) in order.iter().take(k).enumerate() {
            u.set_column(c, &vecs.column(i));
        }
        u
    };
    orthonormalize_columns(&mut left);

    let mut right = left.tr_mul(a);
    let mut sigma: Vec<f64> = (0..k).map(|i| right.row(i).norm()).collect();

    // Rounding can swap nearly equal values; restore descending order.
    let mut perm: Vec<usize> = (0..k).collect();
    perm.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));
    if perm.iter().enumerate().any(|(p, &i)| p != i) {
        left = DMatrix::from_fn(n, k, |r, c| left[(r, perm[c])]);
        right = DMatrix::from_fn(k, steps, |r, c| right[(perm[r], c)]);
        sigma = perm.iter().map(|&i| sigma[i]).collect();
    }

    for c in 0..k {
        let col = left.column(c);
        let scale = col.amax();
        let first = col.iter().find(|v| v.abs() > 1e-10 * scale).copied().unwrap_or(0.0);
        if first < 0.0 {
            left.column_mut(c).neg_mut();
            right.row_mut(c).neg_mut();
        }
    }

    LowRankFactors::new(left, right, sigma)
}

/// `aᵀa` as one gemm call.
fn gram_of_columns(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.transpose() * a
}

/// All `min(N, K)` singular values of `m`, in descending order.
pub fn singular_values(m: &SnapshotMatrix) -> Vec<f64> {
    let a = m.matrix();
    let gram = if m.cols() <= m.rows() { gram_of_columns(a) } else { a * a.transpose() };
    let mut ev: Vec<f64> = SymmetricEigen::new(gram).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

/// Fraction of `Σσ²` carried by the leading `k` singular values.
pub fn captured_energy(sigma: &[f64], k: usize) -> f64 {
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return 1.0;
    }
    sigma.iter().take(k).map(|s| s * s).sum::<f64>() / total
}

/// The product `U·V`.
pub fn reconstruct(f: &LowRankFactors) -> Result<SnapshotMatrix> {
    SnapshotMatrix::new(&f.left * &f.right)
}

/// `‖a − b‖_F`, divided by `‖a‖_F` when `relative` is set.
pub fn frobenius_error(a: &SnapshotMatrix, b: &SnapshotMatrix, relative: bool) -> Result<f64> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(invalid_arg(format!(
            "shape mismatch: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let err = (a.matrix() - b.matrix()).norm();
    if !relative {
        return Ok(err);
    }
    let norm = a.frobenius_norm();
    if norm == 0.0 {
        return Err(Error::DegenerateInput("relative error against a zero matrix".into()));
    }
    Ok(err / norm)
}

fn sorted_eigen(gram: DMatrix<f64>) -> (DMatrix<f64>, Vec<usize>) {
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    (eig.eigenvectors, order)
}

/// Two passes of modified Gram–Schmidt. Columns that vanish (zero singular
/// values) are replaced by canonical vectors orthogonalized against the rest,
/// so the result always has orthonormal columns.
pub(crate) fn orthonormalize_columns(u: &mut DMatrix<f64>) {
    let (n, k) = u.shape();
    let reference = (0..k).map(|c| u.column(c).norm()).fold(0.0, f64::max);
    let mut next_canonical = 0;
    for c in 0..k {
        let original = u.column(c).norm();
        for _ in 0..2 {
            for p in 0..c {
                let dot = u.column(p).dot(&u.column(c));
                let prev = u.column(p).clone_owned();
                u.column_mut(c).axpy(-dot, &prev, 1.0);
            }
        }
        let norm = u.column(c).norm();
        if norm > 1e-12 * reference && norm > 1e-8 * original && norm > 0.0 {
            u.column_mut(c).scale_mut(1.0 / norm);
            continue;
        }
        // Complete the basis deterministically.
        loop {
            let mut e = DVector::zeros(n);
            e[next_canonical % n] = 1.0;
            next_canonical += 1;
            for _ in 0..2 {
                for p in 0..c {
                    let dot = u.column(p).dot(&e);
                    e.axpy(-dot, &u.column(p), 1.0);
                }
            }
            let norm = e.norm();
            if norm > 0.5 {
                u.set_column(c, &(e / norm));
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> SnapshotMatrix {
        SnapshotMatrix::from_row_major(rows, cols, v).unwrap()
    }

    #[test]
    fn identity_full_rank_is_exact() {
        let m = SnapshotMatrix::new(DMatrix::identity(3, 3)).unwrap();
        let f = truncated_svd(&m, 3).unwrap();
        let r = reconstruct(&f).unwrap();
        assert!(frobenius_error(&m, &r, false).unwrap() < 1e-14);
    }

    #[test]
    fn rank_one_input() {
        let m = mat(2, 2, &[3.0, 0.0, 0.0, 0.0]);
        let f = truncated_svd(&m, 1).unwrap();
        assert!((f.singular_values()[0] - 3.0).abs() < 1e-14);
        let r = reconstruct(&f).unwrap();
        assert!(frobenius_error(&m, &r, false).unwrap() < 1e-14);
    }

    #[test]
    fn rank_out_of_range() {
        let m = mat(2, 3, &[1.0; 6]);
        assert!(matches!(truncated_svd(&m, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(truncated_svd(&m, 3), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn non_finite_is_invalid_data() {
        let err = SnapshotMatrix::from_row_major(1, 2, &[1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::InvalidData(_)));
    }

    #[test]
    fn rank_deficient_full_truncation_keeps_orthonormal_basis() {
        // rank 1, but ask for 3 factors
        let m = mat(4, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
        let f = truncated_svd(&m, 3).unwrap();
        let gram = f.left().tr_mul(f.left());
        assert!((gram - DMatrix::identity(3, 3)).amax() < 1e-12);
        let r = reconstruct(&f).unwrap();
        assert!(frobenius_error(&m, &r, false).unwrap() < 1e-12);
        assert!(f.singular_values()[1] < 1e-7);
    }

    #[test]
    fn wide_matrix_uses_row_gram() {
        let m = mat(2, 4, &[1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        let f = truncated_svd(&m, 2).unwrap();
        assert!((f.singular_values()[0] - 5f64.sqrt()).abs() < 1e-12);
        assert!((f.singular_values()[1] - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn sign_convention_first_entry_non_negative() {
        let m = mat(3, 2, &[-1.0, 0.5, -2.0, 0.1, -0.5, 3.0]);
        let f = truncated_svd(&m, 2).unwrap();
        for c in 0..2 {
            let first = f.left().column(c).iter().copied().find(|v| v.abs() > 1e-12).unwrap();
            assert!(first > 0.0);
        }
    }

    #[test]
    fn reconstruct_examples() {
        let f = LowRankFactors::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2), vec![1.0, 1.0]).unwrap();
        assert_eq!(reconstruct(&f).unwrap().matrix(), &DMatrix::identity(2, 2));

        let f = LowRankFactors::new(
            DMatrix::from_column_slice(2, 1, &[1.0, 2.0]),
            DMatrix::from_row_slice(1, 2, &[3.0, 4.0]),
            vec![5.0],
        )
        .unwrap();
        assert_eq!(reconstruct(&f).unwrap(), mat(2, 2, &[3.0, 4.0, 6.0, 8.0]));
    }

    #[test]
    fn factor_shape_mismatch() {
        let err = LowRankFactors::new(DMatrix::zeros(3, 2), DMatrix::zeros(1, 4), vec![1.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn frobenius_examples() {
        let a = mat(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let z = mat(2, 2, &[0.0; 4]);
        assert_eq!(frobenius_error(&a, &a, false).unwrap(), 0.0);
        assert!((frobenius_error(&a, &z, false).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!((frobenius_error(&a, &z, true).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(frobenius_error(&z, &a, true), Err(Error::DegenerateInput(_))));
        assert!(matches!(
            frobenius_error(&a, &mat(1, 2, &[0.0, 0.0]), false),
            Err(Error::InvalidArgument(_))
        ));

        let vals: Vec<f64> = (0..25).map(|i| ((i * 7919) % 101) as f64 / 17.0).collect();
        let a = mat(5, 5, &vals);
        let b = SnapshotMatrix::new(a.matrix().add_scalar(1e-3)).unwrap();
        assert!((frobenius_error(&a, &b, false).unwrap() - 5e-3).abs() < 1e-12);
    }

    #[test]
    fn captured_energy_bounds() {
        assert_eq!(captured_energy(&[0.0, 0.0], 1), 1.0);
        assert!((captured_energy(&[3.0, 4.0], 1) - 9.0 / 25.0).abs() < 1e-15);
    }
}
