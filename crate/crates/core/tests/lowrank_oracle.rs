//! Truncated SVD checked against a one-sided Jacobi SVD written here from
//! scratch, plus invariants over random inputs.

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgr::lowrank::{captured_energy, frobenius_error, reconstruct, singular_values, truncated_svd};
use rgr::SnapshotMatrix;

/// Singular values by one-sided Jacobi rotations on the columns of `a`,
/// descending.
fn jacobi_singular_values(a: &DMatrix<f64>) -> Vec<f64> {
    let a = if a.nrows() >= a.ncols() { a.clone() } else { a.transpose() };
    let (m, n) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j).iter().copied().collect()).collect();
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = cols[p].iter().map(|v| v * v).sum();
                let beta: f64 = cols[q].iter().map(|v| v * v).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (x, y) = (cols[p][i], cols[q][i]);
                    cols[p][i] = c * x - s * y;
                    cols[q][i] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut s: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    s.sort_by(|x, y| y.total_cmp(x));
    s
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

#[test]
fn jacobi_oracle_on_a_known_spectrum() {
    // Diagonal scaled between two rotations has singular values 3, 2, 0.5.
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 0.5, 3.0]));
    let (c, s) = (0.6, 0.8);
    let q = DMatrix::from_row_slice(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]);
    let sv = jacobi_singular_values(&(&q * d * q.transpose()));
    for (a, b) in sv.iter().zip([3.0, 2.0, 0.5]) {
        assert!((a - b).abs() < 1e-14, "{sv:?}");
    }
}

#[test]
fn singular_values_match_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (rows, cols) in [(30, 12), (12, 30), (25, 25), (1, 7)] {
        let a = random_matrix(&mut rng, rows, cols);
        let oracle = jacobi_singular_values(&a);
        let ours = singular_values(&SnapshotMatrix::new(a).unwrap());
        assert_eq!(ours.len(), oracle.len());
        for (x, y) in ours.iter().zip(&oracle) {
            assert!((x - y).abs() <= 1e-10 * oracle[0], "{rows}x{cols}: {x} vs {y}");
        }
    }
}

#[test]
fn truncation_error_is_the_tail() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_matrix(&mut rng, 40, 16);
    let oracle = jacobi_singular_values(&a);
    let m = SnapshotMatrix::new(a).unwrap();
    for k in [1, 3, 8, 16] {
        let f = truncated_svd(&m, k).unwrap();
        let err = frobenius_error(&m, &reconstruct(&f).unwrap(), false).unwrap();
        let tail = oracle[k..].iter().map(|s| s * s).sum::<f64>().sqrt();
        assert!((err - tail).abs() <= 1e-10 * oracle[0], "k={k}: {err} vs {tail}");
        for (s, o) in f.singular_values().iter().zip(&oracle) {
            assert!((s - o).abs() <= 1e-10 * oracle[0]);
        }
    }
}

#[test]
fn energy_of_a_rank_two_matrix() {
    let u = DMatrix::from_fn(20, 2, |i, j| ((i + 1) as f64 * (j + 1) as f64).sin());
    let v = DMatrix::from_fn(2, 9, |i, j| ((i * 9 + j) as f64 * 0.3).cos());
    let m = SnapshotMatrix::new(u * v).unwrap();
    let s = singular_values(&m);
    assert!(captured_energy(&s, 2) > 1.0 - 1e-14);
    assert!(captured_energy(&s, 1) < 1.0);
}

fn matrix_strategy() -> impl Strategy<Value = DMatrix<f64>> {
    (1usize..12, 1usize..12).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-10.0f64..10.0, r * c).prop_map(move |v| DMatrix::from_vec(r, c, v))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn factor_invariants(a in matrix_strategy(), pick in 0usize..100) {
        let k = 1 + pick % a.nrows().min(a.ncols());
        let m = SnapshotMatrix::new(a.clone()).unwrap();
        let f = truncated_svd(&m, k).unwrap();
        let s = f.singular_values();
        prop_assert!(s.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.iter().all(|&v| v >= 0.0));

        let scale = a.amax().max(1.0);
        let gram = f.left().transpose() * f.left();
        prop_assert!((gram - DMatrix::identity(k, k)).amax() < 1e-9);
        for (i, &sigma) in s.iter().enumerate() {
            prop_assert!((f.right().row(i).norm() - sigma).abs() <= 1e-9 * scale);
        }

        // Optimal error, bounded above by the oracle tail.
        let oracle = jacobi_singular_values(&a);
        let err = frobenius_error(&m, &reconstruct(&f).unwrap(), false).unwrap();
        let tail = oracle[k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((err - tail).abs() <= 1e-7 * scale * (a.len() as f64).sqrt());
    }

    #[test]
    fn energy_is_monotone_in_k(a in matrix_strategy()) {
        let s = singular_values(&SnapshotMatrix::new(a).unwrap());
        let e: Vec<f64> = (0..=s.len()).map(|k| captured_energy(&s, k)).collect();
        prop_assert!(e.windows(2).all(|w| w[0] <= w[1] + 1e-15));
        prop_assert!((e[s.len()] - 1.0).abs() < 1e-12);
    }
}
