//! Round trips through the forward and inverse maps on smoothly deformed
//! grids: exact at the reference grid and converging at order p + 1.

use nalgebra::DMatrix;
use rgr::grid::{AxisFactors, GridLayout};
use rgr::mapping::{map_forward, map_inverse, map_inverse_with_diagnostics};
use rgr::{InterpConfig, MovingGrid, ReferenceGrid, SnapshotMatrix};

/// Nodes `x + ε_n sin(πx)` on `[0, 1]` with `ε_n` ramping over three steps.
fn bent_1d(n: usize, eps: f64) -> MovingGrid {
    let r = ReferenceGrid::uniform_1d(0.0, 1.0, n).unwrap();
    let xs = r.axis(0).to_vec();
    let basis = DMatrix::from_fn(n, 2, |i, c| if c == 0 { xs[i] } else { (std::f64::consts::PI * xs[i]).sin() });
    let coeffs = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 1.0, 0.0, 0.5 * eps, eps]);
    let layout = GridLayout::full(&r, 2, 3);
    MovingGrid::from_factors(r, layout, vec![AxisFactors { basis, coeffs }]).unwrap()
}

/// A sheared, bent square grid on `[0, 1]²` with pinned boundaries.
fn bent_2d(n: usize, eps: f64) -> MovingGrid {
    let r = ReferenceGrid::uniform_2d((0.0, 1.0), (0.0, 1.0), n, n).unwrap();
    let (xs, ys) = (r.axis(0).to_vec(), r.axis(1).to_vec());
    let pi = std::f64::consts::PI;
    let bump = |x: f64, y: f64| (pi * x).sin() * (pi * y).sin();
    let basis_x = DMatrix::from_fn(n * n, 2, |k, c| {
        let (x, y) = (xs[k % n], ys[k / n]);
        if c == 0 { x } else { bump(x, y) * (1.0 + y) }
    });
    let basis_y = DMatrix::from_fn(n * n, 2, |k, c| {
        let (x, y) = (xs[k % n], ys[k / n]);
        if c == 0 { y } else { -bump(x, y) * x }
    });
    let coeffs = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, eps]);
    let layout = GridLayout::full(&r, 2, 2);
    MovingGrid::from_factors(
        r,
        layout,
        vec![AxisFactors { basis: basis_x, coeffs: coeffs.clone() }, AxisFactors { basis: basis_y, coeffs }],
    )
    .unwrap()
}

fn field(g: &MovingGrid, f: impl Fn(&[f64]) -> f64) -> SnapshotMatrix {
    let r = g.reference();
    let n = r.len();
    let coords = r.coords();
    let col: Vec<f64> = (0..n).map(|i| f(&coords.iter().map(|a| a[i]).collect::<Vec<_>>())).collect();
    SnapshotMatrix::from_columns(&vec![col; g.steps()]).unwrap()
}

fn round_trip_error(g: &MovingGrid, degree: usize, f: impl Fn(&[f64]) -> f64) -> f64 {
    let cfg = InterpConfig::new(degree).unwrap();
    let m = field(g, f);
    let back = map_inverse(&map_forward(&m, g, &cfg).unwrap(), g, &cfg).unwrap();
    (m.matrix() - back.matrix()).amax()
}

#[test]
fn reference_grid_is_the_identity() {
    for degree in [1, 3] {
        let cfg = InterpConfig::new(degree).unwrap();
        let g = bent_1d(41, 0.0);
        let m = field(&g, |p| (5.0 * p[0]).exp());
        assert_eq!(map_forward(&m, &g, &cfg).unwrap(), m);
        assert_eq!(round_trip_error(&g, degree, |p| (5.0 * p[0]).exp()), 0.0);

        let g = bent_2d(13, 0.0);
        let f = |p: &[f64]| (3.0 * p[0] - p[1]).sin();
        let (back, diag) =
            map_inverse_with_diagnostics(&map_forward(&field(&g, f), &g, &cfg).unwrap(), &g, &cfg).unwrap();
        assert_eq!(diag.clamped, 0);
        assert!((back.matrix() - field(&g, f).matrix()).amax() < 1e-13);
    }
}

fn observed_order(errors: &[f64], ratio: f64) -> f64 {
    (errors[0] / errors[1]).ln() / ratio.ln()
}

#[test]
fn linear_round_trip_is_second_order_in_1d() {
    let f = |p: &[f64]| (2.0 * std::f64::consts::PI * p[0]).sin();
    let errors: Vec<f64> = [101, 201].iter().map(|&n| round_trip_error(&bent_1d(n, 0.05), 1, f)).collect();
    let order = observed_order(&errors, 2.0);
    assert!((order - 2.0).abs() < 0.3, "order {order}, errors {errors:?}");
}

#[test]
fn cubic_round_trip_is_fourth_order_in_1d() {
    let f = |p: &[f64]| (2.0 * std::f64::consts::PI * p[0]).sin();
    let errors: Vec<f64> = [41, 81].iter().map(|&n| round_trip_error(&bent_1d(n, 0.05), 3, f)).collect();
    let order = observed_order(&errors, 2.0);
    assert!((order - 4.0).abs() < 0.6, "order {order}, errors {errors:?}");
}

#[test]
fn bilinear_round_trip_is_second_order_in_2d() {
    let f = |p: &[f64]| (2.0 * p[0]).sin() * (3.0 * p[1]).cos();
    let errors: Vec<f64> = [41, 81].iter().map(|&n| round_trip_error(&bent_2d(n, 0.03), 1, f)).collect();
    let order = observed_order(&errors, 2.0);
    assert!((order - 2.0).abs() < 0.4, "order {order}, errors {errors:?}");
}

#[test]
fn linear_fields_survive_bilinear_round_trips() {
    // Bilinear interpolation reproduces affine functions on any convex cell.
    let g = bent_2d(17, 0.04);
    let err = round_trip_error(&g, 1, |p| 2.0 * p[0] - 0.5 * p[1] + 1.0);
    assert!(err < 1e-12, "{err}");
}
