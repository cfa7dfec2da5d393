use nalgebra::DMatrix;
use rgr::datagen::{advecting_gaussian, InitialCondition, PdeRunConfig};
use rgr::forecast::*;
use rgr::grid::{AxisFactors, GridLayout};
use rgr::lowrank::frobenius_error;
use rgr::registration::train;
use rgr::{InterpConfig, MovingGrid, RegistrationProblem, SnapshotMatrix};

fn advection(t_final: f64) -> PdeRunConfig {
    PdeRunConfig {
        x_a: 0.0,
        x_b: 2.5,
        t_final,
        dx: 1e-2,
        dt: 2e-2,
        initial: InitialCondition::Bump { base: 0.0, amplitude: 1.0, center: 0.6, width: 0.1 },
        reynolds: f64::INFINITY,
        stride: 1,
    }
}

/// The first `steps` steps of `g` as a grid of their own.
fn truncate(g: &MovingGrid, steps: usize) -> MovingGrid {
    let layout = GridLayout { steps, control_steps: steps, ..g.layout().clone() };
    let factors = g
        .factors()
        .iter()
        .map(|f| AxisFactors { basis: f.basis.clone(), coeffs: f.coeffs.columns(0, steps).into_owned() })
        .collect();
    MovingGrid::from_factors(g.reference().clone(), layout, factors).unwrap()
}

#[test]
fn exact_ar1_rollout() {
    let z = DMatrix::from_fn(1, 30, |_, n| 0.9f64.powi(n as i32));
    let s = LatentSeries::new(z, 0).unwrap();
    let model = fit_ar(&s, 1, 0.0).unwrap();
    let p = predict(&model, &s, 10).unwrap();
    for h in 0..10 {
        let exact = 0.9f64.powi(30 + h as i32);
        assert!((p.coords[(0, h)] - exact).abs() < 1e-10);
    }
}

#[test]
fn forced_damped_rotation_is_recovered() {
    let (c, s) = (0.3f64.cos() * 0.97, 0.3f64.sin() * 0.97);
    let mut z = DMatrix::zeros(2, 40);
    z[(0, 0)] = 1.0;
    for n in 1..40 {
        z[(0, n)] = c * z[(0, n - 1)] - s * z[(1, n - 1)] + 0.1;
        z[(1, n)] = s * z[(0, n - 1)] + c * z[(1, n - 1)];
    }
    let series = LatentSeries::new(z.columns(0, 30).into_owned(), 0).unwrap();
    let model = fit_ar(&series, 1, 0.0).unwrap();
    assert!(model.residual < 1e-10);
    assert!((model.coeffs[0][(1, 0)] - s).abs() < 1e-10);
    let p = predict(&model, &series, 10).unwrap();
    assert!((p.coords - z.columns(30, 10)).amax() < 1e-9);
}

#[test]
fn constant_rows_extend_constant() {
    let (_, truth) = advecting_gaussian(0.0, &advection(0.2)).unwrap();
    let e = extend_grid(&truth, 7, 1e-3).unwrap();
    assert_eq!(e.steps(), truth.steps() + 7);
    let first = e.assemble(0).unwrap();
    assert!((0..e.steps()).all(|n| e.assemble(n).unwrap() == first));
}

#[test]
fn ground_truth_grid_extrapolates_the_profile() {
    let (full, truth) = advecting_gaussian(0.5, &advection(1.0)).unwrap();
    let k = full.snapshots.cols();
    let train_steps = 34;
    let g = truncate(&truth, train_steps);
    let ext = extend_grid(&g, k - train_steps, 1e-3).unwrap();

    // On the exact grid the latent series is constant: one basis column
    // (the initial profile) with unit coefficients.
    let u = DMatrix::from_column_slice(full.snapshots.rows(), 1, full.snapshots.column(0));
    let z = LatentSeries::new(DMatrix::from_element(1, k - train_steps, 1.0), train_steps).unwrap();
    let pred = reconstruct_prediction(&ext, &u, &z, &InterpConfig::default()).unwrap();
    let exact = SnapshotMatrix::new(full.snapshots.matrix().columns(train_steps, k - train_steps).into_owned()).unwrap();
    let rel = frobenius_error(&exact, &pred, true).unwrap();
    assert!(rel < 1e-2, "{rel}");
}

#[test]
fn training_latents_decode_to_the_training_reconstruction() {
    let (d, _) = advecting_gaussian(0.5, &advection(0.4)).unwrap();
    let mut p = RegistrationProblem::new(d.snapshots.clone(), d.reference.clone(), 2, 1);
    p.boundary_pinned = false;
    p.control_shape = vec![11];
    p.control_steps = 5;
    p.v_min = 1e-3;
    p.max_iters = 5;
    let r = train(&p).unwrap();
    let series = LatentSeries::new(r.latent.right().clone(), 0).unwrap();
    let back = reconstruct_prediction(&r.grid, r.latent.left(), &series, &p.interp).unwrap();
    assert_eq!(back, r.reconstruction);

    let zero = LatentSeries::new(DMatrix::zeros(1, 3), 0).unwrap();
    let z = reconstruct_prediction(&r.grid, r.latent.left(), &zero, &p.interp).unwrap();
    assert!(z.matrix().iter().all(|&v| v == 0.0));
}

#[test]
fn trained_advection_grid_extends_along_characteristics() {
    let (d, _) = advecting_gaussian(0.5, &advection(1.0)).unwrap();
    let k = d.snapshots.cols();
    let train_steps = 34;
    let m = SnapshotMatrix::new(d.snapshots.matrix().columns(0, train_steps).into_owned()).unwrap();
    let mut p = RegistrationProblem::new(m, d.reference.clone(), 2, 1);
    p.boundary_pinned = false;
    p.control_shape = vec![11];
    p.control_steps = 12;
    p.gamma1 = 1e-3;
    p.gamma2 = 1e-3;
    p.v_min = 1e-3;
    let r = train(&p).unwrap();
    let ext = extend_grid(&r.grid, k - train_steps, 1e-3).unwrap();

    // Compare each node's displacement with c·t over the extension, near the
    // pulse where the data determines the grid.
    let xs = d.reference.axis(0);
    let near: Vec<usize> = (0..xs.len()).filter(|&i| (xs[i] - 0.6).abs() < 0.2).collect();
    let start = ext.assemble(0).unwrap();
    let end = ext.assemble(k - 1).unwrap();
    let expected = 0.5 * d.times[k - 1];
    for &i in &near {
        let moved = end[0][i] - start[0][i];
        assert!((moved - expected).abs() <= 0.05 * expected, "node {i}: moved {moved}, expected {expected}");
    }
}
