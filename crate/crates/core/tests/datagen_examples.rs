use rgr::datagen::*;
use rgr::lowrank::{captured_energy, singular_values};
use rgr::mapping::map_forward;
use rgr::InterpConfig;

fn modes_for(energy: f64, sigma: &[f64]) -> usize {
    (1..=sigma.len()).find(|&k| captured_energy(sigma, k) >= energy).unwrap()
}

#[test]
fn glyph_shapes_and_symmetry() {
    let d = rotated_glyph(50, 90.0, 3.0).unwrap();
    assert_eq!((d.snapshots.rows(), d.snapshots.cols()), (2500, 31));
    assert_eq!(d.times[30], 90.0);
    assert!(d.snapshots.matrix().iter().all(|v| (0.0..=1.0).contains(v)));

    for size in [20, 21] {
        let d = rotated_glyph_with(Glyph::Cross, size, 360.0, 90.0).unwrap();
        let m = d.snapshots.matrix();
        assert_eq!(m.ncols(), 5);
        assert!((m.column(0) - m.column(4)).amax() < 1e-12, "size {size}");
    }
    assert!(rotated_glyph(7, 90.0, 3.0).is_err());
    assert!(rotated_glyph(20, 90.0, 7.0).is_err());
}

#[test]
fn burgers_shapes_and_equilibrium() {
    let d = burgers_solve(&PdeRunConfig::burgers()).unwrap();
    assert_eq!((d.snapshots.rows(), d.snapshots.cols()), (251, 126));
    assert!(d.snapshots.matrix().iter().all(|v| v.is_finite()));

    let mut zero = PdeRunConfig::burgers();
    zero.initial = InitialCondition::Zero;
    zero.t_final = 0.2;
    assert!(burgers_solve(&zero).unwrap().snapshots.matrix().iter().all(|&v| v == 0.0));
}

#[test]
fn nearly_inviscid_burgers_conserves_mass() {
    let cfg = PdeRunConfig {
        x_a: 0.0,
        x_b: 2.5,
        t_final: 0.2,
        dx: 1e-2,
        dt: 2e-3,
        initial: InitialCondition::Bump { base: 0.0, amplitude: 1.0, center: 1.0, width: 0.1 },
        reynolds: 1e6,
        stride: 10,
    };
    let d = burgers_solve(&cfg).unwrap();
    let m = d.snapshots.matrix();
    let mass = |j: usize| {
        let c = m.column(j);
        cfg.dx * (c.sum() - 0.5 * (c[0] + c[c.len() - 1]))
    };
    let m0 = mass(0);
    for j in 1..m.ncols() {
        assert!((mass(j) - m0).abs() <= 1e-3 * m0, "step {j}: {} vs {m0}", mass(j));
    }
}

#[test]
fn wave_shapes_and_standing_mode() {
    let run = wave_run(&PdeRunConfig::wave()).unwrap();
    assert_eq!((run.dataset.snapshots.rows(), run.dataset.snapshots.cols()), (101, 401));
    // The average-acceleration scheme conserves the discrete energy.
    let e0 = run.energy[0];
    assert!(run.energy.iter().all(|e| (e - e0).abs() <= 1e-10 * e0));

    let mut zero = PdeRunConfig::wave();
    zero.initial = InitialCondition::Zero;
    assert!(wave_solve(&zero).unwrap().snapshots.matrix().iter().all(|&v| v == 0.0));

    let mut mode = PdeRunConfig::wave();
    mode.initial = InitialCondition::Sine { mode: 1 };
    let d = wave_solve(&mode).unwrap();
    let pi = std::f64::consts::PI;
    let last = d.snapshots.matrix().column(d.snapshots.cols() - 1);
    for (i, x) in d.reference.axis(0).iter().enumerate() {
        let exact = (pi * 1.0).cos() * (pi * x).sin();
        assert!((last[i] - exact).abs() < 1e-3, "x={x}: {} vs {exact}", last[i]);
    }
}

fn advection(t_final: f64, center: f64) -> PdeRunConfig {
    PdeRunConfig {
        x_a: 0.0,
        x_b: 2.5,
        t_final,
        dx: 1e-2,
        dt: 2e-2,
        initial: InitialCondition::Bump { base: 0.0, amplitude: 1.0, center, width: 0.1 },
        reynolds: f64::INFINITY,
        stride: 1,
    }
}

#[test]
fn advected_profile_is_exact_and_registers_to_rank_one() {
    let (d, truth) = advecting_gaussian(0.5, &advection(3.6, 0.3)).unwrap();
    let m = d.snapshots.matrix();
    let xs = d.reference.axis(0);
    for (j, t) in d.times.iter().enumerate() {
        for (i, x) in xs.iter().enumerate() {
            assert_eq!(m[(i, j)], (-((x - 0.3 - 0.5 * t) / 0.1f64).powi(2)).exp());
        }
    }
    let plain = singular_values(&d.snapshots);
    assert!(modes_for(0.99, &plain) > 10, "{}", modes_for(0.99, &plain));
    // Node and profile move together (dx·k = c·t exactly on this lattice), so
    // the mapped data is the same column repeated.
    let mapped = map_forward(&d.snapshots, &truth, &InterpConfig::default()).unwrap();
    assert_eq!(modes_for(0.99, &singular_values(&mapped)), 1);
}

#[test]
fn advected_profile_must_stay_inside() {
    assert!(advecting_gaussian(0.5, &advection(3.6, 0.2)).is_err());
    assert!(advecting_gaussian(0.5, &advection(4.0, 0.3)).is_err());
    assert!(advecting_gaussian(f64::NAN, &advection(1.0, 0.5)).is_err());
}
