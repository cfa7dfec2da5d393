//! Snapshot generators: a rotated glyph image, viscous Burgers, the 1D wave
//! equation, and an analytically advected Gaussian with its exact grid.
//!
//! All generators are deterministic. 2D images are flattened x-fastest on a
//! `[0, 1]²` pixel grid (pixel `i` sits at `i / (size - 1)`).

use nalgebra::DMatrix;

use crate::error::{invalid_arg, Error, Result};
use crate::grid::{AxisFactors, GridLayout, MovingGrid, ReferenceGrid};
use crate::lowrank::SnapshotMatrix;

/// Generated snapshots together with their grid and sample times (or
/// parameter values, for the glyph: rotation angles in degrees).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub snapshots: SnapshotMatrix,
    pub reference: ReferenceGrid,
    pub times: Vec<f64>,
}

/// Initial state of a 1D run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialCondition {
    Zero,
    /// `base + amplitude · exp(-(x - center)² / width²)`
    Bump { base: f64, amplitude: f64, center: f64, width: f64 },
    /// `sin(mode · π (x - x_a) / (x_b - x_a))`
    Sine { mode: u32 },
}

impl InitialCondition {
    pub fn eval(&self, x: f64, x_a: f64, x_b: f64) -> f64 {
        match *self {
            Self::Zero => 0.0,
            Self::Bump { base, amplitude, center, width } => {
                base + amplitude * (-((x - center) / width).powi(2)).exp()
            }
            Self::Sine { mode } => (mode as f64 * std::f64::consts::PI * (x - x_a) / (x_b - x_a)).sin(),
        }
    }
}

/// Discretization of a 1D time-dependent run.
#[derive(Debug, Clone, PartialEq)]
pub struct PdeRunConfig {
    pub x_a: f64,
    pub x_b: f64,
    pub t_final: f64,
    pub dx: f64,
    pub dt: f64,
    pub initial: InitialCondition,
    /// Burgers only; `f64::INFINITY` gives the inviscid equation.
    pub reynolds: f64,
    /// Keep every `stride`-th time step (step 0 always included).
    pub stride: usize,
}

impl PdeRunConfig {
    /// Burgers on `[0, 2.5]` up to `T = 1` with `Δt = 8e-3`, `Δx = 1e-2`,
    /// `Re = 1000` and `w_0 = 0.8 + 0.5 exp(-(x - 0.5)² / 0.1²)`.
    pub fn burgers() -> Self {
        Self {
            x_a: 0.0,
            x_b: 2.5,
            t_final: 1.0,
            dx: 1e-2,
            dt: 8e-3,
            initial: InitialCondition::Bump { base: 0.8, amplitude: 0.5, center: 0.5, width: 0.1 },
            reynolds: 1000.0,
            stride: 1,
        }
    }

    /// Wave equation on `[0, 1]` up to `T = 1` with `Δt = 2.5e-3`,
    /// `Δx = 1e-2` and `w_0 = exp(-(x - 0.5)² / 0.1²)`.
    pub fn wave() -> Self {
        Self {
            x_a: 0.0,
            x_b: 1.0,
            t_final: 1.0,
            dx: 1e-2,
            dt: 2.5e-3,
            initial: InitialCondition::Bump { base: 0.0, amplitude: 1.0, center: 0.5, width: 0.1 },
            reynolds: f64::INFINITY,
            stride: 1,
        }
    }

    /// Node count and time-step count, checking that both divide exactly.
    pub fn counts(&self) -> Result<(usize, usize)> {
        for (name, v) in [("dx", self.dx), ("dt", self.dt), ("t_final", self.t_final)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid_arg(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.x_b > self.x_a) {
            return Err(invalid_arg(format!("empty domain [{}, {}]", self.x_a, self.x_b)));
        }
        if self.stride == 0 {
            return Err(invalid_arg("stride must be at least 1"));
        }
        let cells = exact_ratio(self.x_b - self.x_a, self.dx, "dx does not divide the domain")?;
        let steps = exact_ratio(self.t_final, self.dt, "dt does not divide t_final")?;
        if cells < 2 {
            return Err(invalid_arg("the domain needs at least two cells"));
        }
        Ok((cells + 1, steps))
    }

    fn reference(&self, nodes: usize) -> Result<ReferenceGrid> {
        ReferenceGrid::uniform_1d(self.x_a, self.x_b, nodes)
    }

    fn kept_steps(&self, steps: usize) -> Vec<usize> {
        (0..=steps).step_by(self.stride).collect()
    }
}

fn exact_ratio(a: f64, b: f64, msg: &str) -> Result<usize> {
    let r = a / b;
    let n = r.round();
    if n < 1.0 || (r - n).abs() > 1e-9 * n {
        return Err(invalid_arg(format!("{msg} ({a} / {b} = {r})")));
    }
    Ok(n as usize)
}

/// Built-in stroke glyphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Glyph {
    /// Capital letter A from three strokes.
    LetterA,
    /// A plus sign, symmetric under quarter turns about the image center.
    Cross,
}

impl Glyph {
    fn strokes(self) -> &'static [[f64; 4]] {
        match self {
            Glyph::LetterA => &[[0.2, 0.15, 0.5, 0.85], [0.8, 0.15, 0.5, 0.85], [0.33, 0.45, 0.67, 0.45]],
            Glyph::Cross => &[[0.2, 0.5, 0.8, 0.5], [0.5, 0.2, 0.5, 0.8]],
        }
    }
}

const STROKE_WIDTH: f64 = 0.1;

/// Anti-aliased raster of `glyph` on a `size × size` pixel grid, x-fastest.
pub fn rasterize(glyph: Glyph, size: usize) -> Vec<f64> {
    let h = 1.0 / (size - 1) as f64;
    let mut img = vec![0.0; size * size];
    for j in 0..size {
        for i in 0..size {
            let p = [i as f64 * h, j as f64 * h];
            let d = glyph.strokes().iter().map(|s| segment_distance(p, s)).fold(f64::INFINITY, f64::min);
            img[i + size * j] = (0.5 + (0.5 * STROKE_WIDTH - d) / h).clamp(0.0, 1.0);
        }
    }
    img
}

fn segment_distance(p: [f64; 2], s: &[f64; 4]) -> f64 {
    let (ax, ay, bx, by) = (s[0], s[1], s[2], s[3]);
    let (dx, dy) = (bx - ax, by - ay);
    let t = (((p[0] - ax) * dx + (p[1] - ay) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    ((p[0] - ax - t * dx).powi(2) + (p[1] - ay - t * dy).powi(2)).sqrt()
}

/// Rotates a square image counterclockwise by `degrees` about its center,
/// resampling bilinearly. Samples that fall outside the image are 0.
pub fn rotate_image(img: &[f64], size: usize, degrees: f64) -> Vec<f64> {
    let (s, c) = degrees.to_radians().sin_cos();
    let mid = 0.5 * (size - 1) as f64;
    let last = (size - 1) as f64;
    let mut out = vec![0.0; size * size];
    for j in 0..size {
        for i in 0..size {
            let (x, y) = (i as f64 - mid, j as f64 - mid);
            // Pull back through the inverse rotation.
            let u = mid + c * x + s * y;
            let v = mid - s * x + c * y;
            if !(0.0..=last).contains(&u) || !(0.0..=last).contains(&v) {
                continue;
            }
            let (iu, iv) = ((u.floor() as usize).min(size - 2), (v.floor() as usize).min(size - 2));
            let (a, b) = (u - iu as f64, v - iv as f64);
            let at = |p: usize, q: usize| img[p + size * q];
            out[i + size * j] = (1.0 - b) * ((1.0 - a) * at(iu, iv) + a * at(iu + 1, iv))
                + b * ((1.0 - a) * at(iu, iv + 1) + a * at(iu + 1, iv + 1));
        }
    }
    out
}

/// The letter A rotated from 0 to `total_degrees` in steps of `increment`,
/// one column per angle.
pub fn rotated_glyph(size: usize, total_degrees: f64, increment: f64) -> Result<Dataset> {
    rotated_glyph_with(Glyph::LetterA, size, total_degrees, increment)
}

pub fn rotated_glyph_with(glyph: Glyph, size: usize, total_degrees: f64, increment: f64) -> Result<Dataset> {
    if size < 8 {
        return Err(invalid_arg(format!("glyph size must be at least 8, got {size}")));
    }
    if !total_degrees.is_finite() || !increment.is_finite() || total_degrees < 0.0 || increment < 0.0 {
        return Err(invalid_arg("rotation angles must be finite and non-negative"));
    }
    let angles: Vec<f64> = if total_degrees == 0.0 {
        vec![0.0]
    } else {
        if increment == 0.0 {
            return Err(invalid_arg("a nonzero total rotation needs a nonzero increment"));
        }
        let count = exact_ratio(total_degrees, increment, "increment does not divide the total rotation")?;
        (0..=count).map(|k| k as f64 * increment).collect()
    };
    let base = rasterize(glyph, size);
    let columns: Vec<Vec<f64>> = angles
        .iter()
        .map(|&a| if a == 0.0 { base.clone() } else { rotate_image(&base, size, a) })
        .collect();
    Ok(Dataset {
        snapshots: SnapshotMatrix::from_columns(&columns)?,
        reference: ReferenceGrid::uniform_2d((0.0, 1.0), (0.0, 1.0), size, size)?,
        times: angles,
    })
}

/// Solves `w_t + w w_x = w_xx / Re` with `w = 0` at both ends, Crank–Nicolson
/// in time, conservative central differences in space and Newton iterations
/// on every step.
pub fn burgers_solve(cfg: &PdeRunConfig) -> Result<Dataset> {
    if !(cfg.reynolds > 0.0) {
        return Err(invalid_arg(format!("Reynolds number must be positive, got {}", cfg.reynolds)));
    }
    let (n, steps) = cfg.counts()?;
    let reference = cfg.reference(n)?;
    let xs = reference.axis(0).to_vec();
    let nu = 1.0 / cfg.reynolds;
    let (dx, dt) = (cfg.dx, cfg.dt);
    let mut w: Vec<f64> = xs.iter().map(|&x| cfg.initial.eval(x, cfg.x_a, cfg.x_b)).collect();
    w[0] = 0.0;
    w[n - 1] = 0.0;

    let flux = |w: &[f64], out: &mut [f64]| {
        for i in 1..n - 1 {
            out[i] = (w[i + 1] * w[i + 1] - w[i - 1] * w[i - 1]) / (4.0 * dx)
                - nu * (w[i + 1] - 2.0 * w[i] + w[i - 1]) / (dx * dx);
        }
    };
    let kept = cfg.kept_steps(steps);
    let mut columns = Vec::with_capacity(kept.len());
    let mut times = Vec::with_capacity(kept.len());
    let mut next_keep = kept.iter().peekable();
    let mut f_old = vec![0.0; n];
    let mut f_new = vec![0.0; n];
    let (mut lower, mut diag, mut upper, mut rhs) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for step in 0..=steps {
        if next_keep.peek() == Some(&&step) {
            next_keep.next();
            columns.push(w.clone());
            times.push(step as f64 * dt);
        }
        if step == steps {
            break;
        }
        flux(&w, &mut f_old);
        let w_old = w.clone();
        let mut converged = false;
        for _ in 0..20 {
            flux(&w, &mut f_new);
            for i in 1..n - 1 {
                rhs[i] = -(w[i] - w_old[i] + 0.5 * dt * (f_new[i] + f_old[i]));
                lower[i] = 0.5 * dt * (-w[i - 1] / (2.0 * dx) - nu / (dx * dx));
                diag[i] = 1.0 + 0.5 * dt * 2.0 * nu / (dx * dx);
                upper[i] = 0.5 * dt * (w[i + 1] / (2.0 * dx) - nu / (dx * dx));
            }
            let delta = solve_tridiagonal(&lower[1..n - 1], &diag[1..n - 1], &upper[1..n - 1], &rhs[1..n - 1])
                .ok_or_else(|| Error::NumericalFailure(format!("singular Newton system at step {}", step + 1)))?;
            let mut change: f64 = 0.0;
            for (i, d) in delta.iter().enumerate() {
                w[i + 1] += d;
                change = change.max(d.abs());
            }
            if !change.is_finite() {
                break;
            }
            if change <= 1e-10 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NumericalFailure(format!("Burgers Newton iteration diverged at step {}", step + 1)));
        }
    }
    Ok(Dataset { snapshots: SnapshotMatrix::from_columns(&columns)?, reference, times })
}

/// Thomas algorithm; `lower[0]` and `upper[last]` are ignored.
pub(crate) fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = diag[0];
    if denom == 0.0 {
        return None;
    }
    c[0] = upper[0] / denom;
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - lower[i] * c[i - 1];
        if denom == 0.0 || !denom.is_finite() {
            return None;
        }
        c[i] = upper[i] / denom;
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Some(d)
}

/// Displacement history of the wave equation together with its discrete
/// energy at every kept step.
#[derive(Debug, Clone)]
pub struct WaveRun {
    pub dataset: Dataset,
    /// `½ vᵀv Δx + ½ uᵀ K u Δx` with K the negated discrete Laplacian.
    pub energy: Vec<f64>,
}

/// Solves `w_tt = w_xx` with `w = 0` at both ends and zero initial velocity
/// by the average-acceleration Newmark scheme.
pub fn wave_solve(cfg: &PdeRunConfig) -> Result<Dataset> {
    wave_run(cfg).map(|r| r.dataset)
}

pub fn wave_run(cfg: &PdeRunConfig) -> Result<WaveRun> {
    let (n, steps) = cfg.counts()?;
    let reference = cfg.reference(n)?;
    let (dx, dt) = (cfg.dx, cfg.dt);
    let (beta, gamma) = (0.25, 0.5);
    let m = n - 2;
    let k_apply = |u: &[f64], out: &mut [f64]| {
        for i in 0..m {
            let left = if i > 0 { u[i - 1] } else { 0.0 };
            let right = if i + 1 < m { u[i + 1] } else { 0.0 };
            out[i] = -(left - 2.0 * u[i] + right) / (dx * dx);
        }
    };
    let energy = |u: &[f64], v: &[f64]| {
        let mut ku = vec![0.0; m];
        k_apply(u, &mut ku);
        0.5 * dx * (v.iter().map(|a| a * a).sum::<f64>() + u.iter().zip(&ku).map(|(a, b)| a * b).sum::<f64>())
    };

    let xs = reference.axis(0);
    let mut u: Vec<f64> = xs[1..n - 1].iter().map(|&x| cfg.initial.eval(x, cfg.x_a, cfg.x_b)).collect();
    let mut v = vec![0.0; m];
    let mut a = vec![0.0; m];
    k_apply(&u, &mut a);
    a.iter_mut().for_each(|x| *x = -*x);

    let off = -beta * dt * dt / (dx * dx);
    let lower = vec![off; m];
    let upper = vec![off; m];
    let diag = vec![1.0 + 2.0 * beta * dt * dt / (dx * dx); m];

    let kept = cfg.kept_steps(steps);
    let mut columns = Vec::with_capacity(kept.len());
    let mut times = Vec::with_capacity(kept.len());
    let mut energies = Vec::with_capacity(kept.len());
    let mut next_keep = kept.iter().peekable();
    let mut pred = vec![0.0; m];
    let mut rhs = vec![0.0; m];
    for step in 0..=steps {
        if next_keep.peek() == Some(&&step) {
            next_keep.next();
            let mut col = Vec::with_capacity(n);
            col.push(0.0);
            col.extend_from_slice(&u);
            col.push(0.0);
            columns.push(col);
            times.push(step as f64 * dt);
            energies.push(energy(&u, &v));
        }
        if step == steps {
            break;
        }
        for i in 0..m {
            pred[i] = u[i] + dt * v[i] + (0.5 - beta) * dt * dt * a[i];
        }
        k_apply(&pred, &mut rhs);
        rhs.iter_mut().for_each(|x| *x = -*x);
        let a_new = solve_tridiagonal(&lower, &diag, &upper, &rhs)
            .ok_or_else(|| Error::NumericalFailure(format!("singular Newmark system at step {}", step + 1)))?;
        for i in 0..m {
            u[i] = pred[i] + beta * dt * dt * a_new[i];
            v[i] += dt * ((1.0 - gamma) * a[i] + gamma * a_new[i]);
        }
        a = a_new;
    }
    Ok(WaveRun {
        dataset: Dataset { snapshots: SnapshotMatrix::from_columns(&columns)?, reference, times },
        energy: energies,
    })
}

/// Samples `exp(-(x - x_0 - c t)² / s²)` exactly, where the initial
/// condition of `cfg` must be a zero-base unit bump giving `x_0` and `s`.
/// Also returns the exact rank-2 grid `x_ref + c t_n` (boundaries free).
/// The center has to stay at least three widths inside the domain.
pub fn advecting_gaussian(c: f64, cfg: &PdeRunConfig) -> Result<(Dataset, MovingGrid)> {
    let InitialCondition::Bump { base, amplitude, center, width } = cfg.initial else {
        return Err(invalid_arg("the advecting Gaussian needs a bump initial condition"));
    };
    if base != 0.0 || amplitude != 1.0 || !(width > 0.0) {
        return Err(invalid_arg("the advecting Gaussian needs base 0, amplitude 1 and a positive width"));
    }
    if !c.is_finite() {
        return Err(invalid_arg("advection speed must be finite"));
    }
    let (n, steps) = cfg.counts()?;
    let reference = cfg.reference(n)?;
    let times: Vec<f64> = cfg.kept_steps(steps).iter().map(|&k| k as f64 * cfg.dt).collect();
    for &t in &times {
        let mid = center + c * t;
        let slack = 1e-12 * (cfg.x_b - cfg.x_a);
        if mid < cfg.x_a + 3.0 * width - slack || mid > cfg.x_b - 3.0 * width + slack {
            return Err(invalid_arg(format!(
                "the profile center {mid} leaves the domain interior at t = {t}"
            )));
        }
    }
    let xs = reference.axis(0);
    let m = DMatrix::from_fn(n, times.len(), |i, j| (-((xs[i] - center - c * times[j]) / width).powi(2)).exp());
    let k = times.len();
    let mut layout = GridLayout::full(&reference, 2, k);
    layout.boundary_pinned = false;
    let basis = DMatrix::from_fn(n, 2, |i, col| if col == 0 { xs[i] } else { 1.0 });
    let coeffs = DMatrix::from_fn(2, k, |row, j| if row == 0 { 1.0 } else { c * times[j] });
    let grid = MovingGrid::from_factors(reference.clone(), layout, vec![AxisFactors { basis, coeffs }])?;
    Ok((Dataset { snapshots: SnapshotMatrix::new(m)?, reference, times }, grid))
}
