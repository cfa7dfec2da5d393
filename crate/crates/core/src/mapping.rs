//! Interpolation maps between the reference grid and a moving grid, and the
//! second-difference operators used as smoothness regularizers.
//!
//! `map_forward` (G) samples data stored on the reference nodes at the moving
//! nodes of each step. `map_inverse` (G⁻¹) takes values stored on the moving
//! nodes and interpolates them back onto the reference nodes. In 1D the moving
//! nodes are monotone so G⁻¹ is plain interpolation on a nonuniform line; in
//! 2D each reference node is located inside a deformed quadrilateral by a cell
//! walk and the bilinear cell map is inverted with Newton's method.

use std::cell::OnceCell;
use std::ops::Range;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{invalid_arg, Error, Result};
use crate::grid::{cell_volume_values, violates, MovingGrid, ReferenceGrid};
use crate::lowrank::SnapshotMatrix;
use crate::stencil::{index_weights, line_weights};

/// Interpolation settings shared by both maps. Points that fall outside the
/// interpolated domain are clamped onto its boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InterpConfig {
    /// Polynomial degree p: 1 (piecewise linear) or 3 (piecewise cubic).
    pub degree: usize,
}

impl Default for InterpConfig {
    fn default() -> Self {
        Self { degree: 1 }
    }
}

impl InterpConfig {
    pub fn new(degree: usize) -> Result<Self> {
        let cfg = Self { degree };
        cfg.validate()?;
        Ok(cfg)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.degree == 1 || self.degree == 3 {
            Ok(())
        } else {
            Err(invalid_arg(format!("interpolation degree must be 1 or 3, got {}", self.degree)))
        }
    }
}

/// Side information from [`map_inverse_with_diagnostics`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MapDiagnostics {
    /// Reference nodes that were not covered by the moving grid and received
    /// a clamped boundary value (summed over steps).
    pub clamped: usize,
}

/// Samples every column of `m` (data on the reference nodes) at the moving
/// nodes of the matching step.
pub fn map_forward(m: &SnapshotMatrix, g: &MovingGrid, cfg: &InterpConfig) -> Result<SnapshotMatrix> {
    cfg.validate()?;
    check_shape(m, g, 0)?;
    let coords = checked_coords(g, 0, m.cols())?;
    let out = forward_all(g.reference(), m.matrix(), &coords, cfg.degree);
    SnapshotMatrix::new(out)
}

/// Interpolates values living on the moving nodes back to the reference nodes.
pub fn map_inverse(latent: &SnapshotMatrix, g: &MovingGrid, cfg: &InterpConfig) -> Result<SnapshotMatrix> {
    map_inverse_with_diagnostics(latent, g, cfg).map(|(m, _)| m)
}

pub fn map_inverse_with_diagnostics(
    latent: &SnapshotMatrix,
    g: &MovingGrid,
    cfg: &InterpConfig,
) -> Result<(SnapshotMatrix, MapDiagnostics)> {
    map_inverse_from(latent, g, 0, cfg)
}

/// Like [`map_inverse`] for a block of consecutive steps: column `j` of
/// `latent` belongs to step `first_step + j`.
pub fn map_inverse_from(
    latent: &SnapshotMatrix,
    g: &MovingGrid,
    first_step: usize,
    cfg: &InterpConfig,
) -> Result<(SnapshotMatrix, MapDiagnostics)> {
    cfg.validate()?;
    check_shape(latent, g, first_step)?;
    let coords = checked_coords(g, first_step, latent.cols())?;
    let (out, clamped) = inverse_all(g.reference(), latent.matrix(), &coords, cfg.degree)?;
    Ok((SnapshotMatrix::new(out)?, MapDiagnostics { clamped }))
}

fn check_shape(m: &SnapshotMatrix, g: &MovingGrid, first_step: usize) -> Result<()> {
    if m.rows() != g.reference().len() {
        return Err(invalid_arg(format!(
            "matrix has {} rows but the grid has {} nodes",
            m.rows(),
            g.reference().len()
        )));
    }
    if first_step + m.cols() > g.steps() {
        return Err(invalid_arg(format!(
            "matrix covers steps {}..{} but the grid has {} steps",
            first_step,
            first_step + m.cols(),
            g.steps()
        )));
    }
    Ok(())
}

fn checked_coords(g: &MovingGrid, first_step: usize, count: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let coords: Vec<_> = (first_step..first_step + count).map(|n| g.assemble_unchecked(n)).collect();
    for (j, c) in coords.iter().enumerate() {
        let vols = cell_volume_values(c, g.reference());
        if let Some(v) = vols.iter().find(|&&v| violates(v, 0.0)) {
            return Err(Error::InvalidGrid {
                step: first_step + j,
                reason: format!("cell volume {v:e} is not positive"),
            });
        }
    }
    Ok(coords)
}

/// G applied column by column; `coords[n]` are the step-n node coordinates.
pub(crate) fn forward_all(reference: &ReferenceGrid, data: &DMatrix<f64>, coords: &[Vec<Vec<f64>>], degree: usize) -> DMatrix<f64> {
    let n = data.nrows();
    let mut out = DMatrix::zeros(n, coords.len());
    out.as_mut_slice().par_chunks_mut(n).zip(coords.par_iter()).enumerate().for_each(|(j, (col, c))| {
        let src = &data.as_slice()[j * n..(j + 1) * n];
        forward_column(reference, src, c, degree, col);
    });
    out
}

/// G⁻¹ applied column by column. Returns the number of clamped node values.
pub(crate) fn inverse_all(
    reference: &ReferenceGrid,
    values: &DMatrix<f64>,
    coords: &[Vec<Vec<f64>>],
    degree: usize,
) -> Result<(DMatrix<f64>, usize)> {
    let n = values.nrows();
    let mut out = DMatrix::zeros(n, coords.len());
    let clamped: Result<Vec<usize>> = out
        .as_mut_slice()
        .par_chunks_mut(n)
        .zip(coords.par_iter())
        .enumerate()
        .map(|(j, (col, c))| {
            let src = &values.as_slice()[j * n..(j + 1) * n];
            inverse_column(reference, c, src, degree, col).map_err(|e| match e {
                Error::NumericalFailure(msg) => Error::NumericalFailure(format!("step {j}: {msg}")),
                other => other,
            })
        })
        .collect();
    Ok((out, clamped?.into_iter().sum()))
}

/// Samples `data` (on the reference nodes) at the points `coords`.
pub(crate) fn forward_column(reference: &ReferenceGrid, data: &[f64], coords: &[Vec<f64>], degree: usize, out: &mut [f64]) {
    let mut wx = [0.0; 4];
    let mut wy = [0.0; 4];
    if reference.dim() == 1 {
        let line = reference.axis(0);
        let mut hint = 0;
        for (o, &x) in out.iter_mut().zip(&coords[0]) {
            let (s, m) = line_weights(line, x, degree, hint, &mut wx);
            hint = s;
            *o = (0..m).map(|k| wx[k] * data[s + k]).sum();
        }
        return;
    }
    let (lx, ly) = (reference.axis(0), reference.axis(1));
    let nx = lx.len();
    let (mut hx, mut hy) = (0, 0);
    for (i, o) in out.iter_mut().enumerate() {
        let (sx, mx) = line_weights(lx, coords[0][i], degree, hx, &mut wx);
        let (sy, my) = line_weights(ly, coords[1][i], degree, hy, &mut wy);
        hx = sx;
        hy = sy;
        let mut acc = 0.0;
        for b in 0..my {
            let row = &data[(sy + b) * nx + sx..];
            let mut line = 0.0;
            for a in 0..mx {
                line += wx[a] * row[a];
            }
            acc += wy[b] * line;
        }
        *o = acc;
    }
}

/// [`forward_column`] restricted to the nodes in the index box `nodes` (one
/// range per axis); other entries of `out` are left alone.
pub(crate) fn forward_nodes(
    reference: &ReferenceGrid,
    data: &[f64],
    coords: &[Vec<f64>],
    degree: usize,
    nodes: &[Range<usize>],
    out: &mut [f64],
) {
    let mut wx = [0.0; 4];
    let mut wy = [0.0; 4];
    if reference.dim() == 1 {
        let line = reference.axis(0);
        let mut hint = 0;
        for i in nodes[0].clone() {
            let (s, m) = line_weights(line, coords[0][i], degree, hint, &mut wx);
            hint = s;
            out[i] = (0..m).map(|k| wx[k] * data[s + k]).sum();
        }
        return;
    }
    let (lx, ly) = (reference.axis(0), reference.axis(1));
    let nx = lx.len();
    let (mut hx, mut hy) = (0, 0);
    for j in nodes[1].clone() {
        for i in nodes[0].clone() {
            let k = i + nx * j;
            let (sx, mx) = line_weights(lx, coords[0][k], degree, hx, &mut wx);
            let (sy, my) = line_weights(ly, coords[1][k], degree, hy, &mut wy);
            hx = sx;
            hy = sy;
            let mut acc = 0.0;
            for b in 0..my {
                let row = &data[(sy + b) * nx + sx..];
                let mut line = 0.0;
                for a in 0..mx {
                    line += wx[a] * row[a];
                }
                acc += wy[b] * line;
            }
            out[k] = acc;
        }
    }
}

/// Interpolates `values` (on the moving nodes `coords`) onto the reference
/// nodes. Returns how many reference nodes fell outside the moving grid.
pub(crate) fn inverse_column(
    reference: &ReferenceGrid,
    coords: &[Vec<f64>],
    values: &[f64],
    degree: usize,
    out: &mut [f64],
) -> Result<usize> {
    let placement = place(reference, coords, degree)?;
    placement.apply(reference, values, degree, out);
    Ok(placement.clamped())
}

/// Where every reference node sits inside one step of the moving grid.
#[derive(Debug, Clone)]
pub(crate) enum Placement {
    Line(Vec<LineHit>),
    Plane(Vec<Hit>),
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LineHit {
    start: usize,
    len: usize,
    w: [f64; 4],
    inside: bool,
}

impl Placement {
    pub(crate) fn clamped(&self) -> usize {
        match self {
            Placement::Line(h) => h.iter().filter(|h| !h.inside).count(),
            Placement::Plane(h) => h.iter().filter(|h| !h.inside).count(),
        }
    }

    pub(crate) fn apply(&self, reference: &ReferenceGrid, values: &[f64], degree: usize, out: &mut [f64]) {
        match self {
            Placement::Line(hits) => {
                for (o, h) in out.iter_mut().zip(hits) {
                    *o = (0..h.len).map(|k| h.w[k] * values[h.start + k]).sum();
                }
            }
            Placement::Plane(hits) => {
                let shape = reference.shape();
                for (o, h) in out.iter_mut().zip(hits) {
                    *o = h.interpolate(values, shape[0], shape[1], degree);
                }
            }
        }
    }
}

/// Locates every reference node in the moving grid `coords`.
pub(crate) fn place(reference: &ReferenceGrid, coords: &[Vec<f64>], degree: usize) -> Result<Placement> {
    if reference.dim() == 1 {
        let moving = &coords[0];
        let (lo, hi) = (moving[0], moving[moving.len() - 1]);
        let mut hint = 0;
        let hits = reference
            .axis(0)
            .iter()
            .map(|&x| {
                let mut w = [0.0; 4];
                let (start, len) = line_weights(moving, x, degree, hint, &mut w);
                hint = start;
                LineHit { start, len, w, inside: x >= lo && x <= hi }
            })
            .collect();
        return Ok(Placement::Line(hits));
    }
    let shape = reference.shape();
    let locator = Locator::new(coords, shape[0], shape[1]);
    let (lx, ly) = (reference.axis(0), reference.axis(1));
    let mut hits = Vec::with_capacity(reference.len());
    let mut seed = (0, 0);
    let mut row_seed = (0, 0);
    for &py in ly {
        for (ix, &px) in lx.iter().enumerate() {
            if ix == 0 {
                seed = row_seed;
            }
            let hit = locator.locate([px, py], seed)?;
            seed = (hit.i, hit.j);
            if ix == 0 {
                row_seed = seed;
            }
            hits.push(hit);
        }
    }
    Ok(Placement::Plane(hits))
}

/// Updates `old` after the nodes in the index box `moved` (one range per
/// axis) changed. In 2D only reference nodes whose previous cell touches a
/// moved node, or that were outside the grid, are located again; a node
/// strictly inside an untouched cell is still inside it.
pub(crate) fn replace(
    reference: &ReferenceGrid,
    coords: &[Vec<f64>],
    degree: usize,
    old: &Placement,
    moved: &[Range<usize>],
) -> Result<Placement> {
    let Placement::Plane(old) = old else {
        return place(reference, coords, degree);
    };
    let shape = reference.shape();
    let locator = Locator::new(coords, shape[0], shape[1]);
    let dirty = |r: &Range<usize>, i: usize| i + 1 >= r.start && i < r.end;
    let (lx, ly) = (reference.axis(0), reference.axis(1));
    let mut hits = old.clone();
    for (k, h) in hits.iter_mut().enumerate() {
        if h.inside && !(dirty(&moved[0], h.i) && dirty(&moved[1], h.j)) {
            continue;
        }
        *h = locator.locate([lx[k % shape[0]], ly[k / shape[0]]], (h.i, h.j))?;
    }
    Ok(Placement::Plane(hits))
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Hit {
    i: usize,
    j: usize,
    xi: f64,
    eta: f64,
    inside: bool,
}

struct Locator<'a> {
    x: &'a [f64],
    y: &'a [f64],
    nx: usize,
    ny: usize,
    boundary: OnceCell<Boundary>,
}

/// The outer boundary polygon and the centers of the boundary cells, built
/// on the first point that falls outside the grid.
struct Boundary {
    ring: Vec<[f64; 2]>,
    cells: Vec<(usize, usize, [f64; 2])>,
}

const INSIDE_TOL: f64 = 1e-10;

fn inside(l: [f64; 2]) -> bool {
    l.iter().all(|&v| (-INSIDE_TOL..=1.0 + INSIDE_TOL).contains(&v))
}

impl<'a> Locator<'a> {
    fn corners(&self, i: usize, j: usize) -> [[f64; 2]; 4] {
        let p = i + self.nx * j;
        let q = [p, p + 1, p + self.nx, p + self.nx + 1];
        q.map(|k| [self.x[k], self.y[k]])
    }

    fn locate(&self, p: [f64; 2], seed: (usize, usize)) -> Result<Hit> {
        let (mut i, mut j) = seed;
        let budget = self.nx + self.ny + 8;
        for _ in 0..budget {
            let q = self.corners(i, j);
            let est = affine_estimate(&q, p);
            let local = if est.iter().all(|&v| (-0.25..=1.25).contains(&v)) {
                newton_bilinear(&q, p, est).ok_or_else(|| {
                    Error::NumericalFailure(format!("inverse bilinear Newton did not converge in cell ({i}, {j})"))
                })?
            } else {
                est
            };
            if inside(local) {
                return Ok(self.hit(i, j, local, true));
            }
            let step = |v: f64| if v < 0.0 { -1 } else if v > 1.0 { 1 } else { 0 };
            let ni = (i as isize + step(local[0])).clamp(0, self.nx as isize - 2) as usize;
            let nj = (j as isize + step(local[1])).clamp(0, self.ny as isize - 2) as usize;
            if (ni, nj) == (i, j) {
                break;
            }
            i = ni;
            j = nj;
        }
        self.brute_force(p)
    }

    fn new(coords: &'a [Vec<f64>], nx: usize, ny: usize) -> Self {
        Self { x: &coords[0], y: &coords[1], nx, ny, boundary: OnceCell::new() }
    }

    fn center(&self, i: usize, j: usize) -> [f64; 2] {
        let q = self.corners(i, j);
        [(q[0][0] + q[1][0] + q[2][0] + q[3][0]) / 4.0, (q[0][1] + q[1][1] + q[2][1] + q[3][1]) / 4.0]
    }

    fn boundary(&self) -> &Boundary {
        self.boundary.get_or_init(|| {
            let (nx, ny) = (self.nx, self.ny);
            let ring = (0..nx)
                .chain((1..ny).map(|j| nx - 1 + nx * j))
                .chain((0..nx - 1).rev().map(|i| i + nx * (ny - 1)))
                .chain((0..ny - 1).rev().map(|j| nx * j))
                .map(|k| [self.x[k], self.y[k]])
                .collect();
            let (cx, cy) = (nx - 1, ny - 1);
            let cells = (0..cx)
                .map(|i| (i, 0))
                .chain((1..cy).map(|j| (cx - 1, j)))
                .chain((0..cx.saturating_sub(1)).rev().map(|i| (i, cy - 1)))
                .chain((1..cy.saturating_sub(1)).rev().map(|j| (0, j)))
                .map(|(i, j)| (i, j, self.center(i, j)))
                .collect();
            Boundary { ring, cells }
        })
    }

    /// Even-odd crossing test against the outer boundary of the grid.
    fn encloses(&self, p: [f64; 2]) -> bool {
        let mut odd = false;
        for w in self.boundary().ring.windows(2) {
            let (prev, cur) = (w[0], w[1]);
            if (cur[1] > p[1]) != (prev[1] > p[1]) {
                let x = prev[0] + (p[1] - prev[1]) * (cur[0] - prev[0]) / (cur[1] - prev[1]);
                if p[0] < x {
                    odd = !odd;
                }
            }
        }
        odd
    }

    /// Exhaustive search for points the walk could not place. Points outside
    /// the grid are clamped into the boundary cell with the nearest center.
    fn brute_force(&self, p: [f64; 2]) -> Result<Hit> {
        let (nx, ny) = (self.nx - 1, self.ny - 1);
        if !self.encloses(p) {
            let cells = self.boundary().cells.iter().copied();
            return Ok(self.clamp_to_nearest(p, cells));
        }
        for j in 0..ny {
            for i in 0..nx {
                let q = self.corners(i, j);
                let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
                for c in &q {
                    for a in 0..2 {
                        lo[a] = lo[a].min(c[a]);
                        hi[a] = hi[a].max(c[a]);
                    }
                }
                let pad = 1e-9 * (hi[0] - lo[0] + hi[1] - lo[1]);
                if (0..2).all(|a| p[a] >= lo[a] - pad && p[a] <= hi[a] + pad) {
                    if let Some(local) = newton_bilinear(&q, p, affine_estimate(&q, p)) {
                        if inside(local) {
                            return Ok(self.hit(i, j, local, true));
                        }
                    }
                }
            }
        }
        let all = (0..ny).flat_map(|j| (0..nx).map(move |i| (i, j, self.center(i, j))));
        Ok(self.clamp_to_nearest(p, all))
    }

    fn clamp_to_nearest(&self, p: [f64; 2], cells: impl Iterator<Item = (usize, usize, [f64; 2])>) -> Hit {
        let mut nearest = (f64::INFINITY, 0, 0);
        for (i, j, c) in cells {
            let d = (c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2);
            if d < nearest.0 {
                nearest = (d, i, j);
            }
        }
        let (_, i, j) = nearest;
        let q = self.corners(i, j);
        let est = affine_estimate(&q, p);
        let local = newton_bilinear(&q, p, est).unwrap_or(est);
        self.hit(i, j, local, false)
    }

    fn hit(&self, i: usize, j: usize, local: [f64; 2], inside: bool) -> Hit {
        Hit { i, j, xi: local[0].clamp(0.0, 1.0), eta: local[1].clamp(0.0, 1.0), inside }
    }
}

impl Hit {
    fn interpolate(&self, values: &[f64], nx: usize, ny: usize, degree: usize) -> f64 {
        if degree == 1 {
            let p = self.i + nx * self.j;
            let (a, b) = (self.xi, self.eta);
            return (1.0 - b) * ((1.0 - a) * values[p] + a * values[p + 1])
                + b * ((1.0 - a) * values[p + nx] + a * values[p + nx + 1]);
        }
        let mut wx = [0.0; 4];
        let mut wy = [0.0; 4];
        let (sx, mx) = index_weights(nx, self.i as f64 + self.xi, degree, &mut wx);
        let (sy, my) = index_weights(ny, self.j as f64 + self.eta, degree, &mut wy);
        let mut acc = 0.0;
        for b in 0..my {
            for a in 0..mx {
                acc += wx[a] * wy[b] * values[sx + a + nx * (sy + b)];
            }
        }
        acc
    }
}

/// Local coordinates of `p` under the affine map through the cell center with
/// the center Jacobian.
fn affine_estimate(q: &[[f64; 2]; 4], p: [f64; 2]) -> [f64; 2] {
    let c = [(q[0][0] + q[1][0] + q[2][0] + q[3][0]) / 4.0, (q[0][1] + q[1][1] + q[2][1] + q[3][1]) / 4.0];
    let dxi = [0.5 * (q[1][0] + q[3][0] - q[0][0] - q[2][0]), 0.5 * (q[1][1] + q[3][1] - q[0][1] - q[2][1])];
    let deta = [0.5 * (q[2][0] + q[3][0] - q[0][0] - q[1][0]), 0.5 * (q[2][1] + q[3][1] - q[0][1] - q[1][1])];
    let det = dxi[0] * deta[1] - deta[0] * dxi[1];
    let (rx, ry) = (p[0] - c[0], p[1] - c[1]);
    [0.5 + (rx * deta[1] - deta[0] * ry) / det, 0.5 + (dxi[0] * ry - rx * dxi[1]) / det]
}

fn bilinear_point(q: &[[f64; 2]; 4], l: [f64; 2]) -> [f64; 2] {
    let (a, b) = (l[0], l[1]);
    let w = [(1.0 - a) * (1.0 - b), a * (1.0 - b), (1.0 - a) * b, a * b];
    [
        w[0] * q[0][0] + w[1] * q[1][0] + w[2] * q[2][0] + w[3] * q[3][0],
        w[0] * q[0][1] + w[1] * q[1][1] + w[2] * q[2][1] + w[3] * q[3][1],
    ]
}

/// Inverts the bilinear map of cell `q` at `p` by Newton's method
/// (tolerance 1e-12 in local coordinates, at most 25 iterations).
fn newton_bilinear(q: &[[f64; 2]; 4], p: [f64; 2], start: [f64; 2]) -> Option<[f64; 2]> {
    let mut l = start;
    for _ in 0..25 {
        let x = bilinear_point(q, l);
        let (fx, fy) = (x[0] - p[0], x[1] - p[1]);
        let (a, b) = (l[0], l[1]);
        let j00 = (1.0 - b) * (q[1][0] - q[0][0]) + b * (q[3][0] - q[2][0]);
        let j10 = (1.0 - b) * (q[1][1] - q[0][1]) + b * (q[3][1] - q[2][1]);
        let j01 = (1.0 - a) * (q[2][0] - q[0][0]) + a * (q[3][0] - q[1][0]);
        let j11 = (1.0 - a) * (q[2][1] - q[0][1]) + a * (q[3][1] - q[1][1]);
        let det = j00 * j11 - j01 * j10;
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let da = (fx * j11 - j01 * fy) / det;
        let db = (j00 * fy - fx * j10) / det;
        l = [a - da, b - db];
        if da.abs().max(db.abs()) <= 1e-12 {
            return Some(l);
        }
        if !l[0].is_finite() || !l[1].is_finite() {
            return None;
        }
    }
    None
}

/// A scaled second-difference matrix. Interior rows use the centered
/// `[1, -2, 1]` stencil; the first and last rows reuse it shifted inward
/// (one-sided).
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceOperator {
    size: usize,
    scale: f64,
    matrix: DMatrix<f64>,
}

pub fn second_difference(n: usize, scale: f64) -> Result<DifferenceOperator> {
    if n < 3 {
        return Err(invalid_arg(format!("second differences need at least 3 points, got {n}")));
    }
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(invalid_arg(format!("difference scale must be finite and >= 0, got {scale}")));
    }
    let mut matrix = DMatrix::zeros(n, n);
    for i in 0..n {
        let c = i.clamp(1, n - 2);
        matrix[(i, c - 1)] = scale;
        matrix[(i, c)] = -2.0 * scale;
        matrix[(i, c + 1)] = scale;
    }
    Ok(DifferenceOperator { size: n, scale, matrix })
}

impl DifferenceOperator {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// `D·v` for a vector of length `size`, without forming the product.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        self.apply_strided(v, 1, &mut out);
        out
    }

    /// Applies the operator along a strided line of `size` values starting
    /// at `v[0]`, writing results with the same stride.
    pub(crate) fn apply_strided(&self, v: &[f64], stride: usize, out: &mut [f64]) {
        let n = self.size;
        for i in 0..n {
            let c = i.clamp(1, n - 2);
            out[i * stride] = self.scale * (v[(c - 1) * stride] - 2.0 * v[c * stride] + v[(c + 1) * stride]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{AxisFactors, GridLayout};

    fn identity_grid_1d(n: usize, k: usize) -> MovingGrid {
        let r = ReferenceGrid::uniform_1d(0.0, 1.0, n).unwrap();
        MovingGrid::init_from_reference(&r, &GridLayout::full(&r, 1, k), 0.0, 0).unwrap()
    }

    #[test]
    fn difference_operator_examples() {
        let d = second_difference(5, 1.0).unwrap();
        assert!(d.apply(&[0.0, 1.0, 2.0, 3.0, 4.0]).iter().all(|v| v.abs() < 1e-12));
        let sq = d.apply(&[0.0, 1.0, 4.0, 9.0, 16.0]);
        assert_eq!(&sq[1..4], &[2.0, 2.0, 2.0]);
        let v = nalgebra::DVector::from_vec(vec![0.0, 1.0, 4.0, 9.0, 16.0]);
        assert_eq!((d.matrix() * v).as_slice(), sq.as_slice());
        assert!(second_difference(2, 1.0).is_err());
        assert_eq!(second_difference(50, 100.0).unwrap().matrix()[(10, 10)], -200.0);
    }

    #[test]
    fn identity_maps_1d() {
        let g = identity_grid_1d(21, 4);
        let m = SnapshotMatrix::new(DMatrix::from_fn(21, 4, |i, j| ((i * 7 + j * 3) % 5) as f64)).unwrap();
        for degree in [1, 3] {
            let cfg = InterpConfig::new(degree).unwrap();
            assert!((map_forward(&m, &g, &cfg).unwrap().matrix() - m.matrix()).amax() < 1e-14);
            assert!((map_inverse(&m, &g, &cfg).unwrap().matrix() - m.matrix()).amax() < 1e-14);
        }
    }

    #[test]
    fn linear_field_exact_on_stretched_grid() {
        let r = ReferenceGrid::uniform_1d(0.0, 1.0, 11).unwrap();
        let mut layout = GridLayout::full(&r, 1, 3);
        layout.boundary_pinned = false;
        let basis = DMatrix::from_fn(11, 1, |i, _| (i as f64 / 10.0).powf(1.3));
        let coeffs = DMatrix::from_row_slice(1, 3, &[1.0, 0.9, 1.1]);
        let g = MovingGrid::from_factors(r.clone(), layout, vec![AxisFactors { basis, coeffs }]).unwrap();
        let m = SnapshotMatrix::new(DMatrix::from_fn(11, 3, |i, _| 2.0 * r.axis(0)[i] + 1.0)).unwrap();
        let cfg = InterpConfig::default();
        let f = map_forward(&m, &g, &cfg).unwrap();
        for n in 0..3 {
            let x = g.assemble(n).unwrap();
            for i in 0..11 {
                let expect = 2.0 * x[0][i].clamp(0.0, 1.0) + 1.0;
                assert!((f.matrix()[(i, n)] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn reversed_grid_rejected() {
        let r = ReferenceGrid::uniform_1d(0.0, 1.0, 5).unwrap();
        let mut layout = GridLayout::full(&r, 1, 2);
        layout.boundary_pinned = false;
        let basis = DMatrix::from_column_slice(5, 1, r.axis(0));
        let coeffs = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let g = MovingGrid::from_factors(r, layout, vec![AxisFactors { basis, coeffs }]).unwrap();
        let m = SnapshotMatrix::new(DMatrix::zeros(5, 2)).unwrap();
        match map_forward(&m, &g, &InterpConfig::default()) {
            Err(Error::InvalidGrid { step, .. }) => assert_eq!(step, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn newton_inverts_skewed_cell() {
        let q = [[0.0, 0.0], [1.0, 0.1], [0.2, 1.0], [1.4, 1.3]];
        let l = [0.3, 0.8];
        let p = bilinear_point(&q, l);
        let got = newton_bilinear(&q, p, affine_estimate(&q, p)).unwrap();
        assert!((got[0] - l[0]).abs() < 1e-12 && (got[1] - l[1]).abs() < 1e-12);
    }

    #[test]
    fn identity_maps_2d() {
        let r = ReferenceGrid::uniform_2d((0.0, 1.0), (0.0, 2.0), 6, 5).unwrap();
        let g = MovingGrid::init_from_reference(&r, &GridLayout::full(&r, 1, 3), 0.0, 0).unwrap();
        let m = SnapshotMatrix::new(DMatrix::from_fn(30, 3, |i, j| (i as f64).sin() + j as f64)).unwrap();
        for degree in [1, 3] {
            let cfg = InterpConfig::new(degree).unwrap();
            let f = map_forward(&m, &g, &cfg).unwrap();
            let (b, d) = map_inverse_with_diagnostics(&f, &g, &cfg).unwrap();
            assert_eq!(d.clamped, 0);
            assert!((b.matrix() - m.matrix()).norm() < 1e-12);
        }
    }
}
