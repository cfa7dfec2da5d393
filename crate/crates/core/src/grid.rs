//! Reference grids and the low-rank moving grid.
//!
//! A moving grid stores, per coordinate axis, a control basis `U` (N_c×r)
//! and control coefficients `V` (r×K_c). The coordinates at step `n` are
//! `U·v[n]` evaluated on the control lattice, expanded to the fine nodes
//! (piecewise cubic in space, piecewise linear across steps), plus a fixed
//! correction that makes the unperturbed initialization reproduce the
//! reference grid. With boundary pinning active, boundary nodes are written
//! back to their reference coordinates after assembly.

use std::ops::Range;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid_arg, Result};
use crate::lowrank::{orthonormalize_columns, truncated_svd, SnapshotMatrix};
use crate::stencil::index_weights;

/// Per-axis node coordinates, each of length N (x index fastest in 2D).
pub type NodeCoords = Vec<Vec<f64>>;

/// A fixed tensor-product grid in one or two dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceGrid {
    axes: Vec<Vec<f64>>,
}

impl ReferenceGrid {
    pub fn new_1d(xs: Vec<f64>) -> Result<Self> {
        Self::from_axes(vec![xs])
    }

    pub fn new_2d(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        Self::from_axes(vec![xs, ys])
    }

    pub fn uniform_1d(a: f64, b: f64, n: usize) -> Result<Self> {
        Self::new_1d(linspace(a, b, n)?)
    }

    pub fn uniform_2d(x: (f64, f64), y: (f64, f64), nx: usize, ny: usize) -> Result<Self> {
        Self::new_2d(linspace(x.0, x.1, nx)?, linspace(y.0, y.1, ny)?)
    }

    pub fn from_axes(axes: Vec<Vec<f64>>) -> Result<Self> {
        if axes.is_empty() || axes.len() > 2 {
            return Err(invalid_arg(format!("grids must be 1D or 2D, got {} axes", axes.len())));
        }
        for (a, line) in axes.iter().enumerate() {
            if line.len() < 2 {
                return Err(invalid_arg(format!("axis {a} needs at least two nodes")));
            }
            if line.iter().any(|v| !v.is_finite()) || line.windows(2).any(|w| w[1] <= w[0]) {
                return Err(invalid_arg(format!("axis {a} coordinates must be finite and strictly increasing")));
            }
        }
        Ok(Self { axes })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    /// Node counts per axis.
    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(Vec::len).collect()
    }

    /// Total node count N.
    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// The coordinate line of `axis`.
    pub fn axis(&self, axis: usize) -> &[f64] {
        &self.axes[axis]
    }

    pub fn domain_length(&self, axis: usize) -> f64 {
        let line = &self.axes[axis];
        line[line.len() - 1] - line[0]
    }

    pub fn coord(&self, axis: usize, node: usize) -> f64 {
        match (self.dim(), axis) {
            (1, _) => self.axes[0][node],
            (_, 0) => self.axes[0][node % self.axes[0].len()],
            _ => self.axes[1][node / self.axes[0].len()],
        }
    }

    /// Per-node coordinates for every axis.
    pub fn coords(&self) -> NodeCoords {
        (0..self.dim()).map(|a| (0..self.len()).map(|i| self.coord(a, i)).collect()).collect()
    }

    pub fn boundary_mask(&self) -> Vec<bool> {
        let shape = self.shape();
        (0..self.len())
            .map(|i| {
                if shape.len() == 1 {
                    i == 0 || i == shape[0] - 1
                } else {
                    let (ix, iy) = (i % shape[0], i / shape[0]);
                    ix == 0 || iy == 0 || ix == shape[0] - 1 || iy == shape[1] - 1
                }
            })
            .collect()
    }

    pub fn cell_count(&self) -> usize {
        self.axes.iter().map(|l| l.len() - 1).product()
    }

    /// Smallest cell volume of the reference grid itself.
    pub fn min_cell_volume(&self) -> f64 {
        self.axes
            .iter()
            .map(|l| l.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min))
            .product()
    }

    /// Coordinate along `axis` at fractional node index `f` (linear between nodes).
    fn coord_at_index(&self, axis: usize, f: f64) -> f64 {
        let line = &self.axes[axis];
        let i = (f.floor() as usize).min(line.len() - 2);
        let t = f - i as f64;
        if t == 0.0 {
            line[i]
        } else if t == 1.0 {
            line[i + 1]
        } else {
            line[i] + t * (line[i + 1] - line[i])
        }
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Result<Vec<f64>> {
    if n < 2 || !(b > a) {
        return Err(invalid_arg(format!("cannot build {n} nodes on [{a}, {b}]")));
    }
    let h = (b - a) / (n - 1) as f64;
    Ok((0..n).map(|i| if i == n - 1 { b } else { a + h * i as f64 }).collect())
}

/// Sizes and options of a moving grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridLayout {
    /// Grid rank r.
    pub rank: usize,
    /// Number of fine steps K.
    pub steps: usize,
    /// Control nodes per spatial axis (uniform in node index).
    pub control_shape: Vec<usize>,
    /// Control steps K_c (uniform in step index).
    pub control_steps: usize,
    /// Spatial control→fine interpolation degree (1 or 3).
    pub upsample_degree: usize,
    /// Hold boundary nodes at their reference coordinates.
    pub boundary_pinned: bool,
}

impl GridLayout {
    /// No down-sampling: one control node per fine node and per step.
    pub fn full(reference: &ReferenceGrid, rank: usize, steps: usize) -> Self {
        Self {
            rank,
            steps,
            control_shape: reference.shape(),
            control_steps: steps,
            upsample_degree: 3,
            boundary_pinned: true,
        }
    }

    pub fn control_count(&self) -> usize {
        self.control_shape.iter().product()
    }

    fn validate(&self, reference: &ReferenceGrid) -> Result<()> {
        if self.rank == 0 {
            return Err(invalid_arg("grid rank must be at least 1"));
        }
        if self.steps < 2 {
            return Err(invalid_arg("a moving grid needs at least two steps"));
        }
        if self.control_steps < 2 || self.control_steps > self.steps {
            return Err(invalid_arg(format!(
                "control steps {} outside 2..={}",
                self.control_steps, self.steps
            )));
        }
        let shape = reference.shape();
        if self.control_shape.len() != shape.len() {
            return Err(invalid_arg("control shape dimension differs from the reference grid"));
        }
        for (a, (&c, &n)) in self.control_shape.iter().zip(&shape).enumerate() {
            if c < 2 || c > n {
                return Err(invalid_arg(format!("axis {a}: control count {c} outside 2..={n}")));
            }
        }
        if self.upsample_degree != 1 && self.upsample_degree != 3 {
            return Err(invalid_arg(format!("upsample degree must be 1 or 3, got {}", self.upsample_degree)));
        }
        if self.rank > self.control_count().min(self.control_steps) {
            return Err(invalid_arg(format!(
                "grid rank {} exceeds min(N_c = {}, K_c = {})",
                self.rank,
                self.control_count(),
                self.control_steps
            )));
        }
        Ok(())
    }
}

/// Control factors for one coordinate axis.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisFactors {
    /// U: N_c×r.
    pub basis: DMatrix<f64>,
    /// V: r×K_c.
    pub coeffs: DMatrix<f64>,
}

enum Slot {
    Basis { row: usize, col: usize },
    Coeff { row: usize, col: usize },
}

/// Steps and fine nodes a single parameter can move. `nodes` holds one
/// index range per axis (a box of the node lattice); `None` means every node.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Support {
    pub steps: Range<usize>,
    pub nodes: Option<Vec<Range<usize>>>,
}

/// The low-rank parameter/time-varying grid.
#[derive(Debug, Clone)]
pub struct MovingGrid {
    reference: ReferenceGrid,
    layout: GridLayout,
    factors: Vec<AxisFactors>,
    step_spacing: f64,
    residual: NodeCoords,
    stencil_len: usize,
    up_index: Arc<[usize]>,
    up_weight: Arc<[f64]>,
    boundary_nodes: Vec<usize>,
    control_boundary: Vec<bool>,
}

impl PartialEq for MovingGrid {
    fn eq(&self, other: &Self) -> bool {
        self.reference == other.reference
            && self.layout == other.layout
            && self.factors == other.factors
            && self.step_spacing == other.step_spacing
    }
}

impl MovingGrid {
    /// Factors the constant replication of the (control-sampled) reference
    /// coordinates at rank r, then adds independent uniform draws to the
    /// entries of both factors. The draws are scaled so that no control node
    /// moves by more than `perturb_scale·L` (L the domain length of that
    /// axis) at any step.
    ///
    /// Singular directions with zero singular value are filled with smooth
    /// polynomial modes of the control lattice instead of arbitrary vectors;
    /// their coefficient rows start at zero.
    pub fn init_from_reference(
        reference: &ReferenceGrid,
        layout: &GridLayout,
        perturb_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        layout.validate(reference)?;
        if !(perturb_scale >= 0.0) || !perturb_scale.is_finite() {
            return Err(invalid_arg(format!("perturbation scale must be finite and >= 0, got {perturb_scale}")));
        }
        let control_ref = control_reference(reference, &layout.control_shape);
        let (nc, kc, r) = (layout.control_count(), layout.control_steps, layout.rank);
        let modes = polynomial_modes(reference, &layout.control_shape);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut factors = Vec::with_capacity(reference.dim());
        for (axis, cref) in control_ref.iter().enumerate() {
            let replication = DMatrix::from_fn(nc, kc, |i, _| cref[i]);
            let svd = truncated_svd(&SnapshotMatrix::new(replication)?, r)?;
            let sigma = svd.singular_values();
            let length = reference.domain_length(axis);
            let root_k = (kc as f64).sqrt();

            let mut basis = DMatrix::zeros(nc, r);
            let mut coeffs = DMatrix::zeros(r, kc);
            let mut completion = Vec::new();
            for c in 0..r {
                if sigma[c] > 1e-12 * sigma[0] {
                    // Balance so coefficient rows have unit RMS.
                    let scale = sigma[c] / root_k;
                    basis.set_column(c, &(svd.left().column(c) * scale));
                    coeffs.set_row(c, &(svd.right().row(c) / scale));
                } else {
                    completion.push(c);
                }
            }
            if !completion.is_empty() {
                let mut candidates = DMatrix::zeros(nc, r - completion.len() + modes.ncols());
                let live: Vec<usize> = (0..r).filter(|c| !completion.contains(c)).collect();
                for (k, &c) in live.iter().enumerate() {
                    candidates.set_column(k, &basis.column(c));
                }
                for m in 0..modes.ncols() {
                    candidates.set_column(live.len() + m, &modes.column(m));
                }
                let picked = independent_columns(candidates, live.len(), completion.len());
                for (&c, col) in completion.iter().zip(picked) {
                    let amax = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                    basis.set_column(c, &(col * (length / amax)));
                }
            }
            if perturb_scale > 0.0 {
                // Half of the budget goes to each factor, so a control node
                // moves by at most perturb_scale·L at any step.
                let half = 0.5 * perturb_scale * length;
                let amp_u = half / max_abs_sum(coeffs.column_iter().map(|c| c.iter().map(|v| v.abs()).sum()));
                for i in 0..nc {
                    for c in 0..r {
                        basis[(i, c)] += rng.random_range(-amp_u..=amp_u);
                    }
                }
                let amp_v = half / max_abs_sum(basis.row_iter().map(|row| row.iter().map(|v| v.abs()).sum()));
                for c in 0..r {
                    for j in 0..kc {
                        coeffs[(c, j)] += rng.random_range(-amp_v..=amp_v);
                    }
                }
            }
            factors.push(AxisFactors { basis, coeffs });
        }
        Self::from_factors(reference.clone(), layout.clone(), factors)
    }

    /// Builds a grid from explicit factors. The fine-node correction is the
    /// interpolation residual of the control-sampled reference coordinates,
    /// so factors that represent the constant reference grid reproduce it.
    pub fn from_factors(reference: ReferenceGrid, layout: GridLayout, factors: Vec<AxisFactors>) -> Result<Self> {
        layout.validate(&reference)?;
        let step_spacing = (layout.steps - 1) as f64 / (layout.control_steps - 1) as f64;
        Self::with_spacing(reference, layout, factors, step_spacing)
    }

    pub(crate) fn with_spacing(
        reference: ReferenceGrid,
        layout: GridLayout,
        factors: Vec<AxisFactors>,
        step_spacing: f64,
    ) -> Result<Self> {
        if factors.len() != reference.dim() {
            return Err(invalid_arg(format!(
                "expected {} axis factor pairs, got {}",
                reference.dim(),
                factors.len()
            )));
        }
        for (a, f) in factors.iter().enumerate() {
            if f.basis.shape() != (layout.control_count(), layout.rank)
                || f.coeffs.shape() != (layout.rank, layout.control_steps)
            {
                return Err(invalid_arg(format!(
                    "axis {a}: factor shapes {:?}/{:?} do not match N_c = {}, r = {}, K_c = {}",
                    f.basis.shape(),
                    f.coeffs.shape(),
                    layout.control_count(),
                    layout.rank,
                    layout.control_steps
                )));
            }
        }
        let (stencil_len, up_index, up_weight) = upsampling_stencils(&reference, &layout);
        let mut grid = Self {
            residual: Vec::new(),
            boundary_nodes: reference
                .boundary_mask()
                .iter()
                .enumerate()
                .filter_map(|(i, &b)| b.then_some(i))
                .collect(),
            control_boundary: control_boundary_mask(&layout.control_shape),
            reference,
            layout,
            factors,
            step_spacing,
            stencil_len,
            up_index: up_index.into(),
            up_weight: up_weight.into(),
        };
        let control_ref = control_reference(&grid.reference, &grid.layout.control_shape);
        let exact = grid.reference.coords();
        grid.residual = control_ref
            .iter()
            .zip(&exact)
            .map(|(c, x)| {
                let up = grid.upsample(c);
                x.iter().zip(up).map(|(xe, u)| xe - u).collect()
            })
            .collect();
        Ok(grid)
    }

    pub fn reference(&self) -> &ReferenceGrid {
        &self.reference
    }

    pub fn layout(&self) -> &GridLayout {
        &self.layout
    }

    pub fn rank(&self) -> usize {
        self.layout.rank
    }

    pub fn steps(&self) -> usize {
        self.layout.steps
    }

    /// Fine steps per control interval.
    pub fn step_spacing(&self) -> f64 {
        self.step_spacing
    }

    pub fn factors(&self) -> &[AxisFactors] {
        &self.factors
    }

    pub fn boundary_pinned(&self) -> bool {
        self.layout.boundary_pinned
    }

    /// Coefficient vector v[n] of `axis` (linear across control steps,
    /// extrapolated past the last control step).
    pub fn coeffs_at(&self, axis: usize, n: usize) -> Vec<f64> {
        let v = &self.factors[axis].coeffs;
        let kc = v.ncols();
        let q = n as f64 / self.step_spacing;
        let j = (q.floor() as usize).min(kc - 2);
        let t = q - j as f64;
        (0..v.nrows()).map(|c| (1.0 - t) * v[(c, j)] + t * v[(c, j + 1)]).collect()
    }

    /// Fine-node coordinates at step `n`.
    pub fn assemble(&self, n: usize) -> Result<NodeCoords> {
        if n >= self.layout.steps {
            return Err(invalid_arg(format!("step {n} out of range 0..{}", self.layout.steps)));
        }
        Ok(self.assemble_unchecked(n))
    }

    pub(crate) fn assemble_unchecked(&self, n: usize) -> NodeCoords {
        self.assemble_steps(n..n + 1).pop().expect("one step")
    }

    /// Coordinates of every step, `out[n][axis][node]`.
    pub fn assemble_all(&self) -> Vec<NodeCoords> {
        self.assemble_steps(0..self.layout.steps)
    }

    /// Coordinates of the steps in `steps`. Every entry point goes through
    /// here so that a step is assembled bit-identically however it is asked
    /// for.
    pub(crate) fn assemble_steps(&self, steps: Range<usize>) -> Vec<NodeCoords> {
        let dim = self.reference.dim();
        let mut out = vec![Vec::with_capacity(dim); steps.len()];
        for a in 0..dim {
            let basis = &self.factors[a].basis;
            let fine: Vec<Vec<f64>> =
                (0..basis.ncols()).map(|c| self.upsample(basis.column(c).as_slice())).collect();
            for (step, n) in out.iter_mut().zip(steps.clone()) {
                let v = self.coeffs_at(a, n);
                let mut x = vec![0.0; self.reference.len()];
                for (col, vc) in fine.iter().zip(&v) {
                    for (xi, b) in x.iter_mut().zip(col) {
                        *xi += b * vc;
                    }
                }
                step.push(self.finish_axis(a, x));
            }
        }
        out
    }

    /// Control-lattice coordinates `U·v[n]` for every step, as a N_c×K matrix.
    pub fn control_coordinates(&self, axis: usize) -> DMatrix<f64> {
        let k = self.layout.steps;
        let mut vfine = DMatrix::zeros(self.layout.rank, k);
        for n in 0..k {
            vfine.set_column(n, &nalgebra::DVector::from_vec(self.coeffs_at(axis, n)));
        }
        &self.factors[axis].basis * vfine
    }

    fn finish_axis(&self, axis: usize, mut fine: Vec<f64>) -> Vec<f64> {
        for (x, r) in fine.iter_mut().zip(&self.residual[axis]) {
            *x += r;
        }
        if self.layout.boundary_pinned {
            for &i in &self.boundary_nodes {
                fine[i] = self.reference.coord(axis, i);
            }
        }
        fine
    }

    /// Expands control-lattice values to the fine nodes.
    pub(crate) fn upsample(&self, control: &[f64]) -> Vec<f64> {
        let s = self.stencil_len;
        self.up_weight
            .chunks_exact(s)
            .zip(self.up_index.chunks_exact(s))
            .map(|(w, idx)| w.iter().zip(idx).map(|(w, &i)| w * control[i]).sum())
            .collect()
    }

    /// Expands a coefficient row (length K_c) to the K fine steps.
    pub(crate) fn upsample_steps(&self, row: &[f64]) -> Vec<f64> {
        let kc = row.len();
        (0..self.layout.steps)
            .map(|n| {
                let q = n as f64 / self.step_spacing;
                let j = (q.floor() as usize).min(kc - 2);
                let t = q - j as f64;
                (1.0 - t) * row[j] + t * row[j + 1]
            })
            .collect()
    }

    /// Number of free optimization parameters. Boundary control rows of the
    /// basis are excluded when boundaries are pinned.
    pub fn parameter_count(&self) -> usize {
        let r = self.layout.rank;
        let free_rows = self.free_control_rows().count();
        self.factors.len() * (r * free_rows + r * self.layout.control_steps)
    }

    fn free_control_rows(&self) -> impl Iterator<Item = usize> + '_ {
        let pinned = self.layout.boundary_pinned;
        self.control_boundary.iter().enumerate().filter(move |(_, &b)| !(pinned && b)).map(|(i, _)| i)
    }

    /// Free parameters, axis by axis: basis rows (row-major) then all
    /// coefficients (row-major).
    pub fn parameters(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.parameter_count());
        for f in &self.factors {
            for i in self.free_control_rows() {
                p.extend(f.basis.row(i).iter());
            }
            for c in 0..f.coeffs.nrows() {
                p.extend(f.coeffs.row(c).iter());
            }
        }
        p
    }

    pub fn set_parameters(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.parameter_count() {
            return Err(invalid_arg(format!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                p.len()
            )));
        }
        let rows: Vec<usize> = self.free_control_rows().collect();
        let mut k = 0;
        for f in &mut self.factors {
            for &i in &rows {
                for c in 0..f.basis.ncols() {
                    f.basis[(i, c)] = p[k];
                    k += 1;
                }
            }
            for c in 0..f.coeffs.nrows() {
                for j in 0..f.coeffs.ncols() {
                    f.coeffs[(c, j)] = p[k];
                    k += 1;
                }
            }
        }
        Ok(())
    }

    fn parameter_slot(&self, k: usize) -> (usize, Slot) {
        let r = self.layout.rank;
        let rows: Vec<usize> = self.free_control_rows().collect();
        let per_axis = r * rows.len() + r * self.layout.control_steps;
        let (axis, mut k) = (k / per_axis, k % per_axis);
        if k < r * rows.len() {
            return (axis, Slot::Basis { row: rows[k / r], col: k % r });
        }
        k -= r * rows.len();
        (axis, Slot::Coeff { row: k / self.layout.control_steps, col: k % self.layout.control_steps })
    }

    /// Which steps and fine nodes can move when parameter `k` changes.
    pub(crate) fn parameter_support(&self, k: usize) -> Support {
        let steps = self.layout.steps;
        match self.parameter_slot(k).1 {
            Slot::Coeff { col, .. } => {
                let kc = self.layout.control_steps;
                let touched = |n: usize| {
                    let j = ((n as f64 / self.step_spacing).floor() as usize).min(kc - 2);
                    col == j || col == j + 1
                };
                let first = (0..steps).find(|&n| touched(n)).unwrap_or(steps);
                let last = (0..steps).rev().find(|&n| touched(n)).map_or(first, |n| n + 1);
                Support { steps: first..last, nodes: None }
            }
            Slot::Basis { row, .. } => {
                let shape = self.reference.shape();
                let mut lo = shape.clone();
                let mut hi = vec![0; shape.len()];
                let s = self.stencil_len;
                for (node, (idx, w)) in self.up_index.chunks_exact(s).zip(self.up_weight.chunks_exact(s)).enumerate() {
                    if idx.iter().zip(w).any(|(&i, &w)| i == row && w != 0.0) {
                        let ix = [node % shape[0], node / shape[0]];
                        for a in 0..shape.len() {
                            lo[a] = lo[a].min(ix[a]);
                            hi[a] = hi[a].max(ix[a] + 1);
                        }
                    }
                }
                let nodes = lo.into_iter().zip(hi).map(|(l, h)| l.min(h)..h).collect();
                Support { steps: 0..steps, nodes: Some(nodes) }
            }
        }
    }

    /// Human-readable name of parameter `k`, for diagnostics.
    pub fn parameter_name(&self, k: usize) -> String {
        match self.parameter_slot(k) {
            (axis, Slot::Basis { row, col }) => format!("U[axis {axis}][{row}, {col}]"),
            (axis, Slot::Coeff { row, col }) => format!("V[axis {axis}][{row}, {col}]"),
        }
    }
}

/// Per-cell volumes and the minima over steps.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeReport {
    pub v_min: f64,
    pub per_step_min: Vec<f64>,
    pub global_min: f64,
    /// (step, cell index, volume) of every cell below the floor.
    pub violations: Vec<(usize, usize, f64)>,
}

impl VolumeReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    /// First step with a violating cell.
    pub fn first_violating_step(&self) -> Option<usize> {
        self.violations.first().map(|v| v.0)
    }

    fn merge(&mut self, step: usize, other: VolumeReport) {
        self.per_step_min.push(other.global_min);
        self.global_min = self.global_min.min(other.global_min);
        self.violations.extend(other.violations.into_iter().map(|(_, c, v)| (step, c, v)));
    }
}

/// A cell violates the floor when its volume is below `v_min`, or not
/// strictly positive (so `v_min = 0` still demands positive volumes).
pub fn violates(volume: f64, v_min: f64) -> bool {
    !(volume >= v_min && volume > 0.0)
}

/// Signed cell volumes of one set of node coordinates: successive differences
/// in 1D, shoelace areas of the structured quadrilaterals in 2D.
pub fn cell_volume_values(coords: &[Vec<f64>], reference: &ReferenceGrid) -> Vec<f64> {
    let shape = reference.shape();
    if shape.len() == 1 {
        return coords[0].windows(2).map(|w| w[1] - w[0]).collect();
    }
    let (nx, ny) = (shape[0], shape[1]);
    let (x, y) = (&coords[0], &coords[1]);
    let mut out = Vec::with_capacity((nx - 1) * (ny - 1));
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let p00 = i + nx * j;
            let (p10, p01, p11) = (p00 + 1, p00 + nx, p00 + nx + 1);
            let a = 0.5 * ((x[p11] - x[p00]) * (y[p01] - y[p10]) - (x[p01] - x[p10]) * (y[p11] - y[p00]));
            out.push(a);
        }
    }
    out
}

pub fn cell_volumes(coords: &[Vec<f64>], reference: &ReferenceGrid, v_min: f64) -> VolumeReport {
    let vols = cell_volume_values(coords, reference);
    let global_min = vols.iter().copied().fold(f64::INFINITY, f64::min);
    let violations = vols
        .iter()
        .enumerate()
        .filter(|(_, &v)| violates(v, v_min))
        .map(|(c, &v)| (0, c, v))
        .collect();
    VolumeReport { v_min, per_step_min: vec![global_min], global_min, violations }
}

/// Assembles every step and checks all cell volumes against `v_min`.
pub fn validate_diffeomorphism(grid: &MovingGrid, v_min: f64) -> VolumeReport {
    let mut report = VolumeReport {
        v_min,
        per_step_min: Vec::with_capacity(grid.steps()),
        global_min: f64::INFINITY,
        violations: Vec::new(),
    };
    for (n, coords) in grid.assemble_all().iter().enumerate() {
        report.merge(n, cell_volumes(coords, grid.reference(), v_min));
    }
    report
}

fn max_abs_sum(sums: impl Iterator<Item = f64>) -> f64 {
    sums.fold(0.0, f64::max).max(f64::MIN_POSITIVE)
}

/// Reference coordinates sampled at the control lattice, per axis.
fn control_reference(reference: &ReferenceGrid, control_shape: &[usize]) -> NodeCoords {
    let shape = reference.shape();
    let lines: Vec<Vec<f64>> = (0..shape.len())
        .map(|a| {
            let (n, nc) = (shape[a], control_shape[a]);
            (0..nc)
                .map(|j| reference.coord_at_index(a, j as f64 * (n - 1) as f64 / (nc - 1) as f64))
                .collect()
        })
        .collect();
    lattice_coords(&lines)
}

fn lattice_coords(lines: &[Vec<f64>]) -> NodeCoords {
    if lines.len() == 1 {
        return vec![lines[0].clone()];
    }
    let (nx, ny) = (lines[0].len(), lines[1].len());
    vec![
        (0..nx * ny).map(|i| lines[0][i % nx]).collect(),
        (0..nx * ny).map(|i| lines[1][i / nx]).collect(),
    ]
}

fn control_boundary_mask(control_shape: &[usize]) -> Vec<bool> {
    let n: usize = control_shape.iter().product();
    (0..n)
        .map(|i| {
            if control_shape.len() == 1 {
                i == 0 || i == n - 1
            } else {
                let (ix, iy) = (i % control_shape[0], i / control_shape[0]);
                ix == 0 || iy == 0 || ix == control_shape[0] - 1 || iy == control_shape[1] - 1
            }
        })
        .collect()
}

fn upsampling_stencils(reference: &ReferenceGrid, layout: &GridLayout) -> (usize, Vec<usize>, Vec<f64>) {
    let shape = reference.shape();
    let per_axis: Vec<Vec<(usize, usize, [f64; 4])>> = shape
        .iter()
        .zip(&layout.control_shape)
        .map(|(&n, &nc)| {
            (0..n)
                .map(|i| {
                    let s = i as f64 * (nc - 1) as f64 / (n - 1) as f64;
                    let mut w = [0.0; 4];
                    let (start, m) = index_weights(nc, s, layout.upsample_degree, &mut w);
                    (start, m, w)
                })
                .collect()
        })
        .collect();
    let width = |a: usize| layout.upsample_degree.min(layout.control_shape[a] - 1) + 1;
    if shape.len() == 1 {
        let s = width(0);
        let mut idx = Vec::with_capacity(shape[0] * s);
        let mut wts = Vec::with_capacity(shape[0] * s);
        for &(start, m, w) in &per_axis[0] {
            for k in 0..s {
                idx.push(start + k.min(m - 1));
                wts.push(if k < m { w[k] } else { 0.0 });
            }
        }
        return (s, idx, wts);
    }
    let (sx, sy) = (width(0), width(1));
    let ncx = layout.control_shape[0];
    let mut idx = Vec::with_capacity(reference.len() * sx * sy);
    let mut wts = Vec::with_capacity(reference.len() * sx * sy);
    for &(ys, _, wy) in &per_axis[1] {
        for &(xs, _, wx) in &per_axis[0] {
            for ky in 0..sy {
                for kx in 0..sx {
                    idx.push(xs + kx + ncx * (ys + ky));
                    wts.push(wx[kx] * wy[ky]);
                }
            }
        }
    }
    (sx * sy, idx, wts)
}

/// Monomials of the normalized control coordinates, lowest degree first:
/// 1, x, y, x², xy, y², …
fn polynomial_modes(reference: &ReferenceGrid, control_shape: &[usize]) -> DMatrix<f64> {
    let lattice = control_reference(reference, control_shape);
    let normalized: Vec<Vec<f64>> = lattice
        .iter()
        .enumerate()
        .map(|(a, c)| {
            let (lo, len) = (reference.axis(a)[0], reference.domain_length(a));
            c.iter().map(|v| 2.0 * (v - lo) / len - 1.0).collect()
        })
        .collect();
    let nc = lattice[0].len();
    let mut exponents = Vec::new();
    for total in 0..=4usize {
        if reference.dim() == 1 {
            exponents.push((total, 0));
        } else {
            for ey in 0..=total {
                exponents.push((total - ey, ey));
            }
        }
    }
    DMatrix::from_fn(nc, exponents.len(), |i, m| {
        let (ex, ey) = exponents[m];
        let y = if reference.dim() == 2 { normalized[1][i].powi(ey as i32) } else { 1.0 };
        normalized[0][i].powi(ex as i32) * y
    })
}

/// Orthonormalizes `candidates` in order and returns `count` new columns
/// (after the first `keep` ones) that are independent of everything before.
fn independent_columns(mut candidates: DMatrix<f64>, keep: usize, count: usize) -> Vec<nalgebra::DVector<f64>> {
    let mut accepted: Vec<nalgebra::DVector<f64>> = Vec::new();
    for c in 0..keep {
        let mut v = candidates.column(c).clone_owned();
        for a in &accepted {
            let d = a.dot(&v);
            v.axpy(-d, a, 1.0);
        }
        let n = v.norm();
        accepted.push(v / n);
    }
    let mut picked = Vec::new();
    for c in keep..candidates.ncols() {
        if picked.len() == count {
            break;
        }
        let original = candidates.column(c).norm();
        let mut v = candidates.column(c).clone_owned();
        for _ in 0..2 {
            for a in &accepted {
                let d = a.dot(&v);
                v.axpy(-d, a, 1.0);
            }
        }
        let n = v.norm();
        if n > 1e-8 * original {
            let v = v / n;
            accepted.push(v.clone());
            picked.push(v);
        }
    }
    if picked.len() < count {
        // Ran out of smooth modes on a tiny lattice; fall back to any basis.
        let nc = candidates.nrows();
        let total = accepted.len() + (count - picked.len());
        let mut m = DMatrix::zeros(nc, total);
        for (k, a) in accepted.iter().enumerate() {
            m.set_column(k, a);
        }
        orthonormalize_columns(&mut m);
        for k in accepted.len()..total {
            picked.push(m.column(k).clone_owned());
        }
    }
    candidates.fill(0.0);
    picked
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_dev(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn unperturbed_1d_reproduces_reference() {
        let reference = ReferenceGrid::uniform_1d(0.0, 1.0, 11).unwrap();
        let layout = GridLayout::full(&reference, 1, 5);
        let g = MovingGrid::init_from_reference(&reference, &layout, 0.0, 0).unwrap();
        for n in 0..5 {
            let x = g.assemble(n).unwrap();
            assert!(max_dev(&x[0], reference.axis(0)) < 1e-14);
        }
    }

    #[test]
    fn perturbation_bounded_by_scale() {
        let reference = ReferenceGrid::uniform_1d(0.0, 1.0, 11).unwrap();
        let mut layout = GridLayout::full(&reference, 1, 5);
        layout.boundary_pinned = false;
        let g = MovingGrid::init_from_reference(&reference, &layout, 1e-3, 42).unwrap();
        let x = g.assemble(0).unwrap();
        let dev = max_dev(&x[0], reference.axis(0));
        assert!(dev <= 1e-3 + 1e-15 && dev > 0.0, "{dev}");
    }

    #[test]
    fn unperturbed_2d_reproduces_tensor_grid() {
        let reference = ReferenceGrid::uniform_2d((0.0, 1.0), (0.0, 1.0), 5, 5).unwrap();
        let layout = GridLayout::full(&reference, 2, 4);
        let g = MovingGrid::init_from_reference(&reference, &layout, 0.0, 0).unwrap();
        let exact = reference.coords();
        for n in 0..4 {
            let x = g.assemble(n).unwrap();
            for a in 0..2 {
                assert!(max_dev(&x[a], &exact[a]) < 1e-14);
            }
        }
    }

    #[test]
    fn downsampled_init_reproduces_reference() {
        let reference = ReferenceGrid::uniform_2d((0.0, 2.0), (-1.0, 1.0), 13, 9).unwrap();
        let layout = GridLayout {
            rank: 2,
            steps: 10,
            control_shape: vec![5, 4],
            control_steps: 4,
            upsample_degree: 3,
            boundary_pinned: false,
        };
        let g = MovingGrid::init_from_reference(&reference, &layout, 0.0, 0).unwrap();
        let exact = reference.coords();
        for n in [0, 3, 9] {
            let x = g.assemble(n).unwrap();
            for a in 0..2 {
                assert!(max_dev(&x[a], &exact[a]) < 1e-13);
            }
        }
    }

    #[test]
    fn rank_above_controls_rejected() {
        let reference = ReferenceGrid::uniform_1d(0.0, 1.0, 11).unwrap();
        let mut layout = GridLayout::full(&reference, 3, 5);
        layout.control_steps = 2;
        assert!(MovingGrid::init_from_reference(&reference, &layout, 0.0, 0).is_err());
    }

    #[test]
    fn step_out_of_range() {
        let reference = ReferenceGrid::uniform_1d(0.0, 1.0, 5).unwrap();
        let g = MovingGrid::init_from_reference(&reference, &GridLayout::full(&reference, 1, 3), 0.0, 0).unwrap();
        assert!(g.assemble(3).is_err());
    }

    fn stretching_grid(n: usize, steps: usize) -> MovingGrid {
        let reference = ReferenceGrid::uniform_1d(0.0, 1.0, n).unwrap();
        let mut layout = GridLayout::full(&reference, 1, steps);
        layout.boundary_pinned = false;
        let basis = DMatrix::from_column_slice(n, 1, reference.axis(0));
        let coeffs = DMatrix::from_fn(1, steps, |_, j| 1.0 + 0.1 * j as f64);
        MovingGrid::from_factors(reference, layout, vec![AxisFactors { basis, coeffs }]).unwrap()
    }

    #[test]
    fn scalar_scaling_stretches_spacing() {
        let g = stretching_grid(11, 4);
        for n in 0..4 {
            let x = g.assemble(n).unwrap();
            let vols = cell_volume_values(&x, g.reference());
            for v in vols {
                assert!((v - 0.1 * (1.0 + 0.1 * n as f64)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn translating_grid_matches_direct_formula() {
        let reference = ReferenceGrid::uniform_1d(0.0, 2.0, 21).unwrap();
        let mut layout = GridLayout::full(&reference, 2, 6);
        layout.boundary_pinned = false;
        let c = 0.3;
        let t: Vec<f64> = (0..6).map(|n| 0.1 * n as f64).collect();
        let basis = DMatrix::from_fn(21, 2, |i, k| if k == 0 { reference.axis(0)[i] } else { 1.0 });
        let coeffs = DMatrix::from_fn(2, 6, |k, n| if k == 0 { 1.0 } else { c * t[n] });
        let g = MovingGrid::from_factors(reference.clone(), layout, vec![AxisFactors { basis, coeffs }]).unwrap();
        for n in 0..6 {
            let x = g.assemble(n).unwrap();
            for i in 1..20 {
                assert!((x[0][i] - (reference.axis(0)[i] + c * t[n])).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn volumes_uniform_and_reversed() {
        let reference = ReferenceGrid::uniform_1d(0.0, 1.0, 11).unwrap();
        let r = cell_volumes(&[reference.axis(0).to_vec()], &reference, 0.0);
        assert!(r.passed());
        assert!((r.global_min - 0.1).abs() < 1e-15);

        let rev: Vec<f64> = reference.axis(0).iter().rev().copied().collect();
        let r = cell_volumes(&[rev], &reference, 0.0);
        assert_eq!(r.violations.len(), 10);
        assert!(r.global_min < 0.0);
    }

    #[test]
    fn rotation_preserves_cell_area() {
        let reference = ReferenceGrid::uniform_2d((0.0, 1.0), (0.0, 1.0), 3, 3).unwrap();
        let (s, c) = 30f64.to_radians().sin_cos();
        let base = reference.coords();
        let x: Vec<f64> = (0..9).map(|i| 0.5 + c * (base[0][i] - 0.5) - s * (base[1][i] - 0.5)).collect();
        let y: Vec<f64> = (0..9).map(|i| 0.5 + s * (base[0][i] - 0.5) + c * (base[1][i] - 0.5)).collect();
        let vols = cell_volume_values(&[x, y], &reference);
        assert_eq!(vols.len(), 4);
        for v in vols {
            assert!((v - 0.25).abs() < 1e-14);
        }
    }

    #[test]
    fn validate_reports_collapsed_step() {
        let reference = ReferenceGrid::uniform_1d(0.0, 1.0, 11).unwrap();
        let g = MovingGrid::init_from_reference(&reference, &GridLayout::full(&reference, 1, 5), 0.0, 0).unwrap();
        assert!(validate_diffeomorphism(&g, 0.05).passed());

        let mut layout = GridLayout::full(&reference, 1, 5);
        layout.boundary_pinned = false;
        let basis = DMatrix::from_column_slice(11, 1, reference.axis(0));
        let coeffs = DMatrix::from_row_slice(1, 5, &[1.0, 1.0, 0.0, 1.0, 1.0]);
        let g = MovingGrid::from_factors(reference, layout, vec![AxisFactors { basis, coeffs }]).unwrap();
        let report = validate_diffeomorphism(&g, 0.0);
        assert!(!report.passed());
        assert_eq!(report.first_violating_step(), Some(2));
        assert_eq!(report.per_step_min[2], 0.0);
    }

    #[test]
    fn parameters_round_trip_and_skip_pinned_rows() {
        let reference = ReferenceGrid::uniform_1d(0.0, 1.0, 11).unwrap();
        let layout = GridLayout {
            rank: 2,
            steps: 9,
            control_shape: vec![6],
            control_steps: 5,
            upsample_degree: 3,
            boundary_pinned: true,
        };
        let mut g = MovingGrid::init_from_reference(&reference, &layout, 1e-3, 1).unwrap();
        assert_eq!(g.parameter_count(), 2 * 4 + 2 * 5);
        let mut p = g.parameters();
        p[0] += 0.25;
        g.set_parameters(&p).unwrap();
        assert_eq!(g.parameters(), p);
        assert_eq!(g.factors()[0].basis[(1, 0)], p[0]);
        assert!(g.parameter_name(0).starts_with("U[axis 0][1, 0]"));
        assert!(g.parameter_name(9).starts_with("V[axis 0][0, 1]"));
    }

    #[test]
    fn pinned_boundaries_hold_reference() {
        let reference = ReferenceGrid::uniform_2d((0.0, 1.0), (0.0, 1.0), 8, 6).unwrap();
        let layout = GridLayout {
            rank: 2,
            steps: 5,
            control_shape: vec![4, 3],
            control_steps: 3,
            upsample_degree: 3,
            boundary_pinned: true,
        };
        let g = MovingGrid::init_from_reference(&reference, &layout, 5e-2, 3).unwrap();
        let mask = reference.boundary_mask();
        let exact = reference.coords();
        for n in 0..5 {
            let x = g.assemble(n).unwrap();
            for i in (0..reference.len()).filter(|&i| mask[i]) {
                assert_eq!(x[0][i], exact[0][i]);
                assert_eq!(x[1][i], exact[1][i]);
            }
        }
    }
}
