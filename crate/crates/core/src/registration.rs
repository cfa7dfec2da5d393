//! The penalized registration objective and its optimizer.
//!
//! For a moving grid g the objective is
//!
//! ```text
//! ‖M − G⁻¹(T(G(M)))‖_F + ‖Γ1 U‖_F + ‖V Γ2ᵀ‖_F + ρ Σ max(0, v_min − v)²
//! ```
//!
//! where T is the rank-k_r truncated SVD. Γ1 acts on the basis columns
//! expanded to the fine nodes (second differences along every lattice
//! direction), Γ2 on the coefficient rows expanded to the fine steps.
//!
//! Training runs L-BFGS on the control parameters with finite-difference
//! gradients. Trial points that break the volume floor are rejected by the
//! line search, so every accepted iterate is feasible and the objective trace
//! never increases.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{invalid_arg, Error, Result};
use crate::grid::{
    cell_volume_values, validate_diffeomorphism, violates, GridLayout, MovingGrid, NodeCoords, ReferenceGrid,
    Support, VolumeReport,
};
use crate::lowrank::{frobenius_error, truncated_svd, LowRankFactors, SnapshotMatrix};
use crate::mapping::{
    forward_column, forward_nodes, place, replace, second_difference, DifferenceOperator, InterpConfig, Placement,
};

/// Everything needed to train a moving grid.
#[derive(Debug, Clone)]
pub struct RegistrationProblem {
    pub snapshots: SnapshotMatrix,
    pub reference: ReferenceGrid,
    /// Grid rank r.
    pub grid_rank: usize,
    /// Latent rank k_r of the truncation on the moving grid.
    pub latent_rank: usize,
    /// Scale γ1 of the spatial second-difference regularizer.
    pub gamma1: f64,
    /// Scale γ2 of the step-direction second-difference regularizer.
    pub gamma2: f64,
    pub v_min: f64,
    pub boundary_pinned: bool,
    /// Control nodes per spatial axis.
    pub control_shape: Vec<usize>,
    /// Control steps K_c.
    pub control_steps: usize,
    /// Spatial control→fine interpolation degree (1 or 3).
    pub upsample_degree: usize,
    pub interp: InterpConfig,
    pub max_iters: usize,
    pub perturb_scale: f64,
    pub seed: u64,
    /// Base penalty weight; the effective ρ divides it by the squared
    /// smallest reference cell volume.
    pub penalty_weight: f64,
    /// Sum squared norms instead of plain norms.
    pub squared_norms: bool,
    /// Finite-difference step relative to the largest domain length.
    pub fd_step: f64,
    /// Relative decrease below which an iteration counts as stagnant.
    pub tolerance: f64,
    /// L-BFGS memory.
    pub memory: usize,
}

impl RegistrationProblem {
    /// A problem with full control resolution, no regularization, pinned
    /// boundaries and a zero volume floor. Adjust the public fields as needed.
    pub fn new(snapshots: SnapshotMatrix, reference: ReferenceGrid, grid_rank: usize, latent_rank: usize) -> Self {
        Self {
            control_shape: reference.shape(),
            control_steps: snapshots.cols(),
            snapshots,
            reference,
            grid_rank,
            latent_rank,
            gamma1: 0.0,
            gamma2: 0.0,
            v_min: 0.0,
            boundary_pinned: true,
            upsample_degree: 3,
            interp: InterpConfig::default(),
            max_iters: 100,
            perturb_scale: 1e-3,
            seed: 0,
            penalty_weight: 1.0,
            squared_norms: false,
            fd_step: 1e-6,
            tolerance: 1e-6,
            memory: 8,
        }
    }

    pub fn layout(&self) -> GridLayout {
        GridLayout {
            rank: self.grid_rank,
            steps: self.snapshots.cols(),
            control_shape: self.control_shape.clone(),
            control_steps: self.control_steps,
            upsample_degree: self.upsample_degree,
            boundary_pinned: self.boundary_pinned,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, k) = (self.snapshots.rows(), self.snapshots.cols());
        if n != self.reference.len() {
            return Err(invalid_arg(format!(
                "snapshots have {n} rows but the reference grid has {} nodes",
                self.reference.len()
            )));
        }
        if self.latent_rank == 0 || self.latent_rank > n.min(k) {
            return Err(invalid_arg(format!("latent rank {} outside 1..={}", self.latent_rank, n.min(k))));
        }
        for (name, v) in [("gamma1", self.gamma1), ("gamma2", self.gamma2), ("v_min", self.v_min)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid_arg(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.fd_step > 0.0) || !(self.penalty_weight > 0.0) {
            return Err(invalid_arg("fd_step and penalty_weight must be positive"));
        }
        if self.memory == 0 {
            return Err(invalid_arg("L-BFGS memory must be at least 1"));
        }
        self.interp.validate()?;
        // Layout checks (rank vs controls, degrees) live with the grid.
        MovingGrid::init_from_reference(&self.reference, &self.layout(), 0.0, 0).map(|_| ())
    }

    /// Absolute finite-difference step.
    pub fn fd_step_abs(&self) -> f64 {
        let l = (0..self.reference.dim()).map(|a| self.reference.domain_length(a)).fold(0.0, f64::max);
        self.fd_step * l
    }

    fn penalty_scale(&self) -> f64 {
        self.penalty_weight / self.reference.min_cell_volume().powi(2)
    }
}

/// The objective split into its terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveParts {
    pub total: f64,
    pub data: f64,
    pub reg1: f64,
    pub reg2: f64,
    pub penalty: f64,
    /// Smallest cell volume over all steps.
    pub min_volume: f64,
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub parts: ObjectiveParts,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub grid: MovingGrid,
    /// Rank-k_r factors of the mapped snapshots G(M).
    pub latent: LowRankFactors,
    /// G(M) on the trained grid.
    pub mapped: SnapshotMatrix,
    /// G⁻¹ of the rank-k_r reconstruction.
    pub reconstruction: SnapshotMatrix,
    /// Objective at the initial grid and after every accepted iteration.
    pub objective_trace: Vec<f64>,
    pub trace: Vec<TraceRecord>,
    pub data_error_abs: f64,
    pub data_error_rel: f64,
    pub volume_report: VolumeReport,
    pub iterations: usize,
    pub converged: bool,
}

/// Precomputed operators for repeated objective evaluation.
struct Evaluator<'a> {
    problem: &'a RegistrationProblem,
    space_ops: Vec<DifferenceOperator>,
    step_op: Option<DifferenceOperator>,
    rho: f64,
}

struct Pipeline {
    parts: ObjectiveParts,
    mapped: DMatrix<f64>,
    latent: LowRankFactors,
    reconstruction: DMatrix<f64>,
}

/// Per-step intermediate results of one evaluation. Finite-difference probes
/// start from the state at the current grid and recompute only what the
/// probed parameter can reach.
struct State {
    penalty: Vec<f64>,
    min_volume: Vec<f64>,
    mapped: DMatrix<f64>,
    placements: Vec<Placement>,
    reg1: f64,
    reg2: f64,
}

impl<'a> Evaluator<'a> {
    fn new(problem: &'a RegistrationProblem) -> Result<Self> {
        let space_ops = problem
            .reference
            .shape()
            .iter()
            .filter(|&&n| n >= 3)
            .map(|&n| second_difference(n, problem.gamma1))
            .collect::<Result<_>>()?;
        let k = problem.snapshots.cols();
        let step_op = if k >= 3 { Some(second_difference(k, problem.gamma2)?) } else { None };
        Ok(Self { problem, space_ops, step_op, rho: problem.penalty_scale() })
    }

    fn objective(&self, g: &MovingGrid) -> Result<ObjectiveParts> {
        self.pipeline(g).map(|p| p.parts)
    }

    fn pipeline(&self, g: &MovingGrid) -> Result<Pipeline> {
        let st = self.state(g)?;
        let placements = &st.placements;
        self.finish(st.mapped, |n| &placements[n], &st.penalty, &st.min_volume, st.reg1, st.reg2)
    }

    fn state(&self, g: &MovingGrid) -> Result<State> {
        let p = self.problem;
        let coords = g.assemble_all();
        let per_step: Vec<(f64, f64, Vec<f64>, Placement)> = coords
            .par_iter()
            .enumerate()
            .map(|(n, c)| {
                let (penalty, min_volume) = self.step_volume(n, c)?;
                let mut col = vec![0.0; p.reference.len()];
                forward_column(&p.reference, p.snapshots.matrix().column(n).as_slice(), c, p.interp.degree, &mut col);
                let placement = place(&p.reference, c, p.interp.degree).map_err(|e| at_step(n, e))?;
                Ok((penalty, min_volume, col, placement))
            })
            .collect::<Result<_>>()?;
        let mut mapped = DMatrix::zeros(p.reference.len(), coords.len());
        let mut st = State {
            penalty: Vec::with_capacity(coords.len()),
            min_volume: Vec::with_capacity(coords.len()),
            mapped: DMatrix::zeros(0, 0),
            placements: Vec::with_capacity(coords.len()),
            reg1: self.reg1(g),
            reg2: self.reg2(g),
        };
        for (n, (penalty, min_volume, col, placement)) in per_step.into_iter().enumerate() {
            st.penalty.push(penalty);
            st.min_volume.push(min_volume);
            mapped.column_mut(n).copy_from_slice(&col);
            st.placements.push(placement);
        }
        st.mapped = mapped;
        Ok(st)
    }

    /// Total objective at `g`, which differs from the grid of `base` only by
    /// a parameter with the given support.
    fn probe(&self, base: &State, g: &MovingGrid, support: &Support) -> Result<f64> {
        let p = self.problem;
        let steps = support.steps.clone();
        let coords = g.assemble_steps(steps.clone());
        let mut mapped = base.mapped.clone();
        let mut penalty = base.penalty.clone();
        let mut min_volume = base.min_volume.clone();
        let mut placements = Vec::with_capacity(steps.len());
        for (c, n) in coords.iter().zip(steps.clone()) {
            (penalty[n], min_volume[n]) = self.step_volume(n, c)?;
            let data = p.snapshots.matrix().column(n);
            let col = mapped.column_mut(n);
            let placement = match &support.nodes {
                None => {
                    forward_column(&p.reference, data.as_slice(), c, p.interp.degree, col.data.into_slice_mut());
                    place(&p.reference, c, p.interp.degree)
                }
                Some(moved) => {
                    forward_nodes(&p.reference, data.as_slice(), c, p.interp.degree, moved, col.data.into_slice_mut());
                    replace(&p.reference, c, p.interp.degree, &base.placements[n], moved)
                }
            };
            placements.push(placement.map_err(|e| at_step(n, e))?);
        }
        let (reg1, reg2) = match support.nodes {
            Some(_) => (self.reg1(g), base.reg2),
            None => (base.reg1, self.reg2(g)),
        };
        let placement =
            |n: usize| if steps.contains(&n) { &placements[n - steps.start] } else { &base.placements[n] };
        Ok(self.finish(mapped, placement, &penalty, &min_volume, reg1, reg2)?.parts.total)
    }

    fn finish<'p>(
        &self,
        mapped: DMatrix<f64>,
        placement: impl Fn(usize) -> &'p Placement + Sync,
        penalty: &[f64],
        min_volume: &[f64],
        reg1: f64,
        reg2: f64,
    ) -> Result<Pipeline> {
        let p = self.problem;
        let mapped = SnapshotMatrix::new(mapped)?;
        let latent = truncated_svd(&mapped, p.latent_rank)?;
        let product = latent.left() * latent.right();
        let n = product.nrows();
        let mut back = DMatrix::zeros(n, product.ncols());
        back.as_mut_slice().par_chunks_mut(n).enumerate().for_each(|(j, out)| {
            placement(j).apply(&p.reference, &product.as_slice()[j * n..(j + 1) * n], p.interp.degree, out);
        });
        let data = (p.snapshots.matrix() - &back).norm();
        let penalty = self.rho * penalty.iter().sum::<f64>();
        let total = if p.squared_norms {
            data * data + reg1 * reg1 + reg2 * reg2 + penalty
        } else {
            data + reg1 + reg2 + penalty
        };
        if !total.is_finite() {
            return Err(Error::NumericalFailure("objective is not finite".into()));
        }
        let min_volume = min_volume.iter().copied().fold(f64::INFINITY, f64::min);
        Ok(Pipeline {
            parts: ObjectiveParts { total, data, reg1, reg2, penalty, min_volume },
            mapped: mapped.into_matrix(),
            latent,
            reconstruction: back,
        })
    }

    /// Unscaled penalty and smallest cell volume of one step.
    fn step_volume(&self, n: usize, coords: &NodeCoords) -> Result<(f64, f64)> {
        let v_min = self.problem.v_min;
        let mut penalty = 0.0;
        let mut min_volume = f64::INFINITY;
        for v in cell_volume_values(coords, &self.problem.reference) {
            if violates(v, 0.0) {
                return Err(Error::NumericalFailure(format!(
                    "step {n}: cell volume {v:e} is not positive, the maps are undefined"
                )));
            }
            min_volume = min_volume.min(v);
            if v < v_min {
                penalty += (v_min - v) * (v_min - v);
            }
        }
        Ok((penalty, min_volume))
    }

    /// Spatial curvature of the basis columns on the fine nodes, all axes
    /// and both lattice directions stacked into one norm.
    fn reg1(&self, g: &MovingGrid) -> f64 {
        if self.problem.gamma1 == 0.0 {
            return 0.0;
        }
        let shape = self.problem.reference.shape();
        let mut sum = 0.0;
        for f in g.factors() {
            for c in 0..f.basis.ncols() {
                let fine = g.upsample(f.basis.column(c).as_slice());
                sum += self.curvature_sq(&fine, &shape);
            }
        }
        sum.sqrt()
    }

    fn curvature_sq(&self, fine: &[f64], shape: &[usize]) -> f64 {
        let mut sum = 0.0;
        let mut buf = vec![0.0; fine.len()];
        let mut ops = self.space_ops.iter();
        if shape.len() == 1 {
            if let Some(op) = ops.next() {
                op.apply_strided(fine, 1, &mut buf);
                sum += buf.iter().map(|v| v * v).sum::<f64>();
            }
            return sum;
        }
        let (nx, ny) = (shape[0], shape[1]);
        if nx >= 3 {
            let op = ops.next().expect("x operator");
            for j in 0..ny {
                op.apply_strided(&fine[j * nx..], 1, &mut buf[..nx]);
                sum += buf[..nx].iter().map(|v| v * v).sum::<f64>();
            }
        }
        if ny >= 3 {
            let op = ops.next().expect("y operator");
            for i in 0..nx {
                op.apply_strided(&fine[i..], nx, &mut buf[i..]);
                sum += (0..ny).map(|j| buf[i + j * nx].powi(2)).sum::<f64>();
            }
        }
        sum
    }

    /// Step-direction curvature of the coefficient rows on the fine steps.
    fn reg2(&self, g: &MovingGrid) -> f64 {
        let Some(op) = &self.step_op else { return 0.0 };
        if self.problem.gamma2 == 0.0 {
            return 0.0;
        }
        let mut sum = 0.0;
        for f in g.factors() {
            for c in 0..f.coeffs.nrows() {
                let row: Vec<f64> = f.coeffs.row(c).iter().copied().collect();
                let fine = g.upsample_steps(&row);
                sum += op.apply(&fine).iter().map(|v| v * v).sum::<f64>();
            }
        }
        sum.sqrt()
    }
}

/// Evaluates the objective at `g`.
pub fn evaluate_objective(p: &RegistrationProblem, g: &MovingGrid) -> Result<ObjectiveParts> {
    p.validate()?;
    Evaluator::new(p)?.objective(g)
}

/// Finite-difference scheme for [`gradient_fd_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdScheme {
    Forward,
    Central,
}

/// Central finite-difference gradient with respect to every free parameter
/// of `g` (see [`MovingGrid::parameters`]).
pub fn gradient_fd(p: &RegistrationProblem, g: &MovingGrid, h: f64) -> Result<Vec<f64>> {
    gradient_fd_with(p, g, h, FdScheme::Central)
}

pub fn gradient_fd_with(p: &RegistrationProblem, g: &MovingGrid, h: f64, scheme: FdScheme) -> Result<Vec<f64>> {
    p.validate()?;
    let eval = Evaluator::new(p)?;
    let f0 = match scheme {
        FdScheme::Forward => Some(eval.objective(g)?.total),
        FdScheme::Central => None,
    };
    grid_gradient(&eval, g, h, scheme, f0)
}

fn grid_gradient(eval: &Evaluator, g: &MovingGrid, h: f64, scheme: FdScheme, f0: Option<f64>) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(invalid_arg(format!("finite-difference step must be positive, got {h}")));
    }
    let x = g.parameters();
    let base = eval.state(g)?;
    let supports: Vec<Support> = (0..x.len()).map(|k| g.parameter_support(k)).collect();
    let f = |k: Option<usize>, params: &[f64]| -> Result<f64> {
        let mut trial = g.clone();
        trial.set_parameters(params)?;
        match k {
            Some(k) => eval.probe(&base, &trial, &supports[k]),
            None => eval.objective(&trial).map(|o| o.total),
        }
    };
    let result = match scheme {
        FdScheme::Central => central_indexed(f, &x, h),
        FdScheme::Forward => forward_indexed(f, &x, h, f0.expect("forward scheme needs f(x)")),
    };
    result.map_err(|e| match e {
        ProbeError { index, source } => Error::NumericalFailure(format!(
            "objective failed at every probe of parameter {} ({}): {source}",
            index,
            g.parameter_name(index)
        )),
    })
}

fn at_step(n: usize, e: Error) -> Error {
    match e {
        Error::NumericalFailure(msg) => Error::NumericalFailure(format!("step {n}: {msg}")),
        other => other,
    }
}

/// Failure of every probe along one coordinate.
#[derive(Debug)]
pub struct ProbeError {
    pub index: usize,
    pub source: Error,
}

/// Central differences of `f` at `x` with step `h`, one coordinate at a
/// time (in parallel). When one side of a probe fails the one-sided
/// difference from the other side is used.
pub fn central_difference<F>(f: F, x: &[f64], h: f64) -> std::result::Result<Vec<f64>, ProbeError>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    central_indexed(|_, y| f(y), x, h)
}

/// Forward differences of `f` at `x` given `fx = f(x)`; falls back to a
/// backward difference when the forward probe fails.
pub fn forward_difference<F>(f: F, x: &[f64], h: f64, fx: f64) -> std::result::Result<Vec<f64>, ProbeError>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    forward_indexed(|_, y| f(y), x, h, fx)
}

/// `f` receives the index of the perturbed coordinate, or `None` at `x`.
fn central_indexed<F>(f: F, x: &[f64], h: f64) -> std::result::Result<Vec<f64>, ProbeError>
where
    F: Fn(Option<usize>, &[f64]) -> Result<f64> + Sync,
{
    let mut f0 = None;
    let grads: Vec<std::result::Result<Option<f64>, ProbeError>> = (0..x.len())
        .into_par_iter()
        .map(|i| {
            let probe = |d: f64| {
                let mut y = x.to_vec();
                y[i] += d;
                f(Some(i), &y)
            };
            match (probe(h), probe(-h)) {
                (Ok(a), Ok(b)) => Ok(Some((a - b) / (2.0 * h))),
                (Err(e), Err(_)) => Err(ProbeError { index: i, source: e }),
                // One side failed; the center value is needed.
                _ => Ok(None),
            }
        })
        .collect();
    let mut out = Vec::with_capacity(x.len());
    for (i, g) in grads.into_iter().enumerate() {
        match g? {
            Some(v) => out.push(v),
            None => {
                let c = match f0 {
                    Some(c) => c,
                    None => {
                        let c = f(None, x).map_err(|source| ProbeError { index: i, source })?;
                        f0 = Some(c);
                        c
                    }
                };
                let mut y = x.to_vec();
                y[i] += h;
                let v = match f(Some(i), &y) {
                    Ok(a) => (a - c) / h,
                    Err(_) => {
                        y[i] = x[i] - h;
                        let b = f(Some(i), &y).map_err(|source| ProbeError { index: i, source })?;
                        (c - b) / h
                    }
                };
                out.push(v);
            }
        }
    }
    Ok(out)
}

fn forward_indexed<F>(f: F, x: &[f64], h: f64, fx: f64) -> std::result::Result<Vec<f64>, ProbeError>
where
    F: Fn(Option<usize>, &[f64]) -> Result<f64> + Sync,
{
    (0..x.len())
        .into_par_iter()
        .map(|i| {
            let mut y = x.to_vec();
            y[i] += h;
            match f(Some(i), &y) {
                Ok(a) => Ok((a - fx) / h),
                Err(e) => {
                    y[i] = x[i] - h;
                    f(Some(i), &y).map(|b| (fx - b) / h).map_err(|_| ProbeError { index: i, source: e })
                }
            }
        })
        .collect()
}

/// Builds the initial grid of `p` (reference grid plus the seeded perturbation).
pub fn initial_grid(p: &RegistrationProblem) -> Result<MovingGrid> {
    MovingGrid::init_from_reference(&p.reference, &p.layout(), p.perturb_scale, p.seed)
}

/// Trains the moving grid from the seeded initialization.
pub fn train(p: &RegistrationProblem) -> Result<RegistrationResult> {
    p.validate()?;
    train_from(p, initial_grid(p)?)
}

/// Trains starting from an explicit grid with the layout of `p`.
pub fn train_from(p: &RegistrationProblem, start: MovingGrid) -> Result<RegistrationResult> {
    p.validate()?;
    if start.layout() != &p.layout() || start.reference() != &p.reference {
        return Err(invalid_arg("starting grid does not match the problem layout"));
    }
    let mut eval = Evaluator::new(p)?;
    let h = p.fd_step_abs();

    let mut grid = start;
    let initial = validate_diffeomorphism(&grid, p.v_min);
    if !initial.passed() {
        return Err(Error::Infeasible(format!(
            "initial grid violates the volume floor {} (minimum cell volume {:e})",
            p.v_min, initial.global_min
        )));
    }
    let mut current = eval.objective(&grid)?;
    let mut trace = vec![TraceRecord { iteration: 0, parts: current }];
    let mut x = grid.parameters();
    let mut grad = grid_gradient(&eval, &grid, h, FdScheme::Central, None)?;
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let max_move = 0.5 * p.reference.min_cell_volume().powf(1.0 / p.reference.dim() as f64);

    let mut escalations = 0;
    let mut stagnant = 0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < p.max_iters {
        if norm_inf(&grad) <= 1e-14 * (1.0 + current.total.abs()) {
            converged = true;
            break;
        }
        let mut direction = lbfgs_direction(&grad, &memory);
        let mut slope = dot(&grad, &direction);
        if !(slope < 0.0) {
            memory.clear();
            direction = grad.iter().map(|v| -v).collect();
            slope = dot(&grad, &direction);
        }
        let mut alpha = if memory.is_empty() { max_move / norm_inf(&direction) } else { 1.0 };
        alpha = alpha.min(8.0 * max_move / norm_inf(&direction));

        let mut accepted = None;
        let mut hit_infeasible = false;
        for _ in 0..30 {
            let trial_x: Vec<f64> = x.iter().zip(&direction).map(|(a, d)| a + alpha * d).collect();
            let mut trial = grid.clone();
            trial.set_parameters(&trial_x)?;
            match eval.objective(&trial) {
                Ok(parts) if parts.min_volume >= p.v_min && parts.min_volume > 0.0 => {
                    if parts.total <= current.total + 1e-4 * alpha * slope {
                        accepted = Some((trial, trial_x, parts));
                        break;
                    }
                }
                _ => hit_infeasible = true,
            }
            alpha *= 0.5;
        }

        let Some((trial, trial_x, parts)) = accepted else {
            if !memory.is_empty() {
                memory.clear();
                continue;
            }
            if hit_infeasible && escalations < 5 {
                escalations += 1;
                eval.rho *= 10.0;
                grad = grid_gradient(&eval, &grid, h, FdScheme::Central, None)?;
                continue;
            }
            break;
        };

        iterations += 1;
        let new_grad = grid_gradient(&eval, &trial, h, FdScheme::Central, None)?;
        let s: Vec<f64> = trial_x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = new_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if memory.len() == p.memory {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }
        let decrease = (current.total - parts.total) / current.total.abs().max(f64::MIN_POSITIVE);
        stagnant = if decrease < p.tolerance { stagnant + 1 } else { 0 };
        grid = trial;
        x = trial_x;
        grad = new_grad;
        current = parts;
        trace.push(TraceRecord { iteration: iterations, parts });
        if stagnant >= 5 {
            converged = true;
            break;
        }
    }

    finish(p, &eval, grid, trace, iterations, converged)
}

/// Pipeline outputs and error metrics of a fixed grid, without training.
pub fn assess(p: &RegistrationProblem, grid: MovingGrid) -> Result<RegistrationResult> {
    p.validate()?;
    if grid.layout() != &p.layout() || grid.reference() != &p.reference {
        return Err(invalid_arg("grid does not match the problem layout"));
    }
    let eval = Evaluator::new(p)?;
    let parts = eval.objective(&grid)?;
    finish(p, &eval, grid, vec![TraceRecord { iteration: 0, parts }], 0, false)
}

fn finish(
    p: &RegistrationProblem,
    eval: &Evaluator,
    grid: MovingGrid,
    trace: Vec<TraceRecord>,
    iterations: usize,
    converged: bool,
) -> Result<RegistrationResult> {
    let volume_report = validate_diffeomorphism(&grid, p.v_min);
    if !volume_report.passed() {
        return Err(Error::Infeasible(format!(
            "no feasible grid found; minimum cell volume {:e} below {}",
            volume_report.global_min, p.v_min
        )));
    }
    let pipe = eval.pipeline(&grid)?;
    let reconstruction = SnapshotMatrix::new(pipe.reconstruction)?;
    let data_error_abs = frobenius_error(&p.snapshots, &reconstruction, false)?;
    let data_error_rel = if p.snapshots.frobenius_norm() > 0.0 {
        frobenius_error(&p.snapshots, &reconstruction, true)?
    } else {
        data_error_abs
    };
    Ok(RegistrationResult {
        grid,
        latent: pipe.latent,
        mapped: SnapshotMatrix::new(pipe.mapped)?,
        reconstruction,
        objective_trace: trace.iter().map(|t| t.parts.total).collect(),
        trace,
        data_error_abs,
        data_error_rel,
        volume_report,
        iterations,
        converged,
    })
}

/// Two-loop recursion; memory holds (s, y, 1/sᵀy).
fn lbfgs_direction(grad: &[f64], memory: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = grad.to_vec();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = memory.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in memory.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}
