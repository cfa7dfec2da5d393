//! Forecasting beyond the training window.
//!
//! The trained grid is extended in time by continuing its coefficient rows
//! linearly, the latent coordinates are advanced with a ridge-regularized
//! vector autoregressive model, and predictions are decoded through the
//! extended grid with [`map_inverse_from`].

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid_arg, Error, Result};
use crate::grid::{validate_diffeomorphism, AxisFactors, GridLayout, MovingGrid};
use crate::lowrank::{truncated_svd, SnapshotMatrix};
use crate::mapping::{map_inverse_from, InterpConfig};
use crate::registration::RegistrationResult;

/// Latent coordinates over consecutive steps; column `j` belongs to step
/// `first_step + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSeries {
    pub coords: DMatrix<f64>,
    pub first_step: usize,
}

impl LatentSeries {
    pub fn new(coords: DMatrix<f64>, first_step: usize) -> Result<Self> {
        if coords.nrows() == 0 {
            return Err(invalid_arg("latent series needs at least one coordinate"));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("latent series contains non-finite values".into()));
        }
        Ok(Self { coords, first_step })
    }

    pub fn len(&self) -> usize {
        self.coords.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.ncols() == 0
    }

    pub fn dim(&self) -> usize {
        self.coords.nrows()
    }
}

/// `z_n = Σ_i A_i z_{n-i} + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArModel {
    /// `A_1 … A_q`.
    pub coeffs: Vec<DMatrix<f64>>,
    pub bias: DVector<f64>,
    /// Root-mean-square one-step residual on the fitted series.
    pub residual: f64,
}

impl ArModel {
    pub fn order(&self) -> usize {
        self.coeffs.len()
    }

    /// One-step prediction from `history`, most recent value last.
    fn step(&self, history: &[DVector<f64>]) -> DVector<f64> {
        let mut z = self.bias.clone();
        for (i, a) in self.coeffs.iter().enumerate() {
            z += a * &history[history.len() - 1 - i];
        }
        z
    }
}

/// Appends `extra_steps` fine steps to the grid, continuing every
/// coefficient row linearly from its last two control columns. The control
/// step spacing is kept, so control columns are added as needed.
pub fn extend_grid(g: &MovingGrid, extra_steps: usize, v_min: f64) -> Result<MovingGrid> {
    let layout = g.layout();
    let spacing = g.step_spacing();
    let steps = layout.steps + extra_steps;
    let control_steps = (((steps - 1) as f64 / spacing) - 1e-9).ceil() as usize + 1;
    let control_steps = control_steps.max(layout.control_steps);
    let kc = layout.control_steps;
    let factors = g
        .factors()
        .iter()
        .map(|f| {
            let coeffs = DMatrix::from_fn(f.coeffs.nrows(), control_steps, |c, j| {
                if j < kc {
                    f.coeffs[(c, j)]
                } else {
                    let (last, prev) = (f.coeffs[(c, kc - 1)], f.coeffs[(c, kc - 2)]);
                    last + (j - kc + 1) as f64 * (last - prev)
                }
            });
            AxisFactors { basis: f.basis.clone(), coeffs }
        })
        .collect();
    let new_layout = GridLayout { steps, control_steps, ..layout.clone() };
    let extended = MovingGrid::with_spacing(g.reference().clone(), new_layout, factors, spacing)?;
    let report = validate_diffeomorphism(&extended, v_min);
    match report.first_violating_step() {
        Some(step) => Err(Error::InfeasibleExtension { step }),
        None => Ok(extended),
    }
}

/// Least-squares fit of a vector AR(`order`) model with ridge penalty on the
/// lag matrices (the bias is not penalized).
pub fn fit_ar(series: &LatentSeries, order: usize, ridge: f64) -> Result<ArModel> {
    let (k, len) = (series.dim(), series.len());
    if order == 0 {
        return Err(invalid_arg("AR order must be at least 1"));
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(invalid_arg(format!("ridge must be finite and >= 0, got {ridge}")));
    }
    if len <= order + k {
        return Err(invalid_arg(format!(
            "a series of length {len} is too short for order {order} with {k} coordinates"
        )));
    }
    let rows = len - order;
    let cols = order * k + 1;
    let penalized = if ridge > 0.0 { order * k } else { 0 };
    let mut x = DMatrix::zeros(rows + penalized, cols);
    let mut y = DMatrix::zeros(rows + penalized, k);
    for (r, n) in (order..len).enumerate() {
        for lag in 1..=order {
            for c in 0..k {
                x[(r, (lag - 1) * k + c)] = series.coords[(c, n - lag)];
            }
        }
        x[(r, cols - 1)] = 1.0;
        for c in 0..k {
            y[(r, c)] = series.coords[(c, n)];
        }
    }
    for i in 0..penalized {
        x[(rows + i, i)] = ridge.sqrt();
    }
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = 1e-12 * smax.max(f64::MIN_POSITIVE);
    if svd.singular_values.iter().any(|&s| s <= tol) {
        return Err(Error::IllConditioned(format!(
            "the lagged regressors are rank deficient; use a positive ridge (smallest singular value {:e})",
            svd.singular_values.min()
        )));
    }
    let w = svd.solve(&y, 0.0).map_err(|e| Error::NumericalFailure(e.to_string()))?;
    let coeffs = (0..order)
        .map(|lag| DMatrix::from_fn(k, k, |i, j| w[(lag * k + j, i)]))
        .collect();
    let bias = DVector::from_fn(k, |i, _| w[(cols - 1, i)]);
    let fitted = x.rows(0, rows) * &w;
    let err = (y.rows(0, rows) - fitted).norm();
    Ok(ArModel { coeffs, bias, residual: err / ((rows * k) as f64).sqrt() })
}

/// Closed-loop rollout for `horizon` steps past the end of `series`.
pub fn predict(model: &ArModel, series: &LatentSeries, horizon: usize) -> Result<LatentSeries> {
    if series.len() < model.order() {
        return Err(invalid_arg("series is shorter than the model order"));
    }
    if series.dim() != model.bias.len() {
        return Err(invalid_arg("series dimension differs from the model"));
    }
    let mut history: Vec<DVector<f64>> = (series.len() - model.order()..series.len())
        .map(|j| series.coords.column(j).clone_owned())
        .collect();
    let mut out = DMatrix::zeros(series.dim(), horizon);
    for h in 0..horizon {
        let z = model.step(&history);
        out.set_column(h, &z);
        history.remove(0);
        history.push(z);
    }
    Ok(LatentSeries { coords: out, first_step: series.first_step + series.len() })
}

/// Decodes latent predictions: `U·z_n` on the step-n moving grid, then
/// interpolated back to the reference nodes.
pub fn reconstruct_prediction(
    g_ext: &MovingGrid,
    u: &DMatrix<f64>,
    pred: &LatentSeries,
    cfg: &InterpConfig,
) -> Result<SnapshotMatrix> {
    if u.ncols() != pred.dim() {
        return Err(invalid_arg(format!(
            "basis has {} columns but latents have {} coordinates",
            u.ncols(),
            pred.dim()
        )));
    }
    let values = SnapshotMatrix::new(u * &pred.coords)?;
    map_inverse_from(&values, g_ext, pred.first_step, cfg).map(|(m, _)| m)
}

/// Mean squared difference per entry.
pub fn mse(a: &SnapshotMatrix, b: &SnapshotMatrix) -> Result<f64> {
    if a.matrix().shape() != b.matrix().shape() {
        return Err(invalid_arg("mse needs matrices of equal shape"));
    }
    Ok((a.matrix() - b.matrix()).norm_squared() / (a.rows() * a.cols()) as f64)
}

/// Mean squared difference of every column.
pub fn mse_per_step(a: &SnapshotMatrix, b: &SnapshotMatrix) -> Result<Vec<f64>> {
    if a.matrix().shape() != b.matrix().shape() {
        return Err(invalid_arg("mse needs matrices of equal shape"));
    }
    Ok((0..a.cols())
        .map(|j| {
            let d = a.matrix().column(j) - b.matrix().column(j);
            d.norm_squared() / a.rows() as f64
        })
        .collect())
}

/// Forecast through a trained registration: AR on the latent rows, linear
/// grid extension, decode.
pub fn registration_forecast(
    result: &RegistrationResult,
    v_min: f64,
    order: usize,
    ridge: f64,
    horizon: usize,
    cfg: &InterpConfig,
) -> Result<SnapshotMatrix> {
    let series = LatentSeries::new(result.latent.right().clone(), 0)?;
    let model = fit_ar(&series, order, ridge)?;
    let pred = predict(&model, &series, horizon)?;
    let g_ext = extend_grid(&result.grid, horizon, v_min)?;
    reconstruct_prediction(&g_ext, result.latent.left(), &pred, cfg)
}

/// The same forecast on plain POD latents of the training snapshots.
pub fn pod_forecast(train: &SnapshotMatrix, rank: usize, order: usize, ridge: f64, horizon: usize) -> Result<SnapshotMatrix> {
    let f = truncated_svd(train, rank)?;
    let series = LatentSeries::new(f.right().clone(), 0)?;
    let model = fit_ar(&series, order, ridge)?;
    let pred = predict(&model, &series, horizon)?;
    SnapshotMatrix::new(f.left() * pred.coords)
}
