//! The subcommands. Every stage reads its inputs from the output directory
//! and writes its artifacts there, so stages can be rerun one at a time.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rgr::datagen::{advecting_gaussian, burgers_solve, rotated_glyph_with, wave_solve, Dataset};
use rgr::forecast::{mse, mse_per_step, pod_forecast, registration_forecast};
use rgr::grid::AxisFactors;
use rgr::io::{format_value, load_matrix, save_matrix};
use rgr::lowrank::{captured_energy, frobenius_error, reconstruct, singular_values, truncated_svd};
use rgr::registration::{assess, train as train_grid, RegistrationResult, TraceRecord};
use rgr::{MovingGrid, ReferenceGrid, RegistrationProblem, SnapshotMatrix};
use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, DatasetConfig, LoadedConfig};
use crate::error::CliError;

pub type Result<T> = std::result::Result<T, CliError>;

const AXES: [&str; 2] = ["x", "y"];

/// A loaded config plus the command-line overrides.
#[derive(Debug)]
pub struct Context {
    pub loaded: LoadedConfig,
    pub out: PathBuf,
    pub seed: u64,
    pub quiet: bool,
}

impl Context {
    /// `out` and `seed` override the config; without either output setting
    /// artifacts go to `out/<name>`.
    pub fn new(config: &Path, out: Option<PathBuf>, seed: Option<u64>, quiet: bool) -> Result<Self> {
        let loaded = LoadedConfig::read(config)?;
        let out = out
            .or_else(|| loaded.config.output.clone())
            .unwrap_or_else(|| Path::new("out").join(&loaded.config.name));
        let seed = seed.unwrap_or(loaded.config.seed);
        Ok(Self { loaded, out, seed, quiet })
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn save(&self, name: &str, m: &DMatrix<f64>) -> Result<()> {
        let path = self.path(name);
        save_matrix(&path, m).map_err(|source| CliError::Artifact { path, source })
    }

    fn load(&self, name: &str) -> Result<DMatrix<f64>> {
        let path = self.path(name);
        load_matrix(&path).map_err(|source| CliError::Artifact { path, source })
    }

    fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, text).map_err(|e| CliError::Artifact { path, source: e.into() })
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T> {
        let path = self.path(name);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::Artifact { path: path.clone(), source: e.into() })?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Artifact { path, source: rgr::Error::Format(e.to_string()) })
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value).expect("plain structs serialize");
        text.push('\n');
        self.write_text(name, &text)
    }

    fn ensure_dir(&self, sub: &str) -> Result<()> {
        let path = self.path(sub);
        std::fs::create_dir_all(&path).map_err(|e| CliError::Artifact { path, source: e.into() })
    }

    fn config_error(&self, key: &str, msg: impl Into<String>) -> CliError {
        self.loaded.error_at(key, msg).into()
    }

    /// The registration problem of the config on the given snapshots.
    fn problem(&self, snapshots: SnapshotMatrix, reference: ReferenceGrid) -> Result<RegistrationProblem> {
        let r = &self.loaded.config.registration;
        let mut p = RegistrationProblem::new(snapshots, reference, r.grid_rank, r.latent_rank);
        r.apply(&mut p);
        p.seed = self.seed;
        p.validate().map_err(|e| self.config_error("registration", e.to_string()))?;
        Ok(p)
    }

    fn load_problem(&self) -> Result<RegistrationProblem> {
        let snapshots = SnapshotMatrix::new(self.load("snapshots.rgr")?)?;
        let reference = self.load_reference()?;
        self.problem(snapshots, reference)
    }

    fn load_reference(&self) -> Result<ReferenceGrid> {
        let mut axes = vec![self.load("reference_x.rgr")?.as_slice().to_vec()];
        if self.path("reference_y.rgr").exists() {
            axes.push(self.load("reference_y.rgr")?.as_slice().to_vec());
        }
        Ok(ReferenceGrid::from_axes(axes)?)
    }
}

/// Builds the snapshots described by the dataset block.
pub fn build_dataset(loaded: &LoadedConfig) -> Result<Dataset> {
    let at = |key: &str, e: rgr::Error| -> CliError {
        match e {
            rgr::Error::InvalidArgument(msg) => loaded.error_at(key, msg).into(),
            other => other.into(),
        }
    };
    match &loaded.config.dataset {
        DatasetConfig::RotatedGlyph(g) => {
            rotated_glyph_with(g.glyph.glyph(), g.size, g.total_degrees, g.increment).map_err(|e| at("generator", e))
        }
        DatasetConfig::Burgers(p) => burgers_solve(&p.to_run()).map_err(|e| at("dx", e)),
        DatasetConfig::Wave(p) => wave_solve(&p.to_run()).map_err(|e| at("dx", e)),
        DatasetConfig::AdvectingGaussian(a) => {
            advecting_gaussian(a.speed, &a.to_run()).map(|(d, _)| d).map_err(|e| at("speed", e))
        }
        DatasetConfig::File(f) => {
            let path = loaded.base_dir().join(&f.snapshots);
            let m = load_matrix(&path).map_err(|source| CliError::Artifact { path, source })?;
            let mut axes = Vec::new();
            for a in std::iter::once(f.x).chain(f.y) {
                let h = (a.end - a.start) / (a.nodes - 1) as f64;
                axes.push((0..a.nodes).map(|i| if i + 1 == a.nodes { a.end } else { a.start + h * i as f64 }).collect());
            }
            let reference = ReferenceGrid::from_axes(axes).map_err(|e| at("x", e))?;
            if m.nrows() != reference.len() {
                return Err(loaded
                    .error_at(
                        "snapshots",
                        format!("{} rows but the reference grid has {} nodes", m.nrows(), reference.len()),
                    )
                    .into());
            }
            let times = (0..m.ncols()).map(|j| j as f64).collect();
            Ok(Dataset { snapshots: SnapshotMatrix::new(m)?, reference, times })
        }
    }
}

/// `generate`: snapshots, reference axes and sample times.
pub fn generate(ctx: &Context) -> Result<Dataset> {
    let t = Instant::now();
    let d = build_dataset(&ctx.loaded)?;
    ctx.ensure_dir("")?;
    ctx.save("snapshots.rgr", d.snapshots.matrix())?;
    for (axis, name) in AXES.iter().enumerate().take(d.reference.dim()) {
        let xs = d.reference.axis(axis);
        ctx.save(&format!("reference_{name}.rgr"), &DMatrix::from_row_slice(1, xs.len(), xs))?;
    }
    let stale = ctx.path("reference_y.rgr");
    if d.reference.dim() == 1 && stale.exists() {
        std::fs::remove_file(&stale).map_err(|e| CliError::Artifact { path: stale, source: e.into() })?;
    }
    ctx.save("times.rgr", &DMatrix::from_row_slice(1, d.times.len(), &d.times))?;
    ctx.say(format!(
        "generate: {}x{} snapshots in {:.2}s",
        d.snapshots.rows(),
        d.snapshots.cols(),
        t.elapsed().as_secs_f64()
    ));
    Ok(d)
}

/// Contents of `training.json`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainingSummary {
    pub iterations: usize,
    pub converged: bool,
    pub wall_time_s: f64,
}

/// `train`: fits the moving grid and writes its factors and the trace.
pub fn train(ctx: &Context) -> Result<RegistrationResult> {
    let p = ctx.load_problem()?;
    let t = Instant::now();
    let result = train_grid(&p)?;
    let wall = t.elapsed().as_secs_f64();
    save_grid(ctx, "", &result.grid)?;
    ctx.write_text("trace.csv", &trace_csv(&result.trace))?;
    ctx.write_json(
        "training.json",
        &TrainingSummary { iterations: result.iterations, converged: result.converged, wall_time_s: wall },
    )?;
    ctx.say(format!(
        "train: {} iterations{} in {:.2}s, relative error {:.4e}",
        result.iterations,
        if result.converged { " (converged)" } else { "" },
        wall,
        result.data_error_rel
    ));
    Ok(result)
}

fn save_grid(ctx: &Context, prefix: &str, g: &MovingGrid) -> Result<()> {
    for (f, name) in g.factors().iter().zip(AXES) {
        ctx.save(&format!("{prefix}grid_basis_{name}.rgr"), &f.basis)?;
        ctx.save(&format!("{prefix}grid_coeffs_{name}.rgr"), &f.coeffs)?;
    }
    Ok(())
}

fn load_grid(ctx: &Context, p: &RegistrationProblem) -> Result<MovingGrid> {
    let factors = AXES[..p.reference.dim()]
        .iter()
        .map(|name| {
            Ok(AxisFactors {
                basis: ctx.load(&format!("grid_basis_{name}.rgr"))?,
                coeffs: ctx.load(&format!("grid_coeffs_{name}.rgr"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MovingGrid::from_factors(p.reference.clone(), p.layout(), factors)?)
}

/// `iteration,total,data,reg1,reg2,penalty,min_volume`, one row per
/// accepted iterate.
pub fn trace_csv(trace: &[TraceRecord]) -> String {
    let mut out = String::from("iteration,total,data,reg1,reg2,penalty,min_volume\n");
    for r in trace {
        let q = &r.parts;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iteration,
            format_value(q.total),
            format_value(q.data),
            format_value(q.reg1),
            format_value(q.reg2),
            format_value(q.penalty),
            format_value(q.min_volume)
        );
    }
    out
}

/// Objective terms at the final grid.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ObjectiveSummary {
    pub total: f64,
    pub data: f64,
    pub reg1: f64,
    pub reg2: f64,
    pub penalty: f64,
}

/// Contents of `metrics.json`. Field order is the key order on disk.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Metrics {
    pub name: String,
    pub seed: u64,
    pub rows: usize,
    pub steps: usize,
    pub grid_rank: usize,
    pub latent_rank: usize,
    pub parameters: usize,
    pub objective: ObjectiveSummary,
    pub data_error_abs: f64,
    pub data_error_rel: f64,
    pub pod_error_abs: f64,
    pub pod_error_rel: f64,
    /// `pod_error_rel / data_error_rel`.
    pub improvement: f64,
    pub energy_snapshots: f64,
    pub energy_mapped: f64,
    pub min_volume: f64,
    pub v_min: f64,
    pub feasible: bool,
    pub iterations: usize,
    pub converged: bool,
    pub singular_values_snapshots: Vec<f64>,
    pub singular_values_mapped: Vec<f64>,
    /// Training time; the only field that differs between identical runs.
    pub wall_time_s: f64,
}

/// `evaluate`: rebuilds the trained grid, reruns the pipeline on it and
/// compares against POD at the same rank.
pub fn evaluate(ctx: &Context) -> Result<Metrics> {
    let p = ctx.load_problem()?;
    let training: TrainingSummary = ctx.read_json("training.json")?;
    let grid = load_grid(ctx, &p)?;
    let r = assess(&p, grid)?;
    let pod = reconstruct(&truncated_svd(&p.snapshots, p.latent_rank)?)?;
    let pod_error_abs = frobenius_error(&p.snapshots, &pod, false)?;
    let pod_error_rel =
        if p.snapshots.frobenius_norm() > 0.0 { frobenius_error(&p.snapshots, &pod, true)? } else { pod_error_abs };
    let sv_m = singular_values(&p.snapshots);
    let sv_g = singular_values(&r.mapped);
    let parts = r.trace[0].parts;

    ctx.save("latent_left.rgr", r.latent.left())?;
    ctx.save("latent_right.rgr", r.latent.right())?;
    ctx.save("mapped.rgr", r.mapped.matrix())?;
    ctx.save("reconstruction.rgr", r.reconstruction.matrix())?;
    let nodes = r.grid.assemble_all();
    for (axis, name) in AXES.iter().enumerate().take(p.reference.dim()) {
        let m = DMatrix::from_fn(p.reference.len(), p.snapshots.cols(), |i, n| nodes[n][axis][i]);
        ctx.save(&format!("grid_nodes_{name}.rgr"), &m)?;
    }
    ctx.write_text("spectrum.csv", &spectrum_csv(&sv_m, &sv_g))?;

    let metrics = Metrics {
        name: ctx.loaded.config.name.clone(),
        seed: ctx.seed,
        rows: p.snapshots.rows(),
        steps: p.snapshots.cols(),
        grid_rank: p.grid_rank,
        latent_rank: p.latent_rank,
        parameters: r.grid.parameter_count(),
        objective: ObjectiveSummary {
            total: parts.total,
            data: parts.data,
            reg1: parts.reg1,
            reg2: parts.reg2,
            penalty: parts.penalty,
        },
        data_error_abs: r.data_error_abs,
        data_error_rel: r.data_error_rel,
        pod_error_abs,
        pod_error_rel,
        improvement: pod_error_rel / r.data_error_rel,
        energy_snapshots: captured_energy(&sv_m, p.latent_rank),
        energy_mapped: captured_energy(&sv_g, p.latent_rank),
        min_volume: r.volume_report.global_min,
        v_min: p.v_min,
        feasible: r.volume_report.passed(),
        iterations: training.iterations,
        converged: training.converged,
        singular_values_snapshots: sv_m,
        singular_values_mapped: sv_g,
        wall_time_s: training.wall_time_s,
    };
    ctx.write_json("metrics.json", &metrics)?;
    ctx.say(format!(
        "evaluate: relative error {:.4e} vs POD {:.4e}",
        metrics.data_error_rel, metrics.pod_error_rel
    ));
    Ok(metrics)
}

/// `index,snapshots,mapped`: singular values of M and G(M).
pub fn spectrum_csv(m: &[f64], g: &[f64]) -> String {
    let mut out = String::from("index,snapshots,mapped\n");
    for (i, (a, b)) in m.iter().zip(g).enumerate() {
        let _ = writeln!(out, "{},{},{}", i + 1, format_value(*a), format_value(*b));
    }
    out
}

/// Contents of `forecast/forecast.json`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ForecastSummary {
    pub name: String,
    pub seed: u64,
    pub split: f64,
    pub train_steps: usize,
    pub horizon: usize,
    pub control_steps: usize,
    pub order: usize,
    pub ridge: f64,
    pub latent_rank: usize,
    /// Always `"per_entry"`: squared error summed over the test block and
    /// divided by its number of entries.
    pub mse_normalization: String,
    /// Reconstruction error over the training steps.
    pub registration_train_mse: f64,
    pub pod_train_mse: f64,
    /// Forecast error over the test steps.
    pub registration_mse: f64,
    pub pod_mse: f64,
    pub registration_mse_per_step: Vec<f64>,
    pub pod_mse_per_step: Vec<f64>,
    pub training_iterations: usize,
    pub training_error_rel: f64,
    pub wall_time_s: f64,
}

/// Control steps for the training window: the same step spacing as the
/// full-length layout.
pub fn split_control_steps(full_steps: usize, full_control: usize, train_steps: usize) -> usize {
    if full_steps < 2 {
        return train_steps;
    }
    let spacing = (full_steps - 1) as f64 / (full_control.max(2) - 1) as f64;
    (((train_steps - 1) as f64 / spacing).round() as usize + 1).clamp(2.min(train_steps), train_steps)
}

/// `forecast`: trains on the leading steps, extrapolates the latents with
/// an AR model and compares against the same AR model on POD latents.
pub fn forecast(ctx: &Context) -> Result<ForecastSummary> {
    let Some(cfg) = ctx.loaded.config.forecast.clone() else {
        return Err(ConfigError {
            path: ctx.loaded.path.clone(),
            line: None,
            message: "the forecast subcommand needs a \"forecast\" block".into(),
        }
        .into());
    };
    let full = ctx.load_problem()?;
    let k = full.snapshots.cols();
    let train_steps = (cfg.split * k as f64).round() as usize;
    if train_steps < cfg.order + 2 || train_steps >= k {
        return Err(ctx.config_error(
            "split",
            format!("split {} leaves {train_steps} of {k} steps for training", cfg.split),
        ));
    }
    let horizon = cfg.horizon.unwrap_or(k - train_steps);
    if horizon == 0 || horizon > k - train_steps {
        return Err(ctx.config_error("horizon", format!("horizon must lie in 1..={}", k - train_steps)));
    }
    let m = full.snapshots.matrix();
    let train_m = SnapshotMatrix::new(m.columns(0, train_steps).into_owned())?;
    let truth = SnapshotMatrix::new(m.columns(train_steps, horizon).into_owned())?;
    let mut p = ctx.problem(train_m.clone(), full.reference.clone())?;
    p.control_steps = split_control_steps(k, full.control_steps, train_steps);

    let t = Instant::now();
    let trained = train_grid(&p)?;
    let wall = t.elapsed().as_secs_f64();
    let phys = registration_forecast(&trained, p.v_min, cfg.order, cfg.ridge, horizon, &p.interp)?;
    let pod = pod_forecast(&train_m, p.latent_rank, cfg.order, cfg.ridge, horizon)?;
    let pod_train = reconstruct(&truncated_svd(&train_m, p.latent_rank)?)?;

    ctx.ensure_dir("forecast")?;
    save_grid(ctx, "forecast/", &trained.grid)?;
    ctx.write_text("forecast/trace.csv", &trace_csv(&trained.trace))?;
    ctx.save("forecast/truth.rgr", truth.matrix())?;
    ctx.save("forecast/registration.rgr", phys.matrix())?;
    ctx.save("forecast/pod.rgr", pod.matrix())?;
    let per_step_phys = mse_per_step(&truth, &phys)?;
    let per_step_pod = mse_per_step(&truth, &pod)?;
    let mut csv = String::from("step,registration,pod\n");
    for (i, (a, b)) in per_step_phys.iter().zip(&per_step_pod).enumerate() {
        let _ = writeln!(csv, "{},{},{}", train_steps + i, format_value(*a), format_value(*b));
    }
    ctx.write_text("forecast/forecast_mse.csv", &csv)?;

    let summary = ForecastSummary {
        name: ctx.loaded.config.name.clone(),
        seed: ctx.seed,
        split: cfg.split,
        train_steps,
        horizon,
        control_steps: p.control_steps,
        order: cfg.order,
        ridge: cfg.ridge,
        latent_rank: p.latent_rank,
        mse_normalization: "per_entry".into(),
        registration_train_mse: mse(&train_m, &trained.reconstruction)?,
        pod_train_mse: mse(&train_m, &pod_train)?,
        registration_mse: mse(&truth, &phys)?,
        pod_mse: mse(&truth, &pod)?,
        registration_mse_per_step: per_step_phys,
        pod_mse_per_step: per_step_pod,
        training_iterations: trained.iterations,
        training_error_rel: trained.data_error_rel,
        wall_time_s: wall,
    };
    ctx.write_json("forecast/forecast.json", &summary)?;
    ctx.say(format!(
        "forecast: test MSE {:.4e} vs POD {:.4e} over {horizon} steps",
        summary.registration_mse, summary.pod_mse
    ));
    Ok(summary)
}

/// What `run` produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: Metrics,
    pub forecast: Option<ForecastSummary>,
}

/// `run`: generate, train, evaluate, and forecast when configured.
pub fn run(ctx: &Context) -> Result<RunOutput> {
    generate(ctx)?;
    train(ctx)?;
    let metrics = evaluate(ctx)?;
    let forecast = match ctx.loaded.config.forecast {
        Some(_) => Some(forecast(ctx)?),
        None => None,
    };
    Ok(RunOutput { metrics, forecast })
}

/// `export-csv`: the matrix file as CSV text.
pub fn export_csv(path: &Path) -> Result<String> {
    let m = load_matrix(path).map_err(|source| CliError::Artifact { path: path.to_path_buf(), source })?;
    Ok(rgr::io::to_csv(&m))
}
