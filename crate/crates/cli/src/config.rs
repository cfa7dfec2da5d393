//! Experiment configuration files (JSON).
//!
//! Parse errors carry the line and column reported by `serde_json`. Semantic
//! checks that run after parsing point at the line where the offending key
//! appears in the source text.

use std::fmt;
use std::path::{Path, PathBuf};

use rgr::datagen::{Glyph, InitialCondition, PdeRunConfig};
use rgr::{InterpConfig, RegistrationProblem};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Output directory; relative paths are taken from the working directory.
    #[serde(default)]
    pub output: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub registration: RegistrationConfig,
    #[serde(default)]
    pub forecast: Option<ForecastConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum DatasetConfig {
    RotatedGlyph(GlyphConfig),
    Burgers(PdeConfig),
    Wave(PdeConfig),
    AdvectingGaussian(AdvectionConfig),
    File(FileConfig),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlyphConfig {
    #[serde(default)]
    pub glyph: GlyphName,
    pub size: usize,
    pub total_degrees: f64,
    pub increment: f64,
}

#[derive(Debug, Clone, Copy, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum GlyphName {
    #[default]
    LetterA,
    Cross,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeConfig {
    pub x_a: f64,
    pub x_b: f64,
    pub t_final: f64,
    pub dx: f64,
    pub dt: f64,
    pub initial: InitialConfig,
    /// Burgers only.
    #[serde(default)]
    pub reynolds: Option<f64>,
    #[serde(default = "one")]
    pub stride: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    Zero,
    Bump { base: f64, amplitude: f64, center: f64, width: f64 },
    Sine { mode: u32 },
}

/// A unit Gaussian of the given center and width carried at `speed`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvectionConfig {
    pub speed: f64,
    pub x_a: f64,
    pub x_b: f64,
    pub t_final: f64,
    pub dx: f64,
    pub dt: f64,
    pub center: f64,
    pub width: f64,
    #[serde(default = "one")]
    pub stride: usize,
}

/// Snapshots from an `RGR1` file on a uniform reference grid.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    /// Relative to the directory of the config file.
    pub snapshots: PathBuf,
    pub x: AxisConfig,
    #[serde(default)]
    pub y: Option<AxisConfig>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisConfig {
    pub start: f64,
    pub end: f64,
    pub nodes: usize,
}

/// Registration settings; omitted fields keep the library defaults.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrationConfig {
    pub grid_rank: usize,
    pub latent_rank: usize,
    pub gamma1: Option<f64>,
    pub gamma2: Option<f64>,
    pub v_min: Option<f64>,
    pub boundary_pinned: Option<bool>,
    pub control_shape: Option<Vec<usize>>,
    pub control_steps: Option<usize>,
    pub upsample_degree: Option<usize>,
    pub interp_degree: Option<usize>,
    pub max_iters: Option<usize>,
    pub perturb_scale: Option<f64>,
    pub penalty_weight: Option<f64>,
    pub squared_norms: Option<bool>,
    pub fd_step: Option<f64>,
    pub tolerance: Option<f64>,
    pub memory: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastConfig {
    /// Fraction of the steps used for training.
    #[serde(default = "default_split")]
    pub split: f64,
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
    /// Steps predicted past the training window; defaults to the rest of
    /// the data.
    #[serde(default)]
    pub horizon: Option<usize>,
}

fn one() -> usize {
    1
}

fn default_split() -> f64 {
    0.6
}

fn default_order() -> usize {
    2
}

fn default_ridge() -> f64 {
    1e-8
}

/// A rejected config file.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: PathBuf,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "{}:{}: {}", self.path.display(), line, self.message),
            None => write!(f, "{}: {}", self.path.display(), self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// A parsed config together with its source, for line lookups.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub path: PathBuf,
    pub source: String,
    pub config: ExperimentConfig,
}

impl LoadedConfig {
    pub fn read(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref().to_path_buf();
        let source = std::fs::read_to_string(&path)
            .map_err(|e| ConfigError { path: path.clone(), line: None, message: format!("cannot read: {e}") })?;
        Self::parse(path, source)
    }

    pub fn parse(path: PathBuf, source: String) -> Result<Self, ConfigError> {
        let config: ExperimentConfig = serde_json::from_str(&source).map_err(|e| ConfigError {
            path: path.clone(),
            line: (e.line() > 0).then_some(e.line()),
            message: e.to_string(),
        })?;
        let loaded = Self { path, source, config };
        loaded.validate()?;
        Ok(loaded)
    }

    /// Error anchored at the first line mentioning `"key"`.
    pub fn error_at(&self, key: &str, message: impl Into<String>) -> ConfigError {
        let quoted = format!("\"{key}\"");
        let line = self.source.lines().position(|l| l.contains(&quoted)).map(|i| i + 1);
        ConfigError { path: self.path.clone(), line, message: message.into() }
    }

    /// Directory that relative dataset paths are resolved against.
    pub fn base_dir(&self) -> PathBuf {
        self.path.parent().map(Path::to_path_buf).unwrap_or_default()
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let c = &self.config;
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(self.error_at(key, format!("{key} must be positive and finite, got {v}")))
            }
        };
        let nonnegative = |key: &str, v: Option<f64>| match v {
            Some(v) if !(v >= 0.0 && v.is_finite()) => {
                Err(self.error_at(key, format!("{key} must be finite and >= 0, got {v}")))
            }
            _ => Ok(()),
        };
        match &c.dataset {
            DatasetConfig::RotatedGlyph(g) => {
                if g.size < 8 {
                    return Err(self.error_at("size", format!("size must be at least 8, got {}", g.size)));
                }
                nonnegative("total_degrees", Some(g.total_degrees))?;
                positive("increment", g.increment)?;
            }
            DatasetConfig::Burgers(p) | DatasetConfig::Wave(p) => {
                self.check_domain(p.x_a, p.x_b, p.t_final, p.dx, p.dt, p.stride)?;
                if let Some(re) = p.reynolds {
                    positive("reynolds", re)?;
                }
                if let (DatasetConfig::Burgers(_), None) = (&c.dataset, p.reynolds) {
                    return Err(self.error_at("generator", "burgers needs a reynolds number"));
                }
                if let InitialConfig::Bump { width, .. } = p.initial {
                    positive("width", width)?;
                }
            }
            DatasetConfig::AdvectingGaussian(a) => {
                self.check_domain(a.x_a, a.x_b, a.t_final, a.dx, a.dt, a.stride)?;
                positive("width", a.width)?;
                if !a.speed.is_finite() {
                    return Err(self.error_at("speed", "speed must be finite"));
                }
            }
            DatasetConfig::File(f) => {
                let path = self.base_dir().join(&f.snapshots);
                if !path.is_file() {
                    return Err(self.error_at("snapshots", format!("{} does not exist", path.display())));
                }
                for (key, axis) in [("x", Some(f.x)), ("y", f.y)] {
                    if let Some(a) = axis {
                        if a.nodes < 2 || !(a.end > a.start) {
                            return Err(self.error_at(key, format!("axis {key} needs end > start and at least 2 nodes")));
                        }
                    }
                }
            }
        }
        let r = &c.registration;
        if r.grid_rank == 0 {
            return Err(self.error_at("grid_rank", "grid_rank must be at least 1"));
        }
        if r.latent_rank == 0 {
            return Err(self.error_at("latent_rank", "latent_rank must be at least 1"));
        }
        nonnegative("gamma1", r.gamma1)?;
        nonnegative("gamma2", r.gamma2)?;
        nonnegative("v_min", r.v_min)?;
        nonnegative("perturb_scale", r.perturb_scale)?;
        nonnegative("penalty_weight", r.penalty_weight)?;
        if let Some(h) = r.fd_step {
            positive("fd_step", h)?;
        }
        if let Some(d) = r.interp_degree {
            InterpConfig::new(d).map_err(|e| self.error_at("interp_degree", e.to_string()))?;
        }
        if let Some(f) = &c.forecast {
            if !(f.split > 0.0 && f.split < 1.0) {
                return Err(self.error_at("split", format!("split must lie in (0, 1), got {}", f.split)));
            }
            if f.order == 0 {
                return Err(self.error_at("order", "order must be at least 1"));
            }
            nonnegative("ridge", Some(f.ridge))?;
        }
        Ok(())
    }

    fn check_domain(&self, x_a: f64, x_b: f64, t_final: f64, dx: f64, dt: f64, stride: usize) -> Result<(), ConfigError> {
        if !(x_b > x_a) || !x_a.is_finite() || !x_b.is_finite() {
            return Err(self.error_at("x_b", format!("x_b must exceed x_a, got [{x_a}, {x_b}]")));
        }
        for (key, v) in [("t_final", t_final), ("dx", dx), ("dt", dt)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(self.error_at(key, format!("{key} must be positive and finite, got {v}")));
            }
        }
        if stride == 0 {
            return Err(self.error_at("stride", "stride must be at least 1"));
        }
        Ok(())
    }
}

impl PdeConfig {
    pub fn to_run(&self) -> PdeRunConfig {
        PdeRunConfig {
            x_a: self.x_a,
            x_b: self.x_b,
            t_final: self.t_final,
            dx: self.dx,
            dt: self.dt,
            initial: match self.initial {
                InitialConfig::Zero => InitialCondition::Zero,
                InitialConfig::Bump { base, amplitude, center, width } => {
                    InitialCondition::Bump { base, amplitude, center, width }
                }
                InitialConfig::Sine { mode } => InitialCondition::Sine { mode },
            },
            reynolds: self.reynolds.unwrap_or(f64::INFINITY),
            stride: self.stride,
        }
    }
}

impl AdvectionConfig {
    pub fn to_run(&self) -> PdeRunConfig {
        PdeRunConfig {
            x_a: self.x_a,
            x_b: self.x_b,
            t_final: self.t_final,
            dx: self.dx,
            dt: self.dt,
            initial: InitialCondition::Bump { base: 0.0, amplitude: 1.0, center: self.center, width: self.width },
            reynolds: f64::INFINITY,
            stride: self.stride,
        }
    }
}

impl GlyphName {
    pub fn glyph(self) -> Glyph {
        match self {
            GlyphName::LetterA => Glyph::LetterA,
            GlyphName::Cross => Glyph::Cross,
        }
    }
}

impl RegistrationConfig {
    /// Applies the configured fields on top of the library defaults.
    pub fn apply(&self, p: &mut RegistrationProblem) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() {
                    p.$field = v;
                })*
            };
        }
        set!(
            gamma1,
            gamma2,
            v_min,
            boundary_pinned,
            control_shape,
            control_steps,
            upsample_degree,
            max_iters,
            perturb_scale,
            penalty_weight,
            squared_norms,
            fd_step,
            tolerance,
            memory
        );
        if let Some(d) = self.interp_degree {
            p.interp = InterpConfig::new(d).expect("validated");
        }
    }
}
