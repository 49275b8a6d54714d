//! Experiment definitions loaded from JSON.

use std::path::{Path, PathBuf};

use pile_core::constraint::{BoundParams, Norm};
use pile_core::control::{ControlProblem, StepRule};
use pile_core::dynamics::{discretize_rate, PulseSource, Scheme, SolveOptions, TimeGrid};
use pile_core::grid::Grid;
use pile_core::optimality::{CertificateOptions, CheckMode};
use pile_core::Field;
use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{path}: {reason}")]
    Invalid { path: String, reason: String },
}

fn invalid(path: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.to_string(),
        reason: reason.into(),
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub material: MaterialConfig,
    #[serde(default)]
    pub time: TimeConfig,
    #[serde(default)]
    pub source: SourceConfig,
    #[serde(default)]
    pub support: SupportConfig,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub check: CheckConfig,
    #[serde(default)]
    pub seed: u64,
    /// Directory that relative paths inside the config resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    /// One-dimensional grid of `nx` nodes; `ny` is ignored.
    pub line: bool,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            nx: 9,
            ny: 9,
            line: false,
        }
    }
}

/// `p` is a number `>= 1` or the string `"inf"`.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum PValue {
    Number(f64),
    Name(String),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaterialConfig {
    pub alpha: f64,
    pub eps_interp: f64,
    pub eps_smooth: f64,
    pub p: PValue,
}

impl Default for MaterialConfig {
    fn default() -> Self {
        MaterialConfig {
            alpha: 1.0,
            eps_interp: 0.05,
            eps_smooth: 0.01,
            p: PValue::Number(2.0),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeConfig {
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "M")]
    pub steps: usize,
}

impl Default for TimeConfig {
    fn default() -> Self {
        TimeConfig {
            horizon: 1.0,
            steps: 20,
        }
    }
}

/// Poured material. `rate` is mass per unit time for a point source and a
/// height rate otherwise; the source is on over `[start, stop)`.
#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    Point {
        #[serde(default = "centre")]
        location: [f64; 2],
        #[serde(default = "default_mass")]
        rate: f64,
        #[serde(default)]
        start: f64,
        #[serde(default)]
        stop: Option<f64>,
    },
    Uniform {
        rate: f64,
        #[serde(default)]
        start: f64,
        #[serde(default)]
        stop: Option<f64>,
    },
    Custom {
        values: Vec<f64>,
        #[serde(default)]
        start: f64,
        #[serde(default)]
        stop: Option<f64>,
    },
}

fn centre() -> [f64; 2] {
    [0.5, 0.5]
}

fn default_mass() -> f64 {
    0.02
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig::Point {
            location: centre(),
            rate: default_mass(),
            start: 0.0,
            stop: None,
        }
    }
}

/// The reference support `y0_ref`, also the initial state of simulations.
#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SupportConfig {
    Flat {
        #[serde(default)]
        height: f64,
    },
    /// `offset + slope . (x, y)`.
    Ramp {
        slope: [f64; 2],
        #[serde(default)]
        offset: f64,
    },
    /// Nodal values given inline or as a `node,y0` CSV file.
    Custom {
        #[serde(default)]
        values: Option<Vec<f64>>,
        #[serde(default)]
        path: Option<PathBuf>,
    },
}

impl Default for SupportConfig {
    fn default() -> Self {
        SupportConfig::Flat { height: 0.0 }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    pub sigma: f64,
    /// Observation region `[x0, x1, y0, y1]`.
    pub region: [f64; 4],
    pub lambda0: f64,
    pub lambda1: f64,
    pub gamma: f64,
    pub scheme: Scheme,
    pub tol: f64,
    pub max_iter: usize,
    pub samples: usize,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            sigma: 1.0,
            region: [0.0, 0.5, 0.0, 0.5],
            lambda0: 0.0,
            lambda1: 0.1,
            gamma: 10.0,
            scheme: Scheme::SemiImplicit,
            tol: 1e-8,
            max_iter: 200,
            samples: 100,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub gamma_schedule: Vec<f64>,
    pub inner_tol: f64,
    pub picard_tol: f64,
    pub picard_max: usize,
    pub damping: f64,
    pub newton_max: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let d = SolveOptions::default();
        SolverConfig {
            gamma_schedule: d.gamma_schedule,
            inner_tol: d.inner_tol,
            picard_tol: d.picard_tol,
            picard_max: d.picard_max,
            damping: d.damping,
            newton_max: d.newton_max,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckConfig {
    pub mode: CheckMode,
    pub tol: f64,
    pub act_tol: Option<f64>,
    pub degenerate: bool,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            mode: CheckMode::DerivedConsistent,
            tol: 1e-8,
            act_tol: None,
            degenerate: false,
        }
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = serde_json::from_str(text)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let mut cfg: ExperimentConfig = serde_json::from_str(&text)?;
    cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    cfg.validate()?;
    Ok(cfg)
}

fn positive(path: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(path, format!("must be positive, got {v}")))
    }
}

fn source_window(path: &str, start: f64, stop: Option<f64>) -> Result<(), ConfigError> {
    if !start.is_finite() || stop.is_some_and(|s| !(s >= start)) {
        return Err(invalid(path, "need a finite start and stop >= start"));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.grid.nx == 0 {
            return Err(invalid("grid.nx", "must be at least 1"));
        }
        if !self.grid.line && self.grid.ny == 0 {
            return Err(invalid("grid.ny", "must be at least 1"));
        }
        positive("material.alpha", self.material.alpha)?;
        positive("material.eps_interp", self.material.eps_interp)?;
        positive("material.eps_smooth", self.material.eps_smooth)?;
        self.norm()?;
        positive("time.T", self.time.horizon)?;
        if self.time.steps == 0 {
            return Err(invalid("time.M", "must be at least 1"));
        }
        match &self.source {
            SourceConfig::Point {
                location,
                rate,
                start,
                stop,
            } => {
                if !location.iter().all(|v| (0.0..=1.0).contains(v)) {
                    return Err(invalid("source.location", "must lie in the unit square"));
                }
                if !rate.is_finite() {
                    return Err(invalid("source.rate", "must be finite"));
                }
                source_window("source.start", *start, *stop)?;
            }
            SourceConfig::Uniform { rate, start, stop } => {
                if !rate.is_finite() {
                    return Err(invalid("source.rate", "must be finite"));
                }
                source_window("source.start", *start, *stop)?;
            }
            SourceConfig::Custom { values, start, stop } => {
                if values.len() != self.nodes() {
                    return Err(invalid(
                        "source.values",
                        format!("expected {} values, got {}", self.nodes(), values.len()),
                    ));
                }
                source_window("source.start", *start, *stop)?;
            }
        }
        match &self.support {
            SupportConfig::Custom { values, path } => match (values, path) {
                (Some(v), None) if v.len() != self.nodes() => {
                    return Err(invalid(
                        "support.values",
                        format!("expected {} values, got {}", self.nodes(), v.len()),
                    ))
                }
                (Some(_), None) | (None, Some(_)) => {}
                _ => return Err(invalid("support", "custom support needs exactly one of values and path")),
            },
            SupportConfig::Flat { height } if !height.is_finite() => {
                return Err(invalid("support.height", "must be finite"))
            }
            _ => {}
        }
        let c = &self.control;
        positive("control.sigma", c.sigma)?;
        positive("control.gamma", c.gamma)?;
        positive("control.tol", c.tol)?;
        if !(c.lambda0 >= 0.0) {
            return Err(invalid("control.lambda0", format!("must be nonnegative, got {}", c.lambda0)));
        }
        if !(c.lambda0 <= c.lambda1) || !c.lambda1.is_finite() {
            return Err(invalid(
                "control.lambda0",
                format!("must not exceed control.lambda1 ({} > {})", c.lambda0, c.lambda1),
            ));
        }
        let [x0, x1, y0, y1] = c.region;
        if !(x0 <= x1 && y0 <= y1) {
            return Err(invalid("control.region", "expected [x0, x1, y0, y1] with x0 <= x1, y0 <= y1"));
        }
        self.solve_options()
            .validate()
            .map_err(|e| invalid("solver", e.to_string()))?;
        positive("check.tol", self.check.tol)?;
        if let Some(a) = self.check.act_tol {
            positive("check.act_tol", a)?;
        }
        Ok(())
    }

    fn nodes(&self) -> usize {
        if self.grid.line {
            self.grid.nx
        } else {
            self.grid.nx * self.grid.ny
        }
    }

    pub fn norm(&self) -> Result<Norm, ConfigError> {
        let norm = match &self.material.p {
            PValue::Number(p) if *p == 2.0 => Norm::L2,
            PValue::Number(p) if p.is_infinite() => Norm::Inf,
            PValue::Number(p) => Norm::P(*p),
            PValue::Name(s) if s == "inf" => Norm::Inf,
            PValue::Name(s) => return Err(invalid("material.p", format!("expected a number or \"inf\", got {s:?}"))),
        };
        norm.validate().map_err(|e| invalid("material.p", e.to_string()))?;
        Ok(norm)
    }

    pub fn grid(&self) -> Grid {
        let g = if self.grid.line {
            Grid::line(self.grid.nx)
        } else {
            Grid::new(self.grid.nx, self.grid.ny)
        };
        g.expect("validated grid sizes")
    }

    pub fn bound_params(&self) -> BoundParams {
        let m = &self.material;
        BoundParams::new(m.alpha, m.eps_interp, m.eps_smooth, self.norm().expect("validated norm"))
            .expect("validated material")
    }

    pub fn time_grid(&self) -> TimeGrid {
        TimeGrid::new(self.time.horizon, self.time.steps).expect("validated time grid")
    }

    pub fn solve_options(&self) -> SolveOptions {
        let s = &self.solver;
        SolveOptions {
            gamma_schedule: s.gamma_schedule.clone(),
            inner_tol: s.inner_tol,
            picard_tol: s.picard_tol,
            picard_max: s.picard_max,
            damping: s.damping,
            newton_max: s.newton_max,
        }
    }

    /// Interval-averaged rates `f_1..f_M`.
    pub fn rates(&self) -> Vec<Field> {
        let grid = self.grid();
        let (rate, start, stop) = match &self.source {
            SourceConfig::Point {
                location,
                rate,
                start,
                stop,
            } => {
                // concentrate on one node and scale so the inflow is grid independent
                let mut f = grid.zeros();
                f[grid.nearest_node(location[0], location[1])] = rate / grid.cell_measure();
                (f, *start, *stop)
            }
            SourceConfig::Uniform { rate, start, stop } => (Field::from_element(grid.n(), *rate), *start, *stop),
            SourceConfig::Custom { values, start, stop } => (Field::from_column_slice(values), *start, *stop),
        };
        let src = PulseSource {
            rate,
            start,
            stop: stop.unwrap_or(f64::INFINITY),
        };
        discretize_rate(&src, &self.time_grid())
    }

    pub fn support(&self) -> Result<Field, ConfigError> {
        let grid = self.grid();
        match &self.support {
            SupportConfig::Flat { height } => Ok(Field::from_element(grid.n(), *height)),
            SupportConfig::Ramp { slope, offset } => Ok(Field::from_fn(grid.n(), |i, _| {
                let (x, y) = grid.coordinates(i);
                offset + slope[0] * x + slope[1] * y
            })),
            SupportConfig::Custom { values: Some(v), .. } => Ok(Field::from_column_slice(v)),
            SupportConfig::Custom { path: Some(p), .. } => {
                let path = self.base_dir.join(p);
                let v = crate::io::read_node_values(&path).map_err(|e| invalid("support.path", e))?;
                if v.len() != grid.n() {
                    return Err(invalid(
                        "support.path",
                        format!("expected {} values, got {}", grid.n(), v.len()),
                    ));
                }
                Ok(v)
            }
            SupportConfig::Custom { .. } => Err(invalid("support", "custom support needs values or path")),
        }
    }

    pub fn control_problem(&self) -> Result<ControlProblem, ConfigError> {
        let grid = self.grid();
        let c = &self.control;
        let [x0, x1, y0, y1] = c.region;
        let a = grid
            .region_weights(&grid.rectangle_mask(x0, x1, y0, y1))
            .map_err(|e| invalid("control.region", e.to_string()))?;
        let n = grid.n();
        Ok(ControlProblem {
            a,
            sigma: c.sigma,
            y0_ref: self.support()?,
            lambda0: Field::from_element(n, c.lambda0),
            lambda1: Field::from_element(n, c.lambda1),
            tg: self.time_grid(),
            f: self.rates(),
            bp: self.bound_params(),
            gamma: c.gamma,
            scheme: c.scheme,
            grid,
        })
    }

    pub fn step_rule(&self) -> StepRule {
        StepRule {
            tol: self.control.tol,
            max_iter: self.control.max_iter,
            samples: self.control.samples,
            seed: self.seed,
            ..StepRule::default()
        }
    }

    pub fn certificate_options(&self) -> CertificateOptions {
        CertificateOptions {
            mode: self.check.mode,
            degenerate: self.check.degenerate,
            act_tol: self.check.act_tol,
            tol: self.check.tol,
        }
    }
}
