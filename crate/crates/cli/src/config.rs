//! Experiment configuration: a strict TOML schema with a default for every tolerance.

use std::path::Path;
use std::sync::Arc;

use greenlab::bounds::SampleFilter;
use greenlab::coefficients::{CoefficientField, CoefficientSpec};
use greenlab::elliptic::{EllipticSampling, TimeQuadrature};
use greenlab::expr::Expr;
use greenlab::green::SourceMode;
use greenlab::grid::{GridConfig, SpaceTimeGrid, SpaceTimePoint};
use greenlab::linalg::IterativeConfig;
use greenlab::solver::{Direction, MassKind, SolverOptions};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Check,
    Solve,
    Green,
    Fit,
    Davies,
    Degiorgi,
    Elliptic,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::Check,
        Experiment::Solve,
        Experiment::Green,
        Experiment::Fit,
        Experiment::Davies,
        Experiment::Degiorgi,
        Experiment::Elliptic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Check => "check",
            Experiment::Solve => "solve",
            Experiment::Green => "green",
            Experiment::Fit => "fit",
            Experiment::Davies => "davies",
            Experiment::Degiorgi => "degiorgi",
            Experiment::Elliptic => "elliptic",
        }
    }

    /// Experiments whose outputs this one consumes.
    pub fn requires(self) -> &'static [Experiment] {
        match self {
            Experiment::Fit | Experiment::Degiorgi => &[Experiment::Green],
            _ => &[],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub strict: bool,
    /// Parabolic rescaling `(t, x) -> (r^2 t, r x)` applied to the coefficients.
    #[serde(default = "one")]
    pub rescale: f64,
    #[serde(default)]
    pub experiments: Vec<Experiment>,
    pub grid: GridConfig,
    pub coefficients: CoefficientSpec,
    #[serde(default)]
    pub check: CheckSettings,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub solve: SolveSettings,
    #[serde(default)]
    pub green: GreenSettings,
    #[serde(default)]
    pub fit: FitSettings,
    #[serde(default)]
    pub davies: DaviesSettings,
    #[serde(default)]
    pub degiorgi: DeGiorgiSettings,
    #[serde(default)]
    pub elliptic: EllipticSettings,
    #[serde(default)]
    pub sweep: SweepSettings,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckSettings {
    pub probe_directions: usize,
    /// Largest cell Peclet number `|b|_inf h / nu` before a warning.
    pub peclet_warn: f64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        Self {
            probe_directions: 8,
            peclet_warn: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSettings {
    pub mass: MassKind,
    pub quad_points: usize,
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        let it = IterativeConfig::default();
        Self {
            mass: MassKind::Consistent,
            quad_points: 3,
            rel_tol: it.rel_tol,
            max_iter: it.max_iter,
        }
    }
}

impl SolverSettings {
    pub fn options(&self) -> SolverOptions {
        SolverOptions {
            mass: self.mass,
            quad_points: self.quad_points,
            iterative: IterativeConfig {
                rel_tol: self.rel_tol,
                max_iter: self.max_iter,
            },
            ..SolverOptions::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveSettings {
    /// Initial (forward) or terminal (backward) data; a narrow Gaussian at the box center if unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<Expr>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<Expr>,
    pub direction: Direction,
    /// The experiment fails if the energy ratio exceeds this.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energy_bound: Option<f64>,
    pub step_stride: usize,
    pub node_stride: usize,
}

impl Default for SolveSettings {
    fn default() -> Self {
        Self {
            data: None,
            source: None,
            direction: Direction::Forward,
            energy_bound: None,
            step_stride: 10,
            node_stride: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GreenSettings {
    /// Poles `Y = (s, y)`; the box center at `t_start` if empty.
    pub poles: Vec<SpaceTimePoint>,
    /// Poles `X = (t, x)` of adjoint kernels; a duality check runs when non-empty.
    pub adjoint_poles: Vec<SpaceTimePoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    pub mode: SourceMode,
    pub duality_tol: f64,
    pub step_stride: usize,
    pub node_stride: usize,
}

impl Default for GreenSettings {
    fn default() -> Self {
        Self {
            poles: Vec::new(),
            adjoint_poles: Vec::new(),
            epsilon: None,
            mode: SourceMode::Point,
            duality_tol: 1e-9,
            step_stride: 10,
            node_stride: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSettings {
    pub filter: SampleFilter,
    pub margin: f64,
    /// Check the kernels against this `(C, kappa)` instead of the fitted pair.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub envelope: Option<[f64; 2]>,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            filter: SampleFilter::default(),
            margin: 0.1,
            envelope: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DaviesSettings {
    pub gamma1: Vec<f64>,
    /// Weight direction; `e_1` if empty.
    pub direction: Vec<f64>,
    pub cn: f64,
    pub slack: f64,
    /// Starting data `f`; a bump at the box center if unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<Expr>,
    /// Also check `I(t) <= factor I(s) e^{2 rate gamma1^2 (t - s)}` with an explicit rate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub true_rate: Option<f64>,
    pub true_rate_factor: f64,
}

impl Default for DaviesSettings {
    fn default() -> Self {
        Self {
            gamma1: vec![0.5, 1.0, 2.0],
            direction: Vec::new(),
            cn: 1.0,
            slack: 0.1,
            data: None,
            true_rate: None,
            true_rate_factor: 1.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeGiorgiSettings {
    /// Radii of the local boundedness cylinders, centered at `(s + 2 r^2, y)` for the first pole.
    pub n0_radii: Vec<f64>,
    pub n0_tol: f64,
    pub radius: f64,
    pub delta: f64,
    pub levels: usize,
}

impl Default for DeGiorgiSettings {
    fn default() -> Self {
        Self {
            n0_radii: vec![0.25, 0.5, 1.0],
            n0_tol: 0.2,
            radius: 1.0,
            delta: 0.1,
            levels: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EllipticSettings {
    /// The box center if unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pole: Option<Vec<f64>>,
    pub quadrature: TimeQuadrature,
    pub sampling: EllipticSampling,
    /// Reference value of `sup |G| |x - y|` and the allowed relative deviation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub expected_constant: Option<f64>,
    pub tolerance: f64,
}

impl Default for EllipticSettings {
    fn default() -> Self {
        Self {
            pole: None,
            quadrature: TimeQuadrature::default(),
            sampling: EllipticSampling::default(),
            expected_constant: None,
            tolerance: 0.2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSettings {
    /// Dotted path of a numeric config field, e.g. `coefficients.theta` or `grid.cells.0`.
    pub axis: String,
    pub values: Vec<f64>,
}

/// A validated config with the objects built from it.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub grid: Arc<SpaceTimeGrid>,
    pub coeffs: CoefficientField,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Schema(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn center(&self) -> Vec<f64> {
        self.grid.lower.iter().zip(&self.grid.upper).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn poles(&self) -> Vec<SpaceTimePoint> {
        if self.green.poles.is_empty() {
            vec![SpaceTimePoint::new(self.grid.t_start, &self.center())]
        } else {
            self.green.poles.clone()
        }
    }

    /// Builds the grid and coefficients and checks the settings. Every failure is a schema error.
    pub fn prepare(self) -> Result<Prepared, CliError> {
        let grid = SpaceTimeGrid::build(&self.grid).map_err(|e| CliError::Schema(e.to_string()))?;
        let spec = self.coefficients.clone();
        if spec.dim != grid.dim() {
            return Err(CliError::Schema(format!("coefficients.dim = {} but the grid has dimension {}", spec.dim, grid.dim())));
        }
        let mut coeffs = CoefficientField::new(spec).map_err(|e| CliError::Schema(e.to_string()))?;
        if !(self.rescale > 0.0 && self.rescale.is_finite()) {
            return Err(CliError::Schema(format!("rescale = {} must be positive", self.rescale)));
        }
        if self.rescale != 1.0 {
            coeffs = coeffs.rescale(self.rescale).map_err(|e| CliError::Schema(e.to_string()))?;
        }
        let n = grid.dim();
        for p in self.green.poles.iter().chain(&self.green.adjoint_poles) {
            if p.x.len() != n {
                return Err(CliError::Schema(format!("pole {:?} has {} coordinates, expected {n}", p.x, p.x.len())));
            }
        }
        let strides = [self.solve.step_stride, self.solve.node_stride, self.green.step_stride, self.green.node_stride];
        if strides.contains(&0) {
            return Err(CliError::Schema("output strides must be at least 1".into()));
        }
        if !self.davies.direction.is_empty() && self.davies.direction.len() != n {
            return Err(CliError::Schema(format!("davies.direction needs {n} components")));
        }
        if self.davies.gamma1.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(CliError::Schema("davies.gamma1 entries must be finite and non-negative".into()));
        }
        if let Some(p) = &self.elliptic.pole {
            if p.len() != n {
                return Err(CliError::Schema(format!("elliptic.pole needs {n} coordinates")));
            }
        }
        if !(self.degiorgi.delta > 0.0 && self.degiorgi.radius > 0.0) || self.degiorgi.n0_radii.iter().any(|r| !(*r > 0.0)) {
            return Err(CliError::Schema("degiorgi radii and delta must be positive".into()));
        }
        if self.experiments.contains(&Experiment::Elliptic) && n != 3 {
            return Err(CliError::Schema(format!("the elliptic experiment needs n = 3, got n = {n}")));
        }
        Ok(Prepared {
            grid: Arc::new(grid),
            coeffs,
            config: self,
        })
    }

    /// The config with the numeric field at `path` replaced by `value`.
    pub fn with_override(&self, path: &str, value: f64) -> Result<Self, CliError> {
        let mut root = toml::Value::try_from(self).map_err(|e| CliError::Schema(e.to_string()))?;
        let mut cur = &mut root;
        let parts: Vec<&str> = path.split('.').collect();
        if path.is_empty() || parts.iter().any(|p| p.is_empty()) {
            return Err(CliError::InvalidAxis(path.to_string()));
        }
        for part in &parts {
            cur = match cur {
                toml::Value::Table(t) => t.get_mut(*part),
                toml::Value::Array(a) => part.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
                _ => None,
            }
            .ok_or_else(|| CliError::InvalidAxis(path.to_string()))?;
        }
        *cur = match cur {
            toml::Value::Float(_) => toml::Value::Float(value),
            toml::Value::Integer(_) if value.fract() == 0.0 => toml::Value::Integer(value as i64),
            toml::Value::String(s) if s == "inf" => toml::Value::Float(value),
            _ => return Err(CliError::InvalidAxis(format!("{path} is not a numeric field"))),
        };
        let text = toml::to_string(&root).map_err(|e| CliError::Schema(e.to_string()))?;
        Self::from_toml(&text)
    }
}
