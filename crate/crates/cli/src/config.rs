//! Experiment configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//! checks = ["spectrum", "theorem"]
//!
//! [model]
//! kind = "phi4"
//! a = [[1.0]]
//! g = 1.0
//! nu = -1.0
//!
//! [schedule]
//! kind = "pauli-villars"
//!
//! [t-grid]
//! min = 0.05
//! max = 3.0
//! count = 8
//! spacing = "log"
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use polchinski_core::phi4::Phi4Model;
use polchinski_core::{CovarianceSchedule, Drift, PotentialDescriptor, PotentialForm, QuadratureRule, ScheduleKind};
use serde::{Deserialize, Serialize};

use crate::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckKind {
    Spectrum,
    Theorem,
    HigherK,
    Intertwining,
    Variance,
    Criterion,
    Phi4Identity,
    Heatflow,
}

impl CheckKind {
    pub const ALL: [CheckKind; 8] = [
        CheckKind::Spectrum,
        CheckKind::Theorem,
        CheckKind::HigherK,
        CheckKind::Intertwining,
        CheckKind::Variance,
        CheckKind::Criterion,
        CheckKind::Phi4Identity,
        CheckKind::Heatflow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckKind::Spectrum => "spectrum",
            CheckKind::Theorem => "theorem",
            CheckKind::HigherK => "higher-k",
            CheckKind::Intertwining => "intertwining",
            CheckKind::Variance => "variance",
            CheckKind::Criterion => "criterion",
            CheckKind::Phi4Identity => "phi4-identity",
            CheckKind::Heatflow => "heatflow",
        }
    }
}

impl fmt::Display for CheckKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown check '{s}'")))
    }
}

pub type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelConfig {
    /// `V₀ = 0` in dimension `dim`.
    Gaussian { dim: usize },
    /// `V₀ = ½⟨x, Bx⟩`.
    Quadratic { b: Matrix },
    /// Lattice φ⁴ with coupling matrix `a`, or nearest-neighbour on `sites` sites.
    Phi4 {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        a: Option<Matrix>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sites: Option<usize>,
        g: f64,
        nu: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        h: Option<Vec<f64>>,
    },
    /// `Σᵢ ¼ quartic[i] xᵢ⁴ + ½ quadratic[i] xᵢ² − linear[i] xᵢ`.
    CustomPoly {
        quartic: Vec<f64>,
        quadratic: Vec<f64>,
        linear: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: String,
    /// `C_∞` for heat-kernel and custom-table schedules.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_infinity: Option<Matrix>,
    /// `A` for Pauli–Villars when the model does not carry one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Matrix>,
    /// Tabulated `(t, C, C', C'')` for custom-table schedules.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Spacing {
    Lin,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct TimeGridConfig {
    pub min: f64,
    pub max: f64,
    pub count: usize,
    pub spacing: Spacing,
}

impl TimeGridConfig {
    pub fn times(&self) -> Vec<f64> {
        let n = self.count;
        (0..n)
            .map(|i| {
                let f = i as f64 / (n - 1) as f64;
                match self.spacing {
                    Spacing::Lin => self.min + (self.max - self.min) * f,
                    Spacing::Log => (self.min.ln() + (self.max.ln() - self.min.ln()) * f).exp(),
                }
            })
            .collect()
    }
}

fn default_half_width() -> f64 {
    4.0
}
fn default_points() -> usize {
    1025
}
fn default_order() -> usize {
    QuadratureRule::default().order()
}
fn default_eigen_count() -> usize {
    3
}
fn default_refine() -> usize {
    16
}
fn default_sd_multiple() -> f64 {
    8.0
}
fn default_drift() -> String {
    Drift::ScriptL.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct DiscretizationConfig {
    /// Half-width of the box sampled for curvature extrema.
    #[serde(default = "default_half_width")]
    pub half_width: f64,
    /// Grid nodes per axis for flow measures.
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default = "default_order")]
    pub quadrature_order: usize,
    /// Number of nonzero eigenvalues computed per time.
    #[serde(default = "default_eigen_count")]
    pub eigen_count: usize,
    /// Curvature subintervals per step of the time grid.
    #[serde(default = "default_refine")]
    pub refine: usize,
    /// Box half-width of flow grids in standard deviations of `C_∞ − C_t`.
    #[serde(default = "default_sd_multiple")]
    pub sd_multiple: f64,
    #[serde(default = "default_drift")]
    pub drift: String,
}

impl Default for DiscretizationConfig {
    fn default() -> Self {
        Self {
            half_width: default_half_width(),
            points: default_points(),
            quadrature_order: default_order(),
            eigen_count: default_eigen_count(),
            refine: default_refine(),
            sd_multiple: default_sd_multiple(),
            drift: default_drift(),
        }
    }
}

fn default_horizon() -> f64 {
    1e5
}
fn default_variance_count() -> usize {
    400
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct VarianceConfig {
    /// Last time of the integration grid.
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    /// Log-spaced times after 0.
    #[serde(default = "default_variance_count")]
    pub count: usize,
}

impl Default for VarianceConfig {
    fn default() -> Self {
        Self {
            horizon: default_horizon(),
            count: default_variance_count(),
        }
    }
}

fn default_heat_input() -> String {
    "uniform".into()
}
fn default_s_max() -> f64 {
    2.0
}
fn default_s_count() -> usize {
    9
}
fn default_heat_points() -> usize {
    1025
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct HeatflowConfig {
    /// `uniform`, `gaussian`, or a path to a two-column density table.
    #[serde(default = "default_heat_input")]
    pub input: String,
    #[serde(default = "default_s_max")]
    pub s_max: f64,
    #[serde(default = "default_s_count")]
    pub s_count: usize,
    #[serde(default = "default_heat_points")]
    pub points: usize,
}

impl Default for HeatflowConfig {
    fn default() -> Self {
        Self {
            input: default_heat_input(),
            s_max: default_s_max(),
            s_count: default_s_count(),
            points: default_heat_points(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    pub checks: Vec<String>,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub t_grid: TimeGridConfig,
    #[serde(default)]
    pub discretization: DiscretizationConfig,
    #[serde(default)]
    pub variance: VarianceConfig,
    #[serde(default)]
    pub heatflow: HeatflowConfig,
}

fn matrix(rows: &Matrix, what: &str) -> Result<DMatrix<f64>, ConfigError> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(ConfigError::Invalid(format!("{what} must be a non-empty square matrix")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Parsed check names, deduplicated in execution order.
    pub fn check_kinds(&self) -> Result<Vec<CheckKind>, ConfigError> {
        let mut kinds = self.checks.iter().map(|c| c.parse()).collect::<Result<Vec<CheckKind>, _>>()?;
        kinds.sort();
        kinds.dedup();
        Ok(kinds)
    }

    pub fn drift(&self) -> Result<Drift, ConfigError> {
        self.discretization
            .drift
            .parse()
            .map_err(|_| ConfigError::Invalid(format!("unknown drift '{}'", self.discretization.drift)))
    }

    pub fn is_phi4(&self) -> bool {
        matches!(self.model, ModelConfig::Phi4 { .. })
    }

    pub fn dim(&self) -> Result<usize, ConfigError> {
        Ok(match &self.model {
            ModelConfig::Gaussian { dim } => *dim,
            ModelConfig::Quadratic { b } => b.len(),
            ModelConfig::Phi4 { .. } => self.phi4_model()?.sites(),
            ModelConfig::CustomPoly { quartic, .. } => quartic.len(),
        })
    }

    /// Checks everything that can be checked without numerical work.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let kinds = self.check_kinds()?;
        let tg = &self.t_grid;
        if tg.count < 2 {
            return Err(ConfigError::Invalid("t-grid count must be at least 2".into()));
        }
        if !(tg.min >= 0.0 && tg.max > tg.min && tg.max.is_finite()) {
            return Err(ConfigError::Invalid("t-grid needs 0 <= min < max".into()));
        }
        if tg.spacing == Spacing::Log && tg.min <= 0.0 {
            return Err(ConfigError::Invalid("log-spaced t-grid needs min > 0".into()));
        }
        let d = &self.discretization;
        if d.points < 9 || d.points % 2 == 0 {
            return Err(ConfigError::Invalid("discretization points must be odd and at least 9".into()));
        }
        if !(d.half_width > 0.0) || !(d.sd_multiple > 0.0) || d.refine == 0 || d.eigen_count == 0 {
            return Err(ConfigError::Invalid(
                "half-width, sd-multiple, refine and eigen-count must be positive".into(),
            ));
        }
        QuadratureRule::new(d.quadrature_order).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.drift()?;
        if self.dim()? == 0 {
            return Err(ConfigError::Invalid("model dimension must be positive".into()));
        }
        self.potential()?;
        self.schedule()?;
        if self.is_phi4() && self.seed.is_none() && self.dim()? > polchinski_core::phi4::MAX_QUADRATURE_SITES {
            return Err(ConfigError::Invalid("a seed is required when moments are sampled".into()));
        }
        for k in &kinds {
            if matches!(k, CheckKind::Phi4Identity) && !self.is_phi4() {
                return Err(ConfigError::Invalid("phi4-identity needs a phi4 model".into()));
            }
        }
        if kinds.contains(&CheckKind::Heatflow) {
            let h = &self.heatflow;
            if h.s_count < 2 || !(h.s_max > 0.0) || h.points < 9 {
                return Err(ConfigError::Invalid("heatflow needs s-count >= 2, s-max > 0, points >= 9".into()));
            }
        }
        if kinds.contains(&CheckKind::Variance) && (self.variance.count < 2 || !(self.variance.horizon > 0.0)) {
            return Err(ConfigError::Invalid("variance needs count >= 2 and horizon > 0".into()));
        }
        Ok(())
    }

    pub fn phi4_model(&self) -> Result<Phi4Model, ConfigError> {
        let ModelConfig::Phi4 { a, sites, g, nu, h } = &self.model else {
            return Err(ConfigError::Invalid("model is not phi4".into()));
        };
        let a = match (a, sites) {
            (Some(a), None) => matrix(a, "model.a")?,
            (None, Some(n)) if *n > 0 => Phi4Model::nearest_neighbor(*n),
            _ => return Err(ConfigError::Invalid("phi4 model needs exactly one of 'a' or 'sites'".into())),
        };
        let n = a.nrows();
        let h = h.clone().unwrap_or_else(|| vec![0.0; n]);
        Phi4Model::new(a, *g, *nu, h).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn potential(&self) -> Result<PotentialDescriptor, ConfigError> {
        let invalid = |e: polchinski_core::Error| ConfigError::Invalid(e.to_string());
        match &self.model {
            ModelConfig::Gaussian { dim } => {
                if *dim == 0 {
                    return Err(ConfigError::Invalid("dim must be positive".into()));
                }
                Ok(PotentialDescriptor::zero(*dim))
            }
            ModelConfig::Quadratic { b } => PotentialDescriptor::quadratic(matrix(b, "model.b")?).map_err(invalid),
            ModelConfig::Phi4 { .. } => self.phi4_model()?.potential().map_err(invalid),
            ModelConfig::CustomPoly {
                quartic,
                quadratic,
                linear,
            } => PotentialDescriptor::new(
                PotentialForm::Polynomial {
                    quartic: quartic.clone(),
                    quadratic: quadratic.clone(),
                    linear: linear.clone(),
                },
                quartic.len(),
            )
            .map_err(invalid),
        }
    }

    pub fn schedule(&self) -> Result<CovarianceSchedule, ConfigError> {
        let invalid = |e: polchinski_core::Error| ConfigError::Invalid(e.to_string());
        let kind: ScheduleKind = self.schedule.kind.parse().map_err(invalid)?;
        let dim = self.dim()?;
        let c_inf = match &self.schedule.c_infinity {
            Some(m) => matrix(m, "schedule.c-infinity")?,
            None => DMatrix::identity(dim, dim),
        };
        let s = match kind {
            ScheduleKind::HeatKernel => CovarianceSchedule::heat_kernel(c_inf).map_err(invalid)?,
            ScheduleKind::PauliVillars => {
                let a = match (&self.schedule.a, self.is_phi4()) {
                    (Some(a), _) => matrix(a, "schedule.a")?,
                    (None, true) => self.phi4_model()?.a().clone(),
                    (None, false) => DMatrix::identity(dim, dim),
                };
                CovarianceSchedule::pauli_villars(&a).map_err(invalid)?
            }
            ScheduleKind::CustomTable => {
                let path = self
                    .schedule
                    .table
                    .as_ref()
                    .ok_or_else(|| ConfigError::Invalid("custom-table schedule needs 'table'".into()))?;
                CovarianceSchedule::from_table_file(path, c_inf).map_err(invalid)?
            }
        };
        if s.dim() != dim {
            return Err(ConfigError::Invalid(format!(
                "schedule dimension {} does not match model dimension {dim}",
                s.dim()
            )));
        }
        if self.is_phi4() && kind != ScheduleKind::PauliVillars {
            return Err(ConfigError::Invalid("phi4 models use the pauli-villars schedule".into()));
        }
        Ok(s)
    }

    pub fn quadrature(&self) -> QuadratureRule {
        QuadratureRule::new(self.discretization.quadrature_order).expect("validated quadrature order")
    }
}
