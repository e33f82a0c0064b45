//! Strict TOML scenario configuration.
//!
//! The schema is nested tables with `deny_unknown_fields` everywhere, so a
//! misspelt key is a parse error with its full field path rather than a
//! silently ignored setting. Parsing and validation never start a
//! computation; every cross-field constraint (dimension agreement, section
//! matching the selected model kind) is checked by [`ScenarioConfig::build`].

use ndarray::Array2;
use rsmp_core::bsde::BackwardConfig;
use rsmp_core::forward::ForwardConfig;
use rsmp_core::grid::TimeGrid;
use rsmp_core::hjb::{JumpBoundary, StateWindow};
use rsmp_core::model::builtins::{
    example1, example2, linear_quadratic, Example1Params, Example2Params, LinearQuadraticParams,
};
use rsmp_core::model::expr::{build_custom, CustomModelDef};
use rsmp_core::model::{ControlPolicy, ModelSpec};
use rsmp_core::mp::MaxConditionOptions;
use rsmp_core::regime::RegimeGenerator;
use rsmp_core::spike::RatesConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Top-level scenario document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub model: ModelConfig,
    pub generator: GeneratorConfig,
    pub grid: GridConfig,
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub backward: BackwardParams,
    #[serde(default)]
    pub condition: ConditionConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spike: Option<SpikeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hjb: Option<HjbConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Model selector plus at most one parameter section, which must match the
/// selected kind; builtin families fall back to their documented defaults
/// when the section is omitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub example1: Option<Example1Section>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub example2: Option<Example2Section>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub linear_quadratic: Option<LinearQuadraticSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom: Option<CustomSection>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Example1,
    Example2,
    LinearQuadratic,
    Custom,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Example1 => "example1",
            ModelKind::Example2 => "example2",
            ModelKind::LinearQuadratic => "linear-quadratic",
            ModelKind::Custom => "custom",
        }
    }
}

/// Noise-control family; defaults mirror the builtin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example1Section {
    #[serde(default = "default_sigma")]
    pub sigma: Vec<f64>,
    #[serde(default = "default_gamma")]
    pub gamma: Vec<Vec<f64>>,
    #[serde(default = "default_cost_slope")]
    pub cost_slope: f64,
    #[serde(default)]
    pub state_modulation: f64,
}

fn default_sigma() -> Vec<f64> {
    Example1Params::default().sigma
}
fn default_gamma() -> Vec<Vec<f64>> {
    Example1Params::default().gamma
}
fn default_cost_slope() -> f64 {
    Example1Params::default().cost_slope
}

impl Default for Example1Section {
    fn default() -> Self {
        Self {
            sigma: default_sigma(),
            gamma: default_gamma(),
            cost_slope: default_cost_slope(),
            state_modulation: 0.0,
        }
    }
}

/// Recursive-utility family; vector lengths default to the generator size.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example2Section {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_offset: Option<Vec<f64>>,
    #[serde(default)]
    pub state_tilt: f64,
}

/// Regime-modulated linear-quadratic family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearQuadraticSection {
    pub drift_x: Vec<f64>,
    pub drift_u: Vec<f64>,
    pub diff_x: Vec<f64>,
    pub diff_u: Vec<f64>,
    pub diff_const: Vec<f64>,
    pub jump_loading: Vec<Vec<f64>>,
    pub cost_x: f64,
    pub cost_u: f64,
    pub terminal_x: f64,
    pub control_lo: f64,
    pub control_hi: f64,
}

/// Expression-based scalar model; see the expression module for the
/// variables each field may reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomSection {
    pub drift: Vec<String>,
    pub diffusion: Vec<String>,
    pub jump: Vec<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub running_cost: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_cost: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub driver: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub terminal_value: Option<Vec<String>>,
    pub control_lo: f64,
    pub control_hi: f64,
}

/// Regime chain generator matrix (rows must sum to zero, off-diagonal
/// entries must be nonnegative).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub rates: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub horizon: f64,
    pub n_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default = "default_x0")]
    pub x0: Vec<f64>,
    #[serde(default)]
    pub initial_regime: usize,
}

fn default_x0() -> Vec<f64> {
    vec![0.0]
}

/// Candidate (constant) control under which paths are simulated and the
/// optimality checks are run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    #[serde(default = "default_policy_u")]
    pub u: Vec<f64>,
}

fn default_policy_u() -> Vec<f64> {
    vec![0.0]
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            u: default_policy_u(),
        }
    }
}

/// Backward-solver tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackwardParams {
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default = "default_picard")]
    pub picard_iterations: usize,
}

fn default_degree() -> usize {
    BackwardConfig::default().degree
}
fn default_picard() -> usize {
    BackwardConfig::default().picard_iterations
}

impl Default for BackwardParams {
    fn default() -> Self {
        Self {
            degree: default_degree(),
            picard_iterations: default_picard(),
        }
    }
}

/// Pointwise minimum-condition check options plus the pass-fraction
/// threshold the `check-mp`/`recursive` commands enforce.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionConfig {
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "default_cond_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_paths")]
    pub max_paths: usize,
    #[serde(default = "default_pass_fraction")]
    pub pass_fraction: f64,
}

fn default_grid_points() -> usize {
    MaxConditionOptions::default().grid_points
}
fn default_cond_tolerance() -> f64 {
    MaxConditionOptions::default().tolerance
}
fn default_max_paths() -> usize {
    MaxConditionOptions::default().max_paths
}
fn default_pass_fraction() -> f64 {
    0.99
}

impl Default for ConditionConfig {
    fn default() -> Self {
        Self {
            grid_points: default_grid_points(),
            tolerance: default_cond_tolerance(),
            max_paths: default_max_paths(),
            pass_fraction: default_pass_fraction(),
        }
    }
}

/// Spike probe: window start, spike value and window-length ladder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpikeConfig {
    pub v: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_ladder: Option<Vec<f64>>,
}

/// Finite-difference solver window and control discretization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HjbConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_max: Option<f64>,
    pub n_cells: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_steps: Option<usize>,
    #[serde(default = "default_control_points")]
    pub control_points: usize,
    #[serde(default)]
    pub boundary: BoundaryKind,
    #[serde(default = "default_dominance_policies")]
    pub dominance_policies: usize,
    #[serde(default = "default_value_tolerance")]
    pub value_tolerance: f64,
}

fn default_control_points() -> usize {
    21
}
fn default_dominance_policies() -> usize {
    20
}
fn default_value_tolerance() -> f64 {
    5e-3
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryKind {
    #[default]
    Extrapolate,
    Clamp,
}

impl From<BoundaryKind> for JumpBoundary {
    fn from(b: BoundaryKind) -> Self {
        match b {
            BoundaryKind::Extrapolate => JumpBoundary::Extrapolate,
            BoundaryKind::Clamp => JumpBoundary::Clamp,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
}

/// Everything a command needs, converted into core types.
pub struct BuiltScenario {
    pub config: ScenarioConfig,
    pub spec: ModelSpec,
    pub generator: RegimeGenerator,
    pub grid: TimeGrid,
    pub forward: ForwardConfig,
    pub policy: ControlPolicy,
    pub backward: BackwardConfig,
}

/// Parses a TOML document strictly, reporting the path of the offending
/// field on error.
pub fn parse_config(text: &str) -> Result<ScenarioConfig, CliError> {
    let de = toml::de::Deserializer::parse(text)
        .map_err(|e| CliError::config(format!("config parse: {e}")))?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        CliError::config(format!("config field `{}`: {}", e.path(), e.inner()))
    })
}

impl ScenarioConfig {
    /// Validates cross-field constraints and converts to core types. The
    /// optional `seed` overrides the configured one.
    pub fn build(&self, seed_override: Option<u64>) -> Result<BuiltScenario, CliError> {
        let rows = self.generator.rates.len();
        if rows == 0 || self.generator.rates.iter().any(|r| r.len() != rows) {
            return Err(CliError::config(
                "generator.rates must be a nonempty square matrix".into(),
            ));
        }
        let mut q = Array2::zeros((rows, rows));
        for (i, row) in self.generator.rates.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                q[[i, j]] = *v;
            }
        }
        let generator = RegimeGenerator::new(q).map_err(CliError::from_core_config)?;

        let spec = self.build_spec(&generator)?;
        if spec.dims.regimes != rows {
            return Err(CliError::config(format!(
                "model has {} regimes but generator.rates is {rows}x{rows}",
                spec.dims.regimes
            )));
        }

        let grid = TimeGrid::new(self.grid.horizon, self.grid.n_steps)
            .map_err(CliError::from_core_config)?;

        if self.simulation.x0.len() != spec.dims.state {
            return Err(CliError::config(format!(
                "simulation.x0 has dimension {}, model state has {}",
                self.simulation.x0.len(),
                spec.dims.state
            )));
        }
        if self.simulation.initial_regime >= rows {
            return Err(CliError::config(format!(
                "simulation.initial_regime {} out of range (generator has {rows} states)",
                self.simulation.initial_regime
            )));
        }
        if self.simulation.n_paths == 0 {
            return Err(CliError::config("simulation.n_paths must be positive".into()));
        }
        if self.policy.u.len() != spec.dims.control {
            return Err(CliError::config(format!(
                "policy.u has dimension {}, model control has {}",
                self.policy.u.len(),
                spec.dims.control
            )));
        }
        if let Some(sp) = &self.spike {
            if sp.v.len() != spec.dims.control {
                return Err(CliError::config(format!(
                    "spike.v has dimension {}, model control has {}",
                    sp.v.len(),
                    spec.dims.control
                )));
            }
            if let Some(tau) = sp.tau {
                if !(0.0..self.grid.horizon).contains(&tau) {
                    return Err(CliError::config(format!(
                        "spike.tau = {tau} outside [0, horizon)"
                    )));
                }
            }
            if let Some(ladder) = &sp.eps_ladder {
                if ladder.is_empty() || ladder.iter().any(|e| !(*e > 0.0)) {
                    return Err(CliError::config(
                        "spike.eps_ladder must hold positive lengths".into(),
                    ));
                }
            }
        }
        if let Some(h) = &self.hjb {
            if h.n_cells < 2 {
                return Err(CliError::config("hjb.n_cells must be at least 2".into()));
            }
            if h.control_points == 0 {
                return Err(CliError::config("hjb.control_points must be positive".into()));
            }
            if let (Some(lo), Some(hi)) = (h.x_min, h.x_max) {
                if !(lo < hi) {
                    return Err(CliError::config(format!(
                        "hjb window [{lo}, {hi}] is empty"
                    )));
                }
            }
            if h.x_min.is_some() != h.x_max.is_some() {
                return Err(CliError::config(
                    "hjb.x_min and hjb.x_max must be given together".into(),
                ));
            }
        }

        let mut forward = ForwardConfig {
            n_paths: self.simulation.n_paths,
            seed: self.simulation.seed,
            x0: self.simulation.x0.clone(),
            initial_regime: self.simulation.initial_regime,
        };
        if let Some(s) = seed_override {
            forward.seed = s;
        }

        Ok(BuiltScenario {
            config: self.clone(),
            spec,
            generator,
            grid,
            forward,
            policy: ControlPolicy::constant(self.policy.u.clone()),
            backward: BackwardConfig {
                degree: self.backward.degree,
                picard_iterations: self.backward.picard_iterations,
            },
        })
    }

    fn build_spec(&self, generator: &RegimeGenerator) -> Result<ModelSpec, CliError> {
        let m = &self.model;
        let stray: &[(&str, bool)] = &[
            ("model.example1", m.example1.is_some() && m.kind != ModelKind::Example1),
            ("model.example2", m.example2.is_some() && m.kind != ModelKind::Example2),
            (
                "model.linear_quadratic",
                m.linear_quadratic.is_some() && m.kind != ModelKind::LinearQuadratic,
            ),
            ("model.custom", m.custom.is_some() && m.kind != ModelKind::Custom),
        ];
        if let Some((name, _)) = stray.iter().find(|(_, bad)| *bad) {
            return Err(CliError::config(format!(
                "section {name} does not match model.kind = \"{}\"",
                m.kind.as_str()
            )));
        }
        match m.kind {
            ModelKind::Example1 => {
                let s = m.example1.clone().unwrap_or_default();
                example1(&Example1Params {
                    sigma: s.sigma,
                    gamma: s.gamma,
                    cost_slope: s.cost_slope,
                    state_modulation: s.state_modulation,
                })
                .map_err(CliError::from_core_config)
            }
            ModelKind::Example2 => {
                let s = m.example2.clone().unwrap_or_default();
                let mut p = Example2Params::with_regimes(generator.num_states());
                if let Some(nu) = s.nu {
                    p.nu = nu;
                }
                if let Some(a) = s.terminal_offset {
                    p.terminal_offset = a;
                }
                p.state_tilt = s.state_tilt;
                example2(&p, generator).map_err(CliError::from_core_config)
            }
            ModelKind::LinearQuadratic => {
                let s = m.linear_quadratic.clone().ok_or_else(|| {
                    CliError::config(
                        "model.kind = \"linear-quadratic\" needs a [model.linear_quadratic] section"
                            .into(),
                    )
                })?;
                linear_quadratic(&LinearQuadraticParams {
                    drift_x: s.drift_x,
                    drift_u: s.drift_u,
                    diff_x: s.diff_x,
                    diff_u: s.diff_u,
                    diff_const: s.diff_const,
                    jump_loading: s.jump_loading,
                    cost_x: s.cost_x,
                    cost_u: s.cost_u,
                    terminal_x: s.terminal_x,
                    control_lo: s.control_lo,
                    control_hi: s.control_hi,
                })
                .map_err(CliError::from_core_config)
            }
            ModelKind::Custom => {
                let s = m.custom.clone().ok_or_else(|| {
                    CliError::config(
                        "model.kind = \"custom\" needs a [model.custom] section".into(),
                    )
                })?;
                build_custom(&CustomModelDef {
                    regimes: generator.num_states(),
                    drift: s.drift,
                    diffusion: s.diffusion,
                    jump: s.jump,
                    running_cost: s.running_cost,
                    terminal_cost: s.terminal_cost,
                    driver: s.driver,
                    terminal_value: s.terminal_value,
                    control_lo: s.control_lo,
                    control_hi: s.control_hi,
                })
                .map_err(CliError::from_core_config)
            }
        }
    }

    /// Spike probe resolved against the time grid, with the documented
    /// geometric defaults for window start and ladder.
    pub fn rates_config(&self) -> Result<RatesConfig, CliError> {
        let sp = self
            .spike
            .as_ref()
            .ok_or_else(|| CliError::config("this command needs a [spike] section".into()))?;
        let mut cfg = RatesConfig::geometric(self.grid.horizon, sp.v.clone());
        if let Some(tau) = sp.tau {
            cfg.tau = tau;
        }
        if let Some(ladder) = &sp.eps_ladder {
            cfg.eps_ladder = ladder.clone();
        }
        Ok(cfg)
    }

    pub fn condition_options(&self) -> MaxConditionOptions {
        MaxConditionOptions {
            grid_points: self.condition.grid_points,
            tolerance: self.condition.tolerance,
            max_paths: self.condition.max_paths,
        }
    }

    /// Resolves the finite-difference window, defaulting to one centered at
    /// `x0` with the diffusion-scaled half width.
    pub fn hjb_window(
        &self,
        spec: &ModelSpec,
        grid: TimeGrid,
        controls: &[Vec<f64>],
    ) -> Result<(StateWindow, TimeGrid), CliError> {
        let h = self
            .hjb
            .as_ref()
            .ok_or_else(|| CliError::config("this command needs an [hjb] section".into()))?;
        let fine = match h.time_steps {
            Some(n) => TimeGrid::new(self.grid.horizon, n).map_err(CliError::from_core_config)?,
            None => grid,
        };
        let window = match (h.x_min, h.x_max) {
            (Some(lo), Some(hi)) => {
                StateWindow::new(lo, hi, h.n_cells).map_err(CliError::from_core_config)?
            }
            _ => {
                let x0 = self.simulation.x0[0];
                let half = StateWindow::default_half_width(spec, fine, x0, controls)
                    .map_err(CliError::from_core_config)?;
                let dx = 2.0 * half / h.n_cells as f64;
                StateWindow::centered(x0, half, dx).map_err(CliError::from_core_config)?
            }
        };
        Ok((window, fine))
    }
}
