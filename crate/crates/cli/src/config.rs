//! Run configuration: TOML schema, layering, presets and model building.
//!
//! A config is assembled in layers, later layers winning key by key:
//! preset, `--config` file, `--grid`/`--model`/`--failure` section files,
//! then individual flags. The merged table is validated against the schema
//! (unknown keys are rejected) before anything is computed.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use percept_reach::bounds::{build_bounds_field, ControlBoundsField, DarkTimeAxis};
use percept_reach::hamiltonian::{HamiltonianSpec, MAX_ENUMERATED_CONTROLS};
use percept_reach::io;
use percept_reach::models::{BoxSet, TanProportional};
use percept_reach::presets::{RoverPreset, TaxiingPreset};
use percept_reach::{ClosedLoopModel, Controller, Dynamics, ErrorBound, FailureSpec, Grid, SolveConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solve: Option<SolveSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dark: Option<DarkSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<QuerySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc: Option<McSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<PolicySection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub periodic: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// `dubins`, `integrator` or `stationary`.
    pub dynamics: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control_dims: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disturbance_lo: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disturbance_hi: Option<Vec<f64>>,
    /// `tan`, `table`, `mlp`, `rover-mpc` or `rover-mlp`.
    pub controller: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    /// Table or network file for `table` / `mlp`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_epochs: Option<usize>,
    /// `zero`, `fixed` or `growth`.
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub half_widths: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureSection {
    /// `slab`, `circles` or `field`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub magnitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centers: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radii: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveSection {
    pub t0: f64,
    pub t_final: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cfl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub save_stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dissipation: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DarkSection {
    pub max: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSection {
    /// Precomputed control-bounds field used instead of building one.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuerySection {
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub a_count: usize,
    pub b_count: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { a: [-0.03, 0.0], b: [-0.9, 0.0], a_count: 31, b_count: 31 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub samples: usize,
    pub dt: f64,
}

impl Default for McSection {
    fn default() -> Self {
        Self { samples: 1000, dt: 0.05 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    /// Explicit starts. Without them, starts are drawn from the sample box
    /// and kept when unsafe in the dark but safe with lights on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub starts: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_lo: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_hi: Option<Vec<f64>>,
    /// Seconds; defaults to two solver steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    /// Seconds; defaults to the solve horizon.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
}

fn key_error(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {msg}"))
}

fn required<T: Clone>(v: &Option<T>, key: &str, why: &str) -> Result<T, CliError> {
    v.clone().ok_or_else(|| key_error(key, format!("required {why}")))
}

/// Parses a TOML document, reporting syntax errors with their location.
pub fn parse_toml(text: &str, origin: &Path) -> Result<Table, CliError> {
    text.parse::<Table>().map_err(|e| CliError::Config(format!("{}: {e}", origin.display())))
}

pub fn read_toml(path: &Path) -> Result<Table, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_toml(&text, path)
}

/// Deep merge: tables merge key by key, anything else is replaced.
pub fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Validates a merged table against the schema. Errors name the key path.
pub fn from_table(table: Table) -> Result<RunConfig, CliError> {
    let value = Value::Table(table);
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            CliError::Config(inner.to_string())
        } else {
            key_error(&path, inner)
        }
    })
}

pub fn to_table(cfg: &RunConfig) -> Table {
    match Value::try_from(cfg).expect("config serializes") {
        Value::Table(t) => t,
        _ => unreachable!("config is a table"),
    }
}

/// Taxiing case study at one rung of the coverage ladder. The rung
/// dissipation is the widest rung's, so every rung runs the same scheme.
pub fn preset_taxiing(coverage_index: usize, full: bool) -> Result<RunConfig, CliError> {
    let p = TaxiingPreset::new(full);
    let rung = p.ladder.get(coverage_index).ok_or_else(|| {
        key_error("--coverage-index", format!("{coverage_index} is out of range (ladder has {} rungs)", p.ladder.len()))
    })?;
    let g = &p.grid;
    Ok(RunConfig {
        grid: Some(GridSection { lo: g.lo().to_vec(), hi: g.hi().to_vec(), shape: g.shape().to_vec(), periodic: None }),
        model: Some(ModelSection {
            dynamics: "dubins".into(),
            speed: Some(p.speed),
            controller: "tan".into(),
            a: Some(p.a),
            b: Some(p.b),
            error: "fixed".into(),
            half_widths: Some(vec![rung[0], 0.0, rung[1]]),
            ..ModelSection::empty()
        }),
        failure: Some(FailureSection { kind: "slab".into(), dim: Some(0), magnitude: Some(p.keepout), ..FailureSection::empty() }),
        solve: Some(SolveSection {
            t0: 0.0,
            t_final: p.horizon,
            cfl: None,
            save_stride: None,
            dissipation: Some(p.ladder_dissipation()?),
        }),
        query: Some(QuerySection { x0: p.x0.clone() }),
        sweep: Some(SweepSection::default()),
        ..RunConfig::default()
    })
}

/// Rover case study with the lookahead table or its imitation network.
pub fn preset_rover(controller: &str, full: bool) -> Result<RunConfig, CliError> {
    let p = RoverPreset::new(full);
    let controller = match controller {
        "mpc" => "rover-mpc",
        "mlp" => "rover-mlp",
        other => return Err(key_error("--controller", format!("expected mpc or mlp, got {other:?}"))),
    };
    let g = &p.state_grid;
    Ok(RunConfig {
        grid: Some(GridSection {
            lo: g.lo().to_vec(),
            hi: g.hi().to_vec(),
            shape: g.shape().to_vec(),
            periodic: Some(g.periodic().to_vec()),
        }),
        model: Some(ModelSection {
            dynamics: "dubins".into(),
            speed: Some(p.speed),
            controller: controller.into(),
            mlp_epochs: (controller == "rover-mlp").then_some(300),
            error: "growth".into(),
            rates: Some(p.rates.clone()),
            ..ModelSection::empty()
        }),
        failure: Some(FailureSection {
            kind: "circles".into(),
            centers: Some(p.centers.clone()),
            radii: Some(p.radii.clone()),
            ..FailureSection::empty()
        }),
        solve: Some(SolveSection { t0: 0.0, t_final: p.horizon, cfl: None, save_stride: None, dissipation: None }),
        dark: Some(DarkSection { max: p.dark.max, samples: p.dark.samples }),
        query: Some(QuerySection { x0: vec![2.0, 0.0, std::f64::consts::FRAC_PI_2] }),
        mc: Some(McSection::default()),
        policy: Some(PolicySection {
            count: Some(20),
            candidates: Some(4000),
            sample_lo: Some(vec![1.0, -3.5, std::f64::consts::FRAC_PI_2 - 1.0]),
            sample_hi: Some(vec![16.0, 3.5, std::f64::consts::FRAC_PI_2 + 1.0]),
            // one resolution tolerance ε of the desk grid, in seconds at 1 m/s
            margin: Some(0.5),
            ..PolicySection::default()
        }),
        ..RunConfig::default()
    })
}

impl ModelSection {
    fn empty() -> Self {
        Self {
            dynamics: String::new(),
            speed: None,
            dims: None,
            control_dims: None,
            disturbance_lo: None,
            disturbance_hi: None,
            controller: String::new(),
            a: None,
            b: None,
            path: None,
            mlp_epochs: None,
            error: String::new(),
            half_widths: None,
            rates: None,
        }
    }
}

impl FailureSection {
    fn empty() -> Self {
        Self { kind: String::new(), dim: None, magnitude: None, centers: None, radii: None, path: None }
    }
}

/// Everything a subcommand needs, built from a validated config.
pub struct Setup {
    pub cfg: RunConfig,
    pub seed: u64,
    pub state_grid: Arc<Grid>,
    pub model: ClosedLoopModel,
    pub failure: FailureSpec,
    pub solve: SolveConfig,
    pub dark: Option<DarkTimeAxis>,
}

impl Setup {
    pub fn new(cfg: RunConfig) -> Result<Self, CliError> {
        let grid_cfg = required(&cfg.grid, "grid", "(a [grid] section)")?;
        let dims = grid_cfg.lo.len();
        let periodic = grid_cfg.periodic.clone().unwrap_or_else(|| vec![false; dims]);
        let state_grid = Arc::new(
            Grid::new(grid_cfg.lo.clone(), grid_cfg.hi.clone(), grid_cfg.shape.clone(), periodic)
                .map_err(|e| key_error("grid", e))?,
        );
        let dark = cfg.dark.as_ref().map(|d| DarkTimeAxis { max: d.max, samples: d.samples });
        let failure = build_failure(&required(&cfg.failure, "failure", "(a [failure] section)")?, &state_grid)?;
        let model_cfg = required(&cfg.model, "model", "(a [model] section)")?;
        let model = build_model(&model_cfg, &state_grid, cfg.seed.unwrap_or(0))?;
        if model.state_dims() != state_grid.dims() {
            return Err(key_error(
                "grid",
                format!("has {} axes but the model state has {}", state_grid.dims(), model.state_dims()),
            ));
        }
        if matches!(model.error, ErrorBound::LinearGrowth { .. }) && dark.is_none() {
            return Err(key_error("dark", "required when model.error = \"growth\""));
        }
        let s = required(&cfg.solve, "solve", "(a [solve] section)")?;
        let mut solve = SolveConfig::new(s.t0, s.t_final);
        if let Some(c) = s.cfl {
            solve.cfl = c;
        }
        solve.save_stride = s.save_stride;
        solve.dissipation = s.dissipation.clone();
        let seed = cfg.seed.unwrap_or(0);
        Ok(Self { cfg, seed, state_grid, model, failure, solve, dark })
    }

    pub fn has_growth(&self) -> bool {
        matches!(self.model.error, ErrorBound::LinearGrowth { .. })
    }

    /// State grid, extended by the dark-time axis when the error grows.
    pub fn solve_grid(&self) -> Result<Arc<Grid>, CliError> {
        match (self.has_growth(), self.dark) {
            (true, Some(d)) => Ok(Arc::new(d.extend(&self.state_grid)?)),
            _ => Ok(self.state_grid.clone()),
        }
    }

    /// Control bounds for `model`: imported when `[bounds] path` is set,
    /// otherwise built on the solve grid.
    pub fn bounds_field(&self, model: &ClosedLoopModel) -> Result<ControlBoundsField, CliError> {
        let dark = if matches!(model.error, ErrorBound::LinearGrowth { .. }) { self.dark } else { None };
        if let Some(b) = &self.cfg.bounds {
            let field = io::import_bounds(&b.path).map_err(|e| key_error("bounds.path", e))?;
            let expected = match dark {
                Some(d) => d.extend(&self.state_grid)?,
                None => self.state_grid.as_ref().clone(),
            };
            if field.grid().as_ref() != &expected {
                return Err(key_error("bounds.path", "field grid does not match the solve grid"));
            }
            return Ok(field);
        }
        Ok(build_bounds_field(model, &self.state_grid, dark)?)
    }

    /// The Hamiltonian arm for `model`: exact for tan gains and small
    /// tables, interval bounds otherwise.
    pub fn spec_for(&self, model: &ClosedLoopModel) -> Result<HamiltonianSpec, CliError> {
        match &model.controller {
            Controller::TanProportional(_) => Ok(HamiltonianSpec::ExactTanProportional(model.clone())),
            Controller::Tabulated(t) if t.alphabet().len() <= MAX_ENUMERATED_CONTROLS => {
                Ok(HamiltonianSpec::ExactEnumerated(model.clone()))
            }
            _ => Ok(HamiltonianSpec::IntervalBounded { dynamics: model.dynamics.clone(), bounds: self.bounds_field(model)? }),
        }
    }

    pub fn spec(&self) -> Result<HamiltonianSpec, CliError> {
        self.spec_for(&self.model)
    }

    /// The same closed loop without perceptual error.
    pub fn zero_error_model(&self) -> Result<ClosedLoopModel, CliError> {
        Ok(ClosedLoopModel::new(
            self.model.dynamics.clone(),
            self.model.controller.clone(),
            ErrorBound::zero(self.model.state_dims()),
        )?)
    }

    pub fn x0(&self) -> Result<Vec<f64>, CliError> {
        let q = required(&self.cfg.query, "query.x0", "(set [query] x0 or pass --x0)")?;
        if q.x0.len() != self.state_grid.dims() {
            return Err(key_error("query.x0", format!("has {} coordinates, state has {}", q.x0.len(), self.state_grid.dims())));
        }
        Ok(q.x0)
    }
}

fn build_failure(f: &FailureSection, state_grid: &Arc<Grid>) -> Result<FailureSpec, CliError> {
    match f.kind.as_str() {
        "slab" => Ok(FailureSpec::SlabKeepout {
            dim: required(&f.dim, "failure.dim", "for kind = \"slab\"")?,
            magnitude: required(&f.magnitude, "failure.magnitude", "for kind = \"slab\"")?,
        }),
        "circles" => Ok(FailureSpec::CircularObstacles {
            centers: required(&f.centers, "failure.centers", "for kind = \"circles\"")?,
            radii: required(&f.radii, "failure.radii", "for kind = \"circles\"")?,
        }),
        "field" => {
            let path = required(&f.path, "failure.path", "for kind = \"field\"")?;
            let field = io::read_field(&path).map_err(|e| key_error("failure.path", e))?;
            if field.grid() != state_grid {
                return Err(key_error("failure.path", "field grid does not match [grid]"));
            }
            Ok(FailureSpec::Imported(field))
        }
        other => Err(key_error("failure.kind", format!("expected slab, circles or field, got {other:?}"))),
    }
}

fn build_dynamics(m: &ModelSection) -> Result<Dynamics, CliError> {
    let dynamics = match m.dynamics.as_str() {
        "dubins" => Dynamics::dubins(required(&m.speed, "model.speed", "for dynamics = \"dubins\"")?),
        "integrator" => Dynamics::integrator(required(&m.dims, "model.dims", "for dynamics = \"integrator\"")?),
        "stationary" => Dynamics::stationary(
            required(&m.dims, "model.dims", "for dynamics = \"stationary\"")?,
            m.control_dims.unwrap_or(1),
        ),
        other => {
            return Err(key_error("model.dynamics", format!("expected dubins, integrator or stationary, got {other:?}")))
        }
    }
    .map_err(|e| key_error("model", e))?;
    match (&m.disturbance_lo, &m.disturbance_hi) {
        (None, None) => Ok(dynamics),
        (Some(lo), Some(hi)) => {
            let set = BoxSet::new(lo.clone(), hi.clone()).map_err(|e| key_error("model.disturbance_lo", e))?;
            dynamics.with_disturbance(set).map_err(|e| key_error("model.disturbance_lo", e))
        }
        _ => Err(key_error("model.disturbance_hi", "disturbance_lo and disturbance_hi go together")),
    }
}

fn rover_on(state_grid: &Arc<Grid>) -> RoverPreset {
    let mut p = RoverPreset::new(false);
    p.state_grid = state_grid.clone();
    p
}

fn build_model(m: &ModelSection, state_grid: &Arc<Grid>, seed: u64) -> Result<ClosedLoopModel, CliError> {
    let dynamics = build_dynamics(m)?;
    let controller = match m.controller.as_str() {
        "tan" => Controller::TanProportional(
            TanProportional::new(
                required(&m.a, "model.a", "for controller = \"tan\"")?,
                required(&m.b, "model.b", "for controller = \"tan\"")?,
            )
            .map_err(|e| key_error("model.a", e))?,
        ),
        "table" => {
            let path = required(&m.path, "model.path", "for controller = \"table\"")?;
            Controller::Tabulated(io::read_table(&path).map_err(|e| key_error("model.path", e))?)
        }
        "mlp" => {
            let path = required(&m.path, "model.path", "for controller = \"mlp\"")?;
            Controller::Mlp(io::read_mlp(&path).map_err(|e| key_error("model.path", e))?)
        }
        "rover-mpc" => Controller::Tabulated(rover_on(state_grid).mpc_table()?),
        "rover-mlp" => {
            let rover = rover_on(state_grid);
            let table = rover.mpc_table()?;
            Controller::Mlp(rover.imitation_mlp(&table, seed, m.mlp_epochs.unwrap_or(300))?)
        }
        other => {
            return Err(key_error(
                "model.controller",
                format!("expected tan, table, mlp, rover-mpc or rover-mlp, got {other:?}"),
            ))
        }
    };
    let error = match m.error.as_str() {
        "zero" => ErrorBound::zero(dynamics.state_dims()),
        "fixed" => ErrorBound::fixed(required(&m.half_widths, "model.half_widths", "for error = \"fixed\"")?)
            .map_err(|e| key_error("model.half_widths", e))?,
        "growth" => ErrorBound::linear_growth(required(&m.rates, "model.rates", "for error = \"growth\"")?)
            .map_err(|e| key_error("model.rates", e))?,
        other => return Err(key_error("model.error", format!("expected zero, fixed or growth, got {other:?}"))),
    };
    ClosedLoopModel::new(dynamics, controller, error).map_err(|e| key_error("model", e))
}

/// Axis by index or name: `px`/`x`, `py`/`y`, `theta`/`θ`, `dark`/`t_dark`,
/// or `x<k>`.
pub fn axis_index(name: &str, dims: usize) -> Result<usize, CliError> {
    let k = match name {
        "px" | "x" => Some(0),
        "py" | "y" => Some(1),
        "theta" | "θ" | "th" => Some(2),
        "dark" | "t_dark" | "tdark" => Some(3),
        _ => name.strip_prefix('x').unwrap_or(name).parse::<usize>().ok(),
    };
    match k {
        Some(k) if k < dims => Ok(k),
        _ => Err(CliError::Argument(format!("unknown axis {name:?} for a {dims}-axis field"))),
    }
}
