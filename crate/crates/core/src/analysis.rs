//! Queries on solved value fields: tube membership, safe volume, gain sweeps,
//! and the dark-time budget behind the light-activation policy.

use std::sync::Arc;

use rayon::prelude::*;

use crate::bounds::DarkTimeAxis;
use crate::error::{argument, config, Result};
use crate::grid::{Grid, ScalarField};
use crate::hamiltonian::HamiltonianSpec;
use crate::models::{ClosedLoopModel, Controller, TanProportional};
use crate::solver::{self, query_value, FailureSpec, SolveConfig, ValueField};

/// Whether `z` lies in the backward reachable tube at time `t` (`V ≤ 0`).
pub fn brt_membership(vf: &ValueField, z: &[f64], t: f64) -> Result<bool> {
    Ok(query_value(vf, z, t)? <= 0.0)
}

/// Node values at time `t`, interpolated linearly between stored slices.
fn values_at(vf: &ValueField, t: f64) -> Result<Vec<f64>> {
    let len = vf.grid().len();
    let origin = vec![0.0; vf.grid().dims()];
    query_value(vf, &origin, t)?;
    let times = vf.times();
    if times.len() == 1 {
        return Ok(vf.slices()[0].values().to_vec());
    }
    let k = times.iter().position(|&s| s <= t).unwrap_or(times.len() - 1).max(1);
    let w = ((times[k - 1] - t) / (times[k - 1] - times[k])).clamp(0.0, 1.0);
    let (a, b) = (vf.slices()[k - 1].values(), vf.slices()[k].values());
    Ok((0..len).map(|i| if w == 0.0 { a[i] } else if w == 1.0 { b[i] } else { (1.0 - w) * a[i] + w * b[i] }).collect())
}

/// Volume of `{x : V(x, t) > 0}` by node counting with trapezoid weights.
/// Fields with a dark-time axis are measured on the `t′ = 0` hyperplane.
pub fn safe_volume(vf: &ValueField, t: f64) -> Result<f64> {
    let values = values_at(vf, t)?;
    let n = vf.state_dims();
    let state = vf.grid().leading_axes(n)?;
    let extra: usize = vf.grid().shape()[n..].iter().product();
    let mut multi = vec![0; n];
    let mut total = 0.0;
    for s in 0..state.len() {
        if values[s * extra] > 0.0 {
            state.multi_index_into(s, &mut multi);
            total += state.node_volume(&multi);
        }
    }
    Ok(total)
}

/// `V_α(x₀, t₀)` over a grid of proportional gains.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    /// Row-major over `(a, b)`; `NaN` marks a failed cell.
    pub values: Vec<f64>,
    /// Best `(i_a, i_b)` among finite cells.
    pub argmax: Option<(usize, usize)>,
    pub failures: Vec<(usize, usize, String)>,
    pub saturated_cells: usize,
}

impl SweepResult {
    pub fn value(&self, ia: usize, ib: usize) -> f64 {
        self.values[ia * self.b.len() + ib]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("a,b,value\n");
        for (ia, a) in self.a.iter().enumerate() {
            for (ib, b) in self.b.iter().enumerate() {
                out.push_str(&format!("{a},{b},{}\n", self.value(ia, ib)));
            }
        }
        out
    }
}

/// Evenly spaced values including both ends.
pub fn linspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count).map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64).collect(),
    }
}

/// Solves once per `(a, b)` cell with the template's dynamics and error
/// bound, recording `V(x₀, t₀)`. Cell failures become `NaN` and are listed.
pub fn sweep_hyperparameters(
    template: &ClosedLoopModel,
    a_values: &[f64],
    b_values: &[f64],
    grid: &Arc<Grid>,
    failure: &FailureSpec,
    cfg: &SolveConfig,
    x0: &[f64],
) -> Result<SweepResult> {
    if !matches!(template.controller, Controller::TanProportional(_)) {
        return Err(config("gain sweeps need a tan-proportional controller template"));
    }
    if a_values.is_empty() || b_values.is_empty() {
        return Err(config("sweep axes must be non-empty"));
    }
    if x0.len() != grid.dims() {
        return Err(config(format!("x0 has {} coordinates, grid has {}", x0.len(), grid.dims())));
    }
    let mut cell_cfg = cfg.clone();
    // only V(·, t₀) is read
    cell_cfg.save_stride = Some(usize::MAX);
    let cells: Vec<(usize, usize)> =
        (0..a_values.len()).flat_map(|i| (0..b_values.len()).map(move |j| (i, j))).collect();
    let results: Vec<std::result::Result<(f64, bool), String>> = cells
        .par_iter()
        .map(|&(i, j)| {
            let run = || -> Result<(f64, bool)> {
                let ctrl = TanProportional::new(a_values[i], b_values[j])?;
                let model = ClosedLoopModel::new(
                    template.dynamics.clone(),
                    Controller::TanProportional(ctrl),
                    template.error.clone(),
                )?;
                let vf = solver::solve(grid, &HamiltonianSpec::ExactTanProportional(model), failure, &cell_cfg)?;
                Ok((query_value(&vf, x0, vf.t0())?, vf.info().tan_saturated))
            };
            run().map_err(|e| e.to_string())
        })
        .collect();
    let mut values = Vec::with_capacity(cells.len());
    let mut failures = Vec::new();
    let mut saturated_cells = 0;
    for (&(i, j), r) in cells.iter().zip(results) {
        match r {
            Ok((v, sat)) => {
                values.push(v);
                saturated_cells += usize::from(sat);
            }
            Err(msg) => {
                values.push(f64::NAN);
                failures.push((i, j, msg));
            }
        }
    }
    let argmax = values
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .fold(None::<(usize, f64)>, |best, (k, &v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((k, v)),
        })
        .map(|(k, _)| (k / b_values.len(), k % b_values.len()));
    Ok(SweepResult { a: a_values.to_vec(), b: b_values.to_vec(), values, argmax, failures, saturated_cells })
}

/// Maximum safe dark duration `τ*(x)` per state-grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct DarkBudgetField {
    tau_star: ScalarField,
    horizon: f64,
    dt: f64,
}

impl DarkBudgetField {
    pub fn new(tau_star: ScalarField, horizon: f64, dt: f64) -> Result<Self> {
        if !(horizon >= 0.0 && dt >= 0.0) {
            return Err(config("dark budget needs non-negative horizon and step"));
        }
        if tau_star.values().iter().any(|t| !(*t >= 0.0 && *t <= horizon)) {
            return Err(config("dark budget values must lie in [0, horizon]"));
        }
        Ok(Self { tau_star, horizon, dt })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        self.tau_star.grid()
    }

    pub fn tau_star(&self) -> &ScalarField {
        &self.tau_star
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Solver step of the growing-uncertainty solve.
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// `τ*` at an arbitrary state. Where the interpolation stencil touches a
    /// node with `τ* = 0`, the result is 0.
    pub fn at(&self, x: &[f64]) -> f64 {
        let g = self.grid();
        let dims = g.dims();
        // any zero node among the 2^dims neighbours pins the budget to zero
        let mut lo = vec![0usize; dims];
        let mut hi = vec![0usize; dims];
        for i in 0..dims {
            let s = if g.periodic()[i] {
                (x[i] - g.lo()[i]).rem_euclid(g.period(i)) / g.spacing()[i]
            } else {
                ((x[i] - g.lo()[i]) / g.spacing()[i]).clamp(0.0, (g.shape()[i] - 1) as f64)
            };
            let k = (s.floor() as usize).min(g.shape()[i] - 1);
            lo[i] = k;
            hi[i] = if g.periodic()[i] { (k + 1) % g.shape()[i] } else { (k + 1).min(g.shape()[i] - 1) };
        }
        let mut multi = vec![0; dims];
        for corner in 0..(1usize << dims) {
            for i in 0..dims {
                multi[i] = if corner >> i & 1 == 1 { hi[i] } else { lo[i] };
            }
            if self.tau_star.at(&multi) == 0.0 {
                return 0.0;
            }
        }
        self.tau_star.interpolate(x)
    }
}

/// Output of [`synthesize_dark_budget`].
pub struct DarkBudget {
    pub budget: DarkBudgetField,
    /// The growing-uncertainty value field on `state × [0, t′_max]`.
    pub growing: ValueField,
}

/// Treats `V₀(·, t₀)` of a zero-uncertainty solve as the surrogate failure
/// `l′`, solves the growing-uncertainty problem against it on the state grid
/// extended by the dark-time axis, and extracts
/// `τ*(x) = max{τ : V_grow((x, 0), τ) > 0}` with linear interpolation of the
/// sign change between consecutive steps.
///
/// `spec` carries the growing error bound; its grid (and any bounds field)
/// must be `zero_unc.grid() × dark`. The horizon is `dark.max`.
pub fn synthesize_dark_budget(
    spec: &HamiltonianSpec,
    zero_unc: &ValueField,
    dark: DarkTimeAxis,
    cfg: &SolveConfig,
) -> Result<DarkBudget> {
    if zero_unc.has_dark_axis() {
        return Err(config("the zero-uncertainty field must live on the state grid"));
    }
    if spec.state_dims() != zero_unc.state_dims() {
        return Err(config("model and zero-uncertainty field disagree on the state dimension"));
    }
    let state = zero_unc.grid().clone();
    let grid = Arc::new(dark.extend(&state)?);
    let surrogate = zero_unc.initial().clone();
    let failure = FailureSpec::Imported(surrogate.clone());
    let mut solve_cfg = cfg.clone();
    solve_cfg.t0 = 0.0;
    solve_cfg.t_final = dark.max;

    let samples = dark.samples;
    let len = state.len();
    let mut tau: Vec<f64> = surrogate.values().iter().map(|&l| if l <= 0.0 { 0.0 } else { f64::NAN }).collect();
    let mut prev: Vec<f64> = surrogate.values().to_vec();
    let mut prev_tau = 0.0;
    let growing = solver::solve_observed(&grid, spec, &failure, &solve_cfg, |step, t, v| {
        if step == 0 {
            return;
        }
        let now = dark.max - t;
        for s in 0..len {
            let cur = v[s * samples];
            if tau[s].is_nan() && cur <= 0.0 {
                let p = prev[s];
                tau[s] = prev_tau + (now - prev_tau) * p / (p - cur);
            }
            prev[s] = cur;
        }
        prev_tau = now;
    })?;
    let tau: Vec<f64> = tau.into_iter().map(|t| if t.is_nan() { dark.max } else { t.clamp(0.0, dark.max) }).collect();
    let budget = DarkBudgetField::new(ScalarField::new(state, tau)?, dark.max, growing.info().dt)?;
    Ok(DarkBudget { budget, growing })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LightDecision {
    KeepOff,
    LightsOn,
}

/// Lights on iff `elapsed_dark + margin ≥ τ*(anchor)`, where `anchor` is the
/// state at the last reset. The budget certifies every dark trajectory that
/// starts at the anchor, so the test is made against the anchor's `τ*`.
pub fn light_policy_step(budget: &DarkBudgetField, anchor: &[f64], elapsed_dark: f64, margin: f64) -> Result<LightDecision> {
    if !(margin >= budget.dt() * (1.0 - 1e-12)) {
        return Err(argument(format!("policy margin {margin} is below one solver step {}", budget.dt())));
    }
    if elapsed_dark + margin >= budget.at(anchor) {
        Ok(LightDecision::LightsOn)
    } else {
        Ok(LightDecision::KeepOff)
    }
}
