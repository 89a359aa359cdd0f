//! Backward-in-time solver for the final-value HJI variational inequality
//!
//! ```text
//! min{ l(x) − V(x, t),  ∂V/∂t + H(x, ∇V) } = 0,   V(x, T) = l(x)
//! ```
//!
//! In backward time `τ = T − t` the PDE reads `V_τ = H(x, ∇V)`. Each stage
//! uses the Lax-Friedrichs flux
//!
//! ```text
//! V_τ ≈ H(x, (p⁻ + p⁺)/2) + Σᵢ αᵢ (p⁺ᵢ − p⁻ᵢ)/2
//! ```
//!
//! whose dissipation sign is the stable one for this direction of time.
//! `αᵢ` bounds `|∂H/∂pᵢ|` at the node itself unless the config fixes global
//! coefficients; the time step always comes from the global bound. Two
//! Euler stages are averaged (Heun / TVD-RK2) and the result is clipped to
//! `l` after every full step.
//!
//! A grid with one axis more than the state is read as `(x, t′)` where `t′`
//! is the time since the last uncertainty reset; the extra axis evolves as
//! `ṫ′ = 1` and the error box at each node is `ē(t′)`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{argument, config, Error, Result};
use crate::grid::{Grid, ScalarField, MAX_DIMS};
use crate::hamiltonian::{HamiltonianSpec, PreparedHamiltonian};

/// Default memory budget for stored slices.
pub const DEFAULT_MEMORY_CAP: usize = 256 << 20;

/// Most time steps a solve may take before the step is treated as underflow.
const MAX_STEPS: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SolveConfig {
    pub t0: f64,
    pub t_final: f64,
    pub cfl: f64,
    /// Steps between stored slices; `None` picks the densest stride that
    /// fits `memory_cap`.
    pub save_stride: Option<usize>,
    pub memory_cap: usize,
    /// Fixed global dissipation coefficients, which must dominate the
    /// computed ones. Without them each node uses its own local bound.
    /// Related solves that share these coefficients run the identical
    /// scheme, so their results compare pointwise.
    pub dissipation: Option<Vec<f64>>,
}

impl SolveConfig {
    pub fn new(t0: f64, t_final: f64) -> Self {
        Self { t0, t_final, cfl: 0.5, save_stride: None, memory_cap: DEFAULT_MEMORY_CAP, dissipation: None }
    }

    pub fn horizon(&self) -> f64 {
        self.t_final - self.t0
    }

    fn validate(&self) -> Result<()> {
        if !(self.t0.is_finite() && self.t_final.is_finite()) || self.t0 > self.t_final {
            return Err(config(format!("need finite t0 <= T, got t0={} T={}", self.t0, self.t_final)));
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(config(format!("cfl must lie in (0, 1], got {}", self.cfl)));
        }
        if self.save_stride == Some(0) {
            return Err(config("save_stride must be at least 1"));
        }
        Ok(())
    }
}

/// Failure set encoded as the zero-sublevel set of `l`.
#[derive(Debug, Clone, PartialEq)]
pub enum FailureSpec {
    /// `l(x) = magnitude − |x_dim|`.
    SlabKeepout { dim: usize, magnitude: f64 },
    /// Signed distance to a union of discs in the first two state axes.
    CircularObstacles { centers: Vec<[f64; 2]>, radii: Vec<f64> },
    /// Precomputed `l` on the state grid.
    Imported(ScalarField),
}

impl FailureSpec {
    /// `l` at a state point.
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            FailureSpec::SlabKeepout { dim, magnitude } => magnitude - x[*dim].abs(),
            FailureSpec::CircularObstacles { centers, radii } => centers
                .iter()
                .zip(radii)
                .map(|(c, r)| (x[0] - c[0]).hypot(x[1] - c[1]) - r)
                .fold(f64::INFINITY, f64::min),
            FailureSpec::Imported(field) => field.interpolate(&x[..field.grid().dims()]),
        }
    }

    fn validate(&self, state_dims: usize) -> Result<()> {
        match self {
            FailureSpec::SlabKeepout { dim, magnitude } => {
                if *dim >= state_dims || !magnitude.is_finite() {
                    return Err(config(format!("slab keep-out needs dim < {state_dims} and a finite magnitude")));
                }
            }
            FailureSpec::CircularObstacles { centers, radii } => {
                if state_dims < 2 || centers.is_empty() || centers.len() != radii.len() {
                    return Err(config("circular obstacles need matching, non-empty centers and radii"));
                }
                if radii.iter().any(|r| !(r.is_finite() && *r >= 0.0))
                    || centers.iter().flatten().any(|c| !c.is_finite())
                {
                    return Err(config("obstacle centers and radii must be finite, radii non-negative"));
                }
            }
            FailureSpec::Imported(field) => {
                if field.grid().dims() != state_dims {
                    return Err(config(format!(
                        "imported failure field has {} axes, state has {state_dims}",
                        field.grid().dims()
                    )));
                }
            }
        }
        Ok(())
    }

    /// `l` sampled on `grid`, whose leading `state_dims` axes are the state.
    /// An imported field must sit on exactly those axes.
    pub fn evaluate(&self, grid: &Arc<Grid>, state_dims: usize) -> Result<ScalarField> {
        self.validate(state_dims)?;
        if let FailureSpec::Imported(field) = self {
            let state = grid.leading_axes(state_dims)?;
            if field.grid().as_ref() != &state {
                return Err(config("imported failure field must use the solver's state grid"));
            }
            let extra: usize = grid.shape()[state_dims..].iter().product();
            let values = field.values().iter().flat_map(|v| std::iter::repeat(*v).take(extra)).collect();
            return ScalarField::new(grid.clone(), values);
        }
        ScalarField::from_fn(grid.clone(), |z| self.value(&z[..state_dims]))
    }
}

/// Per-axis largest finite-difference quotient of a field.
pub fn lipschitz_estimate(field: &ScalarField) -> Vec<f64> {
    let g = field.grid();
    let v = field.values();
    (0..g.dims())
        .map(|axis| {
            let s = g.strides()[axis];
            let n = g.shape()[axis];
            let h = g.spacing()[axis];
            let mut multi = vec![0; g.dims()];
            let mut best: f64 = 0.0;
            for flat in 0..g.len() {
                g.multi_index_into(flat, &mut multi);
                let next = if multi[axis] + 1 < n {
                    flat + s
                } else if g.periodic()[axis] {
                    flat - (n - 1) * s
                } else {
                    continue;
                };
                best = best.max((v[next] - v[flat]).abs() / h);
            }
            best
        })
        .collect()
}

/// Grid-resolution tolerance `2 · maxᵢ(Lᵢ Δxᵢ)` on the state axes.
pub fn resolution_tolerance(failure: &ScalarField, state_dims: usize) -> f64 {
    let l = lipschitz_estimate(failure);
    let h = failure.grid().spacing();
    2.0 * (0..state_dims).map(|i| l[i] * h[i]).fold(0.0, f64::max)
}

/// Facts about a finished solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveInfo {
    pub arm: String,
    pub state_dims: usize,
    pub dt: f64,
    pub steps: usize,
    pub save_stride: usize,
    /// Global coefficients; they set the time step.
    pub dissipation: Vec<f64>,
    /// Whether the flux used node-local coefficients.
    pub local_dissipation: bool,
    pub cfl: f64,
    /// A tan argument was clamped somewhere on the grid.
    pub tan_saturated: bool,
}

/// Stored slices of `V`, newest (`T`) first.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    grid: Arc<Grid>,
    times: Vec<f64>,
    slices: Vec<ScalarField>,
    failure: ScalarField,
    info: SolveInfo,
}

impl ValueField {
    pub fn new(times: Vec<f64>, slices: Vec<ScalarField>, failure: ScalarField, info: SolveInfo) -> Result<Self> {
        if times.is_empty() || times.len() != slices.len() {
            return Err(config("value field needs one time per slice and at least one slice"));
        }
        if times.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(config("slice times must be strictly descending"));
        }
        let grid = failure.grid().clone();
        if slices.iter().any(|s| s.grid() != &grid) {
            return Err(config("all slices must share the failure field's grid"));
        }
        if info.state_dims == 0 || info.state_dims > grid.dims() {
            return Err(config("state dimension is inconsistent with the grid"));
        }
        Ok(Self { grid, times, slices, failure, info })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn slices(&self) -> &[ScalarField] {
        &self.slices
    }

    pub fn failure(&self) -> &ScalarField {
        &self.failure
    }

    pub fn info(&self) -> &SolveInfo {
        &self.info
    }

    pub fn state_dims(&self) -> usize {
        self.info.state_dims
    }

    pub fn has_dark_axis(&self) -> bool {
        self.grid.dims() > self.info.state_dims
    }

    pub fn t0(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn t_final(&self) -> f64 {
        self.times[0]
    }

    /// The earliest stored slice, `V(·, t₀)`.
    pub fn initial(&self) -> &ScalarField {
        &self.slices[self.slices.len() - 1]
    }

    /// Bracketing slice indices `(later, earlier)` and the weight of the
    /// earlier one.
    fn bracket(&self, t: f64) -> Result<(usize, usize, f64)> {
        let tol = 1e-12 * (1.0 + self.t_final().abs());
        if !(t >= self.t0() - tol && t <= self.t_final() + tol) {
            return Err(argument(format!("time {t} outside [{}, {}]", self.t0(), self.t_final())));
        }
        if self.times.len() == 1 {
            return Ok((0, 0, 0.0));
        }
        let k = self.times.iter().position(|&s| s <= t).unwrap_or(self.times.len() - 1).max(1);
        let (later, earlier) = (self.times[k - 1], self.times[k]);
        let w = ((later - t) / (later - earlier)).clamp(0.0, 1.0);
        Ok((k - 1, k, w))
    }

    /// `V(z, t)` by multilinear interpolation in space and linear in time;
    /// the flag reports a clamped spatial query.
    pub fn query_flagged(&self, z: &[f64], t: f64) -> Result<(f64, bool)> {
        if z.len() != self.grid.dims() {
            return Err(argument(format!("query has {} coordinates, field has {}", z.len(), self.grid.dims())));
        }
        let (a, b, w) = self.bracket(t)?;
        let (va, ca) = self.slices[a].interpolate_flagged(z);
        if w == 0.0 {
            return Ok((va, ca));
        }
        let (vb, cb) = self.slices[b].interpolate_flagged(z);
        if w == 1.0 {
            return Ok((vb, cb));
        }
        Ok(((1.0 - w) * va + w * vb, ca || cb))
    }

    /// Slice index of the stored time nearest to `t`.
    pub fn nearest_slice(&self, t: f64) -> usize {
        let mut best = 0;
        for (k, s) in self.times.iter().enumerate() {
            if (s - t).abs() < (self.times[best] - t).abs() {
                best = k;
            }
        }
        best
    }
}

/// `V(z, t)`; see [`ValueField::query_flagged`].
pub fn query_value(vf: &ValueField, z: &[f64], t: f64) -> Result<f64> {
    vf.query_flagged(z, t).map(|r| r.0)
}

#[derive(Clone, Copy)]
enum Edge {
    Interior,
    Lower,
    Upper,
}

/// Neighbour offsets of one node along one axis.
#[derive(Clone, Copy)]
struct AxisStencil {
    minus: isize,
    plus: isize,
    edge: Edge,
}

fn axis_stencil(grid: &Grid, axis: usize, k: usize) -> AxisStencil {
    let n = grid.shape()[axis] as isize;
    let s = grid.strides()[axis] as isize;
    let k = k as isize;
    if grid.periodic()[axis] {
        let minus = if k == 0 { (n - 1) * s } else { -s };
        let plus = if k == n - 1 { -(n - 1) * s } else { s };
        AxisStencil { minus, plus, edge: Edge::Interior }
    } else if k == 0 {
        AxisStencil { minus: 0, plus: s, edge: Edge::Lower }
    } else if k == n - 1 {
        AxisStencil { minus: -s, plus: 0, edge: Edge::Upper }
    } else {
        AxisStencil { minus: -s, plus: s, edge: Edge::Interior }
    }
}

/// Right-hand side `V_τ` of the backward-time scheme at every node.
///
/// On a bounded face the missing neighbour is a ghost value extrapolated
/// with the slope of `l` rather than of `V`. The ghost then depends on the
/// boundary value alone, which keeps the scheme monotone.
fn rhs(grid: &Grid, ham: &PreparedHamiltonian, alpha: Option<&[f64]>, l: &[f64], v: &[f64], out: &mut [f64]) {
    match grid.dims() {
        1 => rhs_fixed::<1>(grid, ham, alpha, l, v, out),
        2 => rhs_fixed::<2>(grid, ham, alpha, l, v, out),
        3 => rhs_fixed::<3>(grid, ham, alpha, l, v, out),
        4 => rhs_fixed::<4>(grid, ham, alpha, l, v, out),
        5 => rhs_fixed::<5>(grid, ham, alpha, l, v, out),
        6 => rhs_fixed::<6>(grid, ham, alpha, l, v, out),
        7 => rhs_fixed::<7>(grid, ham, alpha, l, v, out),
        _ => rhs_fixed::<MAX_DIMS>(grid, ham, alpha, l, v, out),
    }
}

fn rhs_fixed<const D: usize>(
    grid: &Grid,
    ham: &PreparedHamiltonian,
    alpha: Option<&[f64]>,
    l: &[f64],
    v: &[f64],
    out: &mut [f64],
) {
    let last = D - 1;
    let n_last = grid.shape()[last];
    let mut inv_h = [0.0; D];
    let mut global = [0.0; D];
    for axis in 0..D {
        inv_h[axis] = 1.0 / grid.spacing()[axis];
        global[axis] = alpha.map_or(0.0, |a| a[axis]);
    }
    out.par_chunks_mut(n_last).enumerate().for_each(|(line, block)| {
        let base = line * n_last;
        let mut stencils = [AxisStencil { minus: 0, plus: 0, edge: Edge::Interior }; D];
        let mut multi = [0usize; D];
        grid.multi_index_into(base, &mut multi);
        for axis in 0..last {
            stencils[axis] = axis_stencil(grid, axis, multi[axis]);
        }
        let mut p = [0.0f64; D];
        let mut a = global;
        for (k, slot) in block.iter_mut().enumerate() {
            if k <= 1 || k + 1 >= n_last {
                stencils[last] = axis_stencil(grid, last, k);
            }
            let flat = base + k;
            if alpha.is_none() {
                ham.local_dissipation(flat, &mut a);
            }
            let v0 = v[flat];
            let mut diss = 0.0;
            for axis in 0..D {
                let st = stencils[axis];
                let ih = inv_h[axis];
                let minus = flat.wrapping_add_signed(st.minus);
                let plus = flat.wrapping_add_signed(st.plus);
                let (lo, hi) = match st.edge {
                    Edge::Interior => ((v0 - v[minus]) * ih, (v[plus] - v0) * ih),
                    Edge::Lower => ((l[plus] - l[flat]) * ih, (v[plus] - v0) * ih),
                    Edge::Upper => ((v0 - v[minus]) * ih, (l[flat] - l[minus]) * ih),
                };
                p[axis] = 0.5 * (lo + hi);
                diss += 0.5 * a[axis] * (hi - lo);
            }
            *slot = ham.eval(flat, &p) + diss;
        }
    });
}

fn first_non_finite(v: &[f64]) -> Option<usize> {
    const CHUNK: usize = 1 << 14;
    let chunk = v.par_chunks(CHUNK).position_first(|c| c.iter().any(|x| !x.is_finite()))?;
    let start = chunk * CHUNK;
    v[start..].iter().position(|x| !x.is_finite()).map(|i| start + i)
}

/// Solves the VI on `grid` and returns the stored slices.
pub fn solve(grid: &Arc<Grid>, spec: &HamiltonianSpec, failure: &FailureSpec, cfg: &SolveConfig) -> Result<ValueField> {
    solve_observed(grid, spec, failure, cfg, |_, _, _| {})
}

/// [`solve`] that also hands every step's values to `observe(step, t, V)`,
/// starting with the final condition at step 0.
pub fn solve_observed(
    grid: &Arc<Grid>,
    spec: &HamiltonianSpec,
    failure: &FailureSpec,
    cfg: &SolveConfig,
    mut observe: impl FnMut(usize, f64, &[f64]),
) -> Result<ValueField> {
    cfg.validate()?;
    let n = spec.state_dims();
    let ham = PreparedHamiltonian::new(spec, grid)?;
    let computed = ham.dissipation().to_vec();
    let alpha = match &cfg.dissipation {
        Some(a) => {
            if a.len() != computed.len() || a.iter().zip(&computed).any(|(x, c)| !(x.is_finite() && x >= c)) {
                return Err(config(format!(
                    "dissipation override {a:?} must be finite and dominate the computed {computed:?}"
                )));
            }
            a.clone()
        }
        None => computed,
    };
    let l = failure.evaluate(grid, n)?;
    let horizon = cfg.horizon();
    let rate: f64 = alpha.iter().zip(grid.spacing()).map(|(a, h)| a / h).sum();
    let steps = if horizon == 0.0 {
        0
    } else if rate == 0.0 {
        1
    } else {
        let dt_cfl = cfg.cfl / rate;
        let steps = (horizon / dt_cfl).ceil();
        if !(dt_cfl > 0.0) || !steps.is_finite() || steps > MAX_STEPS as f64 {
            return Err(config(format!(
                "time step {dt_cfl:e} underflows: dissipation {alpha:?} is too large for horizon {horizon}"
            )));
        }
        steps as usize
    };
    let dt = if steps == 0 { 0.0 } else { horizon / steps as f64 };
    let slice_bytes = grid.len() * std::mem::size_of::<f64>();
    let stride = match cfg.save_stride {
        Some(s) => s,
        None => {
            let budget = (cfg.memory_cap / slice_bytes.max(1)).max(2);
            steps.div_ceil(budget - 1).max(1)
        }
    };

    let flux_alpha = cfg.dissipation.as_ref().map(|_| alpha.as_slice());
    let mut v = l.values().to_vec();
    let mut times = vec![cfg.t_final];
    let mut slices = vec![l.clone()];
    observe(0, cfg.t_final, &v);
    let len = grid.len();
    let mut k1 = vec![0.0; len];
    let mut stage = vec![0.0; len];
    for step in 1..=steps {
        rhs(grid, &ham, flux_alpha, l.values(), &v, &mut k1);
        stage.par_iter_mut().zip(&v).zip(&k1).for_each(|((s, a), b)| *s = a + dt * b);
        rhs(grid, &ham, flux_alpha, l.values(), &stage, &mut k1);
        let lv = l.values();
        v.par_iter_mut().zip(&stage).zip(&k1).zip(lv).for_each(|(((out, s), k), li)| {
            *out = (0.5 * (*out + s + dt * k)).min(*li);
        });
        if let Some(cell) = first_non_finite(&v) {
            return Err(Error::NonFinite { step, cell });
        }
        let t = if step == steps { cfg.t0 } else { cfg.t_final - step as f64 * dt };
        observe(step, t, &v);
        if step % stride == 0 || step == steps {
            times.push(t);
            slices.push(ScalarField::new(grid.clone(), v.clone())?);
        }
    }
    let info = SolveInfo {
        arm: spec.arm_name().to_string(),
        state_dims: n,
        dt,
        steps,
        save_stride: stride,
        local_dissipation: flux_alpha.is_none(),
        dissipation: alpha,
        cfl: cfg.cfl,
        tan_saturated: ham.saturated(),
    };
    ValueField::new(times, slices, l, info)
}
