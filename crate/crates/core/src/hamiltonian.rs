//! Closed-loop Hamiltonian `H(x, p) = min_{d, e} p · h(x, d, e)`.
//!
//! Three arms: the closed form for the tan-proportional controller, exact
//! enumeration over the controls a tabulated controller can emit under the
//! error box, and a sound lower bound from a per-cell control-bound field.
//! [`PreparedHamiltonian`] caches everything the solver needs per node.

use rayon::prelude::*;

use crate::bounds::{candidate_mask, ControlBoundsField};
use crate::error::{argument, config, Result};
use crate::grid::{Grid, MAX_DIMS};
use crate::models::{ClosedLoopModel, Controller, Dynamics, TanProportional, TAN_ARGUMENT_LIMIT};

/// Largest table alphabet the enumerated arm stores as per-node bitmasks.
pub const MAX_ENUMERATED_CONTROLS: usize = 64;

#[derive(Debug, Clone)]
pub enum HamiltonianSpec {
    /// Closed-form worst-case error for [`TanProportional`].
    ExactTanProportional(ClosedLoopModel),
    /// Exact minimum over the table cells reachable under the error box.
    ExactEnumerated(ClosedLoopModel),
    /// Lower bound over a control hyperrectangle per cell.
    IntervalBounded { dynamics: Dynamics, bounds: ControlBoundsField },
}

impl HamiltonianSpec {
    pub fn dynamics(&self) -> &Dynamics {
        match self {
            HamiltonianSpec::ExactTanProportional(m) | HamiltonianSpec::ExactEnumerated(m) => &m.dynamics,
            HamiltonianSpec::IntervalBounded { dynamics, .. } => dynamics,
        }
    }

    pub fn state_dims(&self) -> usize {
        self.dynamics().state_dims()
    }

    pub fn arm_name(&self) -> &'static str {
        match self {
            HamiltonianSpec::ExactTanProportional(_) => "exact-tan",
            HamiltonianSpec::ExactEnumerated(_) => "exact-enumerated",
            HamiltonianSpec::IntervalBounded { .. } => "interval-bounded",
        }
    }

    /// The exact arm matching the model's controller. Networks have no exact
    /// arm and need a bounds field.
    pub fn exact_for(model: ClosedLoopModel) -> Result<Self> {
        match model.controller {
            Controller::TanProportional(_) => Ok(HamiltonianSpec::ExactTanProportional(model)),
            Controller::Tabulated(_) => Ok(HamiltonianSpec::ExactEnumerated(model)),
            Controller::Mlp(_) => Err(config("network controllers need a control-bounds field (interval-bounded arm)")),
        }
    }
}

/// Value of the tan arm with its minimizing error.
#[derive(Debug, Clone, PartialEq)]
pub struct TanMinimum {
    pub value: f64,
    pub e_star: Vec<f64>,
    pub saturated: bool,
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Worst-case error for the tan controller given the heading costate `β₃`.
pub fn tan_worst_error(ctrl: &TanProportional, beta3: f64, ebar: &[f64]) -> Vec<f64> {
    let mut e = vec![0.0; ebar.len()];
    let px = TanProportional::POSITION_AXIS;
    let th = TanProportional::HEADING_AXIS;
    e[px] = -sgn(beta3 * ctrl.a) * ebar[px];
    e[th] = -sgn(beta3 * ctrl.b) * ebar[th];
    e
}

/// Exact Hamiltonian of a Dubins model under the tan-proportional controller.
/// The disturbance, if any, contributes its minimizing box corner.
pub fn ham_exact_tan(model: &ClosedLoopModel, x: &[f64], grad: &[f64], ebar: &[f64]) -> Result<TanMinimum> {
    let Controller::TanProportional(ctrl) = &model.controller else {
        return Err(config("exact tan Hamiltonian needs a tan-proportional controller"));
    };
    let n = model.state_dims();
    if x.len() != n || grad.len() != n || ebar.len() != n {
        return Err(config(format!("expected state, costate and error box of size {n}")));
    }
    let e_star = tan_worst_error(ctrl, grad[2], ebar);
    let xhat: Vec<f64> = x.iter().zip(&e_star).map(|(a, b)| a + b).collect();
    let (u, saturated) = ctrl.eval(&xhat);
    let mut f = vec![0.0; n];
    model.dynamics.drift_into(x, &mut f);
    let mut gain = vec![0.0; 1];
    model.dynamics.control_gain_into(grad, &mut gain);
    let drift: f64 = grad.iter().zip(&f).map(|(p, v)| p * v).sum();
    let control = if gain[0] == 0.0 { 0.0 } else { gain[0] * u };
    let (dist, _) = model.dynamics.worst_disturbance(grad);
    Ok(TanMinimum { value: drift + control + dist, e_star, saturated })
}

/// Minimizer of the enumerated arm.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedMinimum {
    pub value: f64,
    pub u_star: Vec<f64>,
    pub d_star: Vec<f64>,
}

/// `min_{u ∈ candidates, d ∈ 𝒟} p · f(x, u, d)`. Ties keep the first
/// candidate.
pub fn ham_exact_enumerated(
    dynamics: &Dynamics,
    x: &[f64],
    grad: &[f64],
    candidates: &[Vec<f64>],
) -> Result<EnumeratedMinimum> {
    if candidates.is_empty() {
        return Err(argument("enumerated Hamiltonian called with no candidate controls"));
    }
    let n = dynamics.state_dims();
    let (dist, d_star) = dynamics.worst_disturbance(grad);
    let zero_d = vec![0.0; dynamics.disturbance_dims()];
    let mut f = vec![0.0; n];
    let mut best = (f64::INFINITY, 0);
    for (k, u) in candidates.iter().enumerate() {
        if u.len() != dynamics.control_dims() {
            return Err(config("candidate control has the wrong dimension"));
        }
        dynamics.eval_into(x, u, &zero_d, &mut f);
        let v: f64 = grad.iter().zip(&f).map(|(p, q)| p * q).sum();
        if v < best.0 {
            best = (v, k);
        }
    }
    Ok(EnumeratedMinimum { value: best.0 + dist, u_star: candidates[best.1].clone(), d_star })
}

/// Distinct controls a tabulated model can emit at `x` under error box `ebar`.
pub fn enumerated_controls(model: &ClosedLoopModel, x: &[f64], ebar: &[f64], t: f64) -> Result<Vec<Vec<f64>>> {
    let Controller::Tabulated(table) = &model.controller else {
        return Err(config("enumeration needs a tabulated controller"));
    };
    if table.alphabet().len() <= MAX_ENUMERATED_CONTROLS {
        let mask = candidate_mask(table, x, ebar, t);
        return Ok(mask_members(mask).map(|k| table.alphabet()[k].clone()).collect());
    }
    let mut cells: Vec<u32> = crate::bounds::enumerate_candidates(table, x, ebar, t)
        .iter()
        .map(|c| table.code(c.cell))
        .collect();
    cells.sort_unstable();
    cells.dedup();
    Ok(cells.into_iter().map(|k| table.alphabet()[k as usize].clone()).collect())
}

fn mask_members(mut mask: u64) -> impl Iterator<Item = usize> {
    std::iter::from_fn(move || {
        if mask == 0 {
            None
        } else {
            let k = mask.trailing_zeros() as usize;
            mask &= mask - 1;
            Some(k)
        }
    })
}

/// `min_{u ∈ [lower, upper], d ∈ 𝒟} p · f(x, u, d)` for control-affine
/// dynamics, with the minimizing control corner.
pub fn ham_lower_bound(
    dynamics: &Dynamics,
    x: &[f64],
    grad: &[f64],
    lower: &[f64],
    upper: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if !dynamics.is_control_affine() {
        return Err(config("interval lower bound needs control-affine dynamics"));
    }
    let m = dynamics.control_dims();
    if lower.len() != m || upper.len() != m {
        return Err(config(format!("control box must have {m} entries")));
    }
    let n = dynamics.state_dims();
    let mut f = vec![0.0; n];
    dynamics.drift_into(x, &mut f);
    let mut gain = vec![0.0; m];
    dynamics.control_gain_into(grad, &mut gain);
    let mut value: f64 = grad.iter().zip(&f).map(|(p, q)| p * q).sum();
    let mut u = vec![0.0; m];
    for j in 0..m {
        u[j] = if gain[j] > 0.0 { lower[j] } else { upper[j] };
        if gain[j] != 0.0 {
            value += gain[j] * u[j];
        }
    }
    value += dynamics.worst_disturbance(grad).0;
    Ok((value, u))
}

/// Largest `|u|` the tan controller can emit anywhere on the grid under error
/// box `ebar`. The argument is affine in the state, so the extreme sits at a
/// corner of the `(p_x, θ)` box.
pub fn tan_control_bound(ctrl: &TanProportional, grid: &Grid, ebar: &[f64]) -> f64 {
    let px = TanProportional::POSITION_AXIS;
    let th = TanProportional::HEADING_AXIS;
    let mut arg: f64 = 0.0;
    for x in [grid.lo()[px] - ebar[px], grid.hi()[px] + ebar[px]] {
        for t in [grid.lo()[th] - ebar[th], grid.hi()[th] + ebar[th]] {
            arg = arg.max((ctrl.a * x + ctrl.b * t).abs());
        }
    }
    arg.min(TAN_ARGUMENT_LIMIT).tan()
}

/// Global Lax-Friedrichs coefficients `αᵢ ≥ max |∂H/∂pᵢ|`. A trailing
/// dark-time axis (grid with one axis more than the state) gets `α = 1`.
pub fn dissipation_coeffs(spec: &HamiltonianSpec, grid: &Grid) -> Result<Vec<f64>> {
    let dynamics = spec.dynamics();
    let n = dynamics.state_dims();
    let dark = check_grid(spec, grid)?;
    let m = dynamics.control_dims();
    let umax: Vec<f64> = match spec {
        HamiltonianSpec::ExactTanProportional(model) => {
            let Controller::TanProportional(ctrl) = &model.controller else {
                return Err(config("exact tan Hamiltonian needs a tan-proportional controller"));
            };
            let elapsed = if dark { grid.hi()[n] } else { 0.0 };
            let ebar = model.error.half_widths(elapsed);
            vec![tan_control_bound(ctrl, grid, &ebar)]
        }
        HamiltonianSpec::ExactEnumerated(model) => {
            let Controller::Tabulated(table) = &model.controller else {
                return Err(config("enumeration needs a tabulated controller"));
            };
            (0..m)
                .map(|j| table.alphabet().iter().map(|u| u[j].abs()).fold(0.0, f64::max))
                .collect()
        }
        HamiltonianSpec::IntervalBounded { bounds, .. } => (0..m).map(|j| bounds.max_magnitude(j)).collect(),
    };
    let mut alpha: Vec<f64> = (0..n)
        .map(|i| {
            let control: f64 = (0..m).map(|j| dynamics.control_coupling(i, j) * umax[j]).sum();
            let dist = dynamics.disturbance().map_or(0.0, |b| b.lo[i].abs().max(b.hi[i].abs()));
            dynamics.drift_bound(grid, i) + control + dist
        })
        .collect();
    if dark {
        alpha.push(1.0);
    }
    Ok(alpha)
}

/// Whether `grid` carries a trailing dark-time axis for this spec.
fn check_grid(spec: &HamiltonianSpec, grid: &Grid) -> Result<bool> {
    let n = spec.state_dims();
    let dark = match grid.dims() {
        d if d == n => false,
        d if d == n + 1 => true,
        d => {
            return Err(config(format!(
                "grid has {d} axes; expected {n} (state) or {} (state and dark time)",
                n + 1
            )))
        }
    };
    if dark && grid.periodic()[n] {
        return Err(config("the dark-time axis cannot be periodic"));
    }
    let growing = match spec {
        HamiltonianSpec::ExactTanProportional(m) | HamiltonianSpec::ExactEnumerated(m) => {
            matches!(m.error, crate::models::ErrorBound::LinearGrowth { .. }) && !m.error.is_zero()
        }
        HamiltonianSpec::IntervalBounded { .. } => false,
    };
    if growing && !dark {
        return Err(config(
            "a growing error bound needs a grid with a trailing dark-time axis (state axes then elapsed time)",
        ));
    }
    if let HamiltonianSpec::IntervalBounded { bounds, .. } = spec {
        if bounds.grid().as_ref() != grid {
            return Err(config("the control-bounds field must live on the solver grid"));
        }
    }
    Ok(dark)
}

enum ControlTerm {
    /// Controls for `β₃ > 0` and `β₃ < 0` per node.
    Tan { u_pos: Vec<f64>, u_neg: Vec<f64> },
    /// Bitmask over `alphabet` per node.
    Enumerated { alphabet: Vec<Vec<f64>>, masks: Vec<u64> },
    /// Control box per node, `m` entries each.
    Interval { lower: Vec<f64>, upper: Vec<f64> },
}

/// Per-node caches for evaluating the Hamiltonian on a fixed grid.
pub struct PreparedHamiltonian {
    dynamics: Dynamics,
    state_dims: usize,
    control_dims: usize,
    dark: bool,
    drift: Vec<f64>,
    control: ControlTerm,
    /// `|G_ij|`, row-major `n × m`.
    coupling: Vec<f64>,
    /// Largest `|dᵢ|` over the disturbance box.
    disturbance_max: Vec<f64>,
    alpha: Vec<f64>,
    saturated: bool,
}

impl PreparedHamiltonian {
    pub fn new(spec: &HamiltonianSpec, grid: &Grid) -> Result<Self> {
        let dark = check_grid(spec, grid)?;
        let dynamics = spec.dynamics().clone();
        let n = dynamics.state_dims();
        let m = dynamics.control_dims();
        let len = grid.len();
        let point = |flat: usize| {
            let z = grid.point(flat);
            let elapsed = if dark { z[n] } else { 0.0 };
            (z, elapsed)
        };

        let mut drift = vec![0.0; len * n];
        drift.par_chunks_mut(n).enumerate().for_each(|(flat, out)| {
            let (z, _) = point(flat);
            dynamics.drift_into(&z[..n], out);
        });

        let mut saturated = false;
        let control = match spec {
            HamiltonianSpec::ExactTanProportional(model) => {
                let Controller::TanProportional(ctrl) = &model.controller else {
                    return Err(config("exact tan Hamiltonian needs a tan-proportional controller"));
                };
                let pairs: Vec<(f64, f64, bool)> = (0..len)
                    .into_par_iter()
                    .map(|flat| {
                        let (z, elapsed) = point(flat);
                        let ebar = model.error.half_widths(elapsed);
                        let x = &z[..n];
                        let eval = |beta3: f64| {
                            let e = tan_worst_error(ctrl, beta3, &ebar);
                            let xhat: Vec<f64> = x.iter().zip(&e).map(|(a, b)| a + b).collect();
                            ctrl.eval(&xhat)
                        };
                        let (up, s1) = eval(1.0);
                        let (un, s2) = eval(-1.0);
                        (up, un, s1 || s2)
                    })
                    .collect();
                saturated = pairs.iter().any(|p| p.2);
                ControlTerm::Tan {
                    u_pos: pairs.iter().map(|p| p.0).collect(),
                    u_neg: pairs.iter().map(|p| p.1).collect(),
                }
            }
            HamiltonianSpec::ExactEnumerated(model) => {
                let Controller::Tabulated(table) = &model.controller else {
                    return Err(config("enumeration needs a tabulated controller"));
                };
                if table.alphabet().len() > MAX_ENUMERATED_CONTROLS {
                    return Err(config(format!(
                        "enumerated Hamiltonian supports at most {MAX_ENUMERATED_CONTROLS} distinct table entries \
                         (table has {}); build a control-bounds field instead",
                        table.alphabet().len()
                    )));
                }
                let masks = (0..len)
                    .into_par_iter()
                    .map(|flat| {
                        let (z, elapsed) = point(flat);
                        let ebar = model.error.half_widths(elapsed);
                        candidate_mask(table, &z[..n], &ebar, 0.0)
                    })
                    .collect();
                ControlTerm::Enumerated { alphabet: table.alphabet().to_vec(), masks }
            }
            HamiltonianSpec::IntervalBounded { bounds, .. } => {
                ControlTerm::Interval { lower: bounds.lower().to_vec(), upper: bounds.upper().to_vec() }
            }
        };
        let alpha = dissipation_coeffs(spec, grid)?;
        let coupling = (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).map(|(i, j)| dynamics.control_coupling(i, j)).collect();
        let disturbance_max =
            (0..n).map(|i| dynamics.disturbance().map_or(0.0, |b| b.lo[i].abs().max(b.hi[i].abs()))).collect();
        Ok(Self { dynamics, state_dims: n, control_dims: m, dark, drift, control, coupling, disturbance_max, alpha, saturated })
    }

    pub fn dissipation(&self) -> &[f64] {
        &self.alpha
    }

    pub fn has_dark_axis(&self) -> bool {
        self.dark
    }

    /// Whether any cached tan argument was clamped.
    pub fn saturated(&self) -> bool {
        self.saturated
    }

    /// Node-local coefficients `αᵢ(x_node) ≥ |∂H/∂pᵢ(x_node, ·)|` over all
    /// grid axes. They never exceed [`Self::dissipation`].
    #[inline]
    pub fn local_dissipation(&self, flat: usize, out: &mut [f64]) {
        let n = self.state_dims;
        let m = self.control_dims;
        let mut umax = [0.0f64; MAX_DIMS];
        match &self.control {
            ControlTerm::Tan { u_pos, u_neg } => umax[0] = u_pos[flat].abs().max(u_neg[flat].abs()),
            ControlTerm::Enumerated { alphabet, masks } => {
                for k in mask_members(masks[flat]) {
                    for j in 0..m {
                        umax[j] = umax[j].max(alphabet[k][j].abs());
                    }
                }
            }
            ControlTerm::Interval { lower, upper } => {
                for j in 0..m {
                    umax[j] = lower[flat * m + j].abs().max(upper[flat * m + j].abs());
                }
            }
        }
        for i in 0..n {
            let control: f64 = (0..m).map(|j| self.coupling[i * m + j] * umax[j]).sum();
            out[i] = self.drift[flat * n + i].abs() + control + self.disturbance_max[i];
        }
        if self.dark {
            out[n] = 1.0;
        }
    }

    /// `H(x_node, p)` with `p` over all grid axes.
    #[inline]
    pub fn eval(&self, flat: usize, p: &[f64]) -> f64 {
        let n = self.state_dims;
        let f = &self.drift[flat * n..(flat + 1) * n];
        let mut h: f64 = p[..n].iter().zip(f).map(|(a, b)| a * b).sum();
        let mut gain = [0.0f64; MAX_DIMS];
        let m = self.control_dims;
        self.dynamics.control_gain_into(p, &mut gain[..m]);
        match &self.control {
            ControlTerm::Tan { u_pos, u_neg } => {
                let g = gain[0];
                let u = if g > 0.0 { u_pos[flat] } else { u_neg[flat] };
                h += g * u;
            }
            ControlTerm::Enumerated { alphabet, masks } => {
                let mut best = f64::INFINITY;
                for k in mask_members(masks[flat]) {
                    let v: f64 = (0..m).map(|j| gain[j] * alphabet[k][j]).sum();
                    best = best.min(v);
                }
                h += best;
            }
            ControlTerm::Interval { lower, upper } => {
                for j in 0..m {
                    let g = gain[j];
                    h += g * if g > 0.0 { lower[flat * m + j] } else { upper[flat * m + j] };
                }
            }
        }
        if let Some(b) = self.dynamics.disturbance() {
            for i in 0..n {
                h += p[i] * if p[i] > 0.0 { b.lo[i] } else { b.hi[i] };
            }
        }
        if self.dark {
            h += p[n];
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ErrorBound;
    use std::f64::consts::PI;

    fn taxi(ebar: Vec<f64>) -> ClosedLoopModel {
        ClosedLoopModel::new(
            Dynamics::dubins(5.0).unwrap(),
            Controller::TanProportional(TanProportional::new(-0.013, -0.44).unwrap()),
            ErrorBound::fixed(ebar).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn tan_examples() {
        let m = taxi(vec![1.0, 0.0, 0.1]);
        let x = [0.0, 100.0, 0.0];
        let r = ham_exact_tan(&m, &x, &[0.0, 1.0, 0.0], &[1.0, 0.0, 0.1]).unwrap();
        assert_eq!(r.value, 5.0);
        assert_eq!(r.e_star, vec![0.0; 3]);
        let r = ham_exact_tan(&m, &x, &[0.0, 0.0, 1.0], &[1.0, 0.0, 0.1]).unwrap();
        assert_eq!(r.e_star, vec![1.0, 0.0, 0.1]);
        assert!((r.value - (-0.057f64).tan()).abs() < 1e-15);
        assert!((r.value + 0.057_06).abs() < 1e-5);
    }

    #[test]
    fn enumerated_and_interval_examples() {
        let d = Dynamics::dubins(1.0).unwrap();
        let x = [0.3, -1.0, 0.7];
        let cands = vec![vec![-0.2], vec![0.0], vec![0.3]];
        let r = ham_exact_enumerated(&d, &x, &[0.0, 0.0, 1.0], &cands).unwrap();
        assert_eq!((r.value, r.u_star.clone()), (-0.2, vec![-0.2]));
        assert_eq!(ham_lower_bound(&d, &x, &[0.0, 0.0, 1.0], &[-0.2], &[0.3]).unwrap(), (-0.2, vec![-0.2]));
        assert_eq!(ham_lower_bound(&d, &x, &[0.0, 0.0, -1.0], &[-0.2], &[0.3]).unwrap(), (-0.3, vec![0.3]));
        assert!(ham_exact_enumerated(&d, &x, &[0.0, 0.0, 1.0], &[]).is_err());
    }

    #[test]
    fn dissipation_examples() {
        let g = Grid::bounded(vec![-11.0, 100.0, -0.49], vec![11.0, 250.0, 0.49], vec![5, 5, 5]).unwrap();
        let alpha = dissipation_coeffs(&HamiltonianSpec::ExactTanProportional(taxi(vec![0.0; 3])), &g).unwrap();
        assert_eq!(&alpha[..2], &[5.0 * 0.49f64.sin(), 5.0]);
        // corner scan: |a|·11 + |b|·0.49
        assert!((alpha[2] - (0.013f64 * 11.0 + 0.44 * 0.49).tan()).abs() < 1e-15);

        let grid = std::sync::Arc::new(Grid::bounded(vec![0.0; 3], vec![1.0; 3], vec![3; 3]).unwrap());
        let lower: Vec<f64> = (0..27).map(|i| if i == 4 { -0.5 } else { -0.1 }).collect();
        let upper: Vec<f64> = (0..27).map(|i| if i == 9 { 0.4 } else { 0.0 }).collect();
        let bounds = ControlBoundsField::new(grid.clone(), 1, lower, upper).unwrap();
        let spec = HamiltonianSpec::IntervalBounded { dynamics: Dynamics::dubins(5.0).unwrap(), bounds };
        assert_eq!(dissipation_coeffs(&spec, &grid).unwrap(), vec![5.0 * 1f64.sin(), 5.0, 0.5]);

        let circle = Grid::new(vec![0.0, 0.0, -PI], vec![1.0, 1.0, PI], vec![3, 3, 8], vec![false, false, true]).unwrap();
        let d = Dynamics::dubins(5.0).unwrap();
        assert_eq!([d.drift_bound(&circle, 0), d.drift_bound(&circle, 1), d.drift_bound(&circle, 2)], [5.0, 5.0, 0.0]);
    }
}
