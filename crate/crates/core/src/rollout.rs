//! Trajectory rollouts: worst-case counterexamples driven by the value
//! gradient, light-policy rollouts, and the Monte Carlo baseline.
//!
//! All rollouts use explicit Euler with the solver's time step. The error at
//! elapsed dark time `s` is bounded by `ē(s)`; without a light policy the
//! dark clock starts at `t₀`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{light_policy_step, DarkBudgetField, LightDecision};
use crate::bounds::enumerate_candidates;
use crate::error::{config, Result};
use crate::hamiltonian::tan_worst_error;
use crate::models::{ClosedLoopModel, Controller};
use crate::solver::{FailureSpec, ValueField};

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub perceived: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub errors: Vec<Vec<f64>>,
    pub disturbances: Vec<Vec<f64>>,
    /// `l` at each recorded state.
    pub l_values: Vec<f64>,
    /// Elapsed dark time at each step.
    pub elapsed: Vec<f64>,
    /// Lights were switched on at this step.
    pub lights: Vec<bool>,
    pub min_l: f64,
    /// The state left the grid on a bounded axis and the rollout stopped.
    pub truncated: bool,
    /// A tan argument was clamped along the way.
    pub saturated: bool,
}

impl Trajectory {
    pub fn violated(&self) -> bool {
        self.min_l <= 0.0
    }

    pub fn light_count(&self) -> usize {
        self.lights.iter().filter(|l| **l).count()
    }

    /// Rows `t, state…, perceived…, control…, l, elapsed, lights`; the final
    /// state has no control and repeats the last one.
    pub fn to_csv(&self) -> String {
        let n = self.states.first().map_or(0, Vec::len);
        let m = self.controls.first().map_or(0, Vec::len);
        let mut out = String::from("t");
        for i in 0..n {
            out.push_str(&format!(",x{i}"));
        }
        for i in 0..n {
            out.push_str(&format!(",xhat{i}"));
        }
        for j in 0..m {
            out.push_str(&format!(",u{j}"));
        }
        out.push_str(",l,elapsed,lights\n");
        for k in 0..self.states.len() {
            let c = k.min(self.controls.len().saturating_sub(1));
            let mut row = vec![self.times[k].to_string()];
            row.extend(self.states[k].iter().map(f64::to_string));
            let xhat = self.perceived.get(c).map_or(&self.states[k], |p| p);
            row.extend(xhat.iter().map(f64::to_string));
            if let Some(u) = self.controls.get(c) {
                row.extend(u.iter().map(f64::to_string));
            }
            row.push(self.l_values[k].to_string());
            row.push(self.elapsed.get(c).copied().unwrap_or(0.0).to_string());
            row.push(u8::from(self.lights.get(k).copied().unwrap_or(false)).to_string());
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Central-difference gradient of `V(·, t)` in the state axes, with step one
/// grid spacing per axis. `z` may carry a trailing dark-time coordinate.
pub fn value_gradient(vf: &ValueField, z: &[f64], t: f64) -> Result<Vec<f64>> {
    let n = vf.state_dims();
    let h = vf.grid().spacing();
    let mut q = z.to_vec();
    (0..n)
        .map(|i| {
            q[i] = z[i] + h[i];
            let up = vf.query_flagged(&q, t)?.0;
            q[i] = z[i] - h[i];
            let down = vf.query_flagged(&q, t)?.0;
            q[i] = z[i];
            Ok((up - down) / (2.0 * h[i]))
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Error and disturbance minimizing `p · h(x, d, e)` under the model's arm:
/// the closed form for tan, the enumerated witness for tables, the best
/// error-box corner (or zero) for networks.
pub fn adversary(model: &ClosedLoopModel, x: &[f64], p: &[f64], ebar: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let d = model.dynamics.worst_disturbance(p).1;
    let e = match &model.controller {
        Controller::TanProportional(ctrl) => {
            let mut g = vec![0.0; 1];
            model.dynamics.control_gain_into(p, &mut g);
            tan_worst_error(ctrl, g[0], ebar)
        }
        Controller::Tabulated(table) => {
            let mut f = vec![0.0; n];
            let mut best = (f64::INFINITY, vec![0.0; n]);
            for c in enumerate_candidates(table, x, ebar, t) {
                model.dynamics.eval_into(x, table.entry(c.cell), &d, &mut f);
                let v = dot(p, &f);
                if v < best.0 {
                    best = (v, c.estimate.iter().zip(x).map(|(a, b)| a - b).collect());
                }
            }
            best.1
        }
        Controller::Mlp(_) => {
            let mut f = vec![0.0; n];
            let mut best = (f64::INFINITY, vec![0.0; n]);
            let active: Vec<usize> = (0..n).filter(|&i| ebar[i] > 0.0).collect();
            for corner in 0..=(1usize << active.len()) {
                let mut e = vec![0.0; n];
                if corner > 0 {
                    for (k, &i) in active.iter().enumerate() {
                        e[i] = if (corner - 1) >> k & 1 == 1 { ebar[i] } else { -ebar[i] };
                    }
                }
                let u = model.control(x, &e, t).u;
                model.dynamics.eval_into(x, &u, &d, &mut f);
                let v = dot(p, &f);
                if v < best.0 {
                    best = (v, e);
                }
            }
            best.1
        }
    };
    (e, d)
}

/// What drives the error in a rollout.
enum Driver<'a> {
    WorstCase(&'a ValueField),
    Nominal,
}

struct Lights<'a> {
    budget: &'a DarkBudgetField,
    margin: f64,
}

fn run(
    driver: Driver,
    model: &ClosedLoopModel,
    failure: &FailureSpec,
    x0: &[f64],
    t0: f64,
    t_final: f64,
    dt: f64,
    lights: Option<Lights>,
    bounds: Option<&crate::grid::Grid>,
) -> Result<Trajectory> {
    let n = model.state_dims();
    if x0.len() != n {
        return Err(config(format!("initial state has {} coordinates, model has {n}", x0.len())));
    }
    let steps = if dt > 0.0 { ((t_final - t0) / dt).round() as usize } else { 0 };
    let mut tr = Trajectory { min_l: f64::INFINITY, ..Default::default() };
    let mut x = x0.to_vec();
    let mut anchor = x0.to_vec();
    let mut elapsed = 0.0;
    let mut f = vec![0.0; n];
    for k in 0..=steps {
        let t = if k == steps { t_final } else { t0 + k as f64 * dt };
        let l = failure.value(&x);
        tr.times.push(t);
        tr.states.push(x.clone());
        tr.l_values.push(l);
        tr.min_l = tr.min_l.min(l);
        if k == steps {
            break;
        }
        let mut on = false;
        if let Some(policy) = &lights {
            if light_policy_step(policy.budget, &anchor, elapsed, policy.margin)? == LightDecision::LightsOn {
                on = true;
                elapsed = 0.0;
                anchor.clone_from(&x);
            }
        }
        tr.lights.push(on);
        let ebar = model.error.half_widths(elapsed);
        let (e, d) = match &driver {
            Driver::Nominal => (vec![0.0; n], vec![0.0; model.dynamics.disturbance_dims()]),
            Driver::WorstCase(vf) => {
                let mut z = x.clone();
                if vf.has_dark_axis() {
                    z.push(elapsed);
                }
                let tq = t.clamp(vf.t0(), vf.t_final());
                let p = value_gradient(vf, &z, tq)?;
                adversary(model, &x, &p, &ebar, t)
            }
        };
        let out = model.control(&x, &e, t);
        tr.saturated |= out.saturated;
        model.dynamics.eval_into(&x, &out.u, &d, &mut f);
        tr.perceived.push(x.iter().zip(&e).map(|(a, b)| a + b).collect());
        tr.controls.push(out.u);
        tr.errors.push(e);
        tr.disturbances.push(d);
        tr.elapsed.push(elapsed);
        for i in 0..n {
            x[i] += dt * f[i];
        }
        elapsed += dt;
        if let Some(g) = bounds {
            if !g.contains(&x[..n.min(g.dims())]) {
                let l = failure.value(&x);
                tr.times.push(t + dt);
                tr.states.push(x.clone());
                tr.l_values.push(l);
                tr.min_l = tr.min_l.min(l);
                tr.truncated = true;
                break;
            }
        }
    }
    Ok(tr)
}

/// Counterexample rollout from `(x₀, t₀)` to the field's final time: the
/// adversary re-plans every step from the interpolated value gradient.
pub fn worst_case_rollout(
    vf: &ValueField,
    model: &ClosedLoopModel,
    failure: &FailureSpec,
    x0: &[f64],
    t0: f64,
) -> Result<Trajectory> {
    let state = vf.grid().leading_axes(vf.state_dims())?;
    run(Driver::WorstCase(vf), model, failure, x0, t0, vf.t_final(), vf.info().dt, None, Some(&state))
}

/// Worst-case rollout with the light policy resetting the dark clock.
/// `vf` is the growing-uncertainty field (state × dark time) used by the
/// adversary; the rollout lasts `duration`.
#[allow(clippy::too_many_arguments)]
pub fn policy_rollout(
    vf: &ValueField,
    model: &ClosedLoopModel,
    failure: &FailureSpec,
    budget: &DarkBudgetField,
    x0: &[f64],
    duration: f64,
    margin: f64,
) -> Result<Trajectory> {
    if !vf.has_dark_axis() {
        return Err(config("policy rollouts need a field with a dark-time axis"));
    }
    let state = vf.grid().leading_axes(vf.state_dims())?;
    let lights = Lights { budget, margin };
    run(Driver::WorstCase(vf), model, failure, x0, vf.t0(), vf.t0() + duration, vf.info().dt, Some(lights), Some(&state))
}

/// Error-free, disturbance-free closed-loop rollout.
pub fn nominal_rollout(
    model: &ClosedLoopModel,
    failure: &FailureSpec,
    x0: &[f64],
    t0: f64,
    t_final: f64,
    dt: f64,
) -> Result<Trajectory> {
    run(Driver::Nominal, model, failure, x0, t0, t_final, dt, None, None)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloResult {
    /// Minimum of `min_l` over all samples.
    pub value: f64,
    /// `running_min[k]` is the minimum over the first `k + 1` samples.
    pub running_min: Vec<f64>,
}

fn sample_box(rng: &mut ChaCha8Rng, lo: &[f64], hi: &[f64], out: &mut [f64]) {
    for i in 0..out.len() {
        out[i] = if hi[i] > lo[i] { rng.gen_range(lo[i]..=hi[i]) } else { lo[i] };
    }
}

/// Minimum safety value over `samples` rollouts whose errors (and
/// disturbances) are drawn uniformly per step. Sample `k` uses its own
/// ChaCha8 stream `k` of `seed`, so results do not depend on scheduling.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_value(
    model: &ClosedLoopModel,
    failure: &FailureSpec,
    x0: &[f64],
    t0: f64,
    t_final: f64,
    dt: f64,
    samples: usize,
    seed: u64,
) -> Result<MonteCarloResult> {
    let n = model.state_dims();
    if samples == 0 {
        return Err(config("Monte Carlo needs at least one sample"));
    }
    if x0.len() != n {
        return Err(config(format!("initial state has {} coordinates, model has {n}", x0.len())));
    }
    if !(dt > 0.0) && t_final > t0 {
        return Err(config("Monte Carlo needs a positive time step"));
    }
    let steps = if dt > 0.0 { ((t_final - t0) / dt).round() as usize } else { 0 };
    let per_sample: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut x = x0.to_vec();
            let mut e = vec![0.0; n];
            let mut d = vec![0.0; model.dynamics.disturbance_dims()];
            let mut f = vec![0.0; n];
            let mut min_l = failure.value(&x);
            for step in 0..steps {
                let t = t0 + step as f64 * dt;
                let ebar = model.error.half_widths(t - t0);
                let lo: Vec<f64> = ebar.iter().map(|w| -w).collect();
                sample_box(&mut rng, &lo, &ebar, &mut e);
                if let Some(b) = model.dynamics.disturbance() {
                    sample_box(&mut rng, &b.lo, &b.hi, &mut d);
                }
                let u = model.control(&x, &e, t).u;
                model.dynamics.eval_into(&x, &u, &d, &mut f);
                for i in 0..n {
                    x[i] += dt * f[i];
                }
                min_l = min_l.min(failure.value(&x));
            }
            min_l
        })
        .collect();
    let mut running_min = Vec::with_capacity(samples);
    let mut acc = f64::INFINITY;
    for v in per_sample {
        acc = acc.min(v);
        running_min.push(acc);
    }
    Ok(MonteCarloResult { value: acc, running_min })
}
