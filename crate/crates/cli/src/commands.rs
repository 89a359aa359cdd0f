//! Subcommand pipelines. Each writes its outputs into the run directory and
//! reports whether it found the queried behavior unsafe.

use std::sync::Arc;
use std::time::Instant;

use percept_reach::analysis::{safe_volume, sweep_hyperparameters, synthesize_dark_budget, linspace, DarkBudget};
use percept_reach::hamiltonian::HamiltonianSpec;
use percept_reach::io;
use percept_reach::rollout::{monte_carlo_value, nominal_rollout, policy_rollout, worst_case_rollout};
use percept_reach::solver::{query_value, resolution_tolerance};
use percept_reach::{solve, Controller, ScalarField, ValueField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{axis_index, McSection, RunConfig, Setup, SweepSection};
use crate::rundir::RunDir;
use crate::{CliError, Command, Common, ExportArgs};

pub fn dispatch(command: &Command, cfg: Option<RunConfig>, common: &Common, argv: &[String]) -> Result<bool, CliError> {
    let mut out = RunDir::create(&common.out)?;
    let (unsafe_found, echo) = match (command, cfg) {
        (Command::ExportSlice(args), _) => (export_slice(&mut out, args)?, export_echo(args)),
        (cmd, Some(cfg)) => {
            let echo = serde_json::to_value(&cfg).expect("config serializes");
            let setup = Setup::new(cfg)?;
            let found = match cmd {
                Command::Solve => solve_cmd(&mut out, &setup)?,
                Command::Bounds => bounds_cmd(&mut out, &setup)?,
                Command::Sweep(_) => sweep_cmd(&mut out, &setup)?,
                Command::Budget => budget_cmd(&mut out, &setup)?,
                Command::Rollout(a) => rollout_cmd(&mut out, &setup, a.value.as_deref())?,
                Command::Mc(_) => mc_cmd(&mut out, &setup)?,
                Command::PolicyCheck(_) => policy_cmd(&mut out, &setup)?,
                Command::ExportSlice(_) => unreachable!("handled above"),
            };
            (found, echo)
        }
        (_, None) => unreachable!("config assembled for every pipeline command"),
    };
    let code = i32::from(unsafe_found && common.assert_safe);
    out.finish(command.name(), argv, &echo, code)?;
    Ok(unsafe_found)
}

/// `x` on the grid of `vf`: the dark-time coordinate starts at zero.
fn lift(vf: &ValueField, x: &[f64]) -> Vec<f64> {
    let mut z = x.to_vec();
    z.resize(vf.grid().dims(), 0.0);
    z
}

fn note_solve(out: &mut RunDir, vf: &ValueField) {
    if vf.info().tan_saturated {
        out.warn("tan controller saturated at some nodes; the Hamiltonian used the clamped control");
    }
    if vf.info().arm == "interval-bounded" {
        out.warn("interval-bounded Hamiltonian: the value is a conservative under-approximation");
    }
}

fn solve_full(out: &mut RunDir, setup: &Setup) -> Result<ValueField, CliError> {
    let grid = setup.solve_grid()?;
    let vf = solve(&grid, &setup.spec()?, &setup.failure, &setup.solve)?;
    note_solve(out, &vf);
    Ok(vf)
}

fn solve_cmd(out: &mut RunDir, setup: &Setup) -> Result<bool, CliError> {
    let started = Instant::now();
    let vf = solve_full(out, setup)?;
    let runtime = started.elapsed().as_secs_f64();
    out.write("value.rvvf", &io::encode_value_field(&vf))?;
    let mut summary = json!({
        "info": vf.info(),
        "t0": vf.t0(),
        "t_final": vf.t_final(),
        "slices": vf.times().len(),
        "grid_shape": vf.grid().shape(),
        "safe_volume": safe_volume(&vf, vf.t0())?,
        "runtime_s": runtime,
    });
    let mut unsafe_found = false;
    if setup.cfg.query.is_some() {
        let x0 = setup.x0()?;
        let (v, clamped) = vf.query_flagged(&lift(&vf, &x0), vf.t0())?;
        if clamped {
            out.warn("x0 lies outside the grid; the value was clamped to the boundary");
        }
        unsafe_found = v <= 0.0;
        summary["x0"] = json!(x0);
        summary["value_at_x0"] = json!(v);
        summary["x0_in_brt"] = json!(unsafe_found);
    }
    out.write_json("summary.json", &summary)?;
    Ok(unsafe_found)
}

fn bounds_cmd(out: &mut RunDir, setup: &Setup) -> Result<bool, CliError> {
    if matches!(setup.model.controller, Controller::TanProportional(_)) {
        return Err(CliError::Config(
            "model.controller: control-bound fields need a table or network controller".into(),
        ));
    }
    let started = Instant::now();
    let field = setup.bounds_field(&setup.model)?;
    let runtime = started.elapsed().as_secs_f64();
    out.write("bounds.rvcb", &io::encode_bounds(&field))?;
    let magnitudes: Vec<f64> = (0..field.control_dims()).map(|j| field.max_magnitude(j)).collect();
    out.write_json(
        "summary.json",
        &json!({
            "grid_shape": field.grid().shape(),
            "control_dims": field.control_dims(),
            "max_magnitude": magnitudes,
            "runtime_s": runtime,
        }),
    )?;
    Ok(false)
}

fn sweep_cmd(out: &mut RunDir, setup: &Setup) -> Result<bool, CliError> {
    let s: SweepSection = setup.cfg.sweep.clone().unwrap_or_default();
    if s.a_count == 0 || s.b_count == 0 {
        return Err(CliError::Config("sweep.a_count: sweep axes need at least one value".into()));
    }
    let a = linspace(s.a[0], s.a[1], s.a_count);
    let b = linspace(s.b[0], s.b[1], s.b_count);
    let started = Instant::now();
    let result = sweep_hyperparameters(&setup.model, &a, &b, &setup.state_grid, &setup.failure, &setup.solve, &setup.x0()?)?;
    let runtime = started.elapsed().as_secs_f64();
    out.write("sweep.csv", result.to_csv().as_bytes())?;
    for (i, j, msg) in &result.failures {
        out.warn(format!("sweep cell a={} b={} failed: {msg}", a[*i], b[*j]));
    }
    if result.saturated_cells > 0 {
        out.warn(format!("tan controller saturated in {} sweep cells", result.saturated_cells));
    }
    let best = result.argmax.map(|(i, j)| json!({ "a": a[i], "b": b[j], "value": result.value(i, j) }));
    let unsafe_found = result.argmax.is_none_or(|(i, j)| result.value(i, j) <= 0.0);
    out.write_json(
        "summary.json",
        &json!({
            "cells": a.len() * b.len(),
            "argmax": best,
            "failed_cells": result.failures.len(),
            "saturated_cells": result.saturated_cells,
            "runtime_s": runtime,
        }),
    )?;
    Ok(unsafe_found)
}

fn require_growth(setup: &Setup) -> Result<percept_reach::bounds::DarkTimeAxis, CliError> {
    match (setup.has_growth(), setup.dark) {
        (true, Some(d)) => Ok(d),
        _ => Err(CliError::Config("model.error: dark-time budgets need error = \"growth\" and a [dark] section".into())),
    }
}

/// Zero-uncertainty field on the state grid and the budget derived from it.
fn budget_fields(out: &mut RunDir, setup: &Setup) -> Result<(ValueField, DarkBudget, HamiltonianSpec), CliError> {
    let dark = require_growth(setup)?;
    let zero = setup.zero_error_model()?;
    let v0 = solve(&setup.state_grid, &setup.spec_for(&zero)?, &setup.failure, &setup.solve)?;
    note_solve(out, &v0);
    let grow_spec = setup.spec()?;
    let db = synthesize_dark_budget(&grow_spec, &v0, dark, &setup.solve)?;
    Ok((v0, db, grow_spec))
}

fn slice_axes_csv(field: &ScalarField, held: &[f64]) -> Result<Vec<u8>, CliError> {
    let dims = field.grid().dims();
    if dims < 2 {
        let mut s = String::from("x0,value\n");
        for k in 0..field.grid().len() {
            s.push_str(&format!("{},{}\n", field.grid().point(k)[0], field.values()[k]));
        }
        return Ok(s.into_bytes());
    }
    let fixed: Vec<(usize, f64)> = (2..dims).map(|a| (a, held.get(a).copied().unwrap_or(0.0))).collect();
    Ok(io::slice_csv(field, 0, 1, &fixed)?.into_bytes())
}

fn budget_cmd(out: &mut RunDir, setup: &Setup) -> Result<bool, CliError> {
    let started = Instant::now();
    let (v0, db, _) = budget_fields(out, setup)?;
    let runtime = started.elapsed().as_secs_f64();
    let tau = db.budget.tau_star();
    out.write("budget.rvdb", &io::encode_budget(&db.budget))?;
    let held = match &setup.cfg.query {
        Some(q) => q.x0.clone(),
        None => Vec::new(),
    };
    out.write("budget_slice.csv", &slice_axes_csv(tau, &held)?)?;
    out.write("zero.rvvf", &io::encode_value_field(&v0))?;
    out.write("growing.rvvf", &io::encode_value_field(&db.growing))?;
    let values = tau.values();
    let horizon = db.budget.horizon();
    let mut summary = json!({
        "horizon": horizon,
        "dt": db.budget.dt(),
        "tau_min": tau.min(),
        "tau_max": tau.max(),
        "tau_mean": values.iter().sum::<f64>() / values.len() as f64,
        "fraction_zero": values.iter().filter(|t| **t <= 0.0).count() as f64 / values.len() as f64,
        "fraction_full": values.iter().filter(|t| **t >= horizon).count() as f64 / values.len() as f64,
        "runtime_s": runtime,
    });
    let mut unsafe_found = false;
    if setup.cfg.query.is_some() {
        let x0 = setup.x0()?;
        let t = db.budget.at(&x0);
        unsafe_found = t <= 0.0;
        summary["x0"] = json!(x0);
        summary["tau_at_x0"] = json!(t);
    }
    out.write_json("summary.json", &summary)?;
    Ok(unsafe_found)
}

fn trajectory_summary(tr: &percept_reach::rollout::Trajectory, runtime: f64) -> Value {
    json!({
        "min_l": tr.min_l,
        "violated": tr.violated(),
        "truncated": tr.truncated,
        "saturated": tr.saturated,
        "steps": tr.times.len().saturating_sub(1),
        "light_events": tr.light_count(),
        "runtime_s": runtime,
    })
}

fn rollout_cmd(out: &mut RunDir, setup: &Setup, value: Option<&std::path::Path>) -> Result<bool, CliError> {
    let vf = match value {
        Some(p) => io::read_value_field(p).map_err(|e| CliError::Config(format!("--value: {e}")))?,
        None => solve_full(out, setup)?,
    };
    if vf.state_dims() != setup.model.state_dims() {
        return Err(CliError::Config("--value: field state dimension does not match the model".into()));
    }
    let x0 = setup.x0()?;
    let started = Instant::now();
    let tr = worst_case_rollout(&vf, &setup.model, &setup.failure, &x0, vf.t0())?;
    let runtime = started.elapsed().as_secs_f64();
    if tr.truncated {
        out.warn("rollout left the grid and was truncated");
    }
    out.write("trajectory.csv", tr.to_csv().as_bytes())?;
    let mut summary = trajectory_summary(&tr, runtime);
    summary["x0"] = json!(x0);
    summary["value_at_x0"] = json!(query_value(&vf, &lift(&vf, &x0), vf.t0())?);
    out.write_json("summary.json", &summary)?;
    Ok(tr.violated())
}

fn mc_cmd(out: &mut RunDir, setup: &Setup) -> Result<bool, CliError> {
    let mc: McSection = setup.cfg.mc.clone().unwrap_or_default();
    let x0 = setup.x0()?;
    let (t0, t_final) = (setup.solve.t0, setup.solve.t_final);
    let started = Instant::now();
    let result = monte_carlo_value(&setup.model, &setup.failure, &x0, t0, t_final, mc.dt, mc.samples, setup.seed)?;
    let runtime = started.elapsed().as_secs_f64();
    let nominal = nominal_rollout(&setup.model, &setup.failure, &x0, t0, t_final, mc.dt)?;
    let mut csv = String::from("samples,running_min\n");
    for (k, v) in result.running_min.iter().enumerate() {
        csv.push_str(&format!("{},{v}\n", k + 1));
    }
    out.write("running_min.csv", csv.as_bytes())?;
    out.write("trajectory.csv", nominal.to_csv().as_bytes())?;
    let violated = result.value <= 0.0;
    out.write_json(
        "summary.json",
        &json!({
            "x0": x0,
            "samples": mc.samples,
            "dt": mc.dt,
            "seed": setup.seed,
            "min_l": result.value,
            "violated": violated,
            "nominal_min_l": nominal.min_l,
            "nominal_truncated": nominal.truncated,
            "runtime_s": runtime,
        }),
    )?;
    Ok(violated)
}

fn policy_cmd(out: &mut RunDir, setup: &Setup) -> Result<bool, CliError> {
    let dark = require_growth(setup)?;
    let policy = setup.cfg.policy.clone().unwrap_or_default();
    let started = Instant::now();
    let (v0, db, grow_spec) = budget_fields(out, setup)?;
    let vf = solve(&setup.solve_grid()?, &grow_spec, &setup.failure, &setup.solve)?;
    let margin = policy.margin.unwrap_or(2.0 * db.budget.dt());
    let duration = policy.duration.unwrap_or(setup.solve.t_final - setup.solve.t0);
    let n = setup.state_grid.dims();

    let starts: Vec<Vec<f64>> = match &policy.starts {
        Some(s) => {
            if let Some(bad) = s.iter().find(|x| x.len() != n) {
                return Err(CliError::Config(format!("policy.starts: {bad:?} does not have {n} coordinates")));
            }
            s.clone()
        }
        None => {
            let count = policy.count.unwrap_or(20);
            let candidates = policy.candidates.unwrap_or(100 * count);
            let g = &setup.state_grid;
            let lo = policy.sample_lo.clone().unwrap_or_else(|| g.lo().to_vec());
            let hi = policy.sample_hi.clone().unwrap_or_else(|| g.hi().to_vec());
            if lo.len() != n || hi.len() != n || lo.iter().zip(&hi).any(|(l, h)| !(l <= h)) {
                return Err(CliError::Config(format!("policy.sample_lo: need {n} coordinates with lo <= hi")));
            }
            let eps = resolution_tolerance(v0.failure(), n);
            let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
            let mut picked = Vec::new();
            for _ in 0..candidates {
                if picked.len() == count {
                    break;
                }
                let x: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| if h > l { rng.gen_range(*l..*h) } else { *l }).collect();
                // unsafe in the dark, clearly safe with lights on
                if query_value(&vf, &lift(&vf, &x), vf.t0())? < 0.0 && query_value(&v0, &x, v0.t0())? > eps {
                    picked.push(x);
                }
            }
            if picked.len() < count {
                out.warn(format!("found {} of {count} starts that need the lights", picked.len()));
            }
            picked
        }
    };

    let mut rows = Vec::new();
    let (mut safe, mut lit) = (0, 0);
    for (k, x) in starts.iter().enumerate() {
        let tr = policy_rollout(&vf, &setup.model, &setup.failure, &db.budget, x, duration, margin)?;
        if tr.truncated {
            out.warn(format!("policy rollout {k} left the grid and was truncated"));
        }
        safe += usize::from(!tr.violated());
        lit += usize::from(tr.light_count() > 0);
        out.write(&format!("policy_{k:03}.csv"), tr.to_csv().as_bytes())?;
        let mut row = trajectory_summary(&tr, 0.0);
        row.as_object_mut().expect("object").remove("runtime_s");
        row["x0"] = json!(x);
        rows.push(row);
    }
    let runtime = started.elapsed().as_secs_f64();
    out.write_json(
        "summary.json",
        &json!({
            "starts": starts.len(),
            "safe": safe,
            "lit": lit,
            "margin": margin,
            "duration": duration,
            "dark_max": dark.max,
            "budget_dt": db.budget.dt(),
            "rollouts": rows,
            "runtime_s": runtime,
        }),
    )?;
    Ok(safe < starts.len())
}

fn export_echo(args: &ExportArgs) -> Value {
    json!({
        "field": args.field.display().to_string(),
        "time": args.time,
        "axes": args.axes,
        "dim": args.dim,
        "at": args.at,
        "bound": args.bound,
        "control": args.control,
        "name": args.name,
    })
}

/// The scalar field stored in a binary file, by its magic.
fn load_scalar(out: &mut RunDir, args: &ExportArgs) -> Result<ScalarField, CliError> {
    let data = std::fs::read(&args.field)
        .map_err(|e| CliError::Argument(format!("--field: cannot read {}: {e}", args.field.display())))?;
    let magic = data.get(..4).unwrap_or(&[]);
    if magic == io::VALUE_MAGIC {
        let vf = io::decode_value_field(&data)?;
        let t = args.time.unwrap_or(vf.t0());
        let k = vf.nearest_slice(t);
        let stored = vf.times()[k];
        if stored != t {
            out.warn(format!("no slice stored at t = {t}; exported the nearest one at t = {stored}"));
        }
        Ok(vf.slices()[k].clone())
    } else if magic == io::FIELD_MAGIC {
        Ok(io::decode_field(&data)?)
    } else if magic == io::BUDGET_MAGIC {
        Ok(io::decode_budget(&data)?.tau_star().clone())
    } else if magic == io::BOUNDS_MAGIC {
        let b = io::decode_bounds(&data)?;
        let m = b.control_dims();
        if args.control >= m {
            return Err(CliError::Argument(format!("--control {} but the field has {m} controls", args.control)));
        }
        let src = match args.bound.as_str() {
            "lower" => b.lower(),
            "upper" => b.upper(),
            other => return Err(CliError::Argument(format!("--bound: expected lower or upper, got {other:?}"))),
        };
        let values = src.iter().skip(args.control).step_by(m).copied().collect();
        Ok(ScalarField::new(Arc::clone(b.grid()), values)?)
    } else {
        Err(CliError::Argument(format!("--field: {} is not a known binary field", args.field.display())))
    }
}

fn export_slice(out: &mut RunDir, args: &ExportArgs) -> Result<bool, CliError> {
    if args.dim.len() != args.at.len() {
        return Err(CliError::Argument(format!("{} --dim but {} --at values", args.dim.len(), args.at.len())));
    }
    let field = load_scalar(out, args)?;
    let dims = field.grid().dims();
    let fixed = args
        .dim
        .iter()
        .zip(&args.at)
        .map(|(d, v)| Ok((axis_index(d, dims)?, *v)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let (i, j) = match &args.axes {
        Some(a) if a.len() != 2 => return Err(CliError::Argument("--axes takes two axes".into())),
        Some(a) => (axis_index(&a[0], dims)?, axis_index(&a[1], dims)?),
        None => {
            let mut free = (0..dims).filter(|k| fixed.iter().all(|(f, _)| f != k));
            match (free.next(), free.next()) {
                (Some(i), Some(j)) => (i, j),
                _ => return Err(CliError::Argument("the slice needs two free axes".into())),
            }
        }
    };
    if i == j || fixed.iter().any(|(f, _)| *f == i || *f == j) {
        return Err(CliError::Argument("slice axes must be distinct and not held".into()));
    }
    for k in (0..dims).filter(|k| *k != i && *k != j && fixed.iter().all(|(f, _)| f != k)) {
        out.warn(format!("axis {k} not held; exported at its lower bound {}", field.grid().lo()[k]));
    }
    out.write(&args.name, io::slice_csv(&field, i, j, &fixed)?.as_bytes())?;
    Ok(false)
}
