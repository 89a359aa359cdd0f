//! The two shipped case studies at desk scale.
//!
//! Taxiing: a Dubins aircraft at 5 m/s under `u = tan(a·p̂_x + b·θ̂)` must
//! keep `|p_x| < 10` m for 20 s. The coverage ladder is a list of error
//! boxes `(ē_px, ē_θ)` of increasing size.
//!
//! Rover: a Dubins rover at 1 m/s drives toward a goal past two circular
//! obstacles. Its state error grows at `(0.1, 0.1, 0.02)` per second of
//! darkness. The controller is a table built by a goal-seeking lookahead
//! heuristic, or a small tanh network trained to imitate that table.

use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bounds::DarkTimeAxis;
use crate::error::{config, Result};
use crate::grid::Grid;
use crate::hamiltonian::{dissipation_coeffs, HamiltonianSpec};
use crate::models::{
    Activation, BoxSet, ClosedLoopModel, Controller, Dynamics, ErrorBound, Layer, Mlp, TabulatedController,
    TanProportional,
};
use crate::solver::{FailureSpec, SolveConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TaxiingPreset {
    pub grid: Arc<Grid>,
    pub speed: f64,
    pub a: f64,
    pub b: f64,
    pub horizon: f64,
    pub keepout: f64,
    pub x0: Vec<f64>,
    /// Error boxes `(ē_px, ē_θ)` in increasing order.
    pub ladder: Vec<[f64; 2]>,
}

pub const TAXIING_LADDER: [[f64; 2]; 5] = [[0.0, 0.0], [1.0, 0.05], [2.5, 0.12], [5.0, 0.25], [10.0, 0.49]];

impl TaxiingPreset {
    /// 61³ nodes, or 101³ with `full`.
    pub fn new(full: bool) -> Self {
        let n = if full { 101 } else { 61 };
        let grid = Grid::bounded(vec![-11.0, 100.0, -0.49], vec![11.0, 250.0, 0.49], vec![n; 3]).expect("valid grid");
        Self {
            grid: Arc::new(grid),
            speed: 5.0,
            a: -0.013,
            b: -0.44,
            horizon: 20.0,
            keepout: 10.0,
            x0: vec![0.0, 100.0, 0.0],
            ladder: TAXIING_LADDER.to_vec(),
        }
    }

    pub fn failure(&self) -> FailureSpec {
        FailureSpec::SlabKeepout { dim: 0, magnitude: self.keepout }
    }

    pub fn error(&self, rung: usize) -> Result<ErrorBound> {
        let e = self
            .ladder
            .get(rung)
            .ok_or_else(|| config(format!("coverage index {rung} out of range (ladder has {} rungs)", self.ladder.len())))?;
        ErrorBound::fixed(vec![e[0], 0.0, e[1]])
    }

    pub fn model_with_gains(&self, a: f64, b: f64, rung: usize) -> Result<ClosedLoopModel> {
        ClosedLoopModel::new(
            Dynamics::dubins(self.speed)?,
            Controller::TanProportional(TanProportional::new(a, b)?),
            self.error(rung)?,
        )
    }

    pub fn model(&self, rung: usize) -> Result<ClosedLoopModel> {
        self.model_with_gains(self.a, self.b, rung)
    }

    pub fn spec(&self, rung: usize) -> Result<HamiltonianSpec> {
        Ok(HamiltonianSpec::ExactTanProportional(self.model(rung)?))
    }

    pub fn solve_config(&self) -> SolveConfig {
        SolveConfig::new(0.0, self.horizon)
    }

    /// Dissipation of the widest rung. Passing it to every rung runs the
    /// whole ladder through one scheme, so the rungs compare pointwise.
    pub fn ladder_dissipation(&self) -> Result<Vec<f64>> {
        dissipation_coeffs(&self.spec(self.ladder.len() - 1)?, &self.grid)
    }
}

/// Rover controller arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoverController {
    Mpc,
    Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoverPreset {
    pub state_grid: Arc<Grid>,
    pub dark: DarkTimeAxis,
    pub speed: f64,
    pub rates: Vec<f64>,
    pub centers: Vec<[f64; 2]>,
    pub radii: Vec<f64>,
    pub goal: [f64; 2],
    /// Turn rates the heuristic may pick.
    pub alphabet: Vec<f64>,
    /// Obstacle distance below which the heuristic pays a penalty.
    pub clearance: f64,
    pub horizon: f64,
}

impl RoverPreset {
    /// 81 × 41 × 61 state nodes (0.25 m in position) × 21 dark-time
    /// samples, or 100⁴ with `full`.
    pub fn new(full: bool) -> Self {
        let (shape, k) = if full { (vec![100; 3], 100) } else { (vec![81, 41, 61], 21) };
        let grid = Grid::new(vec![0.0, -5.0, -PI], vec![20.0, 5.0, PI], shape, vec![false, false, true])
            .expect("valid grid");
        Self {
            state_grid: Arc::new(grid),
            dark: DarkTimeAxis { max: 5.0, samples: k },
            speed: 1.0,
            rates: vec![0.1, 0.1, 0.02],
            centers: vec![[7.0, 1.5], [13.0, -1.5]],
            radii: vec![2.0, 2.0],
            goal: [19.0, 0.0],
            alphabet: vec![-1.0, -0.5, 0.0, 0.5, 1.0],
            clearance: 0.3,
            horizon: 5.0,
        }
    }

    pub fn failure(&self) -> FailureSpec {
        FailureSpec::CircularObstacles { centers: self.centers.clone(), radii: self.radii.clone() }
    }

    pub fn augmented_grid(&self) -> Result<Arc<Grid>> {
        Ok(Arc::new(self.dark.extend(&self.state_grid)?))
    }

    pub fn dynamics(&self) -> Result<Dynamics> {
        Dynamics::dubins(self.speed)
    }

    pub fn growing_error(&self) -> Result<ErrorBound> {
        ErrorBound::linear_growth(self.rates.clone())
    }

    pub fn model(&self, controller: Controller, error: ErrorBound) -> Result<ClosedLoopModel> {
        ClosedLoopModel::new(self.dynamics()?, controller, error)
    }

    fn obstacle_distance(&self, x: f64, y: f64) -> f64 {
        self.centers.iter().zip(&self.radii).map(|(c, r)| (x - c[0]).hypot(y - c[1]) - r).fold(f64::INFINITY, f64::min)
    }

    /// Cost of holding `u1` for 1 s then `u2` for 1.5 s from `x`.
    fn lookahead_cost(&self, x: &[f64], u1: f64, u2: f64) -> f64 {
        let dt = 0.1;
        let (mut px, mut py, mut th) = (x[0], x[1], x[2]);
        let mut penalty = 0.0;
        for k in 0..25 {
            let u = if k < 10 { u1 } else { u2 };
            px += dt * self.speed * th.sin();
            py += dt * self.speed * th.cos();
            th += dt * u;
            penalty += (self.clearance - self.obstacle_distance(px, py)).max(0.0);
            penalty += (py.abs() - 4.0).max(0.0);
        }
        (px - self.goal[0]).hypot(py - self.goal[1]) + 20.0 * penalty
    }

    /// First control of the cheapest two-segment plan; ties keep the earlier
    /// alphabet entry.
    pub fn heuristic_control(&self, x: &[f64]) -> f64 {
        let mut best = (f64::INFINITY, self.alphabet[0]);
        for &u1 in &self.alphabet {
            for &u2 in &self.alphabet {
                let c = self.lookahead_cost(x, u1, u2);
                if c < best.0 {
                    best = (c, u1);
                }
            }
        }
        best.1
    }

    /// The heuristic evaluated at every state-grid node.
    pub fn mpc_table(&self) -> Result<TabulatedController> {
        let g = &self.state_grid;
        let table: Vec<f64> = (0..g.len()).into_par_iter().map(|i| self.heuristic_control(&g.point(i))).collect();
        let lo = self.alphabet.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.alphabet.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        TabulatedController::new(g.clone(), 1, table, Some(&BoxSet::new(vec![lo], vec![hi])?))
    }

    /// A 3-16-16-1 tanh network fit to the table by full-batch Adam. Inputs
    /// are standardized inside the first layer; the tanh output keeps
    /// `|u| < 1`.
    pub fn imitation_mlp(&self, table: &TabulatedController, seed: u64, epochs: usize) -> Result<Mlp> {
        let g = table.grid();
        if g.dims() != 3 {
            return Err(config("imitation network expects a 3-axis table"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // subsample the table for training
        let count = g.len().min(6000);
        let idx: Vec<usize> = (0..count).map(|_| rng.gen_range(0..g.len())).collect();
        let center: Vec<f64> = (0..3).map(|i| 0.5 * (g.lo()[i] + g.hi()[i])).collect();
        let scale: Vec<f64> = (0..3).map(|i| 0.5 * (g.hi()[i] - g.lo()[i])).collect();
        let inputs: Vec<[f64; 3]> = idx
            .iter()
            .map(|&k| {
                let p = g.point(k);
                [(p[0] - center[0]) / scale[0], (p[1] - center[1]) / scale[1], (p[2] - center[2]) / scale[2]]
            })
            .collect();
        let targets: Vec<f64> = idx.iter().map(|&k| table.entry(k)[0].clamp(-0.95, 0.95)).collect();

        let sizes = [(16usize, 3usize), (16, 16), (1, 16)];
        let mut params: Vec<(Vec<f64>, Vec<f64>)> = sizes
            .iter()
            .map(|&(r, c)| {
                let s = (1.0 / c as f64).sqrt();
                ((0..r * c).map(|_| rng.gen_range(-s..s)).collect(), vec![0.0; r])
            })
            .collect();
        let total: usize = sizes.iter().map(|(r, c)| r * c + r).sum();
        let mut m = vec![0.0; total];
        let mut v = vec![0.0; total];
        let (lr, b1, b2) = (0.01, 0.9, 0.999);
        for epoch in 1..=epochs {
            let grads: Vec<f64> = inputs
                .par_iter()
                .zip(&targets)
                .fold(
                    || vec![0.0; total],
                    |mut acc, (x, y)| {
                        backprop(&sizes, &params, x, *y, &mut acc);
                        acc
                    },
                )
                .reduce(|| vec![0.0; total], |a, b| a.iter().zip(&b).map(|(p, q)| p + q).collect());
            let mut k = 0;
            for (w, bias) in params.iter_mut() {
                for p in w.iter_mut().chain(bias.iter_mut()) {
                    let gk = grads[k] / count as f64;
                    m[k] = b1 * m[k] + (1.0 - b1) * gk;
                    v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                    let mh = m[k] / (1.0 - b1.powi(epoch as i32));
                    let vh = v[k] / (1.0 - b2.powi(epoch as i32));
                    *p -= lr * mh / (vh.sqrt() + 1e-8);
                    k += 1;
                }
            }
        }
        // fold the standardization into the first layer
        let (w0, b0) = &mut params[0];
        for r in 0..16 {
            for c in 0..3 {
                let w = w0[r * 3 + c] / scale[c];
                b0[r] -= w * center[c];
                w0[r * 3 + c] = w;
            }
        }
        let acts = [Activation::Tanh, Activation::Tanh, Activation::Tanh];
        let layers = params
            .into_iter()
            .zip(sizes)
            .zip(acts)
            .map(|(((w, b), (r, c)), act)| Layer::new(r, c, w, b, act))
            .collect::<Result<Vec<_>>>()?;
        Mlp::new(layers)
    }

    /// Start states away from the grid edges, heading roughly toward +x.
    pub fn sample_starts(&self, count: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                vec![rng.gen_range(1.0..16.0), rng.gen_range(-3.5..3.5), FRAC_PI_2 + rng.gen_range(-1.0..1.0)]
            })
            .collect()
    }

    pub fn solve_config(&self) -> SolveConfig {
        SolveConfig::new(0.0, self.horizon)
    }
}

/// Squared-error gradient of the 3-layer tanh network, accumulated into `acc`.
fn backprop(sizes: &[(usize, usize); 3], params: &[(Vec<f64>, Vec<f64>)], x: &[f64; 3], y: f64, acc: &mut [f64]) {
    let mut acts: Vec<Vec<f64>> = vec![x.to_vec()];
    for ((w, b), &(r, c)) in params.iter().zip(sizes) {
        let input = acts.last().unwrap();
        let out: Vec<f64> = (0..r).map(|i| (b[i] + (0..c).map(|j| w[i * c + j] * input[j]).sum::<f64>()).tanh()).collect();
        acts.push(out);
    }
    let mut delta = vec![2.0 * (acts[3][0] - y) * (1.0 - acts[3][0] * acts[3][0])];
    let offsets: Vec<usize> = sizes
        .iter()
        .scan(0, |s, (r, c)| {
            let o = *s;
            *s += r * c + r;
            Some(o)
        })
        .collect();
    for layer in (0..3).rev() {
        let (r, c) = sizes[layer];
        let input = &acts[layer];
        let o = offsets[layer];
        for i in 0..r {
            for j in 0..c {
                acc[o + i * c + j] += delta[i] * input[j];
            }
            acc[o + r * c + i] += delta[i];
        }
        if layer > 0 {
            let w = &params[layer].0;
            delta = (0..c)
                .map(|j| {
                    let s: f64 = (0..r).map(|i| w[i * c + j] * delta[i]).sum();
                    s * (1.0 - input[j] * input[j])
                })
                .collect();
        }
    }
}
