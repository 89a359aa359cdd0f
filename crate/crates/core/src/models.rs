//! System dynamics, controllers, perceptual error bounds, and the closed-loop
//! composition `h(x, d, e) = f(x, π(x + e), d)`.
//!
//! All built-in dynamics are affine in control and disturbance:
//! `f(x, u, d) = f₀(x) + G u + d`, with a state-independent control matrix
//! `G` and the disturbance entering additively on every state axis. The
//! Hamiltonian code relies on this structure.

use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use crate::error::{argument, config, Result};
use crate::grid::{Grid, MAX_DIMS};

/// Half-open limit applied to the argument of `tan` in the proportional
/// controller.
pub const TAN_ARGUMENT_LIMIT: f64 = FRAC_PI_2 - 1e-6;

/// Axis-aligned box `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxSet {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(config("box bounds have different lengths"));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l.is_finite() && h.is_finite() && l <= h)) {
            return Err(config("box bounds must be finite with lo <= hi"));
        }
        Ok(Self { lo, hi })
    }

    pub fn dims(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| *v >= *l && *v <= *h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DynamicsKind {
    /// `ẋ = (v sin θ, v cos θ, u)` over state `(p_x, p_y, θ)`.
    Dubins3D { speed: f64 },
    /// `ẋ = u` with one control per state axis.
    Integrator { dims: usize },
    /// `ẋ = 0`.
    Static { dims: usize, control_dims: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dynamics {
    kind: DynamicsKind,
    disturbance: Option<BoxSet>,
}

impl Dynamics {
    pub fn dubins(speed: f64) -> Result<Self> {
        if !speed.is_finite() {
            return Err(config("Dubins speed must be finite"));
        }
        Ok(Self { kind: DynamicsKind::Dubins3D { speed }, disturbance: None })
    }

    pub fn integrator(dims: usize) -> Result<Self> {
        if dims == 0 || dims > MAX_DIMS {
            return Err(config(format!("integrator needs 1..={MAX_DIMS} axes, got {dims}")));
        }
        Ok(Self { kind: DynamicsKind::Integrator { dims }, disturbance: None })
    }

    pub fn stationary(dims: usize, control_dims: usize) -> Result<Self> {
        if dims == 0 || dims > MAX_DIMS || control_dims > MAX_DIMS {
            return Err(config(format!("static dynamics need 1..={MAX_DIMS} axes and at most {MAX_DIMS} controls")));
        }
        Ok(Self { kind: DynamicsKind::Static { dims, control_dims }, disturbance: None })
    }

    /// Adds a disturbance box; `d` enters additively on each state axis.
    pub fn with_disturbance(mut self, set: BoxSet) -> Result<Self> {
        if set.dims() != self.state_dims() {
            return Err(config(format!(
                "disturbance box has {} axes, dynamics have {}",
                set.dims(),
                self.state_dims()
            )));
        }
        self.disturbance = Some(set);
        Ok(self)
    }

    pub fn kind(&self) -> &DynamicsKind {
        &self.kind
    }

    pub fn disturbance(&self) -> Option<&BoxSet> {
        self.disturbance.as_ref()
    }

    pub fn state_dims(&self) -> usize {
        match self.kind {
            DynamicsKind::Dubins3D { .. } => 3,
            DynamicsKind::Integrator { dims } | DynamicsKind::Static { dims, .. } => dims,
        }
    }

    pub fn control_dims(&self) -> usize {
        match self.kind {
            DynamicsKind::Dubins3D { .. } => 1,
            DynamicsKind::Integrator { dims } => dims,
            DynamicsKind::Static { control_dims, .. } => control_dims,
        }
    }

    /// Number of disturbance inputs (zero when 𝒟 is empty).
    pub fn disturbance_dims(&self) -> usize {
        self.disturbance.as_ref().map_or(0, BoxSet::dims)
    }

    pub fn is_control_affine(&self) -> bool {
        match self.kind {
            DynamicsKind::Dubins3D { .. } | DynamicsKind::Integrator { .. } | DynamicsKind::Static { .. } => true,
        }
    }

    /// `f(x, u, d)`; `d` must be empty when there is no disturbance.
    pub fn eval(&self, x: &[f64], u: &[f64], d: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.state_dims() || u.len() != self.control_dims() || d.len() != self.disturbance_dims() {
            return Err(config(format!(
                "dynamics expect (x, u, d) of sizes ({}, {}, {}), got ({}, {}, {})",
                self.state_dims(),
                self.control_dims(),
                self.disturbance_dims(),
                x.len(),
                u.len(),
                d.len()
            )));
        }
        let mut out = vec![0.0; x.len()];
        self.eval_into(x, u, d, &mut out);
        Ok(out)
    }

    /// Unchecked `f(x, u, d)` written into `out`.
    pub fn eval_into(&self, x: &[f64], u: &[f64], d: &[f64], out: &mut [f64]) {
        self.drift_into(x, out);
        match self.kind {
            DynamicsKind::Dubins3D { .. } => out[2] += u[0],
            DynamicsKind::Integrator { dims } => {
                for i in 0..dims {
                    out[i] += u[i];
                }
            }
            DynamicsKind::Static { .. } => {}
        }
        for (o, di) in out.iter_mut().zip(d) {
            *o += di;
        }
    }

    /// Control-free part `f₀(x)`.
    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        match self.kind {
            DynamicsKind::Dubins3D { speed } => {
                let (s, c) = x[2].sin_cos();
                out[0] = speed * s;
                out[1] = speed * c;
                out[2] = 0.0;
            }
            DynamicsKind::Integrator { .. } | DynamicsKind::Static { .. } => out.fill(0.0),
        }
    }

    /// `Gᵀ p`: the coefficient of each control in `p · f`.
    pub fn control_gain_into(&self, p: &[f64], out: &mut [f64]) {
        match self.kind {
            DynamicsKind::Dubins3D { .. } => out[0] = p[2],
            DynamicsKind::Integrator { dims } => out[..dims].copy_from_slice(&p[..dims]),
            DynamicsKind::Static { .. } => out.fill(0.0),
        }
    }

    /// `|G_ij|`.
    pub fn control_coupling(&self, state_axis: usize, control: usize) -> f64 {
        match self.kind {
            DynamicsKind::Dubins3D { .. } => f64::from(u8::from(state_axis == 2 && control == 0)),
            DynamicsKind::Integrator { .. } => f64::from(u8::from(state_axis == control)),
            DynamicsKind::Static { .. } => 0.0,
        }
    }

    /// Upper bound on `|f₀_i(x)|` over the states of `grid`.
    pub fn drift_bound(&self, grid: &Grid, state_axis: usize) -> f64 {
        match self.kind {
            DynamicsKind::Dubins3D { speed } if state_axis < 2 => {
                if grid.periodic()[2] {
                    return speed.abs();
                }
                let (a, b) = (grid.lo()[2], grid.hi()[2]);
                // peaks of |sin| sit at π/2 + kπ, of |cos| at kπ
                let shift = if state_axis == 0 { FRAC_PI_2 } else { 0.0 };
                let k = ((a - shift) / std::f64::consts::PI).ceil();
                if shift + k * std::f64::consts::PI <= b {
                    return speed.abs();
                }
                let f = |t: f64| if state_axis == 0 { t.sin().abs() } else { t.cos().abs() };
                speed.abs() * f(a).max(f(b))
            }
            _ => 0.0,
        }
    }

    /// `min_{d ∈ 𝒟} p · d` and its minimizing corner (empty when 𝒟 = ∅).
    pub fn worst_disturbance(&self, p: &[f64]) -> (f64, Vec<f64>) {
        match &self.disturbance {
            None => (0.0, Vec::new()),
            Some(b) => {
                let mut value = 0.0;
                let d = (0..b.dims())
                    .map(|i| {
                        let pick = if p[i] > 0.0 { b.lo[i] } else { b.hi[i] };
                        value += p[i] * pick;
                        pick
                    })
                    .collect();
                (value, d)
            }
        }
    }
}

/// `u = tan(a·p̂_x + b·θ̂)` reading the estimate's axes 0 and 2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TanProportional {
    pub a: f64,
    pub b: f64,
}

impl TanProportional {
    pub const POSITION_AXIS: usize = 0;
    pub const HEADING_AXIS: usize = 2;

    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite()) || a > 0.0 || b > 0.0 {
            return Err(config(format!("proportional gains must satisfy a <= 0, b <= 0 (got a={a}, b={b})")));
        }
        Ok(Self { a, b })
    }

    pub fn argument(&self, xhat: &[f64]) -> f64 {
        self.a * xhat[Self::POSITION_AXIS] + self.b * xhat[Self::HEADING_AXIS]
    }

    /// Control and whether the tan argument was saturated.
    pub fn eval(&self, xhat: &[f64]) -> (f64, bool) {
        saturated_tan(self.argument(xhat))
    }
}

pub fn saturated_tan(arg: f64) -> (f64, bool) {
    if arg.abs() > TAN_ARGUMENT_LIMIT {
        (TAN_ARGUMENT_LIMIT.copysign(arg).tan(), true)
    } else {
        (arg.tan(), false)
    }
}

/// Controller stored on a grid, evaluated by nearest-node lookup.
///
/// The table grid covers the state, optionally followed by one time axis.
/// Distinct table entries are interned into an alphabet so that candidate
/// sets can be stored as bitmasks.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedController {
    grid: Arc<Grid>,
    control_dims: usize,
    table: Vec<f64>,
    alphabet: Vec<Vec<f64>>,
    codes: Vec<u32>,
}

impl TabulatedController {
    pub fn new(grid: Arc<Grid>, control_dims: usize, table: Vec<f64>, control_box: Option<&BoxSet>) -> Result<Self> {
        if control_dims == 0 {
            return Err(config("tabulated controller needs at least one control"));
        }
        if table.len() != grid.len() * control_dims {
            return Err(config(format!(
                "table has {} entries, expected {} cells x {} controls",
                table.len(),
                grid.len(),
                control_dims
            )));
        }
        if let Some(i) = table.iter().position(|v| !v.is_finite()) {
            return Err(config(format!("table entry {i} is not finite")));
        }
        if let Some(b) = control_box {
            if b.dims() != control_dims {
                return Err(config("control box dimension differs from the table"));
            }
            if let Some(cell) = table.chunks(control_dims).position(|u| !b.contains(u)) {
                return Err(config(format!("table entry at cell {cell} lies outside the control box")));
            }
        }
        let mut alphabet: Vec<Vec<f64>> = Vec::new();
        let mut codes = Vec::with_capacity(grid.len());
        for u in table.chunks(control_dims) {
            let code = match alphabet.iter().position(|a| a.iter().zip(u).all(|(p, q)| p.to_bits() == q.to_bits())) {
                Some(c) => c,
                None => {
                    alphabet.push(u.to_vec());
                    alphabet.len() - 1
                }
            };
            codes.push(code as u32);
        }
        Ok(Self { grid, control_dims, table, alphabet, codes })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn control_dims(&self) -> usize {
        self.control_dims
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    /// Distinct control vectors appearing in the table.
    pub fn alphabet(&self) -> &[Vec<f64>] {
        &self.alphabet
    }

    pub fn code(&self, cell: usize) -> u32 {
        self.codes[cell]
    }

    pub fn entry(&self, cell: usize) -> &[f64] {
        &self.table[cell * self.control_dims..(cell + 1) * self.control_dims]
    }

    /// Cell selected by nearest-node lookup of `query` (state, then time if
    /// the table has a time axis).
    pub fn cell(&self, query: &[f64]) -> usize {
        let mut flat = 0;
        for (axis, &x) in query.iter().enumerate().take(self.grid.dims()) {
            flat += self.grid.nearest_index(axis, x) * self.grid.strides()[axis];
        }
        flat
    }

    pub fn eval(&self, query: &[f64]) -> &[f64] {
        self.entry(self.cell(query))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    /// Only monotone activations are representable.
    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }

    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }
}

/// Affine layer `y = act(W x + b)` with `W` stored row-major (`rows` outputs).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(rows: usize, cols: usize, weights: Vec<f64>, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if rows == 0 || cols == 0 || weights.len() != rows * cols || bias.len() != rows {
            return Err(config(format!(
                "layer {rows}x{cols} has {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(config("layer parameters must be finite"));
        }
        Ok(Self { rows, cols, weights, bias, activation })
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| {
                let row = &self.weights[r * self.cols..(r + 1) * self.cols];
                let z: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias[r];
                self.activation.apply(z)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

impl Mlp {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(config("network needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].rows != pair[1].cols {
                return Err(config(format!(
                    "layer {i} outputs {} values but layer {} takes {}",
                    pair[0].rows,
                    i + 1,
                    pair[1].cols
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dims(&self) -> usize {
        self.layers[0].cols
    }

    pub fn output_dims(&self) -> usize {
        self.layers[self.layers.len() - 1].rows
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut v = x.to_vec();
        for layer in &self.layers {
            v = layer.forward(&v);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Controller {
    TanProportional(TanProportional),
    Tabulated(TabulatedController),
    Mlp(Mlp),
}

/// Output of a controller evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub u: Vec<f64>,
    /// The tan argument was clamped into its domain.
    pub saturated: bool,
}

impl Controller {
    pub fn control_dims(&self) -> usize {
        match self {
            Controller::TanProportional(_) => 1,
            Controller::Tabulated(t) => t.control_dims(),
            Controller::Mlp(m) => m.output_dims(),
        }
    }

    /// `π(x̂)`; `t` is only read by tables with a time axis.
    pub fn eval(&self, xhat: &[f64], t: f64) -> ControlOutput {
        match self {
            Controller::TanProportional(c) => {
                let (u, saturated) = c.eval(xhat);
                ControlOutput { u: vec![u], saturated }
            }
            Controller::Tabulated(tab) => {
                let u = if tab.grid().dims() > xhat.len() {
                    let mut q = xhat.to_vec();
                    q.push(t);
                    tab.eval(&q).to_vec()
                } else {
                    tab.eval(xhat).to_vec()
                };
                ControlOutput { u, saturated: false }
            }
            Controller::Mlp(m) => ControlOutput { u: m.eval(xhat), saturated: false },
        }
    }
}

/// Element-wise bound `|e_i| ≤ ē_i(t′)` on the estimation error, where `t′`
/// is the time elapsed since the last uncertainty reset.
#[derive(Debug, Clone, PartialEq)]
pub enum ErrorBound {
    Static { half_widths: Vec<f64> },
    LinearGrowth { rates: Vec<f64> },
}

impl ErrorBound {
    pub fn fixed(half_widths: Vec<f64>) -> Result<Self> {
        Self::check(&half_widths)?;
        Ok(ErrorBound::Static { half_widths })
    }

    pub fn linear_growth(rates: Vec<f64>) -> Result<Self> {
        Self::check(&rates)?;
        Ok(ErrorBound::LinearGrowth { rates })
    }

    pub fn zero(dims: usize) -> Self {
        ErrorBound::Static { half_widths: vec![0.0; dims] }
    }

    fn check(v: &[f64]) -> Result<()> {
        if v.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(config("error half-widths and growth rates must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn dims(&self) -> usize {
        match self {
            ErrorBound::Static { half_widths } => half_widths.len(),
            ErrorBound::LinearGrowth { rates } => rates.len(),
        }
    }

    pub fn half_widths(&self, elapsed: f64) -> Vec<f64> {
        match self {
            ErrorBound::Static { half_widths } => half_widths.clone(),
            ErrorBound::LinearGrowth { rates } => rates.iter().map(|r| r * elapsed.max(0.0)).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            ErrorBound::Static { half_widths } => half_widths.iter().all(|w| *w == 0.0),
            ErrorBound::LinearGrowth { rates } => rates.iter().all(|w| *w == 0.0),
        }
    }

    /// Same bound with every half-width (or rate) multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        match self {
            ErrorBound::Static { half_widths } => {
                ErrorBound::Static { half_widths: half_widths.iter().map(|w| w * factor).collect() }
            }
            ErrorBound::LinearGrowth { rates } => {
                ErrorBound::LinearGrowth { rates: rates.iter().map(|w| w * factor).collect() }
            }
        }
    }
}

/// Dynamics, controller and additive estimator composed into `h(x, d, e)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopModel {
    pub dynamics: Dynamics,
    pub controller: Controller,
    pub error: ErrorBound,
}

impl ClosedLoopModel {
    pub fn new(dynamics: Dynamics, controller: Controller, error: ErrorBound) -> Result<Self> {
        let n = dynamics.state_dims();
        if error.dims() != n {
            return Err(config(format!("error bound has {} axes, state has {n}", error.dims())));
        }
        if controller.control_dims() != dynamics.control_dims() {
            return Err(config(format!(
                "controller emits {} controls, dynamics take {}",
                controller.control_dims(),
                dynamics.control_dims()
            )));
        }
        match &controller {
            Controller::TanProportional(_) if n < 3 => {
                return Err(config("proportional controller reads state axes 0 and 2"));
            }
            Controller::Tabulated(t) if t.grid().dims() != n && t.grid().dims() != n + 1 => {
                return Err(config(format!(
                    "table grid has {} axes, expected {n} (state) or {} (state and time)",
                    t.grid().dims(),
                    n + 1
                )));
            }
            Controller::Mlp(m) if m.input_dims() != n => {
                return Err(config(format!("network takes {} inputs, state has {n}", m.input_dims())));
            }
            _ => {}
        }
        Ok(Self { dynamics, controller, error })
    }

    pub fn state_dims(&self) -> usize {
        self.dynamics.state_dims()
    }

    /// `π(x + e)`.
    pub fn control(&self, x: &[f64], e: &[f64], t: f64) -> ControlOutput {
        let xhat: Vec<f64> = x.iter().zip(e).map(|(a, b)| a + b).collect();
        self.controller.eval(&xhat, t)
    }

    /// `h(x, d, e)` after checking `|e| ≤ ē(elapsed)` and `d ∈ 𝒟`.
    pub fn eval_closed_loop(&self, x: &[f64], d: &[f64], e: &[f64], elapsed: f64) -> Result<Vec<f64>> {
        let n = self.state_dims();
        if x.len() != n || e.len() != n {
            return Err(config(format!("closed loop expects state and error of size {n}")));
        }
        let bound = self.error.half_widths(elapsed);
        for i in 0..n {
            if e[i].abs() > bound[i] * (1.0 + 1e-12) + 1e-15 {
                return Err(argument(format!("error component {i} = {} exceeds bound {}", e[i], bound[i])));
            }
        }
        if let Some(b) = self.dynamics.disturbance() {
            if !b.contains(d) {
                return Err(argument("disturbance outside its box"));
            }
        }
        let u = self.control(x, e, 0.0).u;
        self.dynamics.eval(x, &u, d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn dubins_examples() {
        let d = Dynamics::dubins(5.0).unwrap();
        assert_eq!(d.eval(&[0.0, 100.0, 0.0], &[0.0], &[]).unwrap(), vec![0.0, 5.0, 0.0]);
        let d1 = Dynamics::dubins(1.0).unwrap();
        let v = d1.eval(&[0.0, 0.0, PI / 2.0], &[0.5], &[]).unwrap();
        assert!(close(&v, &[1.0, 0.0, 0.5], 1e-15));
        let v = d.eval(&[0.0, 0.0, PI / 6.0], &[-0.2], &[]).unwrap();
        assert!(close(&v, &[2.5, 4.330127018922194, -0.2], 1e-12));
        assert!(d.eval(&[0.0, 0.0], &[0.0], &[]).is_err());
    }

    #[test]
    fn tan_controller_examples() {
        let c = TanProportional::new(-0.013, -0.44).unwrap();
        assert_eq!(c.eval(&[0.0, 123.0, 0.0]), (0.0, false));
        let (u, sat) = c.eval(&[10.0, 0.0, 0.0]);
        assert!(!sat);
        assert!((u - (-0.13f64).tan()).abs() < 1e-15);
        assert!((u + 0.130_739).abs() < 1e-5);
        assert!(TanProportional::new(0.1, -0.4).is_err());
    }

    #[test]
    fn tan_saturates_and_flags() {
        let c = TanProportional::new(-1.0, 0.0).unwrap();
        let (u, sat) = c.eval(&[-10.0, 0.0, 0.0]);
        assert!(sat);
        assert!(u.is_finite() && u > 1e5);
    }

    #[test]
    fn tabulated_nearest_lookup() {
        let g = Arc::new(Grid::bounded(vec![0.0], vec![2.0], vec![3]).unwrap());
        let t = TabulatedController::new(g, 1, vec![0.0, 1.0, 2.0], None).unwrap();
        assert_eq!(t.eval(&[1.4]), &[1.0]);
        assert_eq!(t.eval(&[0.5]), &[0.0]);
        assert_eq!(t.alphabet().len(), 3);
        let boxed = BoxSet::new(vec![0.0], vec![1.5]).unwrap();
        let g = Arc::new(Grid::bounded(vec![0.0], vec![2.0], vec![3]).unwrap());
        assert!(TabulatedController::new(g, 1, vec![0.0, 1.0, 2.0], Some(&boxed)).is_err());
    }

    #[test]
    fn closed_loop_example() {
        let m = ClosedLoopModel::new(
            Dynamics::dubins(5.0).unwrap(),
            Controller::TanProportional(TanProportional::new(-0.013, -0.44).unwrap()),
            ErrorBound::fixed(vec![1.0, 0.0, 0.1]).unwrap(),
        )
        .unwrap();
        let h = m.eval_closed_loop(&[0.0, 100.0, 0.0], &[], &[1.0, 0.0, 0.1], 0.0).unwrap();
        assert!(close(&h, &[0.0, 5.0, (-0.013f64 - 0.044).tan()], 1e-15));
        assert!((h[2] + 0.057_06).abs() < 1e-5);
        assert!(m.eval_closed_loop(&[0.0, 100.0, 0.0], &[], &[1.5, 0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn closed_loop_rejects_mismatched_parts() {
        let g = Arc::new(Grid::bounded(vec![0.0, 0.0], vec![1.0, 1.0], vec![3, 3]).unwrap());
        let table = TabulatedController::new(g, 1, vec![0.0; 9], None).unwrap();
        let r = ClosedLoopModel::new(Dynamics::dubins(1.0).unwrap(), Controller::Tabulated(table), ErrorBound::zero(3));
        assert!(r.is_err());
        let r = ClosedLoopModel::new(
            Dynamics::dubins(1.0).unwrap(),
            Controller::TanProportional(TanProportional::new(0.0, 0.0).unwrap()),
            ErrorBound::zero(2),
        );
        assert!(r.is_err());
    }

    #[test]
    fn growth_bound_starts_at_zero() {
        let e = ErrorBound::linear_growth(vec![0.1, 0.1, 0.02]).unwrap();
        assert_eq!(e.half_widths(0.0), vec![0.0; 3]);
        let w = e.half_widths(1.5);
        assert!(close(&w, &[0.15, 0.15, 0.03], 1e-15));
    }

    #[test]
    fn disturbance_corner() {
        let d = Dynamics::integrator(2)
            .unwrap()
            .with_disturbance(BoxSet::new(vec![-1.0, -2.0], vec![1.0, 0.5]).unwrap())
            .unwrap();
        let (v, corner) = d.worst_disturbance(&[1.0, -1.0]);
        assert_eq!(corner, vec![-1.0, 0.5]);
        assert_eq!(v, -1.5);
    }

    #[test]
    fn mlp_rejects_broken_chain() {
        let l1 = Layer::new(2, 3, vec![0.0; 6], vec![0.0; 2], Activation::Relu).unwrap();
        let l2 = Layer::new(1, 3, vec![0.0; 3], vec![0.0], Activation::Identity).unwrap();
        assert!(Mlp::new(vec![l1, l2]).is_err());
        assert_eq!(Activation::from_tag(7), None);
    }
}
