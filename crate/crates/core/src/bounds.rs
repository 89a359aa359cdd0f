//! Per-state control bounds under the perceptual error box.
//!
//! Tabulated controllers are enumerated exactly: nearest-node lookup is
//! monotone along each axis, so the cells whose preimage meets
//! `[x − ē, x + ē]` form a contiguous index range per axis. Networks are
//! bounded soundly by interval propagation.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{config, Result};
use crate::grid::Grid;
use crate::models::{Activation, ClosedLoopModel, Controller, Layer, Mlp, TabulatedController};

/// Interval carrier `center ± radius`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalBox {
    pub center: Vec<f64>,
    pub radius: Vec<f64>,
}

impl IntervalBox {
    pub fn new(center: Vec<f64>, radius: Vec<f64>) -> Result<Self> {
        if center.len() != radius.len() {
            return Err(config("interval center and radius lengths differ"));
        }
        if radius.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(config("interval radius must be finite and non-negative"));
        }
        Ok(Self { center, radius })
    }

    pub fn from_bounds(lo: &[f64], hi: &[f64]) -> Result<Self> {
        let center = lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect();
        let radius = lo.iter().zip(hi).map(|(l, h)| 0.5 * (h - l)).collect();
        Self::new(center, radius)
    }

    pub fn lower(&self) -> Vec<f64> {
        self.center.iter().zip(&self.radius).map(|(c, r)| c - r).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.center.iter().zip(&self.radius).map(|(c, r)| c + r).collect()
    }
}

/// One table cell reachable under the error box, with an estimate that
/// selects it.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub cell: usize,
    pub estimate: Vec<f64>,
}

/// Cells along one axis hit by `[x − ē, x + ē]`, each paired with a
/// coordinate inside the interval whose nearest node is that cell.
fn axis_candidates(grid: &Grid, axis: usize, x: f64, ebar: f64) -> Vec<(usize, f64)> {
    if ebar <= 0.0 {
        return vec![(grid.nearest_index(axis, x), x)];
    }
    let n = grid.shape()[axis] as i64;
    let (lo_end, hi_end) = (x - ebar, x + ebar);
    let mut j_lo = grid.nearest_unwrapped(axis, lo_end);
    let mut j_hi = grid.nearest_unwrapped(axis, hi_end);
    let mut j_x = grid.nearest_unwrapped(axis, x);
    if !grid.periodic()[axis] {
        j_lo = j_lo.clamp(0, n - 1);
        j_hi = j_hi.clamp(0, n - 1);
        j_x = j_x.clamp(0, n - 1);
    }
    let realize = |j: i64| -> (u8, f64) {
        if j == j_x {
            (0, x)
        } else if j > j_lo && j < j_hi {
            (1, grid.lo()[axis] + j as f64 * grid.spacing()[axis])
        } else if j == j_lo {
            (2, lo_end)
        } else {
            (2, hi_end)
        }
    };
    if j_hi - j_lo + 1 >= n {
        // periodic axis fully covered: keep the best realization per cell
        let mut best: Vec<Option<(u8, f64)>> = vec![None; n as usize];
        for j in j_lo..=j_hi {
            let k = j.rem_euclid(n) as usize;
            let r = realize(j);
            if best[k].map_or(true, |b| r.0 < b.0) {
                best[k] = Some(r);
            }
        }
        return best.into_iter().enumerate().map(|(k, r)| (k, r.map_or(x, |r| r.1))).collect();
    }
    (j_lo..=j_hi).map(|j| (grid.resolve_index(axis, j), realize(j).1)).collect()
}

/// Per-axis candidate lists for the table, with zero error on a time axis.
fn candidate_axes(ctrl: &TabulatedController, x: &[f64], ebar: &[f64], t: f64) -> Vec<Vec<(usize, f64)>> {
    let grid = ctrl.grid();
    (0..grid.dims())
        .map(|axis| {
            if axis < x.len() {
                axis_candidates(grid, axis, x[axis], ebar[axis])
            } else {
                vec![(grid.nearest_index(axis, t), t)]
            }
        })
        .collect()
}

fn for_each_product(axes: &[Vec<(usize, f64)>], strides: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let dims = axes.len();
    let mut pos = vec![0usize; dims];
    loop {
        let flat = (0..dims).map(|i| axes[i][pos[i]].0 * strides[i]).sum();
        f(flat, &pos);
        let mut i = dims;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            pos[i] += 1;
            if pos[i] < axes[i].len() {
                break;
            }
            pos[i] = 0;
        }
    }
}

/// Every table cell selectable by some `x̂ = x + e` with `|e| ≤ ē`, with a
/// witness estimate for each.
pub fn enumerate_candidates(ctrl: &TabulatedController, x: &[f64], ebar: &[f64], t: f64) -> Vec<Candidate> {
    let axes = candidate_axes(ctrl, x, ebar, t);
    let mut out = Vec::new();
    for_each_product(&axes, ctrl.grid().strides(), |cell, pos| {
        let estimate = pos.iter().enumerate().take(x.len()).map(|(i, &p)| axes[i][p].1).collect();
        out.push(Candidate { cell, estimate });
    });
    out
}

/// Bitmask over the table's alphabet of the controls reachable under the
/// error box. Requires at most 64 distinct table entries.
pub fn candidate_mask(ctrl: &TabulatedController, x: &[f64], ebar: &[f64], t: f64) -> u64 {
    debug_assert!(ctrl.alphabet().len() <= 64);
    let axes = candidate_axes(ctrl, x, ebar, t);
    let mut mask = 0u64;
    for_each_product(&axes, ctrl.grid().strides(), |cell, _| mask |= 1 << ctrl.code(cell));
    mask
}

/// Exact element-wise hull of `π(x + e)` over `|e| ≤ ē`.
pub fn bounds_by_enumeration(ctrl: &TabulatedController, x: &[f64], ebar: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
    let m = ctrl.control_dims();
    let mut lo = vec![f64::INFINITY; m];
    let mut hi = vec![f64::NEG_INFINITY; m];
    let axes = candidate_axes(ctrl, x, ebar, t);
    for_each_product(&axes, ctrl.grid().strides(), |cell, _| {
        for (j, u) in ctrl.entry(cell).iter().enumerate() {
            lo[j] = lo[j].min(*u);
            hi[j] = hi[j].max(*u);
        }
    });
    (lo, hi)
}

/// Affine map with an activation, plus the magnitudes needed to bound the
/// rounding of its dot products.
struct Affine {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    /// Upper bounds on the entries of `|W|` and `|b|` as products of the
    /// absolute factors.
    weights_abs: Vec<f64>,
    bias_abs: Vec<f64>,
    /// Number of rounded terms behind each output.
    terms: usize,
    activation: Activation,
}

impl Affine {
    fn from_layer(layer: &Layer) -> Self {
        Self {
            rows: layer.rows,
            cols: layer.cols,
            weights: layer.weights.clone(),
            bias: layer.bias.clone(),
            weights_abs: layer.weights.iter().map(|w| w.abs()).collect(),
            bias_abs: layer.bias.iter().map(|b| b.abs()).collect(),
            terms: layer.cols,
            activation: layer.activation,
        }
    }

    /// `next ∘ self`, valid when `self` has no activation.
    fn then(self, next: &Layer) -> Self {
        let (rows, inner, cols) = (next.rows, self.rows, self.cols);
        let mut weights = vec![0.0; rows * cols];
        let mut weights_abs = vec![0.0; rows * cols];
        let mut bias = next.bias.clone();
        let mut bias_abs: Vec<f64> = next.bias.iter().map(|b| b.abs()).collect();
        for r in 0..rows {
            for k in 0..inner {
                let w = next.weights[r * inner + k];
                bias[r] += w * self.bias[k];
                bias_abs[r] += w.abs() * self.bias_abs[k];
                for c in 0..cols {
                    weights[r * cols + c] += w * self.weights[k * cols + c];
                    weights_abs[r * cols + c] += w.abs() * self.weights_abs[k * cols + c];
                }
            }
        }
        Self { rows, cols, weights, bias, weights_abs, bias_abs, terms: self.terms + next.cols, activation: next.activation }
    }

    fn propagate(&self, input: &IntervalBox) -> IntervalBox {
        // outward slack for rounding in the dot products
        let gamma = (self.terms + 2) as f64 * f64::EPSILON;
        let mut center = Vec::with_capacity(self.rows);
        let mut radius = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            let row_abs = &self.weights_abs[r * self.cols..(r + 1) * self.cols];
            let mut c = self.bias[r];
            let mut rad = 0.0;
            let mut mag = self.bias_abs[r];
            for ((w, wa), (ci, ri)) in row.iter().zip(row_abs).zip(input.center.iter().zip(&input.radius)) {
                c += w * ci;
                rad += w.abs() * ri;
                mag += wa * (ci.abs() + ri);
            }
            let rad = rad * (1.0 + gamma) + gamma * mag;
            let lo = self.activation.apply(c - rad);
            let hi = self.activation.apply(c + rad);
            center.push(0.5 * (lo + hi));
            radius.push(0.5 * (hi - lo));
        }
        IntervalBox { center, radius }
    }
}

/// Interval bound propagation: a sound enclosure of the network's outputs
/// over the input box. Runs of activation-free layers are folded into one
/// affine map first, so a purely affine network gets its exact range.
pub fn bounds_by_ibp(mlp: &Mlp, input: &IntervalBox) -> Result<(Vec<f64>, Vec<f64>)> {
    if input.center.len() != mlp.input_dims() {
        return Err(config(format!(
            "interval has {} axes, network takes {}",
            input.center.len(),
            mlp.input_dims()
        )));
    }
    let mut b = input.clone();
    let mut pending: Option<Affine> = None;
    for layer in mlp.layers() {
        let map = match pending.take() {
            Some(prev) => prev.then(layer),
            None => Affine::from_layer(layer),
        };
        if map.activation == Activation::Identity {
            pending = Some(map);
        } else {
            b = map.propagate(&b);
        }
    }
    if let Some(map) = pending {
        b = map.propagate(&b);
    }
    Ok((b.lower(), b.upper()))
}

/// Optional elapsed-dark-time axis appended to the state grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DarkTimeAxis {
    pub max: f64,
    pub samples: usize,
}

impl DarkTimeAxis {
    pub fn extend(&self, state_grid: &Grid) -> Result<Grid> {
        if !(self.max > 0.0) || self.samples < 2 {
            return Err(config("dark-time axis needs max > 0 and at least 2 samples"));
        }
        state_grid.with_axis(0.0, self.max, self.samples)
    }
}

/// Hyperrectangle `[lower(x), upper(x)]` of controller outputs per grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlBoundsField {
    grid: Arc<Grid>,
    control_dims: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ControlBoundsField {
    pub fn new(grid: Arc<Grid>, control_dims: usize, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let expected = grid.len() * control_dims;
        if control_dims == 0 || lower.len() != expected || upper.len() != expected {
            return Err(config(format!(
                "bounds field needs {expected} values per block, got {} and {}",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l.is_finite() && u.is_finite()) {
                return Err(config(format!("non-finite bound at cell {}", i / control_dims)));
            }
            if l > u {
                return Err(config(format!("lower bound exceeds upper bound at cell {}", i / control_dims)));
            }
        }
        Ok(Self { grid, control_dims, lower, upper })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn control_dims(&self) -> usize {
        self.control_dims
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn cell(&self, flat: usize) -> (&[f64], &[f64]) {
        let m = self.control_dims;
        (&self.lower[flat * m..(flat + 1) * m], &self.upper[flat * m..(flat + 1) * m])
    }

    /// Largest `|u_j|` over all cells.
    pub fn max_magnitude(&self, control: usize) -> f64 {
        let m = self.control_dims;
        (0..self.grid.len())
            .map(|c| self.lower[c * m + control].abs().max(self.upper[c * m + control].abs()))
            .fold(0.0, f64::max)
    }
}

/// Control bounds at one state and error half-width vector.
pub fn control_bounds(model: &ClosedLoopModel, x: &[f64], ebar: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    match &model.controller {
        Controller::Tabulated(t) => Ok(bounds_by_enumeration(t, x, ebar, 0.0)),
        Controller::Mlp(m) => bounds_by_ibp(m, &IntervalBox::new(x.to_vec(), ebar.to_vec())?),
        Controller::TanProportional(_) => Err(config(
            "control-bound fields need a tabulated or network controller; use the exact tan Hamiltonian instead",
        )),
    }
}

/// Bounds at every node of `state_grid` (times the dark-time axis, when given,
/// with `ē = ē(t′)` at each sample). Cell-centered: the error box sits on the
/// node.
pub fn build_bounds_field(
    model: &ClosedLoopModel,
    state_grid: &Grid,
    dark_time: Option<DarkTimeAxis>,
) -> Result<ControlBoundsField> {
    let n = model.state_dims();
    if state_grid.dims() != n {
        return Err(config(format!("state grid has {} axes, model has {n}", state_grid.dims())));
    }
    if let Controller::TanProportional(_) = model.controller {
        return Err(config(
            "control-bound fields need a tabulated or network controller; use the exact tan Hamiltonian instead",
        ));
    }
    let grid = match dark_time {
        Some(axis) => axis.extend(state_grid)?,
        None => state_grid.clone(),
    };
    let m = model.controller.control_dims();
    let cells: Vec<(Vec<f64>, Vec<f64>)> = (0..grid.len())
        .into_par_iter()
        .map(|flat| {
            let z = grid.point(flat);
            let elapsed = if z.len() > n { z[n] } else { 0.0 };
            let ebar = model.error.half_widths(elapsed);
            control_bounds(model, &z[..n], &ebar)
        })
        .collect::<Result<_>>()?;
    let mut lower = Vec::with_capacity(grid.len() * m);
    let mut upper = Vec::with_capacity(grid.len() * m);
    for (l, u) in cells {
        lower.extend(l);
        upper.extend(u);
    }
    ControlBoundsField::new(Arc::new(grid), m, lower, upper)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Activation, Dynamics, ErrorBound};

    fn table_1d() -> TabulatedController {
        let g = Arc::new(Grid::bounded(vec![0.0], vec![2.0], vec![3]).unwrap());
        TabulatedController::new(g, 1, vec![0.0, 1.0, 2.0], None).unwrap()
    }

    #[test]
    fn enumeration_examples() {
        let t = table_1d();
        assert_eq!(bounds_by_enumeration(&t, &[1.0], &[0.0], 0.0), (vec![1.0], vec![1.0]));
        assert_eq!(bounds_by_enumeration(&t, &[1.0], &[0.6], 0.0), (vec![0.0], vec![2.0]));
        assert_eq!(bounds_by_enumeration(&t, &[1.0], &[0.4], 0.0), (vec![1.0], vec![1.0]));
    }

    #[test]
    fn witnesses_select_their_cells() {
        let g = Arc::new(Grid::new(vec![0.0, -1.0], vec![3.0, 1.0], vec![7, 8], vec![false, true]).unwrap());
        let table: Vec<f64> = (0..g.len()).map(|i| i as f64).collect();
        let t = TabulatedController::new(g, 1, table, None).unwrap();
        for (x, e) in [([1.3, 0.9], [0.7, 0.3]), ([0.1, -0.95], [0.4, 1.5]), ([2.9, 0.0], [0.0, 0.26])] {
            let cands = enumerate_candidates(&t, &x, &e, 0.0);
            assert!(!cands.is_empty());
            for c in cands {
                assert_eq!(t.cell(&c.estimate), c.cell);
                for i in 0..2 {
                    assert!((c.estimate[i] - x[i]).abs() <= e[i] * (1.0 + 1e-12));
                }
            }
        }
    }

    #[test]
    fn periodic_full_coverage_lists_each_cell_once() {
        let g = Arc::new(Grid::new(vec![0.0], vec![1.0], vec![5], vec![true]).unwrap());
        let t = TabulatedController::new(g, 1, vec![0.0, 1.0, 2.0, 3.0, 4.0], None).unwrap();
        let cells: Vec<usize> = enumerate_candidates(&t, &[0.3], &[0.45], 0.0).iter().map(|c| c.cell).collect();
        assert_eq!(cells, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn ibp_examples() {
        let id = Mlp::new(vec![Layer::new(1, 1, vec![1.0], vec![0.0], Activation::Identity).unwrap()]).unwrap();
        let (l, u) = bounds_by_ibp(&id, &IntervalBox::new(vec![0.0], vec![1.0]).unwrap()).unwrap();
        assert!((l[0] + 1.0).abs() < 1e-14 && (u[0] - 1.0).abs() < 1e-14);

        let affine = Mlp::new(vec![Layer::new(1, 2, vec![1.0, -1.0], vec![0.5], Activation::Identity).unwrap()]).unwrap();
        let b = IntervalBox::from_bounds(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let (l, u) = bounds_by_ibp(&affine, &b).unwrap();
        assert!((l[0] + 0.5).abs() < 1e-14 && (u[0] - 1.5).abs() < 1e-14);

        let relu = Mlp::new(vec![Layer::new(1, 2, vec![1.0, -1.0], vec![0.5], Activation::Relu).unwrap()]).unwrap();
        let (l, u) = bounds_by_ibp(&relu, &b).unwrap();
        assert_eq!(l[0], 0.0);
        assert!((u[0] - 1.5).abs() < 1e-14);
    }

    #[test]
    fn tan_controller_has_no_bounds_field() {
        let m = ClosedLoopModel::new(
            Dynamics::dubins(5.0).unwrap(),
            Controller::TanProportional(crate::models::TanProportional::new(-0.01, -0.4).unwrap()),
            ErrorBound::zero(3),
        )
        .unwrap();
        let g = Grid::bounded(vec![-1.0; 3], vec![1.0; 3], vec![3; 3]).unwrap();
        let err = build_bounds_field(&m, &g, None).unwrap_err();
        assert!(err.to_string().contains("exact tan Hamiltonian"));
    }

    #[test]
    fn rejects_inverted_bounds() {
        let g = Arc::new(Grid::bounded(vec![0.0], vec![1.0], vec![2]).unwrap());
        let err = ControlBoundsField::new(g, 1, vec![0.0, 1.0], vec![0.5, 0.5]).unwrap_err();
        assert!(err.to_string().contains("cell 1"));
    }
}
