//! Rectilinear grids and scalar fields sampled on them.
//!
//! Storage is row-major (last axis fastest). Periodic axes exclude the upper
//! endpoint, so a periodic axis with `n` points has spacing `(hi - lo) / n`.
//! Non-periodic boundaries use linear extrapolation of the outermost interior
//! difference when one-sided differences are requested.

use std::sync::Arc;

use crate::error::{argument, config, Result};

/// Largest number of axes supported by the stencil code.
pub const MAX_DIMS: usize = 8;

/// Overshoot (in units of the axis spacing) that is clamped without raising
/// the clamped-query flag.
const CLAMP_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    lo: Vec<f64>,
    hi: Vec<f64>,
    shape: Vec<usize>,
    periodic: Vec<bool>,
    spacing: Vec<f64>,
    strides: Vec<usize>,
    len: usize,
}

impl Grid {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, shape: Vec<usize>, periodic: Vec<bool>) -> Result<Self> {
        let dims = lo.len();
        if dims == 0 || dims > MAX_DIMS {
            return Err(config(format!("grid must have 1..={MAX_DIMS} axes, got {dims}")));
        }
        if hi.len() != dims || shape.len() != dims || periodic.len() != dims {
            return Err(config("grid lo/hi/shape/periodic lengths differ"));
        }
        for i in 0..dims {
            if !(lo[i].is_finite() && hi[i].is_finite() && lo[i] < hi[i]) {
                return Err(config(format!("grid axis {i}: need finite lo < hi, got [{}, {}]", lo[i], hi[i])));
            }
            if shape[i] < 2 {
                return Err(config(format!("grid axis {i}: need at least 2 points, got {}", shape[i])));
            }
        }
        let spacing = (0..dims)
            .map(|i| {
                let cells = if periodic[i] { shape[i] } else { shape[i] - 1 };
                (hi[i] - lo[i]) / cells as f64
            })
            .collect();
        let mut strides = vec![1; dims];
        for i in (0..dims - 1).rev() {
            strides[i] = strides[i + 1] * shape[i + 1];
        }
        let len = shape.iter().product();
        Ok(Self { lo, hi, shape, periodic, spacing, strides, len })
    }

    /// Non-periodic grid.
    pub fn bounded(lo: Vec<f64>, hi: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let n = lo.len();
        Self::new(lo, hi, shape, vec![false; n])
    }

    pub fn dims(&self) -> usize {
        self.lo.len()
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn periodic(&self) -> &[bool] {
        &self.periodic
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn period(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }

    /// Coordinate of the `k`-th point along `axis`.
    #[inline]
    pub fn coordinate(&self, axis: usize, k: usize) -> f64 {
        self.lo[axis] + k as f64 * self.spacing[axis]
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(k, s)| k * s).sum()
    }

    pub fn multi_index(&self, flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.dims()];
        self.multi_index_into(flat, &mut out);
        out
    }

    pub fn multi_index_into(&self, mut flat: usize, out: &mut [usize]) {
        for (i, s) in self.strides.iter().enumerate() {
            out[i] = flat / s;
            flat %= s;
        }
    }

    /// Coordinates of a grid point given its flat index.
    pub fn point(&self, flat: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dims()];
        self.point_into(flat, &mut out);
        out
    }

    pub fn point_into(&self, mut flat: usize, out: &mut [f64]) {
        for i in 0..self.dims() {
            let k = flat / self.strides[i];
            flat %= self.strides[i];
            out[i] = self.coordinate(i, k);
        }
    }

    /// Maps a coordinate on a periodic axis into `[lo, hi)`; identity on
    /// bounded axes.
    pub fn wrap(&self, axis: usize, x: f64) -> f64 {
        if self.periodic[axis] {
            let p = self.period(axis);
            let w = self.lo[axis] + (x - self.lo[axis]).rem_euclid(p);
            if w >= self.hi[axis] {
                self.lo[axis]
            } else {
                w
            }
        } else {
            x
        }
    }

    /// Unclamped nearest-node index along `axis` measured from `lo`, with
    /// midpoint ties resolved toward the lower index. May be negative or
    /// exceed the axis length.
    #[inline]
    pub fn nearest_unwrapped(&self, axis: usize, x: f64) -> i64 {
        let s = (x - self.lo[axis]) / self.spacing[axis];
        (s - 0.5).ceil() as i64
    }

    /// Nearest grid index along `axis` (ties toward the lower index). Bounded
    /// axes clamp; periodic axes wrap.
    pub fn nearest_index(&self, axis: usize, x: f64) -> usize {
        let k = self.nearest_unwrapped(axis, x);
        self.resolve_index(axis, k)
    }

    /// Maps an unwrapped index onto the axis by clamping or wrapping.
    #[inline]
    pub fn resolve_index(&self, axis: usize, k: i64) -> usize {
        let n = self.shape[axis] as i64;
        if self.periodic[axis] {
            k.rem_euclid(n) as usize
        } else {
            k.clamp(0, n - 1) as usize
        }
    }

    /// Whether `x` lies inside the grid box on every bounded axis.
    pub fn contains(&self, x: &[f64]) -> bool {
        (0..self.dims()).all(|i| {
            self.periodic[i] || {
                let tol = CLAMP_TOLERANCE * self.spacing[i];
                x[i] >= self.lo[i] - tol && x[i] <= self.hi[i] + tol
            }
        })
    }

    /// Quadrature weight of a node: product of per-axis spacings, halved on
    /// the endpoints of bounded axes so the weights sum to the box volume.
    pub fn node_volume(&self, multi: &[usize]) -> f64 {
        (0..self.dims())
            .map(|i| {
                let edge = !self.periodic[i] && (multi[i] == 0 || multi[i] + 1 == self.shape[i]);
                if edge {
                    0.5 * self.spacing[i]
                } else {
                    self.spacing[i]
                }
            })
            .product()
    }

    pub fn volume(&self) -> f64 {
        (0..self.dims()).map(|i| self.period(i)).product()
    }

    /// This grid with one more bounded axis appended.
    pub fn with_axis(&self, lo: f64, hi: f64, points: usize) -> Result<Self> {
        let mut l = self.lo.clone();
        let mut h = self.hi.clone();
        let mut s = self.shape.clone();
        let mut p = self.periodic.clone();
        l.push(lo);
        h.push(hi);
        s.push(points);
        p.push(false);
        Self::new(l, h, s, p)
    }

    /// The grid spanned by the first `dims` axes.
    pub fn leading_axes(&self, dims: usize) -> Result<Self> {
        if dims == 0 || dims > self.dims() {
            return Err(argument(format!("cannot take {dims} leading axes of a {}-axis grid", self.dims())));
        }
        Self::new(
            self.lo[..dims].to_vec(),
            self.hi[..dims].to_vec(),
            self.shape[..dims].to_vec(),
            self.periodic[..dims].to_vec(),
        )
    }

    /// Bracketing nodes and the interpolation weight of the upper node.
    /// The flag reports a clamp beyond tolerance on a bounded axis.
    #[inline]
    fn bracket(&self, axis: usize, x: f64) -> (usize, usize, f64, bool) {
        let n = self.shape[axis];
        let h = self.spacing[axis];
        if self.periodic[axis] {
            let s = (x - self.lo[axis]).rem_euclid(self.period(axis)) / h;
            let mut k = s.floor() as usize;
            if k >= n {
                k = n - 1;
            }
            let f = (s - k as f64).clamp(0.0, 1.0);
            (k, (k + 1) % n, f, false)
        } else {
            let s = (x - self.lo[axis]) / h;
            let top = (n - 1) as f64;
            let flagged = s < -CLAMP_TOLERANCE || s > top + CLAMP_TOLERANCE;
            let s = s.clamp(0.0, top);
            let k = (s.floor() as usize).min(n - 2);
            (k, k + 1, s - k as f64, flagged)
        }
    }

    /// Multilinear interpolation of row-major `values` at `x`.
    /// Returns the value and whether any bounded axis was clamped.
    pub fn interpolate_values(&self, values: &[f64], x: &[f64]) -> (f64, bool) {
        let dims = self.dims();
        let mut lo_idx = [0usize; MAX_DIMS];
        let mut hi_idx = [0usize; MAX_DIMS];
        let mut frac = [0.0f64; MAX_DIMS];
        let mut clamped = false;
        for i in 0..dims {
            let (a, b, f, c) = self.bracket(i, x[i]);
            lo_idx[i] = a;
            hi_idx[i] = b;
            frac[i] = f;
            clamped |= c;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << dims) {
            let mut w = 1.0;
            let mut flat = 0;
            for i in 0..dims {
                if corner >> i & 1 == 1 {
                    w *= frac[i];
                    flat += hi_idx[i] * self.strides[i];
                } else {
                    w *= 1.0 - frac[i];
                    flat += lo_idx[i] * self.strides[i];
                }
            }
            if w != 0.0 {
                acc += w * values[flat];
            }
        }
        (acc, clamped)
    }

    /// One-sided differences (D⁻, D⁺) along `axis` at node `flat` whose
    /// index along that axis is `k`.
    #[inline]
    pub fn upwind_pair(&self, values: &[f64], flat: usize, k: usize, axis: usize) -> (f64, f64) {
        let n = self.shape[axis];
        let s = self.strides[axis];
        let h = self.spacing[axis];
        let v = values[flat];
        if self.periodic[axis] {
            let below = if k == 0 { flat + (n - 1) * s } else { flat - s };
            let above = if k + 1 == n { flat - (n - 1) * s } else { flat + s };
            ((v - values[below]) / h, (values[above] - v) / h)
        } else if k == 0 {
            let d = (values[flat + s] - v) / h;
            (d, d)
        } else if k + 1 == n {
            let d = (v - values[flat - s]) / h;
            (d, d)
        } else {
            ((v - values[flat - s]) / h, (values[flat + s] - v) / h)
        }
    }
}

/// One real value per grid point, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(config(format!(
                "field has {} values but the grid has {} points",
                values.len(),
                grid.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(argument(format!("field value at cell {i} is not finite")));
        }
        Ok(Self { grid, values })
    }

    /// Samples `f` at every grid point.
    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let mut x = vec![0.0; grid.dims()];
        let values = (0..grid.len())
            .map(|i| {
                grid.point_into(i, &mut x);
                f(&x)
            })
            .collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, multi: &[usize]) -> f64 {
        self.values[self.grid.flat_index(multi)]
    }

    pub fn interpolate(&self, x: &[f64]) -> f64 {
        self.interpolate_flagged(x).0
    }

    /// Interpolated value plus a flag set when a bounded axis had to be
    /// clamped by more than the rounding tolerance.
    pub fn interpolate_flagged(&self, x: &[f64]) -> (f64, bool) {
        assert_eq!(x.len(), self.grid.dims(), "query dimension mismatch");
        self.grid.interpolate_values(&self.values, x)
    }

    /// Per-axis (D⁻, D⁺) at a node.
    pub fn gradient_upwind(&self, flat: usize) -> (Vec<f64>, Vec<f64>) {
        let multi = self.grid.multi_index(flat);
        let mut left = Vec::with_capacity(multi.len());
        let mut right = Vec::with_capacity(multi.len());
        for (axis, &k) in multi.iter().enumerate() {
            let (l, r) = self.grid.upwind_pair(&self.values, flat, k, axis);
            left.push(l);
            right.push(r);
        }
        (left, right)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn field(lo: f64, hi: f64, values: Vec<f64>, periodic: bool) -> ScalarField {
        let g = Grid::new(vec![lo], vec![hi], vec![values.len()], vec![periodic]).unwrap();
        ScalarField::new(Arc::new(g), values).unwrap()
    }

    #[test]
    fn linear_interpolation_1d() {
        let f = field(0.0, 1.0, vec![0.0, 2.0], false);
        assert_eq!(f.interpolate(&[0.25]), 0.5);
    }

    #[test]
    fn periodic_endpoint_wraps_to_lower_bound() {
        let f = field(-PI, PI, vec![1.0, 2.0, 3.0, 4.0], true);
        assert_eq!(f.grid().spacing()[0], PI / 2.0);
        assert_eq!(f.interpolate(&[PI]), 1.0);
        // halfway between the last node and the wrapped first node
        assert!((f.interpolate(&[PI - PI / 4.0]) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn exact_at_nodes() {
        let g = Arc::new(Grid::bounded(vec![-1.0, 0.0], vec![1.0, 3.0], vec![5, 7]).unwrap());
        let f = ScalarField::from_fn(g.clone(), |x| x[0].sin() + x[1] * x[1]).unwrap();
        for i in 0..g.len() {
            let p = g.point(i);
            assert!((f.interpolate(&p) - f.values()[i]).abs() <= 1e-12 * f.values()[i].abs().max(1.0));
        }
    }

    #[test]
    fn out_of_range_clamps_and_flags() {
        let f = field(0.0, 1.0, vec![0.0, 1.0, 2.0], false);
        assert_eq!(f.interpolate_flagged(&[1.5]), (2.0, true));
        assert_eq!(f.interpolate_flagged(&[-0.2]), (0.0, true));
        let (v, flagged) = f.interpolate_flagged(&[1.0 + 1e-12]);
        assert_eq!(v, 2.0);
        assert!(!flagged);
    }

    #[test]
    fn upwind_examples() {
        let f = field(0.0, 2.0, vec![0.0, 1.0, 2.0], false);
        assert_eq!(f.gradient_upwind(1), (vec![1.0], vec![1.0]));
        let f = field(0.0, 2.0, vec![0.0, 0.0, 1.0], false);
        assert_eq!(f.gradient_upwind(1), (vec![0.0], vec![1.0]));
        // bounded ends copy the outermost interior difference
        assert_eq!(f.gradient_upwind(0), (vec![0.0], vec![0.0]));
        assert_eq!(f.gradient_upwind(2), (vec![1.0], vec![1.0]));
    }

    #[test]
    fn upwind_periodic_wraps() {
        let f = field(0.0, 4.0, vec![0.0, 1.0, 3.0, 2.0], true);
        assert_eq!(f.gradient_upwind(0), (vec![-2.0], vec![1.0]));
        assert_eq!(f.gradient_upwind(3), (vec![-1.0], vec![-2.0]));
    }

    #[test]
    fn constant_field_has_zero_gradient() {
        let g = Arc::new(Grid::new(vec![0.0, 0.0], vec![1.0, 1.0], vec![4, 5], vec![false, true]).unwrap());
        let f = ScalarField::from_fn(g.clone(), |_| 3.0).unwrap();
        for i in 0..g.len() {
            let (l, r) = f.gradient_upwind(i);
            assert!(l.iter().chain(&r).all(|&d| d == 0.0));
        }
    }

    #[test]
    fn nearest_index_ties_round_down() {
        let g = Grid::bounded(vec![0.0], vec![2.0], vec![3]).unwrap();
        assert_eq!(g.nearest_index(0, 0.5), 0);
        assert_eq!(g.nearest_index(0, 0.5000001), 1);
        assert_eq!(g.nearest_index(0, 1.4), 1);
        assert_eq!(g.nearest_index(0, 7.0), 2);
        assert_eq!(g.nearest_index(0, -7.0), 0);
        let p = Grid::new(vec![0.0], vec![4.0], vec![4], vec![true]).unwrap();
        assert_eq!(p.nearest_index(0, 3.6), 0);
        assert_eq!(p.nearest_index(0, -0.4), 0);
        assert_eq!(p.nearest_index(0, -0.6), 3);
    }

    #[test]
    fn node_volumes_sum_to_box_volume() {
        let g = Grid::new(vec![0.0, -1.0], vec![2.0, 1.0], vec![5, 6], vec![false, true]).unwrap();
        let total: f64 = (0..g.len()).map(|i| g.node_volume(&g.multi_index(i))).sum();
        assert!((total - g.volume()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Grid::bounded(vec![1.0], vec![0.0], vec![3]).is_err());
        assert!(Grid::bounded(vec![0.0], vec![1.0], vec![1]).is_err());
        assert!(Grid::bounded(vec![0.0, 0.0], vec![1.0], vec![3]).is_err());
        let g = Arc::new(Grid::bounded(vec![0.0], vec![1.0], vec![3]).unwrap());
        assert!(ScalarField::new(g.clone(), vec![0.0; 2]).is_err());
        assert!(ScalarField::new(g, vec![0.0, f64::NAN, 1.0]).is_err());
    }
}
