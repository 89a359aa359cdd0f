//! Little-endian binary containers and CSV exports.
//!
//! Every grid-backed container starts with the same header:
//!
//! ```text
//! magic [u8; 4] | version u32 | dims u32 | shape u32[dims]
//! | lo f64[dims] | hi f64[dims] | periodic u8[dims]
//! ```
//!
//! * `RVCF` scalar field: header, then `f64` values row-major.
//! * `RVCB` control bounds: header, `control_dims u32`, lower block, upper block.
//! * `RVCT` control table: header, `control_dims u32`, table block.
//! * `RVVF` value field: `magic | version | info_len u32 | info JSON |
//!   slice_count u32 | RVCF failure block | (time f64, values f64[len])*`.
//! * `RVDB` dark budget: `magic | version | horizon f64 | dt f64 | RVCF block`.
//!
//! Network weights have no magic: `layer_count u32`, then per layer
//! `rows u32 | cols u32 | weights f64[rows·cols] | bias f64[rows] | activation u8`.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::bounds::ControlBoundsField;
use crate::error::{argument, Error, Result};
use crate::grid::{Grid, ScalarField};
use crate::models::{Activation, Layer, Mlp, TabulatedController};
use crate::solver::{SolveInfo, ValueField};

pub const VERSION: u32 = 1;
pub const FIELD_MAGIC: &[u8; 4] = b"RVCF";
pub const BOUNDS_MAGIC: &[u8; 4] = b"RVCB";
pub const TABLE_MAGIC: &[u8; 4] = b"RVCT";
pub const VALUE_MAGIC: &[u8; 4] = b"RVVF";
pub const BUDGET_MAGIC: &[u8; 4] = b"RVDB";

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    fn u32(&mut self, v: usize) {
        self.bytes(&(v as u32).to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        self.buf.reserve(v.len() * 8);
        for x in v {
            self.f64(*x);
        }
    }

    fn header(&mut self, magic: &[u8; 4], grid: &Grid) {
        self.bytes(magic);
        self.u32(VERSION as usize);
        self.u32(grid.dims());
        for s in grid.shape() {
            self.u32(*s);
        }
        self.f64s(grid.lo());
        self.f64s(grid.hi());
        for p in grid.periodic() {
            self.bytes(&[u8::from(*p)]);
        }
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Format { offset: self.pos, message: message.into() })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return self.fail(format!("unexpected end of data, needed {n} more bytes"));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).map_or_else(|| self.fail("block length overflows"), Ok)?;
        let b = self.take(bytes)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let start = self.pos;
        let got = self.take(4)?;
        if got != expected {
            return Err(Error::Format {
                offset: start,
                message: format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(expected)),
            });
        }
        let at = self.pos;
        let version = self.u32()?;
        if version != VERSION as usize {
            return Err(Error::Format { offset: at, message: format!("unsupported version {version}") });
        }
        Ok(())
    }

    fn grid(&mut self) -> Result<Grid> {
        let at = self.pos;
        let dims = self.u32()?;
        if dims == 0 || dims > crate::grid::MAX_DIMS {
            return Err(Error::Format { offset: at, message: format!("unsupported axis count {dims}") });
        }
        let shape = (0..dims).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let lo = self.f64s(dims)?;
        let hi = self.f64s(dims)?;
        let periodic = (0..dims)
            .map(|_| match self.u8()? {
                0 => Ok(false),
                1 => Ok(true),
                v => self.fail(format!("periodic flag must be 0 or 1, got {v}")),
            })
            .collect::<Result<Vec<_>>>()?;
        Grid::new(lo, hi, shape, periodic).map_err(|e| Error::Format { offset: at, message: e.to_string() })
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<Grid> {
        self.magic(magic)?;
        self.grid()
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return self.fail(format!("{} trailing bytes", self.data.len() - self.pos));
        }
        Ok(())
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

fn field_block(w: &mut Writer, field: &ScalarField) {
    w.header(FIELD_MAGIC, field.grid());
    w.f64s(field.values());
}

fn read_field_block(r: &mut Reader) -> Result<ScalarField> {
    let grid = r.header(FIELD_MAGIC)?;
    let at = r.pos;
    let values = r.f64s(grid.len())?;
    ScalarField::new(Arc::new(grid), values).map_err(|e| Error::Format { offset: at, message: e.to_string() })
}

pub fn encode_field(field: &ScalarField) -> Vec<u8> {
    let mut w = Writer::default();
    field_block(&mut w, field);
    w.buf
}

pub fn decode_field(data: &[u8]) -> Result<ScalarField> {
    let mut r = Reader::new(data);
    let f = read_field_block(&mut r)?;
    r.finish()?;
    Ok(f)
}

pub fn write_field(path: &Path, field: &ScalarField) -> Result<()> {
    write_file(path, &encode_field(field))
}

pub fn read_field(path: &Path) -> Result<ScalarField> {
    decode_field(&fs::read(path)?)
}

pub fn encode_bounds(field: &ControlBoundsField) -> Vec<u8> {
    let mut w = Writer::default();
    w.header(BOUNDS_MAGIC, field.grid());
    w.u32(field.control_dims());
    w.f64s(field.lower());
    w.f64s(field.upper());
    w.buf
}

/// Decodes a bounds container; a cell with lower > upper is rejected with
/// its index.
pub fn decode_bounds(data: &[u8]) -> Result<ControlBoundsField> {
    let mut r = Reader::new(data);
    let grid = r.header(BOUNDS_MAGIC)?;
    let at = r.pos;
    let m = r.u32()?;
    if m == 0 {
        return Err(Error::Format { offset: at, message: "control dimension must be positive".into() });
    }
    let count = grid.len().checked_mul(m).map_or_else(|| r.fail("block length overflows"), Ok)?;
    let lower_at = r.pos;
    let lower = r.f64s(count)?;
    let upper = r.f64s(count)?;
    r.finish()?;
    ControlBoundsField::new(Arc::new(grid), m, lower, upper)
        .map_err(|e| Error::Format { offset: lower_at, message: e.to_string() })
}

pub fn export_bounds(path: &Path, field: &ControlBoundsField) -> Result<()> {
    write_file(path, &encode_bounds(field))
}

pub fn import_bounds(path: &Path) -> Result<ControlBoundsField> {
    decode_bounds(&fs::read(path)?)
}

pub fn encode_table(table: &TabulatedController) -> Vec<u8> {
    let mut w = Writer::default();
    w.header(TABLE_MAGIC, table.grid());
    w.u32(table.control_dims());
    w.f64s(table.table());
    w.buf
}

pub fn decode_table(data: &[u8]) -> Result<TabulatedController> {
    let mut r = Reader::new(data);
    let grid = r.header(TABLE_MAGIC)?;
    let m = r.u32()?;
    let at = r.pos;
    let count = grid.len().checked_mul(m).map_or_else(|| r.fail("block length overflows"), Ok)?;
    let table = r.f64s(count)?;
    r.finish()?;
    TabulatedController::new(Arc::new(grid), m, table, None)
        .map_err(|e| Error::Format { offset: at, message: e.to_string() })
}

pub fn write_table(path: &Path, table: &TabulatedController) -> Result<()> {
    write_file(path, &encode_table(table))
}

pub fn read_table(path: &Path) -> Result<TabulatedController> {
    decode_table(&fs::read(path)?)
}

pub fn encode_mlp(mlp: &Mlp) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(mlp.layers().len());
    for l in mlp.layers() {
        w.u32(l.rows);
        w.u32(l.cols);
        w.f64s(&l.weights);
        w.f64s(&l.bias);
        w.bytes(&[l.activation.tag()]);
    }
    w.buf
}

pub fn decode_mlp(data: &[u8]) -> Result<Mlp> {
    let mut r = Reader::new(data);
    let count = r.u32()?;
    if count == 0 {
        return r.fail("network has no layers");
    }
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let at = r.pos;
        let rows = r.u32()?;
        let cols = r.u32()?;
        let n = rows.checked_mul(cols).map_or_else(|| r.fail("layer size overflows"), Ok)?;
        let weights = r.f64s(n)?;
        let bias = r.f64s(rows)?;
        let tag_at = r.pos;
        let tag = r.u8()?;
        let Some(activation) = Activation::from_tag(tag) else {
            return Err(Error::Format {
                offset: tag_at,
                message: format!("activation tag {tag} is not a supported monotone activation"),
            });
        };
        layers.push(
            Layer::new(rows, cols, weights, bias, activation)
                .map_err(|e| Error::Format { offset: at, message: e.to_string() })?,
        );
    }
    r.finish()?;
    Mlp::new(layers).map_err(|e| Error::Format { offset: 0, message: e.to_string() })
}

pub fn write_mlp(path: &Path, mlp: &Mlp) -> Result<()> {
    write_file(path, &encode_mlp(mlp))
}

pub fn read_mlp(path: &Path) -> Result<Mlp> {
    decode_mlp(&fs::read(path)?)
}

pub fn encode_value_field(vf: &ValueField) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(VALUE_MAGIC);
    w.u32(VERSION as usize);
    let info = serde_json::to_vec(vf.info()).expect("solve info serializes");
    w.u32(info.len());
    w.bytes(&info);
    w.u32(vf.slices().len());
    field_block(&mut w, vf.failure());
    for (t, s) in vf.times().iter().zip(vf.slices()) {
        w.f64(*t);
        w.f64s(s.values());
    }
    w.buf
}

pub fn decode_value_field(data: &[u8]) -> Result<ValueField> {
    let mut r = Reader::new(data);
    r.magic(VALUE_MAGIC)?;
    let info_len = r.u32()?;
    let at = r.pos;
    let info: SolveInfo = serde_json::from_slice(r.take(info_len)?)
        .map_err(|e| Error::Format { offset: at, message: format!("bad solve info: {e}") })?;
    let count = r.u32()?;
    let failure = read_field_block(&mut r)?;
    let grid = failure.grid().clone();
    let mut times = Vec::new();
    let mut slices = Vec::new();
    for _ in 0..count {
        times.push(r.f64()?);
        let at = r.pos;
        let values = r.f64s(grid.len())?;
        slices.push(ScalarField::new(grid.clone(), values).map_err(|e| Error::Format { offset: at, message: e.to_string() })?);
    }
    r.finish()?;
    ValueField::new(times, slices, failure, info).map_err(|e| Error::Format { offset: 0, message: e.to_string() })
}

pub fn write_value_field(path: &Path, vf: &ValueField) -> Result<()> {
    write_file(path, &encode_value_field(vf))
}

pub fn read_value_field(path: &Path) -> Result<ValueField> {
    decode_value_field(&fs::read(path)?)
}

pub fn encode_budget(budget: &crate::analysis::DarkBudgetField) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(BUDGET_MAGIC);
    w.u32(VERSION as usize);
    w.f64(budget.horizon());
    w.f64(budget.dt());
    field_block(&mut w, budget.tau_star());
    w.buf
}

pub fn decode_budget(data: &[u8]) -> Result<crate::analysis::DarkBudgetField> {
    let mut r = Reader::new(data);
    r.magic(BUDGET_MAGIC)?;
    let horizon = r.f64()?;
    let dt = r.f64()?;
    let tau = read_field_block(&mut r)?;
    r.finish()?;
    crate::analysis::DarkBudgetField::new(tau, horizon, dt).map_err(|e| Error::Format { offset: 0, message: e.to_string() })
}

pub fn write_budget(path: &Path, budget: &crate::analysis::DarkBudgetField) -> Result<()> {
    write_file(path, &encode_budget(budget))
}

pub fn read_budget(path: &Path) -> Result<crate::analysis::DarkBudgetField> {
    decode_budget(&fs::read(path)?)
}

/// Rows `(x_i, x_j, value)` over the nodes of axes `i` and `j`, with every
/// other axis held at `fixed` (interpolated unless the value sits on a node).
pub fn slice_rows(field: &ScalarField, i: usize, j: usize, fixed: &[(usize, f64)]) -> Result<Vec<[f64; 3]>> {
    let g = field.grid();
    let dims = g.dims();
    if i >= dims || j >= dims || i == j {
        return Err(argument(format!("slice axes ({i}, {j}) invalid for a {dims}-axis field")));
    }
    let mut held = vec![None; dims];
    for &(axis, value) in fixed {
        if axis >= dims || axis == i || axis == j {
            return Err(argument(format!("cannot hold axis {axis} fixed in an ({i}, {j}) slice")));
        }
        held[axis] = Some(value);
    }
    // snap held values that sit on a node so the rows are plain reads
    let mut node = vec![None; dims];
    for axis in 0..dims {
        if axis == i || axis == j {
            continue;
        }
        let v = held[axis].unwrap_or(g.lo()[axis]);
        let s = (g.wrap(axis, v) - g.lo()[axis]) / g.spacing()[axis];
        let k = s.round();
        if (s - k).abs() < 1e-9 && k >= 0.0 && (k as usize) < g.shape()[axis] {
            node[axis] = Some(k as usize);
        }
        held[axis] = Some(v);
    }
    let snapped = node.iter().enumerate().all(|(a, n)| a == i || a == j || n.is_some());
    let mut rows = Vec::with_capacity(g.shape()[i] * g.shape()[j]);
    let mut multi = vec![0; dims];
    let mut x = vec![0.0; dims];
    for a in 0..g.shape()[i] {
        for b in 0..g.shape()[j] {
            let value = if snapped {
                for axis in 0..dims {
                    multi[axis] = node[axis].unwrap_or(0);
                }
                multi[i] = a;
                multi[j] = b;
                field.at(&multi)
            } else {
                for axis in 0..dims {
                    x[axis] = held[axis].unwrap_or(0.0);
                }
                x[i] = g.coordinate(i, a);
                x[j] = g.coordinate(j, b);
                field.interpolate(&x)
            };
            rows.push([g.coordinate(i, a), g.coordinate(j, b), value]);
        }
    }
    Ok(rows)
}

pub fn slice_csv(field: &ScalarField, i: usize, j: usize, fixed: &[(usize, f64)]) -> Result<String> {
    let mut out = format!("x{i},x{j},value\n");
    for r in slice_rows(field, i, j, fixed)? {
        out.push_str(&format!("{},{},{}\n", r[0], r[1], r[2]));
    }
    Ok(out)
}
