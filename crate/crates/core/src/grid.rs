//! Uniform cell-centered grids on a box, sampled fields, midpoint quadrature
//! and finite differences for purely numerical fields.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{Compiled, EvalError, Expr};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("grid needs at least one axis")]
    NoAxes,
    #[error("bounds and cell counts disagree in length ({lower}, {upper}, {cells})")]
    LengthMismatch {
        lower: usize,
        upper: usize,
        cells: usize,
    },
    #[error("axis {axis}: lower bound {lower} is not below upper bound {upper}")]
    EmptyAxis { axis: usize, lower: f64, upper: f64 },
    #[error("axis {axis}: {cells} cells, at least 4 required")]
    TooFewCells { axis: usize, cells: usize },
    #[error("total cell count overflows")]
    Overflow,
    #[error("field has {found} values, grid has {expected} cells")]
    ValueCount { expected: usize, found: usize },
}

/// Evaluation failure while sampling an expression on a grid.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("at cell {cell} (x = {point:?}): {source}")]
pub struct SampleError {
    pub cell: usize,
    pub point: Vec<f64>,
    #[source]
    pub source: EvalError,
}

/// Bounds and cell counts, the serializable part of a [`Grid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub cells: Vec<usize>,
}

/// Uniform rectangular grid. Flat indices are row-major with the last axis
/// varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    lower: Vec<f64>,
    upper: Vec<f64>,
    cells: Vec<usize>,
    spacing: Vec<f64>,
    strides: Vec<usize>,
    len: usize,
}

impl Grid {
    pub fn new(lower: &[f64], upper: &[f64], cells: &[usize]) -> Result<Self, GridError> {
        let d = cells.len();
        if d == 0 {
            return Err(GridError::NoAxes);
        }
        if lower.len() != d || upper.len() != d {
            return Err(GridError::LengthMismatch {
                lower: lower.len(),
                upper: upper.len(),
                cells: d,
            });
        }
        for k in 0..d {
            if !(lower[k] < upper[k]) || !lower[k].is_finite() || !upper[k].is_finite() {
                return Err(GridError::EmptyAxis {
                    axis: k,
                    lower: lower[k],
                    upper: upper[k],
                });
            }
            if cells[k] < 4 {
                return Err(GridError::TooFewCells {
                    axis: k,
                    cells: cells[k],
                });
            }
        }
        let mut len = 1usize;
        for &n in cells {
            len = len.checked_mul(n).ok_or(GridError::Overflow)?;
        }
        let mut strides = vec![1usize; d];
        for k in (0..d.saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * cells[k + 1];
        }
        let spacing = (0..d)
            .map(|k| (upper[k] - lower[k]) / cells[k] as f64)
            .collect();
        Ok(Grid {
            lower: lower.to_vec(),
            upper: upper.to_vec(),
            cells: cells.to_vec(),
            spacing,
            strides,
            len,
        })
    }

    /// Same bounds and cell count on every axis.
    pub fn uniform(dim: usize, lower: f64, upper: f64, cells: usize) -> Result<Self, GridError> {
        Grid::new(&vec![lower; dim], &vec![upper; dim], &vec![cells; dim])
    }

    /// Grid whose cell centers are `cells[k]` equispaced nodes from
    /// `lower[k]` to `upper[k]`, endpoints included. The cells overhang the
    /// box by half a spacing, so use it for point scans, not quadrature.
    pub fn nodes(lower: &[f64], upper: &[f64], cells: &[usize]) -> Result<Self, GridError> {
        if lower.len() != cells.len() || upper.len() != cells.len() {
            return Err(GridError::LengthMismatch {
                lower: lower.len(),
                upper: upper.len(),
                cells: cells.len(),
            });
        }
        let mut lo = lower.to_vec();
        let mut hi = upper.to_vec();
        for k in 0..cells.len() {
            let half = (upper[k] - lower[k]) / (2.0 * (cells[k].max(2) - 1) as f64);
            lo[k] -= half;
            hi[k] += half;
        }
        Grid::new(&lo, &hi, cells)
    }

    pub fn from_spec(spec: &GridSpec) -> Result<Self, GridError> {
        Grid::new(&spec.lower, &spec.upper, &spec.cells)
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec {
            lower: self.lower.clone(),
            upper: self.upper.clone(),
            cells: self.cells.clone(),
        }
    }

    /// Same box, different resolution.
    pub fn with_cells(&self, cells: &[usize]) -> Result<Self, GridError> {
        Grid::new(&self.lower, &self.upper, cells)
    }

    pub fn dim(&self) -> usize {
        self.cells.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.strides[axis]
    }

    /// Total number of cells.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|k| self.upper[k] - self.lower[k]).product()
    }

    /// Center coordinate of cell `i` along `axis`. Written relative to the
    /// axis midpoint so that symmetric boxes give exactly mirrored centers.
    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        let mid = 0.5 * (self.lower[axis] + self.upper[axis]);
        let n = self.cells[axis] as f64;
        mid + (i as f64 + 0.5 - 0.5 * n) * self.spacing[axis]
    }

    /// Position of the face between cells `i - 1` and `i` along `axis`
    /// (`i = 0` and `i = n` are the box walls).
    pub fn face(&self, axis: usize, i: usize) -> f64 {
        if i == 0 {
            return self.lower[axis];
        }
        if i == self.cells[axis] {
            return self.upper[axis];
        }
        let mid = 0.5 * (self.lower[axis] + self.upper[axis]);
        let n = self.cells[axis] as f64;
        mid + (i as f64 - 0.5 * n) * self.spacing[axis]
    }

    pub fn axis_index(&self, cell: usize, axis: usize) -> usize {
        (cell / self.strides[axis]) % self.cells[axis]
    }

    pub fn multi_index(&self, cell: usize) -> Vec<usize> {
        (0..self.dim()).map(|k| self.axis_index(cell, k)).collect()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn center_into(&self, cell: usize, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate().take(self.dim()) {
            *o = self.coord(k, self.axis_index(cell, k));
        }
    }

    pub fn center(&self, cell: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        self.center_into(cell, &mut x);
        x
    }

    /// Cell containing `x`, or `None` when `x` lies outside the box. Points on
    /// the upper wall belong to the last cell.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        let mut cell = 0;
        for k in 0..self.dim() {
            if !(x[k] >= self.lower[k] && x[k] <= self.upper[k]) {
                return None;
            }
            let i = ((x[k] - self.lower[k]) / self.spacing[k]).floor() as usize;
            cell += i.min(self.cells[k] - 1) * self.strides[k];
        }
        Some(cell)
    }

    /// Midpoint quadrature of `integrand(x, axis, outward_sign)` over the
    /// box boundary, with `x` at face-patch centers.
    pub fn boundary_integral<F>(&self, mut integrand: F) -> f64
    where
        F: FnMut(&[f64], usize, f64) -> f64,
    {
        let d = self.dim();
        let mut total = 0.0;
        let mut x = vec![0.0; d];
        for axis in 0..d {
            let area: f64 = (0..d)
                .filter(|&k| k != axis)
                .map(|k| self.spacing[k])
                .product();
            let patches = self.len / self.cells[axis];
            for (sign, wall) in [(-1.0, self.lower[axis]), (1.0, self.upper[axis])] {
                for p in 0..patches {
                    let mut rem = p;
                    for k in (0..d).rev() {
                        if k == axis {
                            continue;
                        }
                        let i = rem % self.cells[k];
                        rem /= self.cells[k];
                        x[k] = self.coord(k, i);
                    }
                    x[axis] = wall;
                    total += integrand(&x, axis, sign) * area;
                }
            }
        }
        total
    }
}

/// One value per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::ValueCount {
                expected: grid.len(),
                found: values.len(),
            });
        }
        Ok(ScalarField { grid, values })
    }

    pub fn constant(grid: &Grid, v: f64) -> Self {
        ScalarField {
            values: vec![v; grid.len()],
            grid: grid.clone(),
        }
    }

    pub fn from_fn<F>(grid: &Grid, f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        let values = (0..grid.len())
            .into_par_iter()
            .map(|c| f(&grid.center(c)))
            .collect();
        ScalarField {
            grid: grid.clone(),
            values,
        }
    }

    /// Evaluates `e` at every cell center.
    pub fn sample(e: &Expr, grid: &Grid) -> Result<Self, SampleError> {
        ScalarField::sample_compiled(&e.compile(), grid)
    }

    pub fn sample_compiled(e: &Compiled, grid: &Grid) -> Result<Self, SampleError> {
        let values = (0..grid.len())
            .into_par_iter()
            .map(|c| {
                let x = grid.center(c);
                e.evaluate(&x).map_err(|source| SampleError {
                    cell: c,
                    point: x,
                    source,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ScalarField {
            grid: grid.clone(),
            values,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> ScalarField {
        ScalarField {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Midpoint rule: sum of values times cell volume.
    pub fn integrate(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Index of the smallest value (first one on ties).
    pub fn argmin(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v < self.values[best] {
                best = i;
            }
        }
        best
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        best
    }

    /// Second-order gradient: central differences inside, one-sided
    /// three-point stencils in boundary cells.
    pub fn fd_gradient(&self) -> VectorField {
        let mask = vec![true; self.values.len()];
        self.fd_gradient_masked(&mask)
    }

    /// Gradient using only cells where `mask` is true. Stencils fall back to
    /// one-sided and then first-order differences next to excluded cells;
    /// excluded cells get a zero gradient.
    pub fn fd_gradient_masked(&self, mask: &[bool]) -> VectorField {
        let g = &self.grid;
        let d = g.dim();
        let f = &self.values;
        let mut out = vec![0.0; g.len() * d];
        for c in 0..g.len() {
            if !mask[c] {
                continue;
            }
            for k in 0..d {
                let i = g.axis_index(c, k);
                let n = g.cells[k];
                let s = g.strides[k];
                let h = g.spacing[k];
                let ok = |offset: isize| -> bool {
                    let j = i as isize + offset;
                    j >= 0 && (j as usize) < n && mask[(c as isize + offset * s as isize) as usize]
                };
                let at = |offset: isize| f[(c as isize + offset * s as isize) as usize];
                let v = if ok(-1) && ok(1) {
                    (at(1) - at(-1)) / (2.0 * h)
                } else if ok(1) && ok(2) {
                    (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
                } else if ok(-1) && ok(-2) {
                    (3.0 * at(0) - 4.0 * at(-1) + at(-2)) / (2.0 * h)
                } else if ok(1) {
                    (at(1) - at(0)) / h
                } else if ok(-1) {
                    (at(0) - at(-1)) / h
                } else {
                    0.0
                };
                out[c * d + k] = v;
            }
        }
        VectorField {
            grid: g.clone(),
            values: out,
        }
    }

    /// CSV with header `x1,...,xd,value`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let d = self.grid.dim();
        let mut header: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
        header.push("value".into());
        writeln!(w, "{}", header.join(","))?;
        for c in 0..self.grid.len() {
            write_coords(&mut w, &self.grid, c)?;
            writeln!(w, "{:.16e}", self.values[c])?;
        }
        Ok(())
    }
}

fn write_coords<W: Write>(w: &mut W, grid: &Grid, cell: usize) -> io::Result<()> {
    for x in grid.center(cell) {
        write!(w, "{x:.16e},")?;
    }
    Ok(())
}

/// `d` values per cell, stored cell by cell.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: Grid,
    values: Vec<f64>,
}

impl VectorField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self, GridError> {
        let expected = grid.len() * grid.dim();
        if values.len() != expected {
            return Err(GridError::ValueCount {
                expected,
                found: values.len(),
            });
        }
        Ok(VectorField { grid, values })
    }

    /// Samples one expression per component.
    pub fn sample(components: &[Expr], grid: &Grid) -> Result<Self, SampleError> {
        let d = grid.dim();
        let progs: Vec<Compiled> = components.iter().map(Expr::compile).collect();
        let rows = (0..grid.len())
            .into_par_iter()
            .map(|c| {
                let x = grid.center(c);
                progs
                    .iter()
                    .map(|p| p.evaluate(&x))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|source| SampleError {
                        cell: c,
                        point: x.clone(),
                        source,
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut values = Vec::with_capacity(grid.len() * d);
        for r in rows {
            values.extend(r);
        }
        Ok(VectorField {
            grid: grid.clone(),
            values,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn get(&self, cell: usize) -> &[f64] {
        let d = self.grid.dim();
        &self.values[cell * d..(cell + 1) * d]
    }

    pub fn component(&self, axis: usize) -> ScalarField {
        let d = self.grid.dim();
        ScalarField {
            grid: self.grid.clone(),
            values: (0..self.grid.len()).map(|c| self.values[c * d + axis]).collect(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// CSV with header `x1,...,xd,v1,...,vd`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let d = self.grid.dim();
        let mut header: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
        header.extend((1..=d).map(|k| format!("v{k}")));
        writeln!(w, "{}", header.join(","))?;
        for c in 0..self.grid.len() {
            write_coords(&mut w, &self.grid, c)?;
            let row: Vec<String> = self.get(c).iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// `d x d` matrix per cell. Symmetric fields store only the upper triangle,
/// so `m_ij` and `m_ji` are the same number.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixField {
    grid: Grid,
    symmetric: bool,
    values: Vec<f64>,
}

fn packed_len(d: usize, symmetric: bool) -> usize {
    if symmetric {
        d * (d + 1) / 2
    } else {
        d * d
    }
}

impl MatrixField {
    /// Builds a field from per-cell matrices. With `symmetric` set, the upper
    /// triangle of each matrix is kept.
    pub fn from_matrices(grid: &Grid, symmetric: bool, mats: &[Matrix]) -> Result<Self, GridError> {
        let d = grid.dim();
        if mats.len() != grid.len() {
            return Err(GridError::ValueCount {
                expected: grid.len(),
                found: mats.len(),
            });
        }
        let mut values = Vec::with_capacity(grid.len() * packed_len(d, symmetric));
        for m in mats {
            for i in 0..d {
                let start = if symmetric { i } else { 0 };
                for j in start..d {
                    values.push(m[(i, j)]);
                }
            }
        }
        Ok(MatrixField {
            grid: grid.clone(),
            symmetric,
            values,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn get(&self, cell: usize, i: usize, j: usize) -> f64 {
        let d = self.grid.dim();
        let base = cell * packed_len(d, self.symmetric);
        let k = if self.symmetric {
            let (a, b) = if i <= j { (i, j) } else { (j, i) };
            base + packed_offset(d, a, b)
        } else {
            base + i * d + j
        };
        self.values[k]
    }

    pub fn matrix(&self, cell: usize) -> Matrix {
        let d = self.grid.dim();
        let mut m = Matrix::zeros(d);
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] = self.get(cell, i, j);
            }
        }
        m
    }

    /// CSV with header `x1,...,xd,m11,m12,...,mdd`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let d = self.grid.dim();
        let mut header: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
        for i in 1..=d {
            for j in 1..=d {
                header.push(format!("m{i}{j}"));
            }
        }
        writeln!(w, "{}", header.join(","))?;
        for c in 0..self.grid.len() {
            write_coords(&mut w, &self.grid, c)?;
            let mut row = Vec::with_capacity(d * d);
            for i in 0..d {
                for j in 0..d {
                    row.push(format!("{:.16e}", self.get(c, i, j)));
                }
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

// Offset of (i, j), i <= j, inside a packed upper triangle.
fn packed_offset(d: usize, i: usize, j: usize) -> usize {
    i * d - i * (i + 1) / 2 + j
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    #[test]
    fn rejects_bad_grids() {
        assert!(matches!(
            Grid::new(&[1.0], &[1.0], &[8]),
            Err(GridError::EmptyAxis { .. })
        ));
        assert!(matches!(
            Grid::new(&[0.0], &[1.0], &[3]),
            Err(GridError::TooFewCells { .. })
        ));
        assert!(matches!(
            Grid::new(&[0.0; 4], &[1.0; 4], &[1 << 20; 4]),
            Err(GridError::Overflow)
        ));
    }

    #[test]
    fn node_grid_hits_endpoints() {
        let g = Grid::nodes(&[-1.0, 0.0], &[1.0, 3.0], &[5, 4]).unwrap();
        let xs: Vec<f64> = (0..5).map(|i| g.coord(0, i)).collect();
        for (x, e) in xs.iter().zip([-1.0, -0.5, 0.0, 0.5, 1.0]) {
            assert!((x - e).abs() < 1e-15);
        }
        assert!((g.coord(1, 0) - 0.0).abs() < 1e-15);
        assert!((g.coord(1, 3) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn packed_offsets_cover_triangle() {
        for d in 1..5 {
            let mut seen = Vec::new();
            for i in 0..d {
                for j in i..d {
                    seen.push(packed_offset(d, i, j));
                }
            }
            let expect: Vec<usize> = (0..d * (d + 1) / 2).collect();
            assert_eq!(seen, expect, "d = {d}");
        }
    }

    #[test]
    fn sample_reports_cell_on_error() {
        let g = Grid::uniform(1, -1.0, 1.0, 4).unwrap();
        let err = ScalarField::sample(&parse("log(x1)", 1).unwrap(), &g).unwrap_err();
        assert_eq!(err.cell, 0);
        assert!(matches!(err.source, EvalError::LogDomain { .. }));
    }

    #[test]
    fn locate_and_center_agree() {
        let g = Grid::new(&[-1.0, 0.0], &[1.0, 3.0], &[5, 7]).unwrap();
        for c in 0..g.len() {
            assert_eq!(g.locate(&g.center(c)), Some(c));
        }
        assert_eq!(g.locate(&[1.0, 3.0]), Some(g.len() - 1));
        assert_eq!(g.locate(&[1.1, 0.0]), None);
    }

    #[test]
    fn boundary_integral_of_normal_component_is_divergence_integral() {
        // divergence of (x1, 2 x2) is 3 over [0,1]x[-1,2]
        let g = Grid::new(&[0.0, -1.0], &[1.0, 2.0], &[6, 9]).unwrap();
        let flux = g.boundary_integral(|x, axis, sign| {
            sign * if axis == 0 { x[0] } else { 2.0 * x[1] }
        });
        assert!((flux - 3.0 * 3.0).abs() < 1e-12);
    }
}
