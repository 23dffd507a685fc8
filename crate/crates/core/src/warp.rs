//! Displacement fields, trilinear resampling and Jacobian analysis.
//!
//! Fields live on the fixed-image grid and pull the moving image back: the
//! warped intensity at fixed-grid voxel `x` is `moving(world(x) + u(x))`.
//! Displacements are in millimetres, so they carry across grids of
//! different resolution unchanged.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{read_raw, write_raw, Grid, Volume, VolumeHeader};

/// Dense field of displacement vectors (mm), x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    grid: Grid,
    data: Vec<[f64; 3]>,
}

impl DisplacementField {
    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            data: vec![[0.0; 3]; grid.len()],
        }
    }

    pub fn constant(grid: Grid, u: [f64; 3]) -> Self {
        Self {
            grid,
            data: vec![u; grid.len()],
        }
    }

    pub fn from_grid(grid: Grid, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                found: data.len(),
            });
        }
        Ok(Self { grid, data })
    }

    /// Evaluates `f(world position)` at every voxel.
    pub fn from_fn(grid: Grid, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..grid.dims[2] {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    data.push(f(grid.world(i, j, k)));
                }
            }
        }
        Self { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn data(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.data
    }

    /// Components as one interleaved slice (ux, uy, uz per voxel).
    pub fn as_flat(&self) -> &[f64] {
        self.data.as_flattened()
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        self.data.as_flattened_mut()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            grid: self.grid,
            data: self.data.iter().map(|u| [s * u[0], s * u[1], s * u[2]]).collect(),
        }
    }

    /// Largest displacement magnitude (mm).
    pub fn max_magnitude(&self) -> f64 {
        self.data.iter().map(|u| norm(*u)).fold(0.0, f64::max)
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.as_flat().iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    /// Trilinear displacement at a world point (clamped to the grid).
    pub fn sample(&self, p: [f64; 3]) -> [f64; 3] {
        let s = Stencil::new(&self.grid, p);
        std::array::from_fn(|c| s.value(|i| self.data[i][c]))
    }
}

#[inline]
pub(crate) fn norm(u: [f64; 3]) -> f64 {
    (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt()
}

/// Interpolation cell along one axis for a continuous voxel coordinate.
#[derive(Debug, Clone, Copy)]
struct AxisCell {
    lo: usize,
    hi: usize,
    t: f64,
    /// Cell used for the derivative; `None` when the coordinate was clamped
    /// (the sample does not move with the point along this axis).
    grad: Option<(usize, usize)>,
}

impl AxisCell {
    #[inline]
    fn new(c: f64, dim: usize) -> Self {
        if dim == 1 {
            return Self { lo: 0, hi: 0, t: 0.0, grad: None };
        }
        let max = (dim - 1) as f64;
        let (c, active) = if c < 0.0 {
            (0.0, false)
        } else if c > max {
            (max, false)
        } else {
            (c, true)
        };
        // Values use the cell starting at floor(c), so nodes are reproduced
        // exactly (t == 0).
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(dim - 1);
        let t = c - lo as f64;
        // Derivatives on a node use the cell below it.
        let grad = active.then(|| {
            let f = c.floor();
            let g = if f == c && c > 0.0 { f as usize - 1 } else { f as usize };
            let g = g.min(dim - 2);
            (g, g + 1)
        });
        Self { lo, hi, t, grad }
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Trilinear interpolation cells for a world point.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    cells: [AxisCell; 3],
    strides: [usize; 3],
}

impl Stencil {
    #[inline]
    pub fn new(grid: &Grid, p: [f64; 3]) -> Self {
        let c = grid.to_voxel(p);
        Self {
            cells: [
                AxisCell::new(c[0], grid.dims[0]),
                AxisCell::new(c[1], grid.dims[1]),
                AxisCell::new(c[2], grid.dims[2]),
            ],
            strides: [1, grid.dims[0], grid.dims[0] * grid.dims[1]],
        }
    }

    /// Interpolates `get` with per-axis index overrides: axis `a` uses
    /// `(lo, hi, t)` from `cells[a]` unless `fixed` pins it to one index.
    #[inline]
    fn interp(&self, fixed: Option<(usize, usize)>, get: &impl Fn(usize) -> f64) -> f64 {
        let axis = |a: usize| -> (usize, usize, f64) {
            match fixed {
                Some((fa, idx)) if fa == a => (idx, idx, 0.0),
                _ => (self.cells[a].lo, self.cells[a].hi, self.cells[a].t),
            }
        };
        let (x0, x1, tx) = axis(0);
        let (y0, y1, ty) = axis(1);
        let (z0, z1, tz) = axis(2);
        let s = self.strides;
        let at = |i: usize, j: usize, k: usize| get(i * s[0] + j * s[1] + k * s[2]);
        let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), tx);
        let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), tx);
        let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), tx);
        let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), tx);
        lerp(lerp(c00, c10, ty), lerp(c01, c11, ty), tz)
    }

    #[inline]
    pub fn value(&self, get: impl Fn(usize) -> f64) -> f64 {
        self.interp(None, &get)
    }

    /// Derivative with respect to the continuous voxel coordinate.
    #[inline]
    pub fn derivative(&self, get: impl Fn(usize) -> f64) -> [f64; 3] {
        std::array::from_fn(|a| match self.cells[a].grad {
            Some((lo, hi)) => self.interp(Some((a, hi)), &get) - self.interp(Some((a, lo)), &get),
            None => 0.0,
        })
    }
}

/// Trilinear sample of `v` at world point `p` (mm), clamped to the grid.
pub fn sample_trilinear(v: &Volume, p: [f64; 3]) -> f64 {
    let d = v.data();
    Stencil::new(v.grid(), p).value(|i| d[i])
}

/// Sample value and its spatial gradient (per mm) at `p`. Clamped axes have
/// zero derivative.
pub fn sample_trilinear_grad(v: &Volume, p: [f64; 3]) -> (f64, [f64; 3]) {
    let d = v.data();
    let sp = v.spacing();
    let s = Stencil::new(v.grid(), p);
    let g = s.derivative(|i| d[i]);
    (s.value(|i| d[i]), [g[0] / sp[0], g[1] / sp[1], g[2] / sp[2]])
}

/// Resamples `moving` through `field` onto the field's grid.
pub fn warp_volume(moving: &Volume, field: &DisplacementField) -> Volume {
    let grid = *field.grid();
    let plane = grid.dims[0] * grid.dims[1];
    let mut out = vec![0.0; grid.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(k, slab)| {
        for j in 0..grid.dims[1] {
            for i in 0..grid.dims[0] {
                let idx = grid.index(i, j, k);
                let x = grid.world(i, j, k);
                let u = field.data[idx];
                slab[i + grid.dims[0] * j] =
                    sample_trilinear(moving, [x[0] + u[0], x[1] + u[1], x[2] + u[2]]);
            }
        }
    });
    Volume::from_grid(grid, out).expect("grid length")
}

/// Like [`warp_volume`], also returning the moving image's spatial gradient
/// (per mm) at every sample point, i.e. the derivative of each warped voxel
/// with respect to its displacement.
pub fn warp_volume_with_grad(
    moving: &Volume,
    field: &DisplacementField,
) -> (Volume, Vec<[f64; 3]>) {
    let grid = *field.grid();
    let plane = grid.dims[0] * grid.dims[1];
    let mut out = vec![0.0; grid.len()];
    let mut grads = vec![[0.0; 3]; grid.len()];
    out.par_chunks_mut(plane)
        .zip(grads.par_chunks_mut(plane))
        .enumerate()
        .for_each(|(k, (slab, gslab))| {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    let idx = grid.index(i, j, k);
                    let x = grid.world(i, j, k);
                    let u = field.data[idx];
                    let (v, g) =
                        sample_trilinear_grad(moving, [x[0] + u[0], x[1] + u[1], x[2] + u[2]]);
                    slab[i + grid.dims[0] * j] = v;
                    gslab[i + grid.dims[0] * j] = g;
                }
            }
        });
    (Volume::from_grid(grid, out).expect("grid length"), grads)
}

/// Per-voxel Jacobian determinants of the mapping `x -> x + u(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMap {
    grid: Grid,
    data: Vec<f64>,
}

impl JacobianMap {
    pub fn from_grid(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                found: data.len(),
            });
        }
        Ok(Self { grid, data })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_volume(&self) -> Volume {
        Volume::from_grid(self.grid, self.data.clone()).expect("grid length")
    }
}

/// Derivative of `u` along `axis` at voxel (i, j, k) in mm: central in the
/// interior, one-sided on faces.
#[inline]
fn axis_derivative(field: &DisplacementField, pos: [usize; 3], axis: usize) -> [f64; 3] {
    let g = &field.grid;
    let n = g.dims[axis];
    let h = g.spacing[axis];
    let at = |p: usize| {
        let mut q = pos;
        q[axis] = p;
        field.data[g.index(q[0], q[1], q[2])]
    };
    let p = pos[axis];
    let (a, b, div) = if p == 0 {
        (at(1), at(0), h)
    } else if p == n - 1 {
        (at(n - 1), at(n - 2), h)
    } else {
        (at(p + 1), at(p - 1), 2.0 * h)
    };
    [(a[0] - b[0]) / div, (a[1] - b[1]) / div, (a[2] - b[2]) / div]
}

#[inline]
pub(crate) fn det3(m: [[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// `det(I + grad u)` at every voxel.
pub fn jacobian_determinant(field: &DisplacementField) -> Result<JacobianMap> {
    let grid = *field.grid();
    if grid.dims.iter().any(|&d| d < 2) {
        return Err(Error::InvalidDims {
            dims: grid.dims,
            reason: "Jacobian needs at least 2 voxels per axis".into(),
        });
    }
    let plane = grid.dims[0] * grid.dims[1];
    let mut out = vec![0.0; grid.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(k, slab)| {
        for j in 0..grid.dims[1] {
            for i in 0..grid.dims[0] {
                let dx = axis_derivative(field, [i, j, k], 0);
                let dy = axis_derivative(field, [i, j, k], 1);
                let dz = axis_derivative(field, [i, j, k], 2);
                // row c = component, column a = axis
                let m = [
                    [1.0 + dx[0], dy[0], dz[0]],
                    [dx[1], 1.0 + dy[1], dz[1]],
                    [dx[2], dy[2], 1.0 + dz[2]],
                ];
                slab[i + grid.dims[0] * j] = det3(m);
            }
        }
    });
    JacobianMap::from_grid(grid, out)
}

/// Share of voxels whose determinant is non-positive.
pub fn folding_fraction(jmap: &JacobianMap) -> f64 {
    let folded = jmap.data.iter().filter(|&&d| d <= 0.0).count();
    folded as f64 / jmap.data.len() as f64
}

/// Trilinearly resamples every component onto `target`. Values are in mm
/// and are not rescaled.
pub fn resample_field_to(field: &DisplacementField, target: Grid) -> DisplacementField {
    let plane = target.dims[0] * target.dims[1];
    let mut out = vec![[0.0; 3]; target.len()];
    out.par_chunks_mut(plane).enumerate().for_each(|(k, slab)| {
        for j in 0..target.dims[1] {
            for i in 0..target.dims[0] {
                slab[i + target.dims[0] * j] = field.sample(target.world(i, j, k));
            }
        }
    });
    DisplacementField { grid: target, data: out }
}

/// Geometry of a grid with `new_dims` voxels covering the same physical
/// extent (voxel edge to voxel edge) as `grid`.
pub fn regrid(grid: &Grid, new_dims: [usize; 3]) -> Result<Grid> {
    if new_dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidDims {
            dims: new_dims,
            reason: "target dims must be positive".into(),
        });
    }
    let spacing: [f64; 3] =
        std::array::from_fn(|a| grid.spacing[a] * grid.dims[a] as f64 / new_dims[a] as f64);
    let origin: [f64; 3] =
        std::array::from_fn(|a| grid.origin[a] - 0.5 * grid.spacing[a] + 0.5 * spacing[a]);
    Grid::with_origin(new_dims, spacing, origin)
}

/// Resamples the field to `new_dims`, preserving physical extent.
pub fn resample_field(field: &DisplacementField, new_dims: [usize; 3]) -> Result<DisplacementField> {
    if new_dims == field.dims() {
        return Ok(field.clone());
    }
    Ok(resample_field_to(field, regrid(field.grid(), new_dims)?))
}

pub fn load_field(path: impl AsRef<Path>) -> Result<DisplacementField> {
    let (header, values) = read_raw(path.as_ref(), 3)?;
    let data = values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    DisplacementField::from_grid(header.grid()?, data)
}

/// Writes the field as interleaved `f32` triplets plus sidecar.
pub fn save_field(field: &DisplacementField, path: impl AsRef<Path>) -> Result<()> {
    write_raw(
        path.as_ref(),
        &VolumeHeader::for_grid(field.grid(), Some(3)),
        field.as_flat(),
    )
}
