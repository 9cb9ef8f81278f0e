//! Dense 3D scalar and vector grids.
//!
//! Voxels are stored x-fastest: the linear index of `(x, y, z)` is
//! `x + nx * (y + ny * z)`. Flattening a volume is therefore just reading
//! its data slice. Spacing is one voxel on every axis.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Grid extent along each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        if nx < 2 || ny < 2 || nz < 2 {
            return Err(Error::InvalidDims { nx, ny, nz });
        }
        nx.checked_mul(ny)
            .and_then(|v| v.checked_mul(nz))
            .ok_or_else(|| Error::InvalidConfig(format!("{nx}x{ny}x{nz} overflows")))?;
        Ok(Self { nx, ny, nz })
    }

    pub fn cube(n: usize) -> Result<Self> {
        Self::new(n, n, n)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn slice_len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.nx;
        let r = i / self.nx;
        (x, r % self.ny, r / self.ny)
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn min_axis(&self) -> usize {
        self.nx.min(self.ny).min(self.nz)
    }

    /// Whether the voxel lies strictly inside the grid (not on any face).
    #[inline]
    pub fn is_interior(&self, x: usize, y: usize, z: usize) -> bool {
        x > 0 && y > 0 && z > 0 && x + 1 < self.nx && y + 1 < self.ny && z + 1 < self.nz
    }

    pub fn center(&self) -> [f64; 3] {
        [
            (self.nx - 1) as f64 / 2.0,
            (self.ny - 1) as f64 / 2.0,
            (self.nz - 1) as f64 / 2.0,
        ]
    }

    /// `ShapeMismatch` unless both extents agree.
    pub fn ensure_same(&self, other: &Dims) -> Result<()> {
        if self != other {
            return Err(Error::ShapeMismatch(*self, *other));
        }
        Ok(())
    }
}

/// Scalar volume with 32-bit voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::LengthMismatch {
                expected: dims.len(),
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: Dims, value: f32) -> Self {
        Self {
            dims,
            data: vec![value; dims.len()],
        }
    }

    /// Builds a volume by evaluating `f(x, y, z)` at every voxel.
    pub fn from_fn<F>(dims: Dims, f: F) -> Self
    where
        F: Fn(usize, usize, usize) -> f32 + Sync + Send,
    {
        let mut data = vec![0.0f32; dims.len()];
        par::for_each_chunk_mut(&mut data, dims.slice_len(), |z, slice| {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    slice[x + dims.nx * y] = f(x, y, z);
                }
            }
        });
        Self { dims, data }
    }

    /// Wraps f64 values, rounding each to f32.
    pub(crate) fn from_f64(dims: Dims, values: &[f64]) -> Self {
        Self {
            dims,
            data: values.iter().map(|&v| v as f32).collect(),
        }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        let sum = par::sum_chunks(self.data.len(), 1 << 14, |r| {
            self.data[r].iter().map(|&v| v as f64).sum()
        });
        sum / self.data.len() as f64
    }

    pub fn map<F: Fn(f32) -> f32 + Sync + Send>(&self, f: F) -> Self {
        let mut data = self.data.clone();
        par::for_each_chunk_mut(&mut data, self.dims.slice_len(), |_, c| {
            c.iter_mut().for_each(|v| *v = f(*v))
        });
        Self {
            dims: self.dims,
            data,
        }
    }
}

/// Per-voxel 3-vectors in voxel units, same index order as [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    dims: Dims,
    data: Vec<[f64; 3]>,
}

impl VectorField {
    pub fn new(dims: Dims, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::LengthMismatch {
                expected: dims.len(),
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            data: vec![[0.0; 3]; dims.len()],
        }
    }

    pub fn constant(dims: Dims, value: [f64; 3]) -> Self {
        Self {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_fn<F>(dims: Dims, f: F) -> Self
    where
        F: Fn(usize, usize, usize) -> [f64; 3] + Sync + Send,
    {
        let mut data = vec![[0.0; 3]; dims.len()];
        par::for_each_chunk_mut(&mut data, dims.slice_len(), |z, slice| {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    slice[x + dims.nx * y] = f(x, y, z);
                }
            }
        });
        Self { dims, data }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.dims
    }

    #[inline]
    pub fn data(&self) -> &[[f64; 3]] {
        &self.data
    }

    #[inline]
    pub(crate) fn data_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        par::for_each_chunk_mut(&mut out.data, self.dims.slice_len(), |_, c| {
            for v in c {
                *v = [v[0] * s, v[1] * s, v[2] * s];
            }
        });
        out
    }

    /// Largest Euclidean vector norm.
    pub fn max_norm(&self) -> f64 {
        self.data.iter().map(|v| norm3(v)).fold(0.0, f64::max)
    }

    /// Mean Euclidean vector norm.
    pub fn mean_norm(&self) -> f64 {
        let sum = par::sum_chunks(self.data.len(), 1 << 14, |r| {
            self.data[r].iter().map(norm3).sum()
        });
        sum / self.data.len() as f64
    }

    /// Extracts one component as a scalar volume (rounded to f32).
    pub fn component(&self, axis: usize) -> Volume {
        Volume {
            dims: self.dims,
            data: self.data.iter().map(|v| v[axis] as f32).collect(),
        }
    }
}

#[inline]
pub(crate) fn norm3(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Rescales intensities linearly onto `[0, 1]`.
pub fn minmax_normalize(v: &Volume) -> Result<Volume> {
    let (lo, hi) = v.min_max();
    if hi <= lo {
        return Err(Error::DegenerateRange(lo as f64));
    }
    let (lo, hi) = (lo as f64, hi as f64);
    let scale = 1.0 / (hi - lo);
    Ok(v.map(|x| ((x as f64 - lo) * scale) as f32))
}

/// Normalized intensities in f64, as used for mixture fitting.
pub(crate) fn minmax_normalized_f64(v: &Volume) -> Result<Vec<f64>> {
    let (lo, hi) = v.min_max();
    if hi <= lo {
        return Err(Error::DegenerateRange(lo as f64));
    }
    let (lo, hi) = (lo as f64, hi as f64);
    let scale = 1.0 / (hi - lo);
    Ok(v.data.iter().map(|&x| (x as f64 - lo) * scale).collect())
}

/// Interpolation weights for one axis: lower lattice index, fractional
/// offset, and whether the derivative along this axis is live (the point was
/// not clamped).
#[inline]
fn axis_cell(p: f64, n: usize) -> (usize, f64, bool) {
    let max = (n - 1) as f64;
    let live = (0.0..=max).contains(&p);
    let q = p.clamp(0.0, max);
    let i0 = (q.floor() as usize).min(n - 2);
    (i0, q - i0 as f64, live)
}

/// The eight corners of a trilinear interpolation cell with their weights.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
}

/// A [`Stencil`] plus the weights of the partial derivatives with respect to
/// the sample point.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GradStencil {
    pub idx: [usize; 8],
    pub w: [f64; 8],
    pub dw: [[f64; 8]; 3],
}

impl Stencil {
    #[inline]
    pub fn at(dims: Dims, p: [f64; 3]) -> Self {
        let (x0, tx, _) = axis_cell(p[0], dims.nx);
        let (y0, ty, _) = axis_cell(p[1], dims.ny);
        let (z0, tz, _) = axis_cell(p[2], dims.nz);
        let base = dims.index(x0, y0, z0);
        let sx = 1;
        let sy = dims.nx;
        let sz = dims.nx * dims.ny;
        let (ux, uy, uz) = (1.0 - tx, 1.0 - ty, 1.0 - tz);
        Self {
            idx: [
                base,
                base + sx,
                base + sy,
                base + sx + sy,
                base + sz,
                base + sx + sz,
                base + sy + sz,
                base + sx + sy + sz,
            ],
            w: [
                ux * uy * uz,
                tx * uy * uz,
                ux * ty * uz,
                tx * ty * uz,
                ux * uy * tz,
                tx * uy * tz,
                ux * ty * tz,
                tx * ty * tz,
            ],
        }
    }

    #[inline]
    pub fn apply_f32(&self, data: &[f32]) -> f64 {
        let mut acc = 0.0;
        for c in 0..8 {
            acc += self.w[c] * data[self.idx[c]] as f64;
        }
        acc
    }

    #[inline]
    pub fn apply_vec(&self, data: &[[f64; 3]]) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for c in 0..8 {
            let v = &data[self.idx[c]];
            let w = self.w[c];
            acc[0] += w * v[0];
            acc[1] += w * v[1];
            acc[2] += w * v[2];
        }
        acc
    }
}

impl GradStencil {
    #[inline]
    pub fn at(dims: Dims, p: [f64; 3]) -> Self {
        let (x0, tx, lx) = axis_cell(p[0], dims.nx);
        let (y0, ty, ly) = axis_cell(p[1], dims.ny);
        let (z0, tz, lz) = axis_cell(p[2], dims.nz);
        let base = dims.index(x0, y0, z0);
        let sy = dims.nx;
        let sz = dims.nx * dims.ny;
        let (ux, uy, uz) = (1.0 - tx, 1.0 - ty, 1.0 - tz);
        let dx = if lx { 1.0 } else { 0.0 };
        let dy = if ly { 1.0 } else { 0.0 };
        let dz = if lz { 1.0 } else { 0.0 };
        Self {
            idx: [
                base,
                base + 1,
                base + sy,
                base + 1 + sy,
                base + sz,
                base + 1 + sz,
                base + sy + sz,
                base + 1 + sy + sz,
            ],
            w: [
                ux * uy * uz,
                tx * uy * uz,
                ux * ty * uz,
                tx * ty * uz,
                ux * uy * tz,
                tx * uy * tz,
                ux * ty * tz,
                tx * ty * tz,
            ],
            dw: [
                [
                    -dx * uy * uz,
                    dx * uy * uz,
                    -dx * ty * uz,
                    dx * ty * uz,
                    -dx * uy * tz,
                    dx * uy * tz,
                    -dx * ty * tz,
                    dx * ty * tz,
                ],
                [
                    -dy * ux * uz,
                    -dy * tx * uz,
                    dy * ux * uz,
                    dy * tx * uz,
                    -dy * ux * tz,
                    -dy * tx * tz,
                    dy * ux * tz,
                    dy * tx * tz,
                ],
                [
                    -dz * ux * uy,
                    -dz * tx * uy,
                    -dz * ux * ty,
                    -dz * tx * ty,
                    dz * ux * uy,
                    dz * tx * uy,
                    dz * ux * ty,
                    dz * tx * ty,
                ],
            ],
        }
    }

    /// Interpolated value and its gradient with respect to the sample point.
    #[inline]
    pub fn value_and_grad(&self, data: &[f32]) -> (f64, [f64; 3]) {
        let mut v = 0.0;
        let mut g = [0.0; 3];
        for c in 0..8 {
            let s = data[self.idx[c]] as f64;
            v += self.w[c] * s;
            g[0] += self.dw[0][c] * s;
            g[1] += self.dw[1][c] * s;
            g[2] += self.dw[2][c] * s;
        }
        (v, g)
    }
}

/// Trilinear interpolation at a continuous voxel coordinate. Coordinates
/// outside `[0, n - 1]` are clamped to the border first.
pub fn trilinear_sample(v: &Volume, p: [f64; 3]) -> f64 {
    Stencil::at(v.dims, p).apply_f32(&v.data)
}

/// Trilinear interpolation of a vector field (clamped borders).
pub fn trilinear_sample_vec(f: &VectorField, p: [f64; 3]) -> [f64; 3] {
    Stencil::at(f.dims, p).apply_vec(&f.data)
}

fn half(n: usize) -> usize {
    n.div_ceil(2)
}

/// Halves every axis (rounding up) by averaging 2x2x2 blocks; partial blocks
/// at odd edges average the voxels they have.
pub fn downsample(v: &Volume) -> Result<Volume> {
    let d = v.dims;
    if d.min_axis() < 4 {
        return Err(Error::TooSmall(format!(
            "downsampling needs at least 4 voxels per axis, got {d:?}"
        )));
    }
    let out = Dims::new(half(d.nx), half(d.ny), half(d.nz))?;
    Ok(Volume::from_fn(out, |x, y, z| {
        let mut sum = 0.0f64;
        let mut count = 0u32;
        for zz in 2 * z..(2 * z + 2).min(d.nz) {
            for yy in 2 * y..(2 * y + 2).min(d.ny) {
                for xx in 2 * x..(2 * x + 2).min(d.nx) {
                    sum += v.get(xx, yy, zz) as f64;
                    count += 1;
                }
            }
        }
        (sum / count as f64) as f32
    }))
}

/// Resamples a displacement field onto a finer lattice.
///
/// Voxel centres are aligned (cell-centred geometry matching [`downsample`]),
/// and vectors are scaled by the per-axis size ratio because displacements
/// are measured in voxels of their own grid.
pub fn upsample_field(f: &VectorField, target: Dims) -> Result<VectorField> {
    let s = f.dims;
    if target.nx < s.nx || target.ny < s.ny || target.nz < s.nz {
        return Err(Error::ShapeMismatch(s, target));
    }
    let ratio = [
        target.nx as f64 / s.nx as f64,
        target.ny as f64 / s.ny as f64,
        target.nz as f64 / s.nz as f64,
    ];
    Ok(VectorField::from_fn(target, |x, y, z| {
        let p = [
            (x as f64 + 0.5) / ratio[0] - 0.5,
            (y as f64 + 0.5) / ratio[1] - 0.5,
            (z as f64 + 0.5) / ratio[2] - 0.5,
        ];
        let v = trilinear_sample_vec(f, p);
        [v[0] * ratio[0], v[1] * ratio[1], v[2] * ratio[2]]
    }))
}
