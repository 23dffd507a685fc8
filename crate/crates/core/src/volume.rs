//! Dense 3D scalar volumes: construction, preprocessing and raw file I/O.
//!
//! Voxel data is stored x-fastest (then y, then z). Intensities are held as
//! `f64` in memory and stored on disk as little-endian `f32` with a JSON
//! sidecar header next to the payload (`<name>.vol` + `<name>.vol.json`).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of a regular voxel grid in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Self::with_origin(dims, spacing, [0.0; 3])
    }

    pub fn with_origin(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidDims {
                dims,
                reason: "all dimensions must be positive".into(),
            });
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidSpacing(spacing));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Config(format!("origin {origin:?} is not finite")));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Inverse of [`Grid::index`].
    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let r = idx / self.dims[0];
        [i, r % self.dims[1], r / self.dims[1]]
    }

    /// World position (mm) of a voxel centre.
    #[inline]
    pub fn world(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    /// Continuous voxel coordinates of a world point (not clamped).
    #[inline]
    pub fn to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }
}

/// A dense 3D scalar image.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    grid: Grid,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        Self::from_grid(Grid::new(dims, spacing)?, data)
    }

    pub fn from_grid(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                found: data.len(),
            });
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        Self {
            grid,
            data: vec![0.0; grid.len()],
        }
    }

    /// Builds a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..grid.dims[2] {
            for j in 0..grid.dims[1] {
                for i in 0..grid.dims[0] {
                    data.push(f(i, j, k));
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

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.grid.origin
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Applies `f` to every intensity.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume {
        Volume {
            grid: self.grid,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    /// Population mean and standard deviation, summed in linear order.
    pub fn moments(&self) -> (f64, f64) {
        let n = self.data.len() as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    }
}

/// Sidecar header shared by volume and field files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
    pub dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
}

pub const DTYPE_F32LE: &str = "f32le";

impl VolumeHeader {
    pub fn for_grid(grid: &Grid, channels: Option<usize>) -> Self {
        Self {
            dims: grid.dims,
            spacing: grid.spacing,
            origin: grid.origin,
            dtype: DTYPE_F32LE.to_string(),
            channels,
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::with_origin(self.dims, self.spacing, self.origin)
    }
}

/// Path of the JSON sidecar belonging to a payload file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `values` as little-endian f32 plus its sidecar header.
pub(crate) fn write_raw(path: &Path, header: &VolumeHeader, values: &[f64]) -> Result<()> {
    if let Some(index) = values.iter().position(|v| !v.is_finite() || !(v.abs() <= f32::MAX as f64)) {
        return Err(Error::NonFinite { index });
    }
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(header).expect("header serializes");
    let mut f = fs::File::create(&side).map_err(|e| Error::io(&side, e))?;
    f.write_all(json.as_bytes())
        .and_then(|_| f.write_all(b"\n"))
        .map_err(|e| Error::io(&side, e))
}

/// Reads a payload + sidecar pair, checking the declared channel count.
pub(crate) fn read_raw(path: &Path, channels: usize) -> Result<(VolumeHeader, Vec<f64>)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| Error::Header {
        path: side.clone(),
        reason: e.to_string(),
    })?;
    if header.dtype != DTYPE_F32LE {
        return Err(Error::Header {
            path: side,
            reason: format!("unsupported dtype {:?}", header.dtype),
        });
    }
    let declared = header.channels.unwrap_or(1);
    if declared != channels {
        return Err(Error::Header {
            path: side,
            reason: format!("expected {channels} channel(s), header declares {declared}"),
        });
    }
    let grid = header.grid()?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = grid.len() * channels * 4;
    if bytes.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            found: bytes.len(),
        });
    }
    let mut values = Vec::with_capacity(grid.len() * channels);
    for (index, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::NonFinite { index });
        }
        values.push(v as f64);
    }
    Ok((header, values))
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let (header, data) = read_raw(path.as_ref(), 1)?;
    Volume::from_grid(header.grid()?, data)
}

/// Writes the volume as `f32` payload plus sidecar. Values are narrowed to
/// `f32`, so only `f32`-representable volumes round-trip bit-exactly.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_raw(path.as_ref(), &VolumeHeader::for_grid(v.grid(), None), v.data())
}

/// Cuts a centred sub-volume. When the size difference along an axis is odd
/// the extra voxel is removed from the high-index side.
pub fn center_crop(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    let dims = v.dims();
    if target.iter().any(|&t| t == 0) || (0..3).any(|a| target[a] > dims[a]) {
        return Err(Error::InvalidDims {
            dims: target,
            reason: format!("crop target must be positive and within source dims {dims:?}"),
        });
    }
    let lo: [usize; 3] = std::array::from_fn(|a| (dims[a] - target[a]) / 2);
    let g = v.grid();
    let origin: [f64; 3] = std::array::from_fn(|a| g.origin[a] + lo[a] as f64 * g.spacing[a]);
    let grid = Grid::with_origin(target, g.spacing, origin)?;
    Ok(Volume::from_fn(grid, |i, j, k| {
        v.get(i + lo[0], j + lo[1], k + lo[2])
    }))
}

/// Zero-mean, unit population standard deviation. Constant volumes map to
/// all zeros.
pub fn zscore_normalize(v: &Volume) -> Volume {
    let (mean, std) = v.moments();
    if !(std > 0.0) || !std.is_finite() {
        return v.map(|_| 0.0);
    }
    // Rounding can leave a volume with a tiny spread after centring; treat
    // spreads at the level of f64 noise relative to the mean as constant.
    if std <= mean.abs() * 1e-14 {
        return v.map(|_| 0.0);
    }
    v.map(|x| (x - mean) / std)
}

/// Slice orientation for image export.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

/// Extracts a 2D slice as (width, height, row-major values).
///
/// For `Z` the image is x by y, for `Y` x by z, and for `X` y by z.
pub fn slice_values(
    grid: &Grid,
    data: &[f64],
    axis: Axis,
    index: usize,
) -> Result<(usize, usize, Vec<f64>)> {
    let d = grid.dims;
    let len = d[axis.index()];
    if index >= len {
        return Err(Error::IndexOutOfRange { index, len });
    }
    let (w, h) = match axis {
        Axis::X => (d[1], d[2]),
        Axis::Y => (d[0], d[2]),
        Axis::Z => (d[0], d[1]),
    };
    let mut out = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let idx = match axis {
                Axis::X => grid.index(index, c, r),
                Axis::Y => grid.index(c, index, r),
                Axis::Z => grid.index(c, r, index),
            };
            out.push(data[idx]);
        }
    }
    Ok((w, h, out))
}

/// Linear rescale of `values` from their [min, max] to 8-bit. Constant input
/// maps to 128.
pub fn rescale_to_u8(values: &[f64]) -> Vec<u8> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Writes a binary PGM (P5, maxval 255).
pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    assert_eq!(pixels.len(), width * height);
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes one slice of `v` as an 8-bit PGM, rescaled per slice.
pub fn export_slice(v: &Volume, axis: Axis, index: usize, path: impl AsRef<Path>) -> Result<()> {
    let (w, h, values) = slice_values(v.grid(), v.data(), axis, index)?;
    write_pgm(path, w, h, &rescale_to_u8(&values))
}
