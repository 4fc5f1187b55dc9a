//! Scalar volumes and label masks.
//!
//! All grids use x-fastest linear order: the voxel `(x, y, z)` lives at
//! `x + nx * (y + ny * z)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};

/// Grid extent along x, y and z.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 3]", into = "[usize; 3]")]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    pub const fn cube(n: usize) -> Self {
        Dims::new(n, n, n)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn axis(&self, axis: usize) -> usize {
        self.as_array()[axis]
    }

    pub fn min_extent(&self) -> usize {
        self.nx.min(self.ny).min(self.nz)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.nx;
        let yz = i / self.nx;
        (x, yz % self.ny, yz / self.ny)
    }

    /// Linear stride of one step along `axis`.
    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.nx,
            _ => self.nx * self.ny,
        }
    }
}

impl From<[usize; 3]> for Dims {
    fn from(d: [usize; 3]) -> Self {
        Dims::new(d[0], d[1], d[2])
    }
}

impl From<Dims> for [usize; 3] {
    fn from(d: Dims) -> Self {
        d.as_array()
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.nx, self.ny, self.nz)
    }
}

/// A scalar intensity grid with physical voxel spacing in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: Dims,
    spacing: [f64; 3],
    data: Vec<f64>,
}

impl Volume3D {
    /// Builds a volume with unit spacing, rejecting length mismatches and
    /// non-finite values.
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        Self::with_spacing(dims, [1.0; 3], data)
    }

    pub fn with_spacing(dims: Dims, spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Format(format!("volume dims {dims} must be positive")));
        }
        if data.len() != dims.len() {
            return Err(Error::Format(format!(
                "volume {dims} needs {} values, got {}",
                dims.len(),
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite intensity at voxel {i}")));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Format(format!("invalid spacing {spacing:?}")));
        }
        Ok(Volume3D {
            dims,
            spacing,
            data,
        })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        assert!(value.is_finite());
        Volume3D {
            dims,
            spacing: [1.0; 3],
            data: vec![value; dims.len()],
        }
    }

    /// Evaluates `f(x, y, z)` at every voxel. Panics if `f` is not finite.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    let v = f(x, y, z);
                    assert!(v.is_finite(), "non-finite value at ({x}, {y}, {z})");
                    data.push(v);
                }
            }
        }
        Volume3D {
            dims,
            spacing: [1.0; 3],
            data,
        }
    }

    /// Internal constructor for kernels that guarantee finiteness.
    pub(crate) fn from_parts(dims: Dims, spacing: [f64; 3], data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), dims.len());
        debug_assert!(data.iter().all(|v| v.is_finite()));
        Volume3D {
            dims,
            spacing,
            data,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn set_spacing(&mut self, spacing: [f64; 3]) {
        self.spacing = spacing;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Applies `f` per voxel, keeping dims and spacing.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Volume3D> {
        Volume3D::with_spacing(
            self.dims,
            self.spacing,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub(crate) fn same_grid(&self, data: Vec<f64>) -> Volume3D {
        Volume3D::from_parts(self.dims, self.spacing, data)
    }

    pub fn check_same_dims(&self, other: &Volume3D) -> Result<()> {
        check_dims(self.dims, other.dims)
    }
}

/// Affine rescale to `[0, 1]`. A constant volume maps to all zeros.
pub fn normalize_intensity(vol: &Volume3D) -> Volume3D {
    let (lo, hi) = vol.min_max();
    let range = hi - lo;
    let data = if range > 0.0 {
        vol.data.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; vol.len()]
    };
    vol.same_grid(data)
}

/// Per-voxel integer labels, 0 meaning background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    dims: Dims,
    data: Vec<u32>,
}

impl LabelMask {
    pub fn new(dims: Dims, data: Vec<u32>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Format(format!(
                "mask {dims} needs {} labels, got {}",
                dims.len(),
                data.len()
            )));
        }
        Ok(LabelMask { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        LabelMask {
            dims,
            data: vec![0; dims.len()],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> u32) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    data.push(f(x, y, z));
                }
            }
        }
        LabelMask { dims, data }
    }

    /// Converts an integral-valued volume (e.g. a mask saved as floats).
    pub fn from_volume(vol: &Volume3D) -> Result<Self> {
        let data = vol
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
                    Ok(v as u32)
                } else {
                    Err(Error::Data(format!("label value {v} is not a non-negative integer")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        LabelMask::new(vol.dims(), data)
    }

    pub fn to_volume(&self) -> Volume3D {
        Volume3D::from_parts(
            self.dims,
            [1.0; 3],
            self.data.iter().map(|&l| l as f64).collect(),
        )
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u32 {
        self.data[self.dims.index(x, y, z)]
    }

    /// Sorted distinct non-zero labels.
    pub fn labels(&self) -> Vec<u32> {
        let mut labels: Vec<u32> = self.data.iter().copied().filter(|&l| l != 0).collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }

    pub fn count(&self, label: u32) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }

    /// Binary mask of voxels at least `margin` voxels away from every face.
    pub fn interior(dims: Dims, margin: usize) -> Self {
        LabelMask::from_fn(dims, |x, y, z| {
            let inside = |c: usize, n: usize| c >= margin && c + margin < n;
            u32::from(inside(x, dims.nx) && inside(y, dims.ny) && inside(z, dims.nz))
        })
    }
}
