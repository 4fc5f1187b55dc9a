//! Dense displacement fields and spatial transformation.
//!
//! A field stores one displacement vector per voxel in voxel units. The
//! warped sample location of voxel `p` is `p + u(p)`. Sampling is trilinear
//! with clamp-to-edge extension outside the grid.

use crate::error::{check_dims, Error, Result};
use crate::filters::central_diff;
use crate::volume::{Dims, LabelMask, Volume3D};

/// Per-voxel 3-vectors stored as three planar x-fastest components.
///
/// Used both for displacement fields and for gradients with respect to them.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    dims: Dims,
    comps: [Vec<f64>; 3],
}

/// The optimization variable of a registration: `p -> p + u(p)`.
pub type DisplacementField = VectorField;

impl VectorField {
    pub fn new(dims: Dims, comps: [Vec<f64>; 3]) -> Result<Self> {
        for c in &comps {
            if c.len() != dims.len() {
                return Err(Error::Format(format!(
                    "field component of length {} does not match {dims}",
                    c.len()
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data("non-finite displacement component".into()));
            }
        }
        Ok(VectorField { dims, comps })
    }

    pub fn zeros(dims: Dims) -> Self {
        VectorField {
            dims,
            comps: [vec![0.0; dims.len()], vec![0.0; dims.len()], vec![0.0; dims.len()]],
        }
    }

    pub fn constant(dims: Dims, v: [f64; 3]) -> Self {
        VectorField {
            dims,
            comps: [vec![v[0]; dims.len()], vec![v[1]; dims.len()], vec![v[2]; dims.len()]],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> [f64; 3]) -> Self {
        let mut out = VectorField::zeros(dims);
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    let i = dims.index(x, y, z);
                    let v = f(x, y, z);
                    for c in 0..3 {
                        out.comps[c][i] = v[c];
                    }
                }
            }
        }
        out
    }

    pub(crate) fn from_parts(dims: Dims, comps: [Vec<f64>; 3]) -> Self {
        debug_assert!(comps.iter().all(|c| c.len() == dims.len()));
        VectorField { dims, comps }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn component(&self, c: usize) -> &[f64] {
        &self.comps[c]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.comps[c]
    }

    pub fn components(&self) -> &[Vec<f64>; 3] {
        &self.comps
    }

    pub fn into_components(self) -> [Vec<f64>; 3] {
        self.comps
    }

    #[inline]
    pub fn at(&self, i: usize) -> [f64; 3] {
        [self.comps[0][i], self.comps[1][i], self.comps[2][i]]
    }

    pub fn set(&mut self, i: usize, v: [f64; 3]) {
        for c in 0..3 {
            self.comps[c][i] = v[c];
        }
    }

    pub fn is_finite(&self) -> bool {
        self.comps.iter().flatten().all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> VectorField {
        VectorField {
            dims: self.dims,
            comps: self.comps.clone().map(|c| c.into_iter().map(|v| v * s).collect()),
        }
    }

    pub fn add(&self, other: &VectorField) -> Result<VectorField> {
        check_dims(self.dims, other.dims)?;
        let mut out = self.clone();
        for c in 0..3 {
            for (a, b) in out.comps[c].iter_mut().zip(&other.comps[c]) {
                *a += b;
            }
        }
        Ok(out)
    }

    /// Largest absolute component over the whole field.
    pub fn max_abs(&self) -> f64 {
        self.comps.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Mean Euclidean vector length.
    pub fn mean_norm(&self) -> f64 {
        let n = self.dims.len();
        (0..n).map(|i| norm3(self.at(i))).sum::<f64>() / n as f64
    }

    /// Mean vector over voxels where `mask` is non-zero.
    pub fn mean_vector(&self, mask: &LabelMask) -> Result<[f64; 3]> {
        check_dims(self.dims, mask.dims())?;
        let mut acc = [0.0; 3];
        let mut count = 0usize;
        for (i, &l) in mask.data().iter().enumerate() {
            if l != 0 {
                let v = self.at(i);
                for c in 0..3 {
                    acc[c] += v[c];
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Config("empty averaging region".into()));
        }
        Ok(acc.map(|a| a / count as f64))
    }

    /// Sum of squared components, i.e. the squared Frobenius norm.
    pub fn norm_sq(&self) -> f64 {
        self.comps.iter().flatten().map(|v| v * v).sum()
    }
}

#[inline]
pub(crate) fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Lower cell index, fractional offset and whether the coordinate lies inside
/// the closed interval `[0, n - 1]` (outside, clamping makes the sample flat).
#[inline]
fn axis_cell(c: f64, n: usize) -> (usize, usize, f64, bool) {
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    let max = (n - 1) as f64;
    let inside = (0.0..=max).contains(&c);
    let cc = c.clamp(0.0, max);
    let i0 = (cc.floor() as usize).min(n - 2);
    (i0, i0 + 1, cc - i0 as f64, inside)
}

/// Trilinear sample of a scalar grid at a continuous voxel position.
#[inline]
pub fn sample(data: &[f64], dims: Dims, p: [f64; 3]) -> f64 {
    sample_with_grad(data, dims, p).0
}

/// Trilinear sample and its derivative with respect to the sample position.
///
/// At integer coordinates the derivative is that of the cell above (or the
/// last cell at the upper edge); outside the grid it is zero.
#[inline]
pub fn sample_with_grad(data: &[f64], dims: Dims, p: [f64; 3]) -> (f64, [f64; 3]) {
    let (x0, x1, tx, ix) = axis_cell(p[0], dims.nx);
    let (y0, y1, ty, iy) = axis_cell(p[1], dims.ny);
    let (z0, z1, tz, iz) = axis_cell(p[2], dims.nz);
    let v = |x: usize, y: usize, z: usize| data[dims.index(x, y, z)];
    let c000 = v(x0, y0, z0);
    let c100 = v(x1, y0, z0);
    let c010 = v(x0, y1, z0);
    let c110 = v(x1, y1, z0);
    let c001 = v(x0, y0, z1);
    let c101 = v(x1, y0, z1);
    let c011 = v(x0, y1, z1);
    let c111 = v(x1, y1, z1);

    let c00 = c000 + tx * (c100 - c000);
    let c10 = c010 + tx * (c110 - c010);
    let c01 = c001 + tx * (c101 - c001);
    let c11 = c011 + tx * (c111 - c011);
    let c0 = c00 + ty * (c10 - c00);
    let c1 = c01 + ty * (c11 - c01);
    let value = c0 + tz * (c1 - c0);

    let dx = if ix {
        let d00 = c100 - c000;
        let d10 = c110 - c010;
        let d01 = c101 - c001;
        let d11 = c111 - c011;
        let d0 = d00 + ty * (d10 - d00);
        let d1 = d01 + ty * (d11 - d01);
        d0 + tz * (d1 - d0)
    } else {
        0.0
    };
    let dy = if iy {
        let d0 = c10 - c00;
        let d1 = c11 - c01;
        d0 + tz * (d1 - d0)
    } else {
        0.0
    };
    let dz = if iz { c1 - c0 } else { 0.0 };
    (value, [dx, dy, dz])
}

#[inline]
fn position(dims: Dims, i: usize, u: [f64; 3]) -> [f64; 3] {
    let (x, y, z) = dims.coords(i);
    [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]]
}

/// Resamples `vol` through `phi`: `out[p] = vol(p + u(p))`.
pub fn warp(vol: &Volume3D, phi: &DisplacementField) -> Result<Volume3D> {
    check_dims(vol.dims(), phi.dims())?;
    let dims = vol.dims();
    let data = (0..dims.len())
        .map(|i| sample(vol.data(), dims, position(dims, i, phi.at(i))))
        .collect();
    Ok(vol.same_grid(data))
}

/// Resamples `vol` through `phi` and also returns the spatial derivative of
/// each sample with respect to its own displacement vector.
pub(crate) fn warp_with_jacobian(
    vol: &Volume3D,
    phi: &DisplacementField,
) -> Result<(Volume3D, VectorField)> {
    check_dims(vol.dims(), phi.dims())?;
    let dims = vol.dims();
    let mut data = Vec::with_capacity(dims.len());
    let mut jac = VectorField::zeros(dims);
    for i in 0..dims.len() {
        let (v, g) = sample_with_grad(vol.data(), dims, position(dims, i, phi.at(i)));
        data.push(v);
        jac.set(i, g);
    }
    Ok((vol.same_grid(data), jac))
}

/// Adjoint of [`warp`] with respect to the field: given `dL/dout` per voxel,
/// returns `dL/du` per voxel.
pub fn warp_gradient(
    vol: &Volume3D,
    phi: &DisplacementField,
    upstream: &[f64],
) -> Result<VectorField> {
    check_dims(vol.dims(), phi.dims())?;
    let dims = vol.dims();
    if upstream.len() != dims.len() {
        return Err(Error::Format(format!(
            "upstream gradient of length {} does not match {dims}",
            upstream.len()
        )));
    }
    let mut out = VectorField::zeros(dims);
    for (i, &g) in upstream.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let (_, d) = sample_with_grad(vol.data(), dims, position(dims, i, phi.at(i)));
        out.set(i, [g * d[0], g * d[1], g * d[2]]);
    }
    Ok(out)
}

/// Nearest-neighbour resampling of a label mask (labels are categorical).
pub fn warp_labels(mask: &LabelMask, phi: &DisplacementField) -> Result<LabelMask> {
    check_dims(mask.dims(), phi.dims())?;
    let dims = mask.dims();
    let round = |c: f64, n: usize| c.round().clamp(0.0, (n - 1) as f64) as usize;
    let data = (0..dims.len())
        .map(|i| {
            let p = position(dims, i, phi.at(i));
            mask.get(round(p[0], dims.nx), round(p[1], dims.ny), round(p[2], dims.nz))
        })
        .collect();
    LabelMask::new(dims, data)
}

/// `sum_p ||grad u(p)||^2` with forward differences (zero on the last plane
/// along each axis), and its gradient with respect to `u`.
pub fn smoothness_loss(phi: &DisplacementField) -> (f64, VectorField) {
    let dims = phi.dims();
    let mut value = 0.0;
    let mut grad = VectorField::zeros(dims);
    for c in 0..3 {
        let u = &phi.comps[c];
        let g = &mut grad.comps[c];
        for axis in 0..3 {
            let n = dims.axis(axis);
            let s = dims.stride(axis);
            for i in 0..dims.len() {
                let coord = match axis {
                    0 => i % dims.nx,
                    1 => (i / dims.nx) % dims.ny,
                    _ => i / (dims.nx * dims.ny),
                };
                if coord + 1 < n {
                    let d = u[i + s] - u[i];
                    value += d * d;
                    g[i + s] += 2.0 * d;
                    g[i] -= 2.0 * d;
                }
            }
        }
    }
    (value, grad)
}

/// Summary of `det(I + grad u)` over the grid.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct JacobianStats {
    pub min_det: f64,
    pub mean_det: f64,
    pub fraction_nonpositive: f64,
}

/// Per-voxel Jacobian determinants of `p -> p + u(p)`, using central
/// differences inside and one-sided differences on the boundary planes.
pub fn jacobian_determinants(phi: &DisplacementField) -> Vec<f64> {
    let dims = phi.dims();
    // d[c][a] = d u_c / d x_a
    let d: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|c| (0..3).map(|a| central_diff(&phi.comps[c], dims, a)).collect())
        .collect();
    (0..dims.len())
        .map(|i| {
            let m = |r: usize, a: usize| d[r][a][i] + if r == a { 1.0 } else { 0.0 };
            m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1))
                - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
                + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0))
        })
        .collect()
}

pub fn jacobian_stats(phi: &DisplacementField) -> JacobianStats {
    let dets = jacobian_determinants(phi);
    let n = dets.len() as f64;
    JacobianStats {
        min_det: dets.iter().copied().fold(f64::INFINITY, f64::min),
        mean_det: dets.iter().sum::<f64>() / n,
        fraction_nonpositive: dets.iter().filter(|&&d| d <= 0.0).count() as f64 / n,
    }
}

/// Field `r` with `p + r(p) = q + outer(q)` where `q = p + inner(p)`.
pub fn compose(outer: &DisplacementField, inner: &DisplacementField) -> Result<DisplacementField> {
    check_dims(outer.dims(), inner.dims())?;
    let dims = outer.dims();
    let mut out = inner.clone();
    for i in 0..dims.len() {
        let q = position(dims, i, inner.at(i));
        for c in 0..3 {
            out.comps[c][i] += sample(&outer.comps[c], dims, q);
        }
    }
    Ok(out)
}

/// Trilinear upsampling to a finer grid of the same physical extent.
///
/// Voxel centres are aligned (`x_old = (x_new + 0.5) / r - 0.5`) and each
/// component is multiplied by its axis ratio `r = new / old`, since
/// displacements are measured in voxels of the grid they live on.
pub fn upsample_field(phi: &DisplacementField, new_dims: Dims) -> Result<DisplacementField> {
    let old = phi.dims();
    if new_dims.nx < old.nx || new_dims.ny < old.ny || new_dims.nz < old.nz {
        return Err(Error::Shape {
            expected: old,
            actual: new_dims,
        });
    }
    if new_dims == old {
        return Ok(phi.clone());
    }
    let ratio = [0, 1, 2].map(|a| new_dims.axis(a) as f64 / old.axis(a) as f64);
    let mut out = VectorField::zeros(new_dims);
    for i in 0..new_dims.len() {
        let (x, y, z) = new_dims.coords(i);
        let q = [
            (x as f64 + 0.5) / ratio[0] - 0.5,
            (y as f64 + 0.5) / ratio[1] - 0.5,
            (z as f64 + 0.5) / ratio[2] - 0.5,
        ];
        for c in 0..3 {
            out.comps[c][i] = ratio[c] * sample(&phi.comps[c], old, q);
        }
    }
    Ok(out)
}
