//! Separable grid kernels shared by the similarity terms and generators.
//!
//! Everything here operates on raw x-fastest buffers so that scalar
//! volumes and the planar components of vector fields use the same code.

use crate::volume::Dims;

/// Visits every 1D line of the grid along `axis`, passing the linear index
/// of the line's first voxel.
fn for_each_line(dims: Dims, axis: usize, mut f: impl FnMut(usize)) {
    let [nx, ny, nz] = dims.as_array();
    match axis {
        0 => {
            for z in 0..nz {
                for y in 0..ny {
                    f(dims.index(0, y, z));
                }
            }
        }
        1 => {
            for z in 0..nz {
                for x in 0..nx {
                    f(dims.index(x, 0, z));
                }
            }
        }
        _ => {
            for y in 0..ny {
                for x in 0..nx {
                    f(dims.index(x, y, 0));
                }
            }
        }
    }
}

/// Central differences along `axis`; one-sided at the two end planes and
/// zero on axes of length one.
pub fn central_diff(src: &[f64], dims: Dims, axis: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    let n = dims.axis(axis);
    if n < 2 {
        return out;
    }
    let s = dims.stride(axis);
    for_each_line(dims, axis, |start| {
        let at = |i: usize| start + i * s;
        out[at(0)] = src[at(1)] - src[at(0)];
        for i in 1..n - 1 {
            out[at(i)] = 0.5 * (src[at(i + 1)] - src[at(i - 1)]);
        }
        out[at(n - 1)] = src[at(n - 1)] - src[at(n - 2)];
    });
    out
}

/// Transpose of [`central_diff`], accumulated into `out`.
pub fn central_diff_adjoint_add(upstream: &[f64], dims: Dims, axis: usize, out: &mut [f64]) {
    let n = dims.axis(axis);
    if n < 2 {
        return;
    }
    let s = dims.stride(axis);
    for_each_line(dims, axis, |start| {
        let at = |i: usize| start + i * s;
        let g0 = upstream[at(0)];
        out[at(1)] += g0;
        out[at(0)] -= g0;
        for i in 1..n - 1 {
            let g = 0.5 * upstream[at(i)];
            out[at(i + 1)] += g;
            out[at(i - 1)] -= g;
        }
        let gl = upstream[at(n - 1)];
        out[at(n - 1)] += gl;
        out[at(n - 2)] -= gl;
    });
}

/// Sum over the window `[i - radius, i + radius]` along `axis`, truncated at
/// the grid boundary. The operator is symmetric, so it is its own adjoint.
pub fn box_sum_axis(src: &[f64], dims: Dims, axis: usize, radius: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    let n = dims.axis(axis);
    let s = dims.stride(axis);
    let mut line = vec![0.0; n];
    for_each_line(dims, axis, |start| {
        for (i, v) in line.iter_mut().enumerate() {
            *v = src[start + i * s];
        }
        for i in 0..n {
            let lo = i.saturating_sub(radius);
            let hi = (i + radius).min(n - 1);
            out[start + i * s] = line[lo..=hi].iter().sum();
        }
    });
    out
}

/// Truncated cubic box sum of side `2 * radius + 1`.
pub fn box_sum(src: &[f64], dims: Dims, radius: usize) -> Vec<f64> {
    let a = box_sum_axis(src, dims, 0, radius);
    let b = box_sum_axis(&a, dims, 1, radius);
    box_sum_axis(&b, dims, 2, radius)
}

/// Number of voxels inside each truncated cubic window.
pub fn box_count(dims: Dims, radius: usize) -> Vec<f64> {
    let count = |c: usize, n: usize| ((c + radius).min(n - 1) - c.saturating_sub(radius) + 1) as f64;
    let mut out = Vec::with_capacity(dims.len());
    for z in 0..dims.nz {
        let cz = count(z, dims.nz);
        for y in 0..dims.ny {
            let cy = count(y, dims.ny);
            for x in 0..dims.nx {
                out.push(count(x, dims.nx) * cy * cz);
            }
        }
    }
    out
}

fn box_mean_axis(src: &[f64], dims: Dims, axis: usize, radius: usize) -> Vec<f64> {
    let n = dims.axis(axis);
    let s = dims.stride(axis);
    let mut sums = box_sum_axis(src, dims, axis, radius);
    for_each_line(dims, axis, |start| {
        for i in 0..n {
            let w = (i + radius).min(n - 1) - i.saturating_sub(radius) + 1;
            sums[start + i * s] /= w as f64;
        }
    });
    sums
}

/// Box width whose threefold self-convolution has standard deviation
/// closest to `sigma` (variance of a width-w box is (w^2 - 1) / 12).
pub fn box_radius_for_sigma(sigma: f64) -> usize {
    let width = (4.0 * sigma * sigma + 1.0).sqrt();
    (((width - 1.0) / 2.0).round().max(0.0)) as usize
}

/// Gaussian blur approximated by three passes of a truncated box mean.
pub fn gaussian_approx(src: &[f64], dims: Dims, sigma: f64) -> Vec<f64> {
    let radius = box_radius_for_sigma(sigma);
    if sigma <= 0.0 || radius == 0 {
        return src.to_vec();
    }
    let mut cur = src.to_vec();
    for _ in 0..3 {
        for axis in 0..3 {
            cur = box_mean_axis(&cur, dims, axis, radius);
        }
    }
    cur
}
