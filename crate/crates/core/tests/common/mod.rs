//! Naive scalar-loop reference implementations shared by the test targets.
#![allow(dead_code)]

use std::collections::HashMap;

use lgreg::{DisplacementField, Dims, Volume3D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_volume(dims: Dims, seed: u64) -> Volume3D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Volume3D::from_fn(dims, |_, _, _| rng.random())
}

pub fn random_field(dims: Dims, amplitude: f64, seed: u64) -> DisplacementField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DisplacementField::from_fn(dims, |_, _, _| {
        std::array::from_fn(|_| rng.random_range(-amplitude..amplitude))
    })
}

fn extent(d: Dims) -> [usize; 3] {
    [d.nx, d.ny, d.nz]
}

/// Central difference along `axis`, one-sided on the first and last planes.
pub fn naive_diff(v: &Volume3D, p: [usize; 3], axis: usize) -> f64 {
    let n = extent(v.dims())[axis];
    let at = |k: usize| {
        let mut q = p;
        q[axis] = k;
        v.get(q[0], q[1], q[2])
    };
    let k = p[axis];
    if k == 0 {
        at(1) - at(0)
    } else if k == n - 1 {
        at(n - 1) - at(n - 2)
    } else {
        0.5 * (at(k + 1) - at(k - 1))
    }
}

/// Every voxel of the cubic window around `p`, clipped to the grid.
fn window(dims: Dims, p: [usize; 3], radius: usize) -> Vec<[usize; 3]> {
    let e = extent(dims);
    let lo = |a: usize| p[a].saturating_sub(radius);
    let hi = |a: usize| (p[a] + radius).min(e[a] - 1);
    let mut out = Vec::new();
    for z in lo(2)..=hi(2) {
        for y in lo(1)..=hi(1) {
            for x in lo(0)..=hi(0) {
                out.push([x, y, z]);
            }
        }
    }
    out
}

fn all_voxels(dims: Dims) -> Vec<[usize; 3]> {
    window(dims, [0, 0, 0], dims.nx.max(dims.ny).max(dims.nz))
}

pub fn naive_normal(v: &Volume3D, p: [usize; 3], radius: usize, eps: f64) -> [f64; 3] {
    let mut g = [0.0; 3];
    for q in window(v.dims(), p, radius) {
        for (a, ga) in g.iter_mut().enumerate() {
            *ga += naive_diff(v, q, a);
        }
    }
    let m = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
    g.map(|c| c / (m + eps))
}

pub fn naive_lg(r: &Volume3D, f: &Volume3D, window_side: usize, eps: f64) -> f64 {
    all_voxels(r.dims())
        .into_iter()
        .map(|p| {
            let (a, b) = (naive_normal(r, p, window_side / 2, eps), naive_normal(f, p, window_side / 2, eps));
            (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).abs()
        })
        .sum()
}

pub fn naive_lcc(r: &Volume3D, f: &Volume3D, window_side: usize, eps: f64) -> f64 {
    let dims = r.dims();
    all_voxels(dims)
        .into_iter()
        .map(|p| {
            let w = window(dims, p, window_side / 2);
            let n = w.len() as f64;
            let rm = w.iter().map(|q| r.get(q[0], q[1], q[2])).sum::<f64>() / n;
            let fm = w.iter().map(|q| f.get(q[0], q[1], q[2])).sum::<f64>() / n;
            let (mut cross, mut vr, mut vf) = (0.0, 0.0, 0.0);
            for q in &w {
                let a = r.get(q[0], q[1], q[2]) - rm;
                let b = f.get(q[0], q[1], q[2]) - fm;
                cross += a * b;
                vr += a * a;
                vf += b * b;
            }
            cross * cross / (vr * vf + eps)
        })
        .sum()
}

pub fn naive_ngf(r: &Volume3D, f: &Volume3D, eps: f64) -> f64 {
    all_voxels(r.dims())
        .into_iter()
        .map(|p| {
            let (a, b) = (naive_normal(r, p, 0, eps), naive_normal(f, p, 0, eps));
            let d = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
            d * d
        })
        .sum()
}

fn bin(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let b = ((v - lo) / (hi - lo) * bins as f64).floor() as usize;
    b.min(bins - 1)
}

/// Mutual information in nats from explicit joint and marginal counts.
pub fn naive_mi(r: &Volume3D, f: &Volume3D, bins: usize) -> f64 {
    let (rl, rh) = r.min_max();
    let (fl, fh) = f.min_max();
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut mr: HashMap<usize, f64> = HashMap::new();
    let mut mf: HashMap<usize, f64> = HashMap::new();
    let n = r.len() as f64;
    for (&a, &b) in r.data().iter().zip(f.data()) {
        let (i, j) = (bin(a, rl, rh, bins), bin(b, fl, fh, bins));
        *joint.entry((i, j)).or_default() += 1.0 / n;
        *mr.entry(i).or_default() += 1.0 / n;
        *mf.entry(j).or_default() += 1.0 / n;
    }
    joint
        .iter()
        .map(|(&(i, j), &p)| p * (p / (mr[&i] * mf[&j])).ln())
        .sum::<f64>()
        .max(0.0)
}

/// Trilinear interpolation written out as a weighted sum of eight corners,
/// with the sample position clamped into the grid.
pub fn naive_sample(v: &Volume3D, pos: [f64; 3]) -> f64 {
    let e = extent(v.dims());
    let mut lo = [0usize; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        let c = pos[a].clamp(0.0, (e[a] - 1) as f64);
        lo[a] = (c.floor() as usize).min(e[a] - 2);
        t[a] = c - lo[a] as f64;
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let bit = |a: usize| (corner >> a) & 1;
        let w: f64 = (0..3).map(|a| if bit(a) == 1 { t[a] } else { 1.0 - t[a] }).product();
        acc += w * v.get(lo[0] + bit(0), lo[1] + bit(1), lo[2] + bit(2));
    }
    acc
}

pub fn naive_warp(v: &Volume3D, phi: &DisplacementField) -> Vec<f64> {
    let dims = v.dims();
    let mut out = vec![0.0; dims.len()];
    for p in all_voxels(dims) {
        let i = dims.index(p[0], p[1], p[2]);
        let u = phi.at(i);
        out[i] = naive_sample(v, [p[0] as f64 + u[0], p[1] as f64 + u[1], p[2] as f64 + u[2]]);
    }
    out
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// Mean and population standard deviation over the clipped cubic window.
pub fn naive_window_stats(v: &Volume3D, p: [usize; 3], window_side: usize) -> (f64, f64) {
    let w = window(v.dims(), p, window_side / 2);
    let n = w.len() as f64;
    let vals: Vec<f64> = w.iter().map(|q| v.get(q[0], q[1], q[2])).collect();
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn naive_local_gradient(v: &Volume3D, p: [usize; 3], radius: usize) -> [f64; 3] {
    let mut g = [0.0; 3];
    for q in window(v.dims(), p, radius) {
        for (a, ga) in g.iter_mut().enumerate() {
            *ga += naive_diff(v, q, a);
        }
    }
    g
}

/// det(I + Du) with the same differences as the intensity gradient.
pub fn naive_jacobian(phi: &DisplacementField, p: [usize; 3]) -> f64 {
    let comps = phi.components();
    let mut m = [[0.0; 3]; 3];
    for (c, row) in m.iter_mut().enumerate() {
        let v = Volume3D::new(phi.dims(), comps[c].clone()).unwrap();
        for (a, entry) in row.iter_mut().enumerate() {
            *entry = naive_diff(&v, p, a) + if a == c { 1.0 } else { 0.0 };
        }
    }
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}
