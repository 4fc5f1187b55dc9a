//! Ground-truthed synthetic inputs: smooth random deformations, phantoms
//! with labelled inclusions, and non-monotone modality remaps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::field::{norm3, warp, warp_labels, DisplacementField, VectorField};
use crate::filters::gaussian_approx;
use crate::volume::{normalize_intensity, Dims, LabelMask, Volume3D};

/// Inclusions placed by [`make_pair`].
pub const PAIR_BLOBS: usize = 3;

/// Affine plus elastic deformation parameters.
///
/// With `randomize_affine` the shift, rotation and scale are drawn uniformly
/// from `[-shift, shift]`, `[-rotation_deg, rotation_deg]` and `scale_range`;
/// otherwise they are used as given (scale = midpoint of the range).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticDeformSpec {
    pub shift: [f64; 3],
    /// Rotations about x, y, z in degrees, applied in that order.
    pub rotation_deg: [f64; 3],
    pub scale_range: (f64, f64),
    /// Largest component magnitude of the elastic part, in voxels.
    pub elastic_amplitude: f64,
    pub elastic_sigma: f64,
    pub randomize_affine: bool,
    pub seed: u64,
}

impl Default for SyntheticDeformSpec {
    fn default() -> Self {
        SyntheticDeformSpec {
            shift: [0.0; 3],
            rotation_deg: [0.0; 3],
            scale_range: (1.0, 1.0),
            elastic_amplitude: 0.0,
            elastic_sigma: 4.0,
            randomize_affine: false,
            seed: 0,
        }
    }
}

impl SyntheticDeformSpec {
    /// Random deformations of up to about 4 voxels at 32^3.
    pub fn desk(seed: u64) -> Self {
        SyntheticDeformSpec {
            shift: [2.0; 3],
            rotation_deg: [4.0; 3],
            scale_range: (0.96, 1.04),
            elastic_amplitude: 1.5,
            elastic_sigma: 4.0,
            randomize_affine: true,
            seed,
        }
    }

    pub fn shift_only(shift: [f64; 3]) -> Self {
        SyntheticDeformSpec {
            shift,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("scale range ({lo}, {hi}) must satisfy 0 < lo <= hi")));
        }
        if !(self.elastic_amplitude >= 0.0) || !(self.elastic_sigma > 0.0) {
            return Err(Error::Config("elastic amplitude must be >= 0 and sigma > 0".into()));
        }
        if !self.shift.iter().chain(&self.rotation_deg).all(|v| v.is_finite()) {
            return Err(Error::Config("shift and rotation must be finite".into()));
        }
        Ok(())
    }
}

/// Piecewise-linear intensity remap followed by blur and additive noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModalityRemapSpec {
    /// `(input, output)` pairs; inputs increase strictly from 0 to 1.
    pub knots: Vec<(f64, f64)>,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    pub seed: u64,
}

impl Default for ModalityRemapSpec {
    fn default() -> Self {
        ModalityRemapSpec {
            knots: vec![(0.0, 0.2), (0.4, 0.9), (1.0, 0.1)],
            noise_sigma: 0.02,
            blur_sigma: 0.0,
            seed: 0,
        }
    }
}

impl ModalityRemapSpec {
    pub fn identity() -> Self {
        ModalityRemapSpec {
            knots: vec![(0.0, 0.0), (1.0, 1.0)],
            noise_sigma: 0.0,
            blur_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.knots;
        if k.len() < 2
            || k[0].0 != 0.0
            || k[k.len() - 1].0 != 1.0
            || !k.windows(2).all(|w| w[0].0 < w[1].0)
            || !k.iter().all(|(a, b)| a.is_finite() && b.is_finite())
        {
            return Err(Error::Config(
                "remap knots must increase strictly from input 0 to input 1".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.blur_sigma >= 0.0) {
            return Err(Error::Config("noise and blur sigmas must be >= 0".into()));
        }
        Ok(())
    }

    /// The remap curve alone.
    pub fn apply_curve(&self, v: f64) -> f64 {
        let k = &self.knots;
        let v = v.clamp(0.0, 1.0);
        let j = k.windows(2).position(|w| v <= w[1].0).unwrap_or(k.len() - 2);
        let (a, b) = (k[j], k[j + 1]);
        a.1 + (v - a.0) / (b.0 - a.0) * (b.1 - a.1)
    }
}

fn rotation_matrix(deg: [f64; 3]) -> [[f64; 3]; 3] {
    let [ax, ay, az] = deg.map(f64::to_radians);
    let (sx, cx) = ax.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sz, cz) = az.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        m
    };
    mul(rz, mul(ry, rx))
}

/// Affine part `c + s R (p - c) + t - p` (about the volume centre `c`) plus
/// a smoothed-noise elastic part whose largest component equals the
/// requested amplitude.
pub fn generate_deformation(spec: &SyntheticDeformSpec, dims: Dims) -> Result<DisplacementField> {
    spec.validate()?;
    if dims.min_extent() < 8 {
        return Err(Error::Config(format!("deformations need >= 8 voxels per axis, got {dims}")));
    }
    if spec.elastic_amplitude > dims.min_extent() as f64 / 4.0 {
        return Err(Error::Config(format!(
            "elastic amplitude {} exceeds a quarter of {dims}",
            spec.elastic_amplitude
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (shift, rot, scale) = if spec.randomize_affine {
        let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
        let shift = spec.shift.map(&mut sym);
        let rot = spec.rotation_deg.map(&mut sym);
        let (lo, hi) = spec.scale_range;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        (shift, rot, scale)
    } else {
        let (lo, hi) = spec.scale_range;
        (spec.shift, spec.rotation_deg, 0.5 * (lo + hi))
    };
    let m = rotation_matrix(rot);
    let c = [0, 1, 2].map(|a| (dims.axis(a) as f64 - 1.0) / 2.0);
    let mut field = VectorField::from_fn(dims, |x, y, z| {
        let d = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
        std::array::from_fn(|i| {
            let rotated: f64 = (0..3).map(|k| m[i][k] * d[k]).sum();
            scale * rotated - d[i] + shift[i]
        })
    });

    if spec.elastic_amplitude > 0.0 {
        let noise: [Vec<f64>; 3] = std::array::from_fn(|_| {
            let white: Vec<f64> = (0..dims.len()).map(|_| rng.sample(StandardNormal)).collect();
            gaussian_approx(&white, dims, spec.elastic_sigma)
        });
        let peak = noise
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > 0.0 {
            let k = spec.elastic_amplitude / peak;
            for (c, comp) in noise.iter().enumerate() {
                for (u, e) in field.component_mut(c).iter_mut().zip(comp) {
                    *u += k * e;
                }
            }
        }
    }
    Ok(field)
}

/// An axis-aligned ellipsoidal inclusion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    /// Added to the background inside the blob.
    pub offset: f64,
}

impl Blob {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    pub fn analytic_volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.radii.iter().product::<f64>()
    }
}

/// Inclusions of [`make_phantom`]. The first is centred in the volume.
pub fn phantom_blobs(dims: Dims, n_blobs: usize, seed: u64) -> Vec<Blob> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_b10b);
    let ext = [0, 1, 2].map(|a| dims.axis(a) as f64);
    (0..n_blobs)
        .map(|j| {
            let radii = ext.map(|n| rng.random_range(n / 7.0..n / 4.5));
            let center = if j == 0 {
                ext.map(|n| (n - 1.0) / 2.0)
            } else {
                std::array::from_fn(|a| rng.random_range(radii[a] + 1.0..ext[a] - 2.0 - radii[a]))
            };
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            Blob {
                center,
                radii,
                offset: BLOB_OFFSET * sign * (1.0 + 0.5 * (j / 2) as f64),
            }
        })
        .collect()
}

const BLOB_OFFSET: f64 = 0.1;
const SHELL_WAVELENGTH: f64 = 18.0;
const SHELL_CENTER_DISTANCE: f64 = 0.8;
const WAVE_WEIGHT: f64 = 0.08;
const WAVE_CYCLES: f64 = 1.0;
const TEXTURE_CYCLES: f64 = 4.5;
const TEXTURE_STRENGTH: f64 = 0.45;
const TEXTURE_FADE: f64 = 0.25;
/// Intensity where the default remap folds; texture fades out near it.
const TEXTURE_PIVOT: f64 = 0.4;

/// Plane waves `(frequency, phase, amplitude)`; amplitudes are 1 unless drawn.
fn random_waves(
    rng: &mut ChaCha8Rng,
    dims: Dims,
    n: usize,
    max_cycles: f64,
    draw_amplitude: bool,
) -> Vec<([f64; 3], f64, f64)> {
    (0..n)
        .map(|_| {
            let cycles: [f64; 3] = std::array::from_fn(|_| rng.random_range(-max_cycles..max_cycles));
            let freq = [0, 1, 2].map(|a| TAU * cycles[a] / dims.axis(a) as f64);
            let phase = rng.random_range(0.0..TAU);
            let amp = if draw_amplitude { rng.random_range(0.5..1.0) } else { 1.0 };
            (freq, phase, amp)
        })
        .collect()
}

fn mean_wave(waves: &[([f64; 3], f64, f64)], p: [f64; 3]) -> f64 {
    waves
        .iter()
        .map(|(f, ph, a)| a * (f[0] * p[0] + f[1] * p[1] + f[2] * p[2] + ph).sin())
        .sum::<f64>()
        / waves.len() as f64
}

/// Smooth layered anatomy normalized to `[0, 1]`.
///
/// The background is a set of concentric ellipsoidal shells whose centre lies
/// outside the volume, mixed with weak low-frequency waves. Fine texture is
/// multiplied in away from intensity 0.4, and each ellipsoidal inclusion adds
/// a small offset. Inclusion `j` is labelled `j + 1`; later inclusions
/// overwrite earlier ones where they overlap.
pub fn make_phantom(dims: Dims, n_blobs: usize, seed: u64) -> Result<(Volume3D, LabelMask)> {
    if dims.min_extent() < 16 {
        return Err(Error::Config(format!("phantoms need >= 16 voxels per axis, got {dims}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves = random_waves(&mut rng, dims, 4, WAVE_CYCLES, true);
    let texture = random_waves(&mut rng, dims, 4, TEXTURE_CYCLES, false);
    let blobs = phantom_blobs(dims, n_blobs, seed);
    let ext = [0, 1, 2].map(|a| dims.axis(a) as f64);
    let dir: [f64; 3] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
    let dn = norm3(dir);
    let dist = SHELL_CENTER_DISTANCE * rng.random_range(0.9..1.1);
    let shell_center: [f64; 3] = std::array::from_fn(|a| ext[a] * (0.5 + dist * dir[a] / dn));
    let semi: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.9..1.1));
    let phase = rng.random_range(0.0..TAU);

    let mut labels = vec![0u32; dims.len()];
    let mut data = vec![0.0; dims.len()];
    for (i, (v, l)) in data.iter_mut().zip(labels.iter_mut()).enumerate() {
        let (x, y, z) = dims.coords(i);
        let p = [x as f64, y as f64, z as f64];
        let rad = norm3(std::array::from_fn(|a| (p[a] - shell_center[a]) / semi[a]));
        let shell = (TAU * rad / SHELL_WAVELENGTH + phase).sin();
        let bg = (1.0 - WAVE_WEIGHT) * shell + WAVE_WEIGHT * mean_wave(&waves, p);
        *v = 0.5 + 0.5 * bg;
        let d = *v - TEXTURE_PIVOT;
        let g = (d.abs() / TEXTURE_FADE).min(1.0);
        let g = g * g * (3.0 - 2.0 * g);
        let t = mean_wave(&texture, p);
        *v = TEXTURE_PIVOT + d * (1.0 - TEXTURE_STRENGTH * g * 0.5 * (1.0 + t));
        for (j, b) in blobs.iter().enumerate() {
            if b.contains(p) {
                *v += b.offset;
                *l = j as u32 + 1;
            }
        }
    }
    let vol = normalize_intensity(&Volume3D::new(dims, data)?);
    Ok((vol, LabelMask::new(dims, labels)?))
}

/// Remap, then blur, then seeded Gaussian noise, then clamp to `[0, 1]`.
pub fn remap_modality(vol: &Volume3D, spec: &ModalityRemapSpec) -> Result<Volume3D> {
    spec.validate()?;
    let dims = vol.dims();
    let mut data: Vec<f64> = vol.data().iter().map(|&v| spec.apply_curve(v)).collect();
    if spec.blur_sigma > 0.0 {
        data = gaussian_approx(&data, dims, spec.blur_sigma);
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for v in &mut data {
            let n: f64 = rng.sample(StandardNormal);
            *v += spec.noise_sigma * n;
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(vol.same_grid(data))
}

/// Inverse displacement `v` of `u` by fixed-point iteration
/// `v(q) = -u(q + v(q))`.
pub fn invert_field(u: &DisplacementField, iterations: usize) -> Result<DisplacementField> {
    let dims = u.dims();
    let mut v = u.scaled(-1.0);
    for _ in 0..iterations {
        let mut next = VectorField::zeros(dims);
        for c in 0..3 {
            let comp = Volume3D::new(dims, u.component(c).to_vec())?;
            let sampled = warp(&comp, &v)?;
            for (n, s) in next.component_mut(c).iter_mut().zip(sampled.data()) {
                *n = -s;
            }
        }
        v = next;
    }
    Ok(v)
}

/// A synthetic registration problem.
///
/// `gt` is the registration target: `floating(p + gt(p)) ≈ reference(p)`.
/// `floating_mono` is the same deformed anatomy before the modality remap.
#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub reference: Volume3D,
    pub floating: Volume3D,
    pub floating_mono: Volume3D,
    pub gt: DisplacementField,
    pub mask_reference: LabelMask,
    pub mask_floating: LabelMask,
}

pub fn make_pair(
    dims: Dims,
    deform: &SyntheticDeformSpec,
    remap: &ModalityRemapSpec,
    seed: u64,
) -> Result<SyntheticPair> {
    let (reference, mask_reference) = make_phantom(dims, PAIR_BLOBS, seed)?;
    let gt = generate_deformation(deform, dims)?;
    let inverse = invert_field(&gt, 30)?;
    let floating_mono = warp(&reference, &inverse)?;
    let floating = remap_modality(&floating_mono, remap)?;
    let mask_floating = warp_labels(&mask_reference, &inverse)?;
    Ok(SyntheticPair {
        reference,
        floating,
        floating_mono,
        gt,
        mask_reference,
        mask_floating,
    })
}
