//! Local-gradient similarity.
//!
//! The local gradient of a volume is the box sum, over an `n^3` window, of
//! its central-difference gradient. Normalized by `||g|| + eps`, the
//! absolute dot product of two such fields is insensitive to contrast
//! polarity, which makes it usable across modalities.

use crate::error::{check_dims, Error, Result};
use crate::field::VectorField;
use crate::filters::{box_sum, central_diff, central_diff_adjoint_add};
use crate::volume::Volume3D;

use super::{window_radius, LossConfig, LossValue};

/// Box-summed central-difference gradient over a cubic `window`.
pub fn local_gradient(vol: &Volume3D, window: usize) -> Result<VectorField> {
    let radius = window_radius(window, "gradient window")?;
    let dims = vol.dims();
    if window > dims.min_extent() {
        return Err(Error::Config(format!(
            "gradient window {window} exceeds volume {dims}"
        )));
    }
    let comps = [0, 1, 2].map(|a| box_sum(&central_diff(vol.data(), dims, a), dims, radius));
    Ok(VectorField::from_parts(dims, comps))
}

/// `g / (||g|| + eps)` for the local gradient `g`.
pub fn normalized_gradient(vol: &Volume3D, window: usize, epsilon: f64) -> Result<VectorField> {
    Ok(LgOperand::new(vol, window, epsilon)?.normal)
}

/// Forward quantities of one volume, reusable across many pairings.
#[derive(Debug, Clone)]
pub struct LgOperand {
    radius: usize,
    epsilon: f64,
    grad: VectorField,
    norm: Vec<f64>,
    normal: VectorField,
}

impl LgOperand {
    pub fn new(vol: &Volume3D, window: usize, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::Config("gradient epsilon must be positive".into()));
        }
        let grad = local_gradient(vol, window)?;
        let dims = vol.dims();
        let mut norm = Vec::with_capacity(dims.len());
        let mut normal = VectorField::zeros(dims);
        for i in 0..dims.len() {
            let g = grad.at(i);
            let m = crate::field::norm3(g);
            norm.push(m);
            normal.set(i, g.map(|c| c / (m + epsilon)));
        }
        Ok(LgOperand {
            radius: window / 2,
            epsilon,
            grad,
            norm,
            normal,
        })
    }

    pub fn normal(&self) -> &VectorField {
        &self.normal
    }

    /// Gradient with respect to the underlying intensities of
    /// `sum_p weight[p] * normal(p) . other[p]`.
    fn backward(&self, other: &VectorField, weight: &[f64]) -> Vec<f64> {
        let dims = self.grad.dims();
        let eps = self.epsilon;
        let mut w = VectorField::zeros(dims);
        for i in 0..dims.len() {
            let s = weight[i];
            if s == 0.0 {
                continue;
            }
            let m = other.at(i);
            let g = self.grad.at(i);
            let n = self.norm[i];
            let d = n + eps;
            // Jacobian of g / (|g| + eps) applied to m
            let v = if n > 0.0 {
                let gm = g[0] * m[0] + g[1] * m[1] + g[2] * m[2];
                let k = gm / (n * d * d);
                [0, 1, 2].map(|c| s * (m[c] / d - g[c] * k))
            } else {
                m.map(|c| s * c / eps)
            };
            w.set(i, v);
        }
        let mut out = vec![0.0; dims.len()];
        for a in 0..3 {
            let summed = box_sum(w.component(a), dims, self.radius);
            central_diff_adjoint_add(&summed, dims, a, &mut out);
        }
        out
    }
}

/// `sum_p |n_a(p) . n_b(p)|` and optional gradients for each side.
pub(crate) fn lg_pair(
    a: &LgOperand,
    b: &LgOperand,
    grad_a: bool,
    grad_b: bool,
) -> (f64, Option<Vec<f64>>, Option<Vec<f64>>) {
    let n = a.norm.len();
    let mut value = 0.0;
    let mut sign = vec![0.0; n];
    for (i, s) in sign.iter_mut().enumerate() {
        let (p, q) = (a.normal.at(i), b.normal.at(i));
        let dot = p[0] * q[0] + p[1] * q[1] + p[2] * q[2];
        value += dot.abs();
        *s = if dot > 0.0 {
            1.0
        } else if dot < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    let ga = grad_a.then(|| a.backward(&b.normal, &sign));
    let gb = grad_b.then(|| b.backward(&a.normal, &sign));
    (value, ga, gb)
}

/// Raw (summed, not averaged) local-gradient similarity with gradients with
/// respect to both volumes.
pub fn lg_similarity(reference: &Volume3D, floating: &Volume3D, cfg: &LossConfig) -> Result<LossValue> {
    check_dims(reference.dims(), floating.dims())?;
    let r = LgOperand::new(reference, cfg.lg_window, cfg.epsilon)?;
    let f = LgOperand::new(floating, cfg.lg_window, cfg.epsilon)?;
    let (value, gr, gf) = lg_pair(&r, &f, true, true);
    Ok(LossValue {
        value,
        grad_floating: gf.unwrap_or_default(),
        grad_reference: gr,
    })
}

/// Normalized gradient fields metric: `sum_p (n1(R,p) . n1(F,p))^2` with
/// per-voxel (window 1) gradients. Evaluation only.
pub fn ngf_metric(reference: &Volume3D, floating: &Volume3D, epsilon: f64) -> Result<f64> {
    check_dims(reference.dims(), floating.dims())?;
    let r = normalized_gradient(reference, 1, epsilon)?;
    let f = normalized_gradient(floating, 1, epsilon)?;
    Ok((0..r.dims().len())
        .map(|i| {
            let (p, q) = (r.at(i), f.at(i));
            let d = p[0] * q[0] + p[1] * q[1] + p[2] * q[2];
            d * d
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;

    #[test]
    fn constant_volume_has_zero_local_gradient() {
        let g = local_gradient(&Volume3D::filled(Dims::cube(6), 3.0), 3).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn ramp_interior_sum_is_window_volume() {
        let ramp = Volume3D::from_fn(Dims::cube(6), |x, _, _| x as f64);
        let g = local_gradient(&ramp, 3).unwrap();
        assert_eq!(g.at(Dims::cube(6).index(2, 2, 2)), [27.0, 0.0, 0.0]);
    }

    #[test]
    fn window_validation() {
        let v = Volume3D::zeros(Dims::cube(5));
        assert!(matches!(local_gradient(&v, 4), Err(Error::Config(_))));
        assert!(matches!(local_gradient(&v, 7), Err(Error::Config(_))));
    }

    #[test]
    fn normalized_examples() {
        let dims = Dims::new(3, 3, 3);
        // constant -> exactly zero
        let n = normalized_gradient(&Volume3D::filled(dims, 1.0), 1, 1e-6).unwrap();
        assert_eq!(n.max_abs(), 0.0);
        // gradient (3, 0, 4) at every voxel, eps tiny -> (0.6, 0, 0.8)
        let v = Volume3D::from_fn(dims, |x, _, z| 3.0 * x as f64 + 4.0 * z as f64);
        let n = normalized_gradient(&v, 1, 1e-12).unwrap();
        let c = n.at(dims.index(1, 1, 1));
        assert!((c[0] - 0.6).abs() < 1e-12 && c[1] == 0.0 && (c[2] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn ngf_trivial_cases() {
        let dims = Dims::cube(5);
        let v = Volume3D::from_fn(dims, |x, y, z| ((x * 7 + y * 3 + z * 5) % 11) as f64);
        let n = normalized_gradient(&v, 1, 1e-6).unwrap();
        let expected: f64 = (0..dims.len())
            .map(|i| {
                let p = n.at(i);
                (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).powi(2)
            })
            .sum();
        assert!((ngf_metric(&v, &v, 1e-6).unwrap() - expected).abs() < 1e-9);
        assert_eq!(ngf_metric(&v, &Volume3D::filled(dims, 2.0), 1e-6).unwrap(), 0.0);
    }
}
