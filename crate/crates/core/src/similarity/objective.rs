//! Composite objectives for the field and for the intensity translator.
//!
//! Both objectives use per-voxel means of their terms so that the same
//! weights behave alike at every pyramid level:
//!
//! ```text
//! field:      -mean LCC(R, G(F)∘φ) - beta * mean LG(R, F∘φ) + alpha * mean |∇u|²
//! translator: -mu * mean LG(F', F∘φ) + lambda * mean |F' - R|
//! ```

use crate::error::{check_dims, Result};
use crate::field::{smoothness_loss, warp_with_jacobian, DisplacementField, VectorField};
use crate::volume::Volume3D;

use super::{l1_loss, lcc_terms, lg_pair, LgOperand, LossConfig, LossValue};

/// Per-voxel means of the field objective's terms. Similarities are reported
/// as positive quantities; `total` carries the signs and weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RegistrationTerms {
    pub total: f64,
    pub lg: f64,
    pub lcc: f64,
    pub smooth: f64,
}

#[derive(Debug, Clone)]
pub struct FieldLoss {
    pub terms: RegistrationTerms,
    pub grad: VectorField,
}

/// The field objective for a fixed reference, with the reference's
/// local-gradient operand computed once.
#[derive(Debug, Clone)]
pub struct RegistrationObjective<'a> {
    reference: &'a Volume3D,
    reference_lg: LgOperand,
    cfg: LossConfig,
}

impl<'a> RegistrationObjective<'a> {
    pub fn new(reference: &'a Volume3D, cfg: &LossConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(RegistrationObjective {
            reference,
            reference_lg: LgOperand::new(reference, cfg.lg_window, cfg.epsilon)?,
            cfg: *cfg,
        })
    }

    pub fn config(&self) -> &LossConfig {
        &self.cfg
    }

    /// Evaluates the objective at `phi`.
    ///
    /// `floating` and `translated` are given in the floating image's own
    /// frame; both are resampled through `phi` here, so the returned gradient
    /// is exact with respect to the field. Without `translated` the
    /// correlation term is dropped.
    pub fn evaluate(
        &self,
        floating: &Volume3D,
        translated: Option<&Volume3D>,
        phi: &DisplacementField,
    ) -> Result<FieldLoss> {
        let dims = self.reference.dims();
        check_dims(dims, floating.dims())?;
        check_dims(dims, phi.dims())?;
        let n = dims.len() as f64;
        let cfg = &self.cfg;

        let (warped, jac) = warp_with_jacobian(floating, phi)?;
        let warped_lg = LgOperand::new(&warped, cfg.lg_window, cfg.epsilon)?;
        let (lg_sum, _, lg_grad) = lg_pair(&self.reference_lg, &warped_lg, false, true);
        let lg_grad = lg_grad.unwrap_or_default();

        let mut grad = VectorField::zeros(dims);
        let scale = -cfg.beta / n;
        for i in 0..dims.len() {
            let up = scale * lg_grad[i];
            let j = jac.at(i);
            grad.set(i, [up * j[0], up * j[1], up * j[2]]);
        }

        let mut lcc_mean = 0.0;
        if let Some(t) = translated {
            check_dims(dims, t.dims())?;
            let (t_warped, t_jac) = warp_with_jacobian(t, phi)?;
            let (lcc_sum, _, lcc_grad) = lcc_terms(
                self.reference.data(),
                t_warped.data(),
                dims,
                cfg.cc_window / 2,
                cfg.cc_epsilon,
                false,
                true,
            );
            let lcc_grad = lcc_grad.unwrap_or_default();
            lcc_mean = lcc_sum / n;
            for i in 0..dims.len() {
                let up = -lcc_grad[i] / n;
                let j = t_jac.at(i);
                let g = grad.at(i);
                grad.set(i, [g[0] + up * j[0], g[1] + up * j[1], g[2] + up * j[2]]);
            }
        }

        let (smooth_sum, smooth_grad) = smoothness_loss(phi);
        let w = cfg.alpha / n;
        for c in 0..3 {
            for (g, s) in grad.component_mut(c).iter_mut().zip(smooth_grad.component(c)) {
                *g += w * s;
            }
        }

        let lg_mean = lg_sum / n;
        let smooth_mean = smooth_sum / n;
        Ok(FieldLoss {
            terms: RegistrationTerms {
                total: -lcc_mean - cfg.beta * lg_mean + cfg.alpha * smooth_mean,
                lg: lg_mean,
                lcc: lcc_mean,
                smooth: smooth_mean,
            },
            grad,
        })
    }
}

/// One-shot evaluation of the field objective; see
/// [`RegistrationObjective::evaluate`].
pub fn registration_loss(
    reference: &Volume3D,
    floating: &Volume3D,
    translated: Option<&Volume3D>,
    phi: &DisplacementField,
    cfg: &LossConfig,
) -> Result<FieldLoss> {
    RegistrationObjective::new(reference, cfg)?.evaluate(floating, translated, phi)
}

/// Translator objective evaluated against a precomputed operand of the
/// warped floating image. Returns `(value, mean LG, L1, grad wrt translated)`.
pub(crate) fn translator_terms(
    translated: &Volume3D,
    warped_lg: &LgOperand,
    reference: &Volume3D,
    cfg: &LossConfig,
) -> Result<(f64, f64, f64, Vec<f64>)> {
    let n = translated.len() as f64;
    let t_lg = LgOperand::new(translated, cfg.lg_window, cfg.epsilon)?;
    let (lg_sum, lg_grad, _) = lg_pair(&t_lg, warped_lg, true, false);
    let l1 = l1_loss(translated, reference)?;
    let lg_grad = lg_grad.unwrap_or_default();
    let grad = lg_grad
        .iter()
        .zip(&l1.grad_floating)
        .map(|(g, l)| -cfg.mu * g / n + cfg.lambda * l)
        .collect();
    let lg_mean = lg_sum / n;
    Ok((-cfg.mu * lg_mean + cfg.lambda * l1.value, lg_mean, l1.value, grad))
}

/// `-mu * mean LG(F', F∘φ) + lambda * mean |F' - R|`, with the gradient with
/// respect to the translated volume `F'`.
pub fn translator_loss(
    translated: &Volume3D,
    warped: &Volume3D,
    reference: &Volume3D,
    cfg: &LossConfig,
) -> Result<LossValue> {
    check_dims(translated.dims(), warped.dims())?;
    check_dims(translated.dims(), reference.dims())?;
    let warped_lg = LgOperand::new(warped, cfg.lg_window, cfg.epsilon)?;
    let (value, _, _, grad) = translator_terms(translated, &warped_lg, reference, cfg)?;
    Ok(LossValue {
        value,
        grad_floating: grad,
        grad_reference: None,
    })
}
