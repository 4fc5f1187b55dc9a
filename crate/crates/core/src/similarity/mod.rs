//! Similarity terms and the composite objectives built from them.
//!
//! Every differentiable term returns its value together with exact analytic
//! gradients with respect to its volume inputs.

mod lcc;
mod lg;
mod metrics;
mod objective;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use lcc::lcc_similarity;
pub use lg::{lg_similarity, local_gradient, ngf_metric, normalized_gradient, LgOperand};
pub use metrics::{l1_loss, mi_metric};
pub use objective::{
    registration_loss, translator_loss, FieldLoss, RegistrationObjective, RegistrationTerms,
};

pub(crate) use lcc::lcc_terms;
pub(crate) use lg::lg_pair;
pub(crate) use objective::translator_terms;

/// Weights and windows of the registration and translator objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Smoothness weight in the field objective.
    pub alpha: f64,
    /// Local-gradient weight in the field objective.
    pub beta: f64,
    /// Local-gradient weight in the translator objective.
    pub mu: f64,
    /// L1 weight in the translator objective.
    pub lambda: f64,
    /// Side of the cubic window summing gradients (odd).
    pub lg_window: usize,
    /// Side of the cross-correlation window (odd).
    pub cc_window: usize,
    /// Guard added to gradient norms before normalizing.
    pub epsilon: f64,
    /// Guard added to the variance product of each correlation window.
    pub cc_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 2.0,
            mu: 5.0,
            lambda: 100.0,
            lg_window: 7,
            cc_window: 7,
            epsilon: 1e-6,
            cc_epsilon: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("lg_window", self.lg_window), ("cc_window", self.cc_window)] {
            if w < 3 || w % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd and >= 3, got {w}")));
            }
        }
        if !(self.epsilon > 0.0 && self.cc_epsilon > 0.0) {
            return Err(Error::Config("epsilon guards must be positive".into()));
        }
        for (name, w) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("mu", self.mu),
            ("lambda", self.lambda),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative weight")));
            }
        }
        Ok(())
    }
}

/// A loss value with per-voxel gradients with respect to its inputs. For
/// two-argument losses `(reference, floating)` the floating side is the one
/// being optimized; `l1_loss(a, b)` treats `a` as floating.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad_floating: Vec<f64>,
    pub grad_reference: Option<Vec<f64>>,
}

pub(crate) fn window_radius(window: usize, name: &str) -> Result<usize> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::Config(format!("{name} must be odd, got {window}")));
    }
    Ok(window / 2)
}
