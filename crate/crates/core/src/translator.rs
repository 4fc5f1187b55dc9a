//! Parametric intensity translation of the floating modality into the
//! reference modality.
//!
//! Two model kinds are available: a piecewise-linear lookup table over
//! `[0, 1]`, and a small per-voxel network reading the intensity, the
//! normalized local gradient and local mean/std around each voxel. The
//! network predicts a residual added to the input intensity, so zero output
//! weights give the identity map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::error::{check_dims, Error, Result};
use crate::filters::{box_count, box_sum};
use crate::similarity::{translator_terms, LgOperand, LossConfig};
use crate::volume::Volume3D;

pub const FEATURES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TranslatorKind {
    Lut,
    Mlp,
}

/// Piecewise-linear map with fixed knot positions and free values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lut {
    pub knots: Vec<f64>,
    pub values: Vec<f64>,
}

/// One-hidden-layer tanh network over standardized voxel features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: usize,
    /// Row-major `hidden x FEATURES`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    /// Feature standardization: `(f - mean) / scale`.
    pub feature_mean: [f64; FEATURES],
    pub feature_scale: [f64; FEATURES],
    pub gradient_window: usize,
    pub stats_window: usize,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TranslatorModel {
    Lut(Lut),
    Mlp(Mlp),
}

impl TranslatorModel {
    /// Lookup table with `k` uniformly spaced knots initialized to identity.
    pub fn identity_lut(k: usize) -> Result<TranslatorModel> {
        if k < 2 {
            return Err(Error::Config(format!("lookup table needs >= 2 knots, got {k}")));
        }
        let knots: Vec<f64> = (0..k).map(|i| i as f64 / (k - 1) as f64).collect();
        Ok(TranslatorModel::Lut(Lut {
            values: knots.clone(),
            knots,
        }))
    }

    /// Lookup table through the given `(input, output)` knots.
    pub fn lut_from_knots(knots: &[(f64, f64)]) -> Result<TranslatorModel> {
        let model = TranslatorModel::Lut(Lut {
            knots: knots.iter().map(|k| k.0).collect(),
            values: knots.iter().map(|k| k.1).collect(),
        });
        model.validate()?;
        Ok(model)
    }

    /// Network with random first-layer weights and zero output weights.
    /// Feature standardization constants are fitted on `source`.
    pub fn mlp(
        hidden: usize,
        seed: u64,
        source: &Volume3D,
        gradient_window: usize,
        stats_window: usize,
        epsilon: f64,
    ) -> Result<TranslatorModel> {
        if hidden == 0 {
            return Err(Error::Config("network needs at least one hidden unit".into()));
        }
        let feats = features(source, gradient_window, stats_window, epsilon)?;
        let n = source.len() as f64;
        let mut feature_mean = [0.0; FEATURES];
        let mut feature_scale = [1.0; FEATURES];
        for k in 0..FEATURES {
            let col = &feats[k];
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            feature_mean[k] = mean;
            feature_scale[k] = if var > 1e-12 { var.sqrt() } else { 1.0 };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (FEATURES as f64).sqrt();
        let mut mlp = Mlp {
            hidden,
            w1: (0..hidden * FEATURES).map(|_| rng.random_range(-bound..bound)).collect(),
            b1: (0..hidden).map(|_| rng.random_range(-0.1..0.1)).collect(),
            w2: vec![0.0; hidden],
            b2: 0.0,
            feature_mean,
            feature_scale,
            gradient_window,
            stats_window,
            epsilon,
        };
        // small non-zero output weights so both layers receive gradient
        for w in &mut mlp.w2 {
            *w = rng.random_range(-1e-3..1e-3);
        }
        let model = TranslatorModel::Mlp(mlp);
        model.validate()?;
        Ok(model)
    }

    pub fn kind(&self) -> TranslatorKind {
        match self {
            TranslatorModel::Lut(_) => TranslatorKind::Lut,
            TranslatorModel::Mlp(_) => TranslatorKind::Mlp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            TranslatorModel::Lut(l) => {
                if l.knots.len() < 2 || l.knots.len() != l.values.len() {
                    return Err(Error::Config("lookup table needs >= 2 knots and one value per knot".into()));
                }
                if !l.knots.windows(2).all(|w| w[0] < w[1])
                    || l.knots[0] < 0.0
                    || *l.knots.last().unwrap() > 1.0
                {
                    return Err(Error::Config("lookup knots must increase strictly within [0, 1]".into()));
                }
                if !(finite(&l.knots) && finite(&l.values)) {
                    return Err(Error::Config("lookup table has non-finite entries".into()));
                }
            }
            TranslatorModel::Mlp(m) => {
                if m.hidden == 0
                    || m.w1.len() != m.hidden * FEATURES
                    || m.b1.len() != m.hidden
                    || m.w2.len() != m.hidden
                {
                    return Err(Error::Config("network weight shapes are inconsistent".into()));
                }
                if !(finite(&m.w1) && finite(&m.b1) && finite(&m.w2) && m.b2.is_finite())
                    || !finite(&m.feature_mean)
                    || !m.feature_scale.iter().all(|s| s.is_finite() && *s > 0.0)
                {
                    return Err(Error::Config("network has non-finite or invalid parameters".into()));
                }
                if !(m.epsilon > 0.0) || m.gradient_window % 2 == 0 || m.stats_window % 2 == 0 {
                    return Err(Error::Config("network feature settings are invalid".into()));
                }
            }
        }
        Ok(())
    }

    /// Flat trainable parameters. Knot positions and feature constants are
    /// fixed.
    pub fn params(&self) -> Vec<f64> {
        match self {
            TranslatorModel::Lut(l) => l.values.clone(),
            TranslatorModel::Mlp(m) => {
                let mut p = Vec::with_capacity(self.param_count());
                p.extend_from_slice(&m.w1);
                p.extend_from_slice(&m.b1);
                p.extend_from_slice(&m.w2);
                p.push(m.b2);
                p
            }
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            TranslatorModel::Lut(l) => l.values.len(),
            TranslatorModel::Mlp(m) => m.hidden * (FEATURES + 2) + 1,
        }
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                p.len()
            )));
        }
        match self {
            TranslatorModel::Lut(l) => l.values.copy_from_slice(p),
            TranslatorModel::Mlp(m) => {
                let h = m.hidden;
                let (w1, rest) = p.split_at(h * FEATURES);
                let (b1, rest) = rest.split_at(h);
                let (w2, rest) = rest.split_at(h);
                m.w1.copy_from_slice(w1);
                m.b1.copy_from_slice(b1);
                m.w2.copy_from_slice(w2);
                m.b2 = rest[0];
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<TranslatorModel> {
        let model: TranslatorModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }
}

/// Raw (unstandardized) features: intensity, normalized local gradient
/// (three components), local mean and local standard deviation.
pub fn features(
    vol: &Volume3D,
    gradient_window: usize,
    stats_window: usize,
    epsilon: f64,
) -> Result<[Vec<f64>; FEATURES]> {
    if stats_window.is_multiple_of(2) || stats_window > vol.dims().min_extent() {
        return Err(Error::Config(format!("invalid statistics window {stats_window}")));
    }
    let dims = vol.dims();
    let normal = LgOperand::new(vol, gradient_window, epsilon)?.normal().clone();
    let r = stats_window / 2;
    let count = box_count(dims, r);
    let s = box_sum(vol.data(), dims, r);
    let sq: Vec<f64> = vol.data().iter().map(|v| v * v).collect();
    let ss = box_sum(&sq, dims, r);
    let mean: Vec<f64> = s.iter().zip(&count).map(|(s, c)| s / c).collect();
    let std: Vec<f64> = (0..dims.len())
        .map(|i| (ss[i] / count[i] - mean[i] * mean[i]).max(0.0).sqrt())
        .collect();
    let [nx, ny, nz] = normal.into_components();
    Ok([vol.data().to_vec(), nx, ny, nz, mean, std])
}

fn lut_cell(knots: &[f64], x: f64) -> (usize, f64) {
    let x = x.clamp(knots[0], knots[knots.len() - 1]);
    // index of the segment [k_j, k_{j+1}] containing x
    let j = match knots.binary_search_by(|k| k.partial_cmp(&x).unwrap()) {
        Ok(j) => j.min(knots.len() - 2),
        Err(j) => j.saturating_sub(1).min(knots.len() - 2),
    };
    let t = (x - knots[j]) / (knots[j + 1] - knots[j]);
    (j, t)
}

/// Model input with the network's standardized features precomputed.
/// Valid for any parameters of the model it was prepared for.
#[derive(Debug, Clone)]
pub struct PreparedInput {
    intensity: Vec<f64>,
    feats: Option<[Vec<f64>; FEATURES]>,
}

impl PreparedInput {
    pub fn new(model: &TranslatorModel, vol: &Volume3D) -> Result<Self> {
        let feats = match model {
            TranslatorModel::Lut(_) => None,
            TranslatorModel::Mlp(m) => {
                let mut feats = features(vol, m.gradient_window, m.stats_window, m.epsilon)?;
                for (k, col) in feats.iter_mut().enumerate() {
                    for v in col.iter_mut() {
                        *v = (*v - m.feature_mean[k]) / m.feature_scale[k];
                    }
                }
                Some(feats)
            }
        };
        Ok(PreparedInput {
            intensity: vol.data().to_vec(),
            feats,
        })
    }

    fn input(&self, i: usize) -> [f64; FEATURES] {
        let f = self.feats.as_ref().expect("network features");
        std::array::from_fn(|k| f[k][i])
    }
}

#[inline]
fn hidden_unit(m: &Mlp, f: &[f64; FEATURES], j: usize) -> f64 {
    let row = &m.w1[j * FEATURES..(j + 1) * FEATURES];
    let pre: f64 = m.b1[j] + row.iter().zip(f).map(|(w, x)| w * x).sum::<f64>();
    pre.tanh()
}

fn forward(model: &TranslatorModel, input: &PreparedInput) -> Vec<f64> {
    match model {
        TranslatorModel::Lut(l) => input
            .intensity
            .iter()
            .map(|&x| {
                let (j, t) = lut_cell(&l.knots, x);
                l.values[j] + t * (l.values[j + 1] - l.values[j])
            })
            .collect(),
        TranslatorModel::Mlp(m) => (0..input.intensity.len())
            .map(|i| {
                let f = input.input(i);
                let mut out = input.intensity[i] + m.b2;
                for j in 0..m.hidden {
                    out += m.w2[j] * hidden_unit(m, &f, j);
                }
                out
            })
            .collect(),
    }
}

/// Maps `vol` voxel by voxel into the reference intensity space.
pub fn translate(model: &TranslatorModel, vol: &Volume3D) -> Result<Volume3D> {
    model.validate()?;
    let input = PreparedInput::new(model, vol)?;
    translate_prepared(model, &input, vol)
}

/// [`translate`] on an input prepared from `vol`.
pub fn translate_prepared(
    model: &TranslatorModel,
    input: &PreparedInput,
    vol: &Volume3D,
) -> Result<Volume3D> {
    if input.intensity.len() != vol.len() || input.feats.is_some() != (model.kind() == TranslatorKind::Mlp) {
        return Err(Error::Format("prepared input does not match model or volume".into()));
    }
    let data = forward(model, input);
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("translator produced non-finite output".into()));
    }
    Ok(vol.same_grid(data))
}

/// Gradient of `sum_p upstream[p] * translate(model, vol)[p]` with respect
/// to the model's flat parameters.
pub fn translate_param_gradient(
    model: &TranslatorModel,
    vol: &Volume3D,
    upstream: &[f64],
) -> Result<Vec<f64>> {
    if upstream.len() != vol.len() {
        return Err(Error::Format("upstream gradient length does not match volume".into()));
    }
    let input = PreparedInput::new(model, vol)?;
    Ok(param_gradient(model, &input, upstream))
}

fn param_gradient(model: &TranslatorModel, input: &PreparedInput, upstream: &[f64]) -> Vec<f64> {
    let mut grad = vec![0.0; model.param_count()];
    match model {
        TranslatorModel::Lut(l) => {
            for (&x, &g) in input.intensity.iter().zip(upstream) {
                let (j, t) = lut_cell(&l.knots, x);
                grad[j] += g * (1.0 - t);
                grad[j + 1] += g * t;
            }
        }
        TranslatorModel::Mlp(m) => {
            let h = m.hidden;
            let (o_b1, o_w2, o_b2) = (h * FEATURES, h * FEATURES + h, h * FEATURES + 2 * h);
            let mut act = vec![0.0; h];
            for (i, &g) in upstream.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let f = input.input(i);
                for (j, a) in act.iter_mut().enumerate() {
                    *a = hidden_unit(m, &f, j);
                }
                grad[o_b2] += g;
                for j in 0..h {
                    grad[o_w2 + j] += g * act[j];
                    let d = g * m.w2[j] * (1.0 - act[j] * act[j]);
                    grad[o_b1 + j] += d;
                    for k in 0..FEATURES {
                        grad[j * FEATURES + k] += d * f[k];
                    }
                }
            }
        }
    }
    grad
}

/// Adam state for translator training.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslatorTrainState {
    adam: Adam,
}

impl TranslatorTrainState {
    pub fn new(model: &TranslatorModel, learning_rate: f64) -> Self {
        TranslatorTrainState {
            adam: Adam::new(model.param_count(), learning_rate),
        }
    }

    pub fn steps(&self) -> u64 {
        self.adam.steps()
    }

    pub fn learning_rate(&self) -> f64 {
        self.adam.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.adam.lr = lr;
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }
}

/// Losses reported by one translator update, evaluated before the update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TranslatorStepLoss {
    pub total: f64,
    pub lg: f64,
    pub l1: f64,
}

/// One Adam update of the translator against the translator objective,
/// where `warped` is the current warped floating image.
pub fn translator_step(
    model: &mut TranslatorModel,
    warped: &Volume3D,
    reference: &Volume3D,
    cfg: &LossConfig,
    state: &mut TranslatorTrainState,
) -> Result<TranslatorStepLoss> {
    check_dims(warped.dims(), reference.dims())?;
    if state.adam.len() != model.param_count() {
        return Err(Error::Config("optimizer state does not match model parameters".into()));
    }
    let warped_lg = LgOperand::new(warped, cfg.lg_window, cfg.epsilon)?;
    translator_step_with(model, warped, &warped_lg, reference, cfg, state)
}

pub(crate) fn translator_step_with(
    model: &mut TranslatorModel,
    warped: &Volume3D,
    warped_lg: &LgOperand,
    reference: &Volume3D,
    cfg: &LossConfig,
    state: &mut TranslatorTrainState,
) -> Result<TranslatorStepLoss> {
    let divergence = |iteration: u64| Error::Divergence {
        stage: "translator".into(),
        iteration: iteration as usize,
        last_finite: None,
    };
    model.validate()?;
    let input = PreparedInput::new(model, warped)?;
    let translated =
        translate_prepared(model, &input, warped).map_err(|_| divergence(state.steps()))?;
    let (total, lg, l1, upstream) = translator_terms(&translated, warped_lg, reference, cfg)?;
    if !total.is_finite() {
        return Err(divergence(state.steps()));
    }
    let grad = param_gradient(model, &input, &upstream);
    let mut params = model.params();
    state.adam.update(&mut params, &grad);
    if params.iter().any(|p| !p.is_finite()) {
        return Err(divergence(state.steps()));
    }
    model.set_params(&params)?;
    Ok(TranslatorStepLoss { total, lg, l1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;

    fn smooth(dims: Dims) -> Volume3D {
        Volume3D::from_fn(dims, |x, y, z| {
            0.5 + 0.3 * (0.5 * x as f64).sin() * (0.4 * y as f64).cos() + 0.1 * (0.3 * z as f64).sin()
        })
    }

    #[test]
    fn identity_lut_is_identity() {
        let v = smooth(Dims::cube(6));
        let out = translate(&TranslatorModel::identity_lut(32).unwrap(), &v).unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn inverting_lut_negates() {
        let v = smooth(Dims::cube(6));
        let m = TranslatorModel::lut_from_knots(&[(0.0, 1.0), (1.0, 0.0)]).unwrap();
        let out = translate(&m, &v).unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            assert!((a - (1.0 - b)).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_models_are_rejected() {
        assert!(TranslatorModel::lut_from_knots(&[(0.0, 0.0), (0.0, 1.0)]).is_err());
        assert!(TranslatorModel::lut_from_knots(&[(0.0, 0.0), (1.5, 1.0)]).is_err());
        let mut m = TranslatorModel::identity_lut(4).unwrap();
        if let TranslatorModel::Lut(l) = &mut m {
            l.values[1] = f64::NAN;
        }
        assert!(matches!(translate(&m, &smooth(Dims::cube(4))), Err(Error::Config(_))));
    }

    #[test]
    fn json_roundtrip() {
        let v = smooth(Dims::cube(8));
        let m = TranslatorModel::mlp(4, 7, &v, 3, 3, 1e-6).unwrap();
        let back = TranslatorModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        assert!(m.to_json().unwrap().contains("\"kind\": \"mlp\""));
    }

    #[test]
    fn zero_learning_rate_leaves_model_unchanged() {
        let dims = Dims::cube(8);
        let v = smooth(dims);
        let r = v.map(|x| 1.0 - x).unwrap();
        let mut m = TranslatorModel::identity_lut(8).unwrap();
        let before = m.clone();
        let mut state = TranslatorTrainState::new(&m, 0.0);
        let loss = translator_step(&mut m, &v, &r, &LossConfig::default(), &mut state).unwrap();
        assert!(loss.total.is_finite());
        assert_eq!(m, before);
    }
}
