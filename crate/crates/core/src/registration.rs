//! Per-pair optimization of a dense displacement field.
//!
//! The field is optimized directly with Adam over a coarse-to-fine pyramid.
//! In `full_alternating` mode a translator is trained in turns with the
//! field: `t_steps_per_g_step` field updates, then one translator update.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::error::{check_dims, Error, Result};
use crate::field::{upsample_field, warp, DisplacementField};
use crate::similarity::{LgOperand, LossConfig, RegistrationObjective, RegistrationTerms};
use crate::translator::{
    translate, translate_prepared, translator_step_with, PreparedInput, TranslatorKind, TranslatorModel, TranslatorTrainState,
};
use crate::volume::{Dims, Volume3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegistrationMode {
    LgOnly,
    FullAlternating,
}

impl std::str::FromStr for RegistrationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lg_only" => Ok(RegistrationMode::LgOnly),
            "full_alternating" => Ok(RegistrationMode::FullAlternating),
            other => Err(Error::Config(format!("unknown registration mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TranslatorConfig {
    pub kind: TranslatorKind,
    pub lut_knots: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub gradient_window: usize,
    pub stats_window: usize,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        TranslatorConfig {
            kind: TranslatorKind::Mlp,
            lut_knots: 32,
            hidden: 16,
            learning_rate: 1e-2,
            gradient_window: 3,
            stats_window: 5,
        }
    }
}

/// Stops a level once the total loss has not improved by a relative
/// `min_improvement` for `patience` iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub patience: usize,
    pub min_improvement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistrationConfig {
    /// Downsampling factor of each pyramid level, coarse to fine.
    pub levels: Vec<usize>,
    pub iterations: usize,
    /// Adam step size in voxels of the current level. Every per-voxel update
    /// is also clamped to this value.
    pub learning_rate: f64,
    /// Cosine decay of the step size within each level.
    pub cosine_decay: bool,
    pub loss: LossConfig,
    pub mode: RegistrationMode,
    pub t_steps_per_g_step: usize,
    /// Fraction of the first level's iterations run without the correlation
    /// term while the translator is still untrained.
    pub warmup_fraction: f64,
    pub seed: u64,
    pub early_stop: Option<EarlyStop>,
    pub translator: TranslatorConfig,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            levels: vec![4, 2, 1],
            iterations: 200,
            learning_rate: 0.25,
            cosine_decay: true,
            loss: LossConfig::default(),
            mode: RegistrationMode::FullAlternating,
            t_steps_per_g_step: 1,
            warmup_fraction: 0.1,
            seed: 0,
            early_stop: None,
            translator: TranslatorConfig::default(),
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty()
            || !self.levels.windows(2).all(|w| w[0] > w[1])
            || *self.levels.last().unwrap() != 1
        {
            return Err(Error::Config(format!(
                "pyramid levels must decrease strictly to 1, got {:?}",
                self.levels
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        if self.t_steps_per_g_step == 0 {
            return Err(Error::Config("t_steps_per_g_step must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1]".into()));
        }
        if !(self.translator.learning_rate >= 0.0 && self.translator.learning_rate.is_finite()) {
            return Err(Error::Config("translator learning_rate must be finite".into()));
        }
        self.loss.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RegistrationConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RegistrationConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid TOML config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a `.toml` or JSON config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Self::from_toml(&text),
            _ => Self::from_json(&text),
        }
    }
}

/// Block average over `factor^3` cells; trailing voxels that do not fill a
/// block are dropped.
pub fn pyramid_downsample(vol: &Volume3D, factor: usize) -> Result<Volume3D> {
    if factor == 0 {
        return Err(Error::Config("downsampling factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(vol.clone());
    }
    let d = vol.dims();
    let out = Dims::new(d.nx / factor, d.ny / factor, d.nz / factor);
    if out.nx < 4 || out.ny < 4 || out.nz < 4 {
        return Err(Error::Config(format!(
            "downsampling {d} by {factor} leaves fewer than 4 voxels per axis"
        )));
    }
    let cell = (factor * factor * factor) as f64;
    let data = (0..out.len())
        .map(|i| {
            let (x, y, z) = out.coords(i);
            let mut s = 0.0;
            for dz in 0..factor {
                for dy in 0..factor {
                    for dx in 0..factor {
                        s += vol.get(x * factor + dx, y * factor + dy, z * factor + dz);
                    }
                }
            }
            s / cell
        })
        .collect();
    let sp = vol.spacing();
    let f = factor as f64;
    Volume3D::with_spacing(out, [sp[0] * f, sp[1] * f, sp[2] * f], data)
}

/// Adam over the three components of a displacement field.
#[derive(Debug, Clone)]
pub struct FieldOptimizer {
    adam: Adam,
}

impl FieldOptimizer {
    pub fn new(dims: Dims, learning_rate: f64) -> Self {
        FieldOptimizer {
            adam: Adam::new(3 * dims.len(), learning_rate).with_max_step(learning_rate),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.adam.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.adam.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.adam.steps()
    }

    fn apply(&mut self, phi: &mut DisplacementField, grad: &DisplacementField) {
        let mut params: Vec<f64> = (0..3).flat_map(|c| phi.component(c).to_vec()).collect();
        let grads: Vec<f64> = (0..3).flat_map(|c| grad.component(c).to_vec()).collect();
        self.adam.update(&mut params, &grads);
        let n = phi.dims().len();
        for c in 0..3 {
            phi.component_mut(c).copy_from_slice(&params[c * n..(c + 1) * n]);
        }
    }
}

/// One Adam update of `phi` against the field objective. `translated` is the
/// translator's output on the unwarped floating image; without it the
/// correlation term is left out. Returns the terms at the pre-update field.
pub fn t_step(
    objective: &RegistrationObjective,
    floating: &Volume3D,
    translated: Option<&Volume3D>,
    phi: &mut DisplacementField,
    optimizer: &mut FieldOptimizer,
) -> Result<RegistrationTerms> {
    let loss = objective.evaluate(floating, translated, phi)?;
    if !loss.terms.total.is_finite() || !loss.grad.is_finite() {
        return Err(Error::Divergence {
            stage: "field".into(),
            iteration: optimizer.steps() as usize,
            last_finite: Some(Box::new(phi.clone())),
        });
    }
    optimizer.apply(phi, &loss.grad);
    Ok(loss.terms)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub level: usize,
    pub factor: usize,
    pub iteration: usize,
    pub total: f64,
    pub lg: f64,
    pub lcc: f64,
    pub smooth: f64,
    pub lcc_enabled: bool,
    /// Translator objective, on iterations that ended with a translator update.
    pub translator_loss: Option<f64>,
    pub translator_l1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub factor: usize,
    pub dims: Dims,
    pub iterations: usize,
    /// Objective of the upsampled incoming field before the first update.
    pub start_total: f64,
    /// Objective of the final field of this level.
    pub end_total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub register_seconds: f64,
    pub field_seconds: f64,
    pub translator_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub mode: RegistrationMode,
    pub trace: Vec<TraceEntry>,
    pub levels: Vec<LevelSummary>,
    pub t_updates: usize,
    pub g_updates: usize,
    pub final_terms: RegistrationTerms,
    pub runtime: PhaseTimes,
}

impl RegistrationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let io_err = |e: csv::Error| match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::Io {
                path: path.to_path_buf(),
                source,
            },
            other => Error::Format(format!("{other:?}")),
        };
        let mut w = csv::Writer::from_path(path).map_err(io_err)?;
        for row in &self.trace {
            w.serialize(row).map_err(io_err)?;
        }
        w.flush().map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceEntry>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        r.deserialize()
            .map(|row| row.map_err(|e| Error::Format(e.to_string())))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub field: DisplacementField,
    pub translator: Option<TranslatorModel>,
    pub report: RegistrationReport,
}

fn odd_at_most(window: usize, limit: usize) -> usize {
    let cap = if limit % 2 == 1 { limit } else { limit.saturating_sub(1) };
    window.min(cap).max(1)
}

/// Loss settings usable on a level of the given size; windows wider than the
/// volume are narrowed.
fn level_loss(cfg: &LossConfig, dims: Dims) -> LossConfig {
    let m = dims.min_extent();
    LossConfig {
        lg_window: odd_at_most(cfg.lg_window, m).max(3),
        cc_window: odd_at_most(cfg.cc_window, m).max(3),
        ..*cfg
    }
}

fn lr_at(cfg: &RegistrationConfig, it: usize) -> f64 {
    if !cfg.cosine_decay || cfg.iterations == 1 {
        return cfg.learning_rate;
    }
    let t = it as f64 / cfg.iterations as f64;
    cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

fn new_translator(cfg: &RegistrationConfig, floating: &Volume3D) -> Result<TranslatorModel> {
    let t = &cfg.translator;
    match t.kind {
        TranslatorKind::Lut => TranslatorModel::identity_lut(t.lut_knots),
        TranslatorKind::Mlp => TranslatorModel::mlp(
            t.hidden,
            cfg.seed,
            floating,
            t.gradient_window,
            t.stats_window,
            cfg.loss.epsilon,
        ),
    }
}

/// Registers `floating` onto `reference`, returning `phi` such that
/// `floating(p + phi(p))` matches `reference(p)`.
pub fn register(
    reference: &Volume3D,
    floating: &Volume3D,
    cfg: &RegistrationConfig,
) -> Result<Registration> {
    cfg.validate()?;
    check_dims(reference.dims(), floating.dims())?;
    let started = Instant::now();
    let alternating = cfg.mode == RegistrationMode::FullAlternating;

    let mut times = PhaseTimes::default();
    let mut trace = Vec::new();
    let mut summaries = Vec::new();
    let (mut t_updates, mut g_updates) = (0usize, 0usize);
    let mut translator: Option<(TranslatorModel, TranslatorTrainState)> = None;
    let mut phi: Option<DisplacementField> = None;
    let mut final_terms = RegistrationTerms::default();

    for (level, &factor) in cfg.levels.iter().enumerate() {
        let r = pyramid_downsample(reference, factor)?;
        let f = pyramid_downsample(floating, factor)?;
        let dims = r.dims();
        let loss_cfg = level_loss(&cfg.loss, dims);
        let objective = RegistrationObjective::new(&r, &loss_cfg)?;
        let mut field = match phi.take() {
            Some(prev) => upsample_field(&prev, dims)?,
            None => DisplacementField::zeros(dims),
        };
        if alternating && translator.is_none() {
            let model = new_translator(cfg, &f)?;
            let state = TranslatorTrainState::new(&model, cfg.translator.learning_rate);
            translator = Some((model, state));
        }
        let warmup = if level == 0 && alternating {
            (cfg.warmup_fraction * cfg.iterations as f64).ceil() as usize
        } else {
            0
        };
        let prepared = match &translator {
            Some((model, _)) => Some(PreparedInput::new(model, &f)?),
            None => None,
        };
        let mut optimizer = FieldOptimizer::new(dims, cfg.learning_rate);
        let mut best = f64::INFINITY;
        let mut since_best = 0usize;
        let mut start_total = None;
        let mut executed = 0;

        for it in 0..cfg.iterations {
            let lcc_enabled = alternating && it >= warmup;
            let t0 = Instant::now();
            let translated = match (&translator, &prepared, lcc_enabled) {
                (Some((model, _)), Some(input), true) => Some(translate_prepared(model, input, &f)?),
                _ => None,
            };
            optimizer.set_learning_rate(lr_at(cfg, it));
            let terms = t_step(&objective, &f, translated.as_ref(), &mut field, &mut optimizer)
                .map_err(|e| relabel_divergence(e, level, it))?;
            t_updates += 1;
            times.field_seconds += t0.elapsed().as_secs_f64();
            start_total.get_or_insert(terms.total);

            let mut entry = TraceEntry {
                level,
                factor,
                iteration: it,
                total: terms.total,
                lg: terms.lg,
                lcc: terms.lcc,
                smooth: terms.smooth,
                lcc_enabled,
                translator_loss: None,
                translator_l1: None,
            };
            if let Some((model, state)) = translator.as_mut() {
                if (it + 1) % cfg.t_steps_per_g_step == 0 {
                    let t0 = Instant::now();
                    let warped = warp(&f, &field)?;
                    let warped_lg = LgOperand::new(&warped, loss_cfg.lg_window, loss_cfg.epsilon)?;
                    let step = translator_step_with(model, &warped, &warped_lg, &r, &loss_cfg, state)
                        .map_err(|e| match e {
                            Error::Divergence { stage, iteration, .. } => Error::Divergence {
                                stage,
                                iteration,
                                last_finite: Some(Box::new(field.clone())),
                            },
                            other => other,
                        })?;
                    g_updates += 1;
                    entry.translator_loss = Some(step.total);
                    entry.translator_l1 = Some(step.l1);
                    times.translator_seconds += t0.elapsed().as_secs_f64();
                }
            }
            trace.push(entry);
            executed += 1;

            if let Some(es) = cfg.early_stop {
                if terms.total < best - es.min_improvement * best.abs().max(1e-12) {
                    best = terms.total;
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= es.patience {
                        break;
                    }
                }
            }
        }

        let translated = match &translator {
            Some((model, _)) => Some(translate(model, &f)?),
            None => None,
        };
        let end = objective.evaluate(&f, translated.as_ref(), &field)?;
        final_terms = end.terms;
        summaries.push(LevelSummary {
            factor,
            dims,
            iterations: executed,
            start_total: start_total.unwrap_or(end.terms.total),
            end_total: end.terms.total,
        });
        phi = Some(field);
    }

    let mut field = phi.expect("at least one level");
    if field.dims() != reference.dims() {
        field = upsample_field(&field, reference.dims())?;
    }
    times.register_seconds = started.elapsed().as_secs_f64();
    Ok(Registration {
        field,
        translator: translator.map(|(m, _)| m),
        report: RegistrationReport {
            mode: cfg.mode,
            trace,
            levels: summaries,
            t_updates,
            g_updates,
            final_terms,
            runtime: times,
        },
    })
}

fn relabel_divergence(e: Error, level: usize, it: usize) -> Error {
    match e {
        Error::Divergence { last_finite, .. } => Error::Divergence {
            stage: format!("field (level {level})"),
            iteration: it,
            last_finite,
        },
        other => other,
    }
}
