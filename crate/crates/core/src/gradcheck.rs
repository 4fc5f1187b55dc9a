//! Central finite-difference checks of every analytic gradient.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::field::{smoothness_loss, DisplacementField};
use crate::similarity::{
    l1_loss, lcc_similarity, lg_similarity, registration_loss, translator_loss, LossConfig,
};
use crate::translator::{translate, translate_param_gradient, TranslatorModel};
use crate::volume::{Dims, Volume3D};

pub const GRADCHECK_DIMS: Dims = Dims::cube(8);
pub const PROBES: usize = 30;
pub const TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub name: String,
    pub probes: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub checks: Vec<GradCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// `0.5` plus four random plane waves of at most 1.5 cycles per axis.
pub fn smooth_random_volume(dims: Dims, rng: &mut ChaCha8Rng) -> Volume3D {
    let waves: Vec<([f64; 3], f64, f64)> = (0..4)
        .map(|_| {
            let f = [0, 1, 2].map(|a| TAU * rng.random_range(-1.5..1.5) / dims.axis(a) as f64);
            (f, rng.random_range(0.0..TAU), rng.random_range(0.05..0.12))
        })
        .collect();
    Volume3D::from_fn(dims, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        0.5 + waves
            .iter()
            .map(|(f, ph, a)| a * (f[0] * p[0] + f[1] * p[1] + f[2] * p[2] + ph).sin())
            .sum::<f64>()
    })
}

/// Smooth field with components bounded by `amplitude`.
pub fn smooth_random_field(dims: Dims, amplitude: f64, rng: &mut ChaCha8Rng) -> DisplacementField {
    // the waves of a volume sum to at most 0.48 in magnitude
    let comps = [(); 3].map(|_| {
        let v = smooth_random_volume(dims, rng);
        v.data().iter().map(|x| (x - 0.5) * amplitude / 0.48).collect()
    });
    DisplacementField::new(dims, comps).expect("matching dims")
}

/// `|a - n| / max(|a|, |n|, floor)`, where `floor` is a millionth of the
/// largest analytic gradient so that vanishing entries compare absolutely.
fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic[k]` against central differences of `f` along
/// coordinate `k` of `x` for random probes `k`.
fn probe(
    name: &str,
    x: &[f64],
    analytic: &[f64],
    rng: &mut ChaCha8Rng,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<GradCheck> {
    let floor = 1e-6 * analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut worst = 0.0f64;
    let mut xs = x.to_vec();
    for _ in 0..PROBES {
        let k = rng.random_range(0..x.len());
        xs[k] = x[k] + STEP;
        let up = f(&xs)?;
        xs[k] = x[k] - STEP;
        let down = f(&xs)?;
        xs[k] = x[k];
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(relative_error(analytic[k], numeric, floor));
    }
    Ok(GradCheck {
        name: name.to_string(),
        probes: PROBES,
        max_relative_error: worst,
        passed: worst < TOLERANCE,
    })
}

fn field_from_flat(dims: Dims, flat: &[f64]) -> DisplacementField {
    let n = dims.len();
    DisplacementField::new(
        dims,
        [flat[..n].to_vec(), flat[n..2 * n].to_vec(), flat[2 * n..].to_vec()],
    )
    .expect("matching dims")
}

fn flat_field(phi: &DisplacementField) -> Vec<f64> {
    phi.components().concat()
}

/// Runs the whole suite on random smooth 8³ inputs.
pub fn run_gradcheck(seed: u64) -> Result<GradcheckReport> {
    let dims = GRADCHECK_DIMS;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = smooth_random_volume(dims, &mut rng);
    let f = smooth_random_volume(dims, &mut rng);
    let t = smooth_random_volume(dims, &mut rng);
    let phi = smooth_random_field(dims, 1.2, &mut rng);
    let vol = |data: &[f64]| Volume3D::new(dims, data.to_vec());
    let mut checks = Vec::new();

    for window in [3, 7] {
        let cfg = LossConfig {
            lg_window: window,
            cc_window: window,
            ..LossConfig::default()
        };
        let lg = lg_similarity(&r, &f, &cfg)?;
        checks.push(probe(&format!("lg_similarity floating w{window}"), f.data(), &lg.grad_floating, &mut rng, |x| {
            Ok(lg_similarity(&r, &vol(x)?, &cfg)?.value)
        })?);
        let lg_ref = lg.grad_reference.unwrap_or_default();
        checks.push(probe(&format!("lg_similarity reference w{window}"), r.data(), &lg_ref, &mut rng, |x| {
            Ok(lg_similarity(&vol(x)?, &f, &cfg)?.value)
        })?);
        let cc = lcc_similarity(&r, &f, window, cfg.cc_epsilon)?;
        checks.push(probe(&format!("lcc_similarity floating w{window}"), f.data(), &cc.grad_floating, &mut rng, |x| {
            Ok(lcc_similarity(&r, &vol(x)?, window, cfg.cc_epsilon)?.value)
        })?);
        let cc_ref = cc.grad_reference.unwrap_or_default();
        checks.push(probe(&format!("lcc_similarity reference w{window}"), r.data(), &cc_ref, &mut rng, |x| {
            Ok(lcc_similarity(&vol(x)?, &f, window, cfg.cc_epsilon)?.value)
        })?);
    }

    let l1 = l1_loss(&f, &r)?;
    checks.push(probe("l1_loss", f.data(), &l1.grad_floating, &mut rng, |x| {
        Ok(l1_loss(&vol(x)?, &r)?.value)
    })?);

    let (_, sg) = smoothness_loss(&phi);
    checks.push(probe("smoothness_loss", &flat_field(&phi), &flat_field(&sg), &mut rng, |x| {
        Ok(smoothness_loss(&field_from_flat(dims, x)).0)
    })?);

    let cfg = LossConfig {
        lg_window: 3,
        cc_window: 3,
        ..LossConfig::default()
    };
    for (name, translated) in [("registration_loss lg", None), ("registration_loss full", Some(&t))] {
        let loss = registration_loss(&r, &f, translated, &phi, &cfg)?;
        checks.push(probe(name, &flat_field(&phi), &flat_field(&loss.grad), &mut rng, |x| {
            Ok(registration_loss(&r, &f, translated, &field_from_flat(dims, x), &cfg)?.terms.total)
        })?);
    }

    let mut mlp = TranslatorModel::mlp(6, seed, &f, 3, 5, cfg.epsilon)?;
    let scrambled: Vec<f64> = mlp.params().iter().map(|_| rng.random_range(-0.5..0.5)).collect();
    mlp.set_params(&scrambled)?;
    let lut = TranslatorModel::lut_from_knots(&[(0.0, 0.3), (0.3, 0.8), (0.6, 0.6), (1.0, 0.1)])?;
    for (name, model) in [("translator_loss mlp", mlp), ("translator_loss lut", lut)] {
        let out = translate(&model, &f)?;
        let upstream = translator_loss(&out, &f, &r, &cfg)?.grad_floating;
        let analytic = translate_param_gradient(&model, &f, &upstream)?;
        let mut m = model.clone();
        checks.push(probe(name, &model.params(), &analytic, &mut rng, |p| {
            m.set_params(p)?;
            Ok(translator_loss(&translate(&m, &f)?, &f, &r, &cfg)?.value)
        })?);
    }

    Ok(GradcheckReport {
        seed,
        tolerance: TOLERANCE,
        checks,
    })
}
