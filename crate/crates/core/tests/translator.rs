mod common;

use common::*;
use lgreg::similarity::{l1_loss, translator_loss};
use lgreg::translator::{translate, translate_param_gradient, translator_step, Mlp, FEATURES};
use lgreg::{Dims, LossConfig, TranslatorModel, TranslatorTrainState, Volume3D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn smooth(dims: Dims, phase: f64) -> Volume3D {
    Volume3D::from_fn(dims, |x, y, z| {
        0.5 + 0.25 * (0.6 * x as f64 + phase).sin() * (0.45 * y as f64).cos() + 0.15 * (0.35 * z as f64 - phase).sin()
    })
}

fn random_mlp(source: &Volume3D, hidden: usize, seed: u64) -> TranslatorModel {
    let mut m = TranslatorModel::mlp(hidden, seed, source, 3, 5, 1e-6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let p: Vec<f64> = m.params().iter().map(|_| rng.random_range(-0.6..0.6)).collect();
    m.set_params(&p).unwrap();
    m
}

fn oracle_output(m: &Mlp, v: &Volume3D, p: [usize; 3]) -> f64 {
    let x = v.get(p[0], p[1], p[2]);
    let n = naive_normal(v, p, m.gradient_window / 2, m.epsilon);
    let (mean, std) = naive_window_stats(v, p, m.stats_window);
    let raw = [x, n[0], n[1], n[2], mean, std];
    let f: Vec<f64> = (0..FEATURES).map(|k| (raw[k] - m.feature_mean[k]) / m.feature_scale[k]).collect();
    let mut out = x + m.b2;
    for j in 0..m.hidden {
        let mut pre = m.b1[j];
        for k in 0..FEATURES {
            pre += m.w1[j * FEATURES + k] * f[k];
        }
        out += m.w2[j] * pre.tanh();
    }
    out
}

#[test]
fn mlp_matches_scalar_oracle() {
    let dims = Dims::cube(9);
    let v = random_volume(dims, 21);
    let model = random_mlp(&v, 5, 3);
    let TranslatorModel::Mlp(m) = &model else { unreachable!() };
    let out = translate(&model, &v).unwrap();
    for z in 0..9 {
        for y in 0..9 {
            for x in 0..9 {
                let expected = oracle_output(m, &v, [x, y, z]);
                let got = out.get(x, y, z);
                assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
            }
        }
    }
    assert_eq!(out, translate(&model, &v).unwrap());
}

fn fd_check(model: &TranslatorModel, f: &Volume3D, r: &Volume3D, indices: &[usize]) {
    let cfg = LossConfig { lg_window: 3, ..LossConfig::default() };
    let loss_at = |m: &TranslatorModel| translator_loss(&translate(m, f).unwrap(), f, r, &cfg).unwrap();
    let upstream = loss_at(model).grad_floating;
    let analytic = translate_param_gradient(model, f, &upstream).unwrap();
    let p0 = model.params();
    let h = 1e-6;
    for &k in indices {
        let mut m = model.clone();
        let mut p = p0.clone();
        p[k] += h;
        m.set_params(&p).unwrap();
        let up = loss_at(&m).value;
        p[k] -= 2.0 * h;
        m.set_params(&p).unwrap();
        let down = loss_at(&m).value;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-9);
        assert!(rel < 1e-3, "param {k}: {} vs {numeric}", analytic[k]);
    }
}

#[test]
fn every_parameter_class_matches_finite_differences() {
    let dims = Dims::cube(8);
    let (f, r) = (smooth(dims, 0.0), smooth(dims, 1.3));
    let h = 4;
    let model = random_mlp(&f, h, 11);
    // w1, b1, w2, b2 in flat order
    let classes = [0, 7, 23, h * FEATURES, h * FEATURES + 3, h * FEATURES + h, h * FEATURES + 2 * h - 1, h * FEATURES + 2 * h];
    fd_check(&model, &f, &r, &classes);

    let lut = TranslatorModel::lut_from_knots(&[(0.0, 0.1), (0.25, 0.7), (0.5, 0.9), (0.75, 0.4), (1.0, 0.2)]).unwrap();
    fd_check(&lut, &f, &r, &[0, 1, 2, 3, 4]);
}

#[test]
fn l1_training_decreases_monotonically() {
    let dims = Dims::cube(10);
    let (f, held) = (smooth(dims, 0.4), smooth(dims, 2.0));
    let cfg = LossConfig { mu: 0.0, lg_window: 3, ..LossConfig::default() };
    let flat = TranslatorModel::lut_from_knots(&(0..8).map(|i| (i as f64 / 7.0, 0.5)).collect::<Vec<_>>()).unwrap();
    let mlp = random_mlp(&f, 8, 5);
    for (mut model, lr, held_gain) in [(flat, 5e-3, 0.2), (mlp, 1e-3, 0.8)] {
        let held_l1 = |m: &TranslatorModel| l1_loss(&translate(m, &held).unwrap(), &held).unwrap().value;
        let held_before = held_l1(&model);
        let mut state = TranslatorTrainState::new(&model, lr);
        let mut last = f64::INFINITY;
        for step in 0..50 {
            let loss = translator_step(&mut model, &f, &f, &cfg, &mut state).unwrap();
            assert!(loss.total < last, "step {step}: {} after {last}", loss.total);
            last = loss.total;
        }
        assert!(held_l1(&model) < held_gain * held_before);
    }
}

#[test]
fn identity_lut_does_not_drift_on_aligned_pair() {
    let dims = Dims::cube(10);
    let f = smooth(dims, 0.9);
    let lr = 1e-2;
    for mu in [0.0, 5.0] {
        let cfg = LossConfig { lg_window: 3, mu, ..LossConfig::default() };
        let mut model = TranslatorModel::identity_lut(32).unwrap();
        let mut state = TranslatorTrainState::new(&model, lr);
        let initial = l1_loss(&translate(&model, &f).unwrap(), &f).unwrap().value;
        // the gradient term pulls off identity by at most about one Adam step
        let allowed = if mu == 0.0 { 1e-6 } else { lr };
        for step in 0..40 {
            let loss = translator_step(&mut model, &f, &f, &cfg, &mut state).unwrap();
            if step >= 5 {
                assert!(loss.l1 <= initial + allowed, "mu {mu} step {step}: {}", loss.l1);
            }
        }
    }
}

#[test]
fn optimizer_state_tracks_the_model() {
    let dims = Dims::cube(8);
    let f = smooth(dims, 0.2);
    let model = random_mlp(&f, 3, 1);
    let state = TranslatorTrainState::new(&model, 1e-3);
    assert_eq!(state.optimizer().len(), model.param_count());
    assert_eq!(state.optimizer().first_moment().len(), state.optimizer().second_moment().len());
    let mut lut = TranslatorModel::identity_lut(4).unwrap();
    let mut wrong = TranslatorTrainState::new(&model, 1e-3);
    assert!(translator_step(&mut lut, &f, &f, &LossConfig::default(), &mut wrong).is_err());
}
