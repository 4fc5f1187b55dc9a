//! Windowed squared cross-correlation.

use crate::error::{check_dims, Result};
use crate::filters::{box_count, box_sum};
use crate::volume::Volume3D;

use super::{window_radius, LossValue};

/// `sum_p cross_p^2 / (var_r,p * var_f,p + eps)` over truncated cubic
/// windows, plus optional gradients with respect to each input.
pub(crate) fn lcc_terms(
    r: &[f64],
    f: &[f64],
    dims: crate::volume::Dims,
    radius: usize,
    eps: f64,
    grad_r: bool,
    grad_f: bool,
) -> (f64, Option<Vec<f64>>, Option<Vec<f64>>) {
    let n = dims.len();
    let count = box_count(dims, radius);
    let rr: Vec<f64> = r.iter().map(|v| v * v).collect();
    let ff: Vec<f64> = f.iter().map(|v| v * v).collect();
    let rf: Vec<f64> = r.iter().zip(f).map(|(a, b)| a * b).collect();
    let sr = box_sum(r, dims, radius);
    let sf = box_sum(f, dims, radius);
    let srr = box_sum(&rr, dims, radius);
    let sff = box_sum(&ff, dims, radius);
    let srf = box_sum(&rf, dims, radius);

    let mut value = 0.0;
    let mut coef_cross = vec![0.0; n];
    let mut coef_vr = vec![0.0; n];
    let mut coef_vf = vec![0.0; n];
    let mut mean_r = vec![0.0; n];
    let mut mean_f = vec![0.0; n];
    for i in 0..n {
        let c = count[i];
        let cross = srf[i] - sr[i] * sf[i] / c;
        let vr = srr[i] - sr[i] * sr[i] / c;
        let vf = sff[i] - sf[i] * sf[i] / c;
        let d = vr * vf + eps;
        value += cross * cross / d;
        coef_cross[i] = 2.0 * cross / d;
        let k = 2.0 * cross * cross / (d * d);
        coef_vr[i] = k * vf;
        coef_vf[i] = k * vr;
        mean_r[i] = sr[i] / c;
        mean_f[i] = sf[i] / c;
    }

    // d cc_p / d x(q) = A_p (y(q) - ybar_p) - B_p (x(q) - xbar_p), summed over
    // the windows p containing q; the truncated box is symmetric.
    let side = |x: &[f64], y: &[f64], xbar: &[f64], ybar: &[f64], b: &[f64]| -> Vec<f64> {
        let a_sum = box_sum(&coef_cross, dims, radius);
        let ay: Vec<f64> = coef_cross.iter().zip(ybar).map(|(a, m)| a * m).collect();
        let ay_sum = box_sum(&ay, dims, radius);
        let b_sum = box_sum(b, dims, radius);
        let bx: Vec<f64> = b.iter().zip(xbar).map(|(b, m)| b * m).collect();
        let bx_sum = box_sum(&bx, dims, radius);
        (0..n)
            .map(|q| y[q] * a_sum[q] - ay_sum[q] - x[q] * b_sum[q] + bx_sum[q])
            .collect()
    };
    let gf = grad_f.then(|| side(f, r, &mean_f, &mean_r, &coef_vf));
    let gr = grad_r.then(|| side(r, f, &mean_r, &mean_f, &coef_vr));
    (value, gr, gf)
}

/// Summed windowed squared correlation with gradients for both inputs
/// (`grad_floating` and `grad_reference`).
pub fn lcc_similarity(
    reference: &Volume3D,
    floating: &Volume3D,
    window: usize,
    epsilon: f64,
) -> Result<LossValue> {
    check_dims(reference.dims(), floating.dims())?;
    let radius = window_radius(window, "correlation window")?;
    let (value, gr, gf) = lcc_terms(
        reference.data(),
        floating.data(),
        reference.dims(),
        radius,
        epsilon,
        true,
        true,
    );
    Ok(LossValue {
        value,
        grad_floating: gf.unwrap_or_default(),
        grad_reference: gr,
    })
}
