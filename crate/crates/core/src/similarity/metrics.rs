use crate::error::{check_dims, Error, Result};
use crate::volume::Volume3D;

use super::LossValue;

/// Mean absolute difference with subgradient `sign(a - b) / N` (zero at ties).
pub fn l1_loss(a: &Volume3D, b: &Volume3D) -> Result<LossValue> {
    check_dims(a.dims(), b.dims())?;
    let n = a.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(a.len());
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x - y;
        value += d.abs();
        grad.push(if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        });
    }
    let second = grad.iter().map(|g| -g).collect();
    Ok(LossValue {
        value: value / n,
        grad_floating: grad,
        grad_reference: Some(second),
    })
}

fn quantize(vol: &Volume3D, bins: usize) -> Vec<usize> {
    let (lo, hi) = vol.min_max();
    let range = hi - lo;
    vol.data()
        .iter()
        .map(|&v| {
            if range > 0.0 {
                (((v - lo) / range * bins as f64) as usize).min(bins - 1)
            } else {
                0
            }
        })
        .collect()
}

/// Histogram mutual information in nats, with `bins` equal-width bins over
/// each volume's own intensity range.
pub fn mi_metric(reference: &Volume3D, floating: &Volume3D, bins: usize) -> Result<f64> {
    check_dims(reference.dims(), floating.dims())?;
    if bins < 8 {
        return Err(Error::Config(format!("mutual information needs >= 8 bins, got {bins}")));
    }
    let qr = quantize(reference, bins);
    let qf = quantize(floating, bins);
    let mut joint = vec![0usize; bins * bins];
    let mut pr = vec![0usize; bins];
    let mut pf = vec![0usize; bins];
    for (&a, &b) in qr.iter().zip(&qf) {
        joint[a * bins + b] += 1;
        pr[a] += 1;
        pf[b] += 1;
    }
    let n = qr.len() as f64;
    let mut mi = 0.0;
    for a in 0..bins {
        for b in 0..bins {
            let c = joint[a * bins + b];
            if c > 0 {
                let pxy = c as f64 / n;
                mi += pxy * (pxy * n * n / (pr[a] as f64 * pf[b] as f64)).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}
