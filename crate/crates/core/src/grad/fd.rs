//! Central finite differences of the probe loss `ℒ = gᵀ forward(x)`.

use super::GradientBundle;
use crate::btt::BlockTTLayer;
use crate::error::Result;
use crate::linalg::{dot, DenseMatrix};

/// Default perturbation size.
pub const FD_STEP: f64 = 1e-5;

fn probe_loss(layer: &BlockTTLayer, x: &[f64], g: &[f64]) -> Result<f64> {
    Ok(dot(g, &layer.forward(x)?))
}

fn perturb(
    layer: &BlockTTLayer,
    x: &[f64],
    g: &[f64],
    h: f64,
    mut poke: impl FnMut(&mut BlockTTLayer, f64),
) -> Result<f64> {
    let mut plus = layer.clone();
    poke(&mut plus, h);
    let mut minus = layer.clone();
    poke(&mut minus, -h);
    Ok((probe_loss(&plus, x, g)? - probe_loss(&minus, x, g)?) / (2.0 * h))
}

/// Numerical gradients for the layer's trainable cores.
pub fn numerical_bundle(layer: &BlockTTLayer, x: &[f64], g: &[f64], h: f64) -> Result<GradientBundle> {
    let corner = layer.corner();
    let n = layer.n_blocks();

    let g_l = if corner.l_trainable() {
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let (rows, cols) = layer.l_blocks()[k].shape();
            let mut gk = DenseMatrix::zeros(rows, cols);
            for i in 0..rows {
                for j in 0..cols {
                    let v = perturb(layer, x, g, h, |l, d| {
                        let m = &mut l.l_blocks_mut()[k];
                        m.set(i, j, m.get(i, j) + d);
                    })?;
                    gk.set(i, j, v);
                }
            }
            out.push(gk);
        }
        Some(out)
    } else {
        None
    };

    let g_r = if corner.r_trainable() {
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let (rows, cols) = layer.r_blocks()[k].shape();
            let mut gk = DenseMatrix::zeros(rows, cols);
            for i in 0..rows {
                for j in 0..cols {
                    let v = perturb(layer, x, g, h, |l, d| {
                        let m = &mut l.r_blocks_mut()[k];
                        m.set(i, j, m.get(i, j) + d);
                    })?;
                    gk.set(i, j, v);
                }
            }
            out.push(gk);
        }
        Some(out)
    } else {
        None
    };

    let g_s = match layer.s_blocks() {
        Some(s) => {
            let mut out = Vec::with_capacity(n);
            for (k, sk) in s.iter().enumerate() {
                let mut v = Vec::with_capacity(sk.len());
                for i in 0..sk.len() {
                    v.push(perturb(layer, x, g, h, |l, d| {
                        l.s_blocks_mut().expect("separate S")[k][i] += d;
                    })?);
                }
                out.push(v);
            }
            Some(out)
        }
        None => None,
    };

    Ok(GradientBundle { g_l, g_s, g_r, weight_grad: DenseMatrix::outer(g, x) })
}

/// Normwise relative error per core, `‖a − b‖ / max(‖a‖, ‖b‖)`, maximized
/// over the cores present in both bundles. Two zero gradients compare as 0.
pub fn max_relative_error(analytic: &GradientBundle, numeric: &GradientBundle) -> f64 {
    let mut worst = 0.0f64;
    let mut track = |a: &[f64], b: &[f64]| {
        let diff: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let scale = crate::linalg::norm2(a).max(crate::linalg::norm2(b));
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    };
    let flat = |m: &Option<Vec<DenseMatrix>>| -> Vec<f64> {
        m.iter().flatten().flat_map(|b| b.as_slice().iter().copied()).collect()
    };
    if analytic.g_l.is_some() {
        track(&flat(&analytic.g_l), &flat(&numeric.g_l));
    }
    if analytic.g_r.is_some() {
        track(&flat(&analytic.g_r), &flat(&numeric.g_r));
    }
    if let (Some(a), Some(b)) = (&analytic.g_s, &numeric.g_s) {
        let a: Vec<f64> = a.iter().flatten().copied().collect();
        let b: Vec<f64> = b.iter().flatten().copied().collect();
        track(&a, &b);
    }
    worst
}
