//! Closed-form gradients of a block tensor-train layer and the one-step
//! weight updates they induce.
//!
//! For one block with `W_k = L_k D_k R_k` (`D_k = diag(S_k)`, or the identity
//! when `S` is merged away) and block gradient `G_k = ∂ℒ/∂W_k`:
//!
//! ```text
//! ∂ℒ/∂L_k = G_k R_kᵀ D_k
//! ∂ℒ/∂R_k = D_k L_kᵀ G_k
//! ∂ℒ/∂S_k = diag(L_kᵀ G_k R_kᵀ)
//! ```
//!
//! With a single sample, `G = g xᵀ` and the products collapse to outer
//! products of `L_kᵀ g` and `R_k x_k`.

pub mod fd;
mod lora;
mod precond;

pub use lora::{lora_update, LoraAdapter};
pub use precond::{predicted_update, predicted_update_dense, PreconditionerForm};

use serde::{Deserialize, Serialize};

use crate::btt::BlockTTLayer;
use crate::error::{Error, Result};
use crate::linalg::{dot, DenseMatrix};

/// Gradients for the trainable cores of one layer, plus the dense weight
/// gradient they were derived from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientBundle {
    pub g_l: Option<Vec<DenseMatrix>>,
    pub g_s: Option<Vec<Vec<f64>>>,
    pub g_r: Option<Vec<DenseMatrix>>,
    /// `∂ℒ/∂W`; `g xᵀ` for a single sample.
    pub weight_grad: DenseMatrix,
}

impl GradientBundle {
    pub fn zeros_like(layer: &BlockTTLayer) -> Self {
        backward_dense(layer, &DenseMatrix::zeros(layer.d_out(), layer.d_in())).expect("dims match by construction")
    }

    /// Concatenated Euclidean norm of the `S` gradients (0 when absent).
    pub fn s_norm(&self) -> f64 {
        self.g_s.as_ref().map_or(0.0, |s| s.iter().flatten().map(|v| v * v).sum::<f64>().sqrt())
    }

    pub fn l_norm(&self) -> f64 {
        frob_all(self.g_l.as_deref())
    }

    pub fn r_norm(&self) -> f64 {
        frob_all(self.g_r.as_deref())
    }

    /// Checks that exactly the layer's trainable cores carry gradients of
    /// the right shapes.
    pub fn check_against(&self, layer: &BlockTTLayer) -> Result<()> {
        let corner = layer.corner();
        let present = (self.g_l.is_some(), self.g_s.is_some(), self.g_r.is_some());
        let expected = (corner.l_trainable(), corner.has_separate_s(), corner.r_trainable());
        if present != expected {
            return Err(Error::Contract(format!(
                "bundle carries (L, S, R) = {present:?}, corner {corner} trains {expected:?}"
            )));
        }
        let shapes_ok = |g: &Option<Vec<DenseMatrix>>, cores: &[DenseMatrix]| {
            g.as_ref()
                .is_none_or(|g| g.len() == cores.len() && g.iter().zip(cores).all(|(a, b)| a.shape() == b.shape()))
        };
        let s_ok = match (&self.g_s, layer.s_blocks()) {
            (Some(g), Some(s)) => g.len() == s.len() && g.iter().zip(s).all(|(a, b)| a.len() == b.len()),
            _ => true,
        };
        if !shapes_ok(&self.g_l, layer.l_blocks()) || !shapes_ok(&self.g_r, layer.r_blocks()) || !s_ok {
            return Err(Error::dim("gradient shapes do not match the layer cores"));
        }
        Ok(())
    }
}

fn frob_all(blocks: Option<&[DenseMatrix]>) -> f64 {
    blocks.map_or(0.0, |b| b.iter().map(|m| m.frobenius_norm().powi(2)).sum::<f64>().sqrt())
}

/// Analytical gradients for upstream gradient `g = ∂ℒ/∂y` at input `x`.
pub fn backward(layer: &BlockTTLayer, x: &[f64], g: &[f64]) -> Result<GradientBundle> {
    if x.len() != layer.d_in() || g.len() != layer.d_out() {
        return Err(Error::dim(format!(
            "backward expects x of length {} and g of length {}, got {} and {}",
            layer.d_in(),
            layer.d_out(),
            x.len(),
            g.len()
        )));
    }
    let corner = layer.corner();
    let n = layer.n_blocks();
    let mut g_l = corner.l_trainable().then(|| Vec::with_capacity(n));
    let mut g_s = corner.has_separate_s().then(|| Vec::with_capacity(n));
    let mut g_r = corner.r_trainable().then(|| Vec::with_capacity(n));

    for k in 0..n {
        let xk = layer.block_input(x, k);
        let gk = layer.block_output(g, k);
        let lt_g = layer.l_blocks()[k].t_matvec(gk)?;
        let r_x = layer.r_blocks()[k].matvec(xk)?;
        let s = layer.s_blocks().map(|s| s[k].as_slice());
        let scaled = |v: &[f64]| -> Vec<f64> {
            match s {
                Some(s) => v.iter().zip(s).map(|(a, b)| a * b).collect(),
                None => v.to_vec(),
            }
        };
        if let Some(g_r) = g_r.as_mut() {
            g_r.push(DenseMatrix::outer(&scaled(&lt_g), xk));
        }
        if let Some(g_l) = g_l.as_mut() {
            g_l.push(DenseMatrix::outer(gk, &scaled(&r_x)));
        }
        if let Some(g_s) = g_s.as_mut() {
            g_s.push(lt_g.iter().zip(&r_x).map(|(a, b)| a * b).collect());
        }
    }

    Ok(GradientBundle { g_l, g_s, g_r, weight_grad: DenseMatrix::outer(g, x) })
}

/// Analytical gradients from a dense weight gradient `G = ∂ℒ/∂W`, e.g. a
/// batch sum of `g_i x_iᵀ`.
pub fn backward_dense(layer: &BlockTTLayer, weight_grad: &DenseMatrix) -> Result<GradientBundle> {
    if weight_grad.shape() != (layer.d_out(), layer.d_in()) {
        return Err(Error::dim("weight gradient shape does not match the layer"));
    }
    let corner = layer.corner();
    let n = layer.n_blocks();
    let mut g_l = corner.l_trainable().then(|| Vec::with_capacity(n));
    let mut g_s = corner.has_separate_s().then(|| Vec::with_capacity(n));
    let mut g_r = corner.r_trainable().then(|| Vec::with_capacity(n));

    for k in 0..n {
        let gk = layer.block_of(weight_grad, k);
        let l = &layer.l_blocks()[k];
        let r = &layer.r_blocks()[k];
        let s = layer.s_blocks().map(|s| s[k].as_slice());
        let lt_g = l.t_matmul(&gk)?;
        if let Some(g_r) = g_r.as_mut() {
            g_r.push(match s {
                Some(s) => lt_g.scale_rows(s),
                None => lt_g.clone(),
            });
        }
        if let Some(g_l) = g_l.as_mut() {
            let g_rt = gk.matmul_t(r)?;
            g_l.push(match s {
                Some(s) => g_rt.scale_cols(s),
                None => g_rt,
            });
        }
        if let Some(g_s) = g_s.as_mut() {
            g_s.push((0..layer.rank()).map(|i| dot(lt_g.row(i), r.row(i))).collect());
        }
    }

    Ok(GradientBundle { g_l, g_s, g_r, weight_grad: weight_grad.clone() })
}

/// `merge(after one plain step at rate eta) − merge(before)`, computed on a
/// private copy of `layer`.
pub fn effective_update(layer: &BlockTTLayer, bundle: &GradientBundle, eta: f64) -> Result<DenseMatrix> {
    if !(eta > 0.0) {
        return Err(Error::Domain(format!("learning rate {eta} must be positive")));
    }
    let mut stepped = layer.clone();
    crate::optim::sgd_step(&mut stepped, bundle, eta)?;
    stepped.merge().sub(&layer.merge())
}
