use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, SeededRng};

/// Low-rank additive adapter `W + B A` with `A: r × d_in`, `B: d_out × r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
}

impl LoraAdapter {
    /// Standard init: Gaussian `A` with std `1/√d_in`, zero `B`.
    pub fn init(d_out: usize, d_in: usize, rank: usize, seed: u64) -> Self {
        let a = SeededRng::new(seed).normal_matrix(rank, d_in, 1.0 / (d_in as f64).sqrt());
        Self { a, b: DenseMatrix::zeros(d_out, rank) }
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn delta(&self) -> DenseMatrix {
        self.b.matmul(&self.a).expect("adapter dims")
    }

    /// `(∂ℒ/∂A, ∂ℒ/∂B) = (Bᵀ G, G Aᵀ)` for a dense weight gradient `G`.
    pub fn gradients(&self, weight_grad: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
        if weight_grad.shape() != (self.b.rows(), self.a.cols()) {
            return Err(Error::dim("weight gradient does not match the adapter"));
        }
        Ok((self.b.t_matmul(weight_grad)?, weight_grad.matmul_t(&self.a)?))
    }
}

/// Change of the effective weight `W + B A` after one plain gradient step
/// on both `A` and `B` at upstream gradient `g` and input `x`.
pub fn lora_update(
    w: &DenseMatrix,
    a: &DenseMatrix,
    b_mat: &DenseMatrix,
    x: &[f64],
    g: &[f64],
    eta: f64,
) -> Result<DenseMatrix> {
    let (d_out, d_in) = w.shape();
    if a.cols() != d_in || b_mat.rows() != d_out || a.rows() != b_mat.cols() {
        return Err(Error::dim(format!(
            "adapter A {}x{}, B {}x{} do not fit a {d_out}x{d_in} weight",
            a.rows(),
            a.cols(),
            b_mat.rows(),
            b_mat.cols()
        )));
    }
    if x.len() != d_in || g.len() != d_out {
        return Err(Error::dim("lora_update vector lengths"));
    }
    let adapter = LoraAdapter { a: a.clone(), b: b_mat.clone() };
    let (ga, gb) = adapter.gradients(&DenseMatrix::outer(g, x))?;
    let mut next = adapter.clone();
    next.a.axpy(-eta, &ga)?;
    next.b.axpy(-eta, &gb)?;
    next.delta().sub(&adapter.delta())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian, numeric_rank, SeededRng};

    #[test]
    fn zero_gradient_no_change() {
        let ad = LoraAdapter::init(4, 5, 2, 1);
        let d = lora_update(&DenseMatrix::zeros(4, 5), &ad.a, &ad.b, &[1.0; 5], &[0.0; 4], 0.1).unwrap();
        assert_eq!(d.max_abs(), 0.0);
    }

    #[test]
    fn first_step_from_zero_b_moves_only_through_b() {
        let ad = LoraAdapter::init(6, 6, 2, 3);
        let mut rng = SeededRng::new(4);
        let (x, g) = (rng.normal_vec(6, 1.0), rng.normal_vec(6, 1.0));
        let d = lora_update(&gaussian(6, 6, 1, 1.0), &ad.a, &ad.b, &x, &g, 0.1).unwrap();
        // B = 0 gives ∂ℒ/∂A = 0, so ΔW = −η G Aᵀ A exactly.
        let expect = DenseMatrix::outer(&g, &x).matmul_t(&ad.a).unwrap().matmul(&ad.a).unwrap().scale(-0.1);
        assert!(d.sub(&expect).unwrap().max_abs() < 1e-14);
        assert!(numeric_rank(&d, 1e-9).unwrap() <= 2);
    }

    #[test]
    fn rank_stays_capped_over_steps() {
        let mut ad = LoraAdapter::init(6, 6, 2, 6);
        let mut rng = SeededRng::new(7);
        for _ in 0..10 {
            let (x, g) = (rng.normal_vec(6, 1.0), rng.normal_vec(6, 1.0));
            let (ga, gb) = ad.gradients(&DenseMatrix::outer(&g, &x)).unwrap();
            ad.a.axpy(-0.1, &ga).unwrap();
            ad.b.axpy(-0.1, &gb).unwrap();
        }
        assert!(numeric_rank(&ad.delta(), 1e-9).unwrap() <= 2);
    }

    #[test]
    fn rejects_bad_dims() {
        let ad = LoraAdapter::init(4, 5, 2, 1);
        assert!(lora_update(&DenseMatrix::zeros(5, 5), &ad.a, &ad.b, &[1.0; 5], &[1.0; 4], 0.1).is_err());
    }
}
