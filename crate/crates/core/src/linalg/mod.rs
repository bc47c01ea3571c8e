//! Dense linear-algebra substrate.

mod matrix;
mod rng;
mod svd;
pub mod text;

pub use matrix::{dot, norm2, DenseMatrix};
pub use rng::{derive_seed, gaussian, SeededRng};
pub use svd::{
    effective_rank, lstsq, numeric_rank, orthonormal_basis, orthonormality_defect, stable_rank, svd_thin, SvdResult,
    DEFAULT_RANK_TOL,
};
pub(crate) use svd::{effective_rank_from_spectrum, rank_from_spectrum};

/// Random matrix with orthonormal columns, from the SVD of a seeded Gaussian.
pub fn random_orthonormal(rows: usize, cols: usize, seed: u64) -> crate::Result<DenseMatrix> {
    assert!(cols <= rows, "need cols <= rows");
    Ok(svd_thin(&gaussian(rows, cols, seed, 1.0))?.u)
}
