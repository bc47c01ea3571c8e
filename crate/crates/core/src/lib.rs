//! Full-rank block tensor-train adaptation of linear layers.
//!
//! A pretrained weight `W` is split into column blocks (or row blocks), each
//! block is factored by its own full SVD into `L · diag(S) · R`, and a subset
//! of the cores is then fine-tuned. At initialization the factorization is
//! lossless; during training the frozen core pins every block update to a
//! pretrained subspace while the singular values precondition the step.
//!
//! Modules:
//! - [`linalg`]: dense matrices, thin SVD, rank measures, seeded sampling.
//! - [`btt`]: the factored layer, block-SVD initialization, forward, merge.
//! - [`grad`]: closed-form backward passes and per-corner update formulas.
//! - [`optim`]: plain gradient steps, AdamW, learning-rate schedules.
//! - [`quant`]: NF4 quantization of the frozen core.
//! - [`diagnostics`]: energy ratio, spectral shift, rank capacity, confinement.
//! - [`harness`]: synthetic teacher-student fine-tuning experiments.
//! - [`verify`]: the property battery behind `fura verify`.
//! - [`cli`]: the `fura` command-line tool.

pub mod btt;
pub mod cli;
pub mod diagnostics;
mod error;
pub mod grad;
pub mod harness;
pub mod linalg;
pub mod optim;
pub mod quant;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::DenseMatrix;
