//! Block tensor-train layer: per-block SVD factorization `W_k = L_k diag(S_k) R_k`.
//!
//! Column-sliced layers split `W` into `n` column blocks of width `b`
//! (`n · b = d_in`); each `L_k` is `d_out × r` and each `R_k` is `r × b`.
//! Row-sliced layers split `W` into `n` row blocks of height `b`
//! (`n · b = d_out`); each `L_k` is `b × r` and each `R_k` is `r × d_in`.
//! The rank is always full: `r = min(block rows, block cols)`.

mod corner;
pub mod io;
mod layer;

pub use corner::{DesignCorner, SPlacement, TrainableSide};
pub use layer::{corner_variants, BlockTTLayer, CornerVariants, MissingVariant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// `m = 1`: blocks are column slices, the input is split.
    ColumnSliced,
    /// `n = 1`: blocks are row slices, the output is split.
    RowSliced,
}

impl Orientation {
    pub fn name(self) -> &'static str {
        match self {
            Orientation::ColumnSliced => "column_sliced",
            Orientation::RowSliced => "row_sliced",
        }
    }
}

/// Block count `n` and block width `b` along the sliced axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockShape {
    pub n: usize,
    pub b: usize,
    pub orientation: Orientation,
}

impl BlockShape {
    pub fn column(n: usize, b: usize) -> Self {
        Self { n, b, orientation: Orientation::ColumnSliced }
    }

    pub fn row(n: usize, b: usize) -> Self {
        Self { n, b, orientation: Orientation::RowSliced }
    }

    /// Balanced split of the sliced axis: `b` is the divisor of the axis
    /// length closest to its square root, ties broken toward the smaller `b`.
    pub fn balanced(d_out: usize, d_in: usize, orientation: Orientation) -> Result<Self> {
        let dim = match orientation {
            Orientation::ColumnSliced => d_in,
            Orientation::RowSliced => d_out,
        };
        let b = balanced_divisor(dim)?;
        Ok(Self { n: dim / b, b, orientation })
    }

    /// Same `(n, b)` with the other orientation.
    pub fn with_orientation(self, orientation: Orientation) -> Self {
        Self { orientation, ..self }
    }

    pub fn sliced_dim(&self) -> usize {
        self.n * self.b
    }

    pub fn validate(&self, d_out: usize, d_in: usize) -> Result<()> {
        if self.n == 0 || self.b == 0 {
            return Err(Error::dim("block count and width must be positive"));
        }
        let (axis, len) = match self.orientation {
            Orientation::ColumnSliced => ("d_in", d_in),
            Orientation::RowSliced => ("d_out", d_out),
        };
        if self.n * self.b != len {
            return Err(Error::dim(format!("{} blocks of width {} do not tile {axis} = {len}", self.n, self.b)));
        }
        Ok(())
    }

    /// `(rows, cols)` of one block for a `d_out × d_in` weight.
    pub fn block_dims(&self, d_out: usize, d_in: usize) -> (usize, usize) {
        match self.orientation {
            Orientation::ColumnSliced => (d_out, self.b),
            Orientation::RowSliced => (self.b, d_in),
        }
    }

    pub fn rank(&self, d_out: usize, d_in: usize) -> usize {
        let (a, c) = self.block_dims(d_out, d_in);
        a.min(c)
    }
}

fn balanced_divisor(dim: usize) -> Result<usize> {
    if dim == 0 {
        return Err(Error::dim("cannot split an empty axis"));
    }
    let root = (dim as f64).sqrt();
    let mut best = 1;
    for b in 1..=dim {
        if dim % b != 0 {
            continue;
        }
        if ((b as f64) - root).abs() < ((best as f64) - root).abs() {
            best = b;
        }
    }
    Ok(best)
}

/// Trainable and frozen scalar counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub frozen: usize,
}

impl ParamCount {
    /// Counts for a layer layout, without building the layer.
    pub fn for_layout(d_out: usize, d_in: usize, shape: BlockShape, corner: DesignCorner) -> Result<Self> {
        shape.validate(d_out, d_in)?;
        let (rows, cols) = shape.block_dims(d_out, d_in);
        let r = rows.min(cols);
        let l = shape.n * rows * r;
        let s = if corner.placement == SPlacement::Separate { shape.n * r } else { 0 };
        let big_r = shape.n * r * cols;
        let mut count = ParamCount { trainable: 0, frozen: 0 };
        let mut add = |size, trainable| {
            if trainable {
                count.trainable += size;
            } else {
                count.frozen += size;
            }
        };
        add(l, corner.l_trainable());
        add(s, true);
        add(big_r, corner.r_trainable());
        Ok(count)
    }

    /// LoRA adapter `ΔW = B A` of rank `r`: `r (d_in + d_out)` trainables.
    pub fn lora(d_out: usize, d_in: usize, r: usize) -> usize {
        r * (d_in + d_out)
    }

    /// General `m × n` block grid with `a × b` blocks at rank `r`:
    /// `|L| + |R| = m n a r + m n r b`.
    pub fn btt_grid(m: usize, n: usize, a: usize, b: usize, r: usize) -> usize {
        m * n * a * r + m * n * r * b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_divisor_ties_go_small() {
        assert_eq!(balanced_divisor(16).unwrap(), 4);
        assert_eq!(balanced_divisor(32).unwrap(), 4);
        assert_eq!(balanced_divisor(4096).unwrap(), 64);
        // 6: divisors 1,2,3,6 around 2.449 -> 2 (0.449) beats 3 (0.551)
        assert_eq!(balanced_divisor(6).unwrap(), 2);
        assert_eq!(balanced_divisor(7).unwrap(), 1);
        assert_eq!(balanced_divisor(11008).unwrap(), 86);
    }

    #[test]
    fn shape_validation() {
        assert!(BlockShape::column(2, 3).validate(4, 6).is_ok());
        assert!(BlockShape::row(2, 3).validate(4, 6).is_err());
        assert!(BlockShape::column(0, 3).validate(4, 0).is_err());
        assert_eq!(BlockShape::column(2, 3).block_dims(4, 6), (4, 3));
        assert_eq!(BlockShape::row(2, 2).block_dims(4, 6), (2, 6));
    }

    #[test]
    fn default_corner_count_at_4096() {
        let c = ParamCount::for_layout(4096, 4096, BlockShape::column(64, 64), DesignCorner::DEFAULT).unwrap();
        assert_eq!(c.trainable, 266_240);
        assert_eq!(c.frozen, 64 * 4096 * 64);
        assert_eq!(ParamCount::lora(4096, 4096, 64), 524_288);
        assert_eq!(ParamCount::btt_grid(4, 4, 4, 4, 4), 2 * 16 * 16);
    }
}
