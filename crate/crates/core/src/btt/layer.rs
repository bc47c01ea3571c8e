use serde::{Deserialize, Serialize};

use super::{BlockShape, DesignCorner, Orientation, ParamCount};
use crate::error::{Error, Result};
use crate::linalg::{svd_thin, DenseMatrix};

/// A weight matrix held as per-block cores `L_k`, optional `S_k`, `R_k`.
///
/// The corner is encoded by the parameterization itself: merged placements
/// carry no `S` vector, and `diag(S)` lives inside the core it was folded
/// into at initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockTTLayer {
    d_out: usize,
    d_in: usize,
    shape: BlockShape,
    corner: DesignCorner,
    rank: usize,
    l_core: Vec<DenseMatrix>,
    s_core: Option<Vec<Vec<f64>>>,
    r_core: Vec<DenseMatrix>,
}

impl BlockTTLayer {
    /// Lossless block-SVD initialization: `W_k = U_k Σ_k V_kᵀ` with
    /// `L_k = U_k`, `S_k = diag(Σ_k)`, `R_k = V_kᵀ`, then `S` folded into
    /// the core the corner designates.
    pub fn block_svd_init(w: &DenseMatrix, shape: BlockShape, corner: DesignCorner) -> Result<Self> {
        let (d_out, d_in) = w.shape();
        shape.validate(d_out, d_in)?;
        if !w.is_finite() {
            return Err(Error::Domain("weight has non-finite entries".into()));
        }
        let rank = shape.rank(d_out, d_in);
        let mut l_core = Vec::with_capacity(shape.n);
        let mut s_core = Vec::with_capacity(shape.n);
        let mut r_core = Vec::with_capacity(shape.n);
        for k in 0..shape.n {
            let block = extract_block(w, shape, k);
            let svd = svd_thin(&block)?;
            debug_assert_eq!(svd.sigma.len(), rank);
            l_core.push(svd.u);
            s_core.push(svd.sigma);
            r_core.push(svd.vt);
        }
        let s_core = match corner.s_folds_into_l() {
            None => Some(s_core),
            Some(true) => {
                for (l, s) in l_core.iter_mut().zip(&s_core) {
                    *l = l.scale_cols(s);
                }
                None
            }
            Some(false) => {
                for (r, s) in r_core.iter_mut().zip(&s_core) {
                    *r = r.scale_rows(s);
                }
                None
            }
        };
        Ok(Self { d_out, d_in, shape, corner, rank, l_core, s_core, r_core })
    }

    /// Assembles a layer from explicit cores, checking every dimension.
    pub fn from_parts(
        d_out: usize,
        d_in: usize,
        shape: BlockShape,
        corner: DesignCorner,
        l_core: Vec<DenseMatrix>,
        s_core: Option<Vec<Vec<f64>>>,
        r_core: Vec<DenseMatrix>,
    ) -> Result<Self> {
        shape.validate(d_out, d_in)?;
        let (rows, cols) = shape.block_dims(d_out, d_in);
        let rank = rows.min(cols);
        if l_core.len() != shape.n || r_core.len() != shape.n {
            return Err(Error::dim(format!("expected {} blocks per core", shape.n)));
        }
        if let Some(l) = l_core.iter().find(|l| l.shape() != (rows, rank)) {
            return Err(Error::dim(format!("L block is {}x{}, expected {rows}x{rank}", l.rows(), l.cols())));
        }
        if let Some(r) = r_core.iter().find(|r| r.shape() != (rank, cols)) {
            return Err(Error::dim(format!("R block is {}x{}, expected {rank}x{cols}", r.rows(), r.cols())));
        }
        match (&s_core, corner.has_separate_s()) {
            (Some(s), true) => {
                if s.len() != shape.n || s.iter().any(|v| v.len() != rank) {
                    return Err(Error::dim(format!("expected {} S vectors of length {rank}", shape.n)));
                }
            }
            (None, false) => {}
            (Some(_), false) => return Err(Error::Contract(format!("corner {corner} has no separate S"))),
            (None, true) => return Err(Error::Contract(format!("corner {corner} needs an S vector"))),
        }
        let layer = Self { d_out, d_in, shape, corner, rank, l_core, s_core, r_core };
        if !layer.all_finite() {
            return Err(Error::Domain("layer cores have non-finite entries".into()));
        }
        Ok(layer)
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn shape(&self) -> BlockShape {
        self.shape
    }

    pub fn corner(&self) -> DesignCorner {
        self.corner
    }

    pub fn orientation(&self) -> Orientation {
        self.shape.orientation
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn n_blocks(&self) -> usize {
        self.shape.n
    }

    pub fn l_blocks(&self) -> &[DenseMatrix] {
        &self.l_core
    }

    pub fn r_blocks(&self) -> &[DenseMatrix] {
        &self.r_core
    }

    pub fn s_blocks(&self) -> Option<&[Vec<f64>]> {
        self.s_core.as_deref()
    }

    pub fn l_blocks_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.l_core
    }

    pub fn r_blocks_mut(&mut self) -> &mut [DenseMatrix] {
        &mut self.r_core
    }

    pub fn s_blocks_mut(&mut self) -> Option<&mut [Vec<f64>]> {
        self.s_core.as_deref_mut()
    }

    /// Simultaneous mutable access to `(L, S, R)`.
    pub fn cores_mut(&mut self) -> (&mut [DenseMatrix], Option<&mut [Vec<f64>]>, &mut [DenseMatrix]) {
        (&mut self.l_core, self.s_core.as_deref_mut(), &mut self.r_core)
    }

    pub(crate) fn replace_l_blocks(&mut self, l: Vec<DenseMatrix>) -> Result<()> {
        if l.len() != self.l_core.len() || l.iter().zip(&self.l_core).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::dim("replacement L blocks do not match"));
        }
        self.l_core = l;
        Ok(())
    }

    /// `(rows, cols)` of one block `W_k`.
    pub fn block_dims(&self) -> (usize, usize) {
        self.shape.block_dims(self.d_out, self.d_in)
    }

    /// The portion of `x` that block `k` reads.
    pub fn block_input<'a>(&self, x: &'a [f64], k: usize) -> &'a [f64] {
        match self.shape.orientation {
            Orientation::ColumnSliced => &x[k * self.shape.b..(k + 1) * self.shape.b],
            Orientation::RowSliced => x,
        }
    }

    /// The portion of an output-space vector that block `k` writes.
    pub fn block_output<'a>(&self, y: &'a [f64], k: usize) -> &'a [f64] {
        match self.shape.orientation {
            Orientation::ColumnSliced => y,
            Orientation::RowSliced => &y[k * self.shape.b..(k + 1) * self.shape.b],
        }
    }

    /// Block `k` of a `d_out × d_in` matrix.
    pub fn block_of(&self, m: &DenseMatrix, k: usize) -> DenseMatrix {
        extract_block(m, self.shape, k)
    }

    /// Writes `block` into slot `k` of a `d_out × d_in` matrix.
    pub fn place_block(&self, m: &mut DenseMatrix, k: usize, block: &DenseMatrix) {
        match self.shape.orientation {
            Orientation::ColumnSliced => m.set_col_block(k * self.shape.b, block),
            Orientation::RowSliced => m.set_row_block(k * self.shape.b, block),
        }
    }

    fn s_or_ones(&self, k: usize) -> Option<&[f64]> {
        self.s_core.as_ref().map(|s| s[k].as_slice())
    }

    /// Two-stage contraction: `z_k = diag(S_k) R_k x_k` for every block,
    /// then `y = Σ_k L_k z_k` (column-sliced) or `y_k = L_k z_k` (row-sliced).
    /// The merged matrix is never formed.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_in {
            return Err(Error::dim(format!("input has length {}, layer expects {}", x.len(), self.d_in)));
        }
        let z: Vec<Vec<f64>> = (0..self.shape.n)
            .map(|k| {
                let mut zk = self.r_core[k].matvec(self.block_input(x, k)).expect("block dims");
                if let Some(s) = self.s_or_ones(k) {
                    zk.iter_mut().zip(s).for_each(|(z, s)| *z *= s);
                }
                zk
            })
            .collect();
        let mut y = vec![0.0; self.d_out];
        for (k, zk) in z.iter().enumerate() {
            let part = self.l_core[k].matvec(zk).expect("block dims");
            match self.shape.orientation {
                Orientation::ColumnSliced => y.iter_mut().zip(&part).for_each(|(a, b)| *a += b),
                Orientation::RowSliced => y[k * self.shape.b..(k + 1) * self.shape.b].copy_from_slice(&part),
            }
        }
        Ok(y)
    }

    /// `W′_k = L_k diag(S_k) R_k`.
    pub fn merge_block(&self, k: usize) -> DenseMatrix {
        let l = match self.s_or_ones(k) {
            Some(s) => self.l_core[k].scale_cols(s),
            None => self.l_core[k].clone(),
        };
        l.matmul(&self.r_core[k]).expect("block dims")
    }

    /// Dense `d_out × d_in` weight, blocks concatenated along the sliced axis.
    pub fn merge(&self) -> DenseMatrix {
        let mut w = DenseMatrix::zeros(self.d_out, self.d_in);
        for k in 0..self.shape.n {
            self.place_block(&mut w, k, &self.merge_block(k));
        }
        w
    }

    pub fn param_count(&self) -> ParamCount {
        ParamCount::for_layout(self.d_out, self.d_in, self.shape, self.corner).expect("layer shape was validated")
    }

    /// True when every frozen core is bitwise identical to `other`'s.
    pub fn frozen_cores_equal(&self, other: &BlockTTLayer) -> bool {
        if self.shape != other.shape
            || self.corner != other.corner
            || self.d_out != other.d_out
            || self.d_in != other.d_in
        {
            return false;
        }
        let bits_eq = |a: &[DenseMatrix], b: &[DenseMatrix]| {
            a.iter().zip(b).all(|(x, y)| {
                x.shape() == y.shape() && x.as_slice().iter().zip(y.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits())
            })
        };
        (self.corner.l_trainable() || bits_eq(&self.l_core, &other.l_core))
            && (self.corner.r_trainable() || bits_eq(&self.r_core, &other.r_core))
    }

    /// The frozen core blocks, if any core is frozen.
    pub fn frozen_blocks(&self) -> Option<&[DenseMatrix]> {
        if !self.corner.l_trainable() {
            Some(&self.l_core)
        } else if !self.corner.r_trainable() {
            Some(&self.r_core)
        } else {
            None
        }
    }

    pub fn all_finite(&self) -> bool {
        self.l_core.iter().all(DenseMatrix::is_finite)
            && self.r_core.iter().all(DenseMatrix::is_finite)
            && self.s_core.as_ref().is_none_or(|s| s.iter().flatten().all(|v| v.is_finite()))
    }
}

fn extract_block(m: &DenseMatrix, shape: BlockShape, k: usize) -> DenseMatrix {
    match shape.orientation {
        Orientation::ColumnSliced => m.col_block(k * shape.b, shape.b),
        Orientation::RowSliced => m.row_block(k * shape.b, shape.b),
    }
}

/// A corner that could not be built for the requested shape.
#[derive(Clone, Debug, PartialEq)]
pub struct MissingVariant {
    pub corner: DesignCorner,
    pub reason: String,
}

/// Every corner of one weight, built from the same `(n, b)`.
#[derive(Clone, Debug)]
pub struct CornerVariants {
    pub layers: Vec<BlockTTLayer>,
    pub missing: Vec<MissingVariant>,
}

impl CornerVariants {
    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }
}

/// Builds the six parameter-efficient corners plus the fully trainable
/// layer from `shape`'s `(n, b)`. Input-side corners and the full layer use
/// the column-sliced orientation, output-side corners the row-sliced one; a
/// corner whose orientation does not tile `w` is reported in `missing`.
pub fn corner_variants(w: &DenseMatrix, shape: BlockShape) -> Result<CornerVariants> {
    let mut layers = Vec::new();
    let mut missing = Vec::new();
    for corner in DesignCorner::PEFT.iter().chain([&DesignCorner::FULL]) {
        let shape = shape.with_orientation(corner.natural_orientation());
        match BlockTTLayer::block_svd_init(w, shape, *corner) {
            Ok(layer) => layers.push(layer),
            Err(Error::Dimension(reason)) => missing.push(MissingVariant { corner: *corner, reason }),
            Err(e) => return Err(e),
        }
    }
    Ok(CornerVariants { layers, missing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{gaussian, orthonormality_defect};

    fn rel_err(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(1.0)
    }

    #[test]
    fn identity_init_is_exact() {
        let w = DenseMatrix::identity(4);
        let layer = BlockTTLayer::block_svd_init(&w, BlockShape::column(2, 2), DesignCorner::DEFAULT).unwrap();
        assert_eq!(layer.merge(), w);
        let s: Vec<f64> = layer.s_blocks().unwrap().iter().flatten().copied().collect();
        assert_eq!(s, vec![1.0; 4]);
        let x = [0.5, -1.0, 2.0, 3.0];
        assert_eq!(layer.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn zero_init() {
        let w = DenseMatrix::zeros(4, 4);
        let layer = BlockTTLayer::block_svd_init(&w, BlockShape::column(2, 2), DesignCorner::DEFAULT).unwrap();
        assert!(layer.s_blocks().unwrap().iter().flatten().all(|&s| s == 0.0));
        assert_eq!(layer.merge(), w);
    }

    #[test]
    fn gaussian_init_factors() {
        let w = gaussian(6, 6, 5, 1.0);
        let layer = BlockTTLayer::block_svd_init(&w, BlockShape::column(3, 2), DesignCorner::DEFAULT).unwrap();
        assert!(rel_err(&layer.merge(), &w) <= 1e-10);
        for k in 0..3 {
            assert!(orthonormality_defect(&layer.l_blocks()[k]) < 1e-12);
            assert!(orthonormality_defect(&layer.r_blocks()[k].transpose()) < 1e-12);
            let s = &layer.s_blocks().unwrap()[k];
            assert!(s.windows(2).all(|p| p[0] >= p[1]) && s.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn merge_is_linear_in_s() {
        let w = gaussian(5, 6, 8, 1.0);
        let mut layer = BlockTTLayer::block_svd_init(&w, BlockShape::column(2, 3), DesignCorner::DEFAULT).unwrap();
        for s in layer.s_blocks_mut().unwrap() {
            s.iter_mut().for_each(|v| *v *= 2.0);
        }
        assert!(rel_err(&layer.merge(), &w.scale(2.0)) <= 1e-9);
        for s in layer.s_blocks_mut().unwrap() {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(layer.merge(), DenseMatrix::zeros(5, 6));
    }

    #[test]
    fn merged_placements_drop_s() {
        let w = gaussian(6, 6, 2, 1.0);
        for corner in DesignCorner::PEFT {
            let shape = BlockShape { n: 3, b: 2, orientation: corner.natural_orientation() };
            let layer = BlockTTLayer::block_svd_init(&w, shape, corner).unwrap();
            assert_eq!(layer.s_blocks().is_some(), corner.has_separate_s());
            assert!(rel_err(&layer.merge(), &w) <= 1e-10, "{corner}");
        }
    }

    #[test]
    fn row_sliced_forward_matches_merge() {
        let w = gaussian(6, 5, 3, 1.0);
        let layer = BlockTTLayer::block_svd_init(&w, BlockShape::row(3, 2), DesignCorner::DEFAULT).unwrap();
        assert_eq!(layer.l_blocks()[0].shape(), (2, 2));
        assert_eq!(layer.r_blocks()[0].shape(), (2, 5));
        let x = [1.0, -0.5, 0.25, 2.0, -1.0];
        let dense = layer.merge().matvec(&x).unwrap();
        let y = layer.forward(&x).unwrap();
        for (a, b) in y.iter().zip(&dense) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(layer.forward(&[0.0; 5]).unwrap(), vec![0.0; 6]);
    }

    #[test]
    fn shape_errors() {
        let w = gaussian(4, 6, 1, 1.0);
        assert!(matches!(
            BlockTTLayer::block_svd_init(&w, BlockShape::column(4, 2), DesignCorner::DEFAULT),
            Err(Error::Dimension(_))
        ));
        let layer = BlockTTLayer::block_svd_init(&w, BlockShape::column(2, 3), DesignCorner::DEFAULT).unwrap();
        assert!(layer.forward(&[1.0; 4]).is_err());
    }

    #[test]
    fn variants_for_identity() {
        let v = corner_variants(&DenseMatrix::identity(4), BlockShape::column(2, 2)).unwrap();
        assert_eq!(v.layers.len(), 7);
        assert!(v.is_complete());
        for layer in &v.layers {
            assert!(rel_err(&layer.merge(), &DenseMatrix::identity(4)) < 1e-12);
        }
    }

    #[test]
    fn variants_flag_untileable_orientation() {
        let w = gaussian(4, 6, 9, 1.0);
        let v = corner_variants(&w, BlockShape::column(2, 3)).unwrap();
        assert_eq!(v.layers.len(), 4);
        assert_eq!(v.missing.len(), 3);
        assert!(v.missing.iter().all(|m| m.corner.side == super::super::TrainableSide::Output));
    }

    #[test]
    fn param_counts_follow_trainability() {
        let w = gaussian(8, 8, 4, 1.0);
        let layer = BlockTTLayer::block_svd_init(&w, BlockShape::column(4, 2), DesignCorner::DEFAULT).unwrap();
        let c = layer.param_count();
        assert_eq!(c.trainable, 4 * 2 * 2 + 4 * 2);
        assert_eq!(c.frozen, 4 * 8 * 2);
        let full = BlockTTLayer::block_svd_init(&w, BlockShape::column(4, 2), DesignCorner::FULL).unwrap();
        assert_eq!(full.param_count().frozen, 0);
    }
}
