//! Measurements on weights and updates: column-space energy ratio, spectral
//! shift, rank-capacity witnesses and per-block confinement residuals.

use serde::{Deserialize, Serialize};

use crate::btt::{BlockShape, BlockTTLayer, DesignCorner};
use crate::error::{Error, Result};
use crate::linalg::{
    derive_seed, effective_rank_from_spectrum, numeric_rank, orthonormal_basis, orthonormality_defect,
    rank_from_spectrum, svd_thin, DenseMatrix, SeededRng, DEFAULT_RANK_TOL,
};

/// Column orthonormality demanded of a basis passed to [`energy_ratio`].
pub const ORTHONORMAL_TOL: f64 = 1e-8;

/// Relative tolerance for the numeric rank of weight updates.
pub const RANK_TOL: f64 = DEFAULT_RANK_TOL;

fn check_basis(rows: usize, u: &DenseMatrix) -> Result<()> {
    if u.rows() != rows {
        return Err(Error::dim(format!("basis has {} rows, matrix has {rows}", u.rows())));
    }
    let defect = orthonormality_defect(u);
    if defect > ORTHONORMAL_TOL {
        return Err(Error::Contract(format!("basis columns are not orthonormal (defect {defect:.3e})")));
    }
    Ok(())
}

/// `(‖Uᵀm‖_F², ‖(I − UUᵀ)m‖_F², ‖m‖_F²)`, each computed directly.
pub fn energy_split(m: &DenseMatrix, u: &DenseMatrix) -> Result<(f64, f64, f64)> {
    check_basis(m.rows(), u)?;
    let proj = u.t_matmul(m)?;
    let resid = m.sub(&u.matmul(&proj)?)?;
    Ok((proj.frobenius_norm().powi(2), resid.frobenius_norm().powi(2), m.frobenius_norm().powi(2)))
}

/// `ρ(m; U) = ‖Uᵀm‖_F² / ‖m‖_F²`, clamped to `[0, 1]`.
pub fn energy_ratio(m: &DenseMatrix, u: &DenseMatrix) -> Result<f64> {
    check_basis(m.rows(), u)?;
    let total = m.frobenius_norm();
    if total == 0.0 {
        return Err(Error::Domain("energy ratio of a zero matrix".into()));
    }
    let inside = u.t_matmul(m)?.frobenius_norm();
    Ok(((inside / total).powi(2)).clamp(0.0, 1.0))
}

/// Which side of each block a frozen core pins.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfinementSide {
    /// Frozen `L`: `ΔW_k` lives in `col(L_k)`.
    Column,
    /// Frozen `R`: `ΔW_k` lives in `row(R_k)`.
    Row,
}

/// Orthonormal bases of the frozen core's blocks, as columns. Row bases are
/// returned as bases of `row(R_k)`, i.e. of `col(R_kᵀ)`.
pub fn frozen_bases(layer: &BlockTTLayer) -> Result<(ConfinementSide, Vec<DenseMatrix>)> {
    let corner = layer.corner();
    if !corner.l_trainable() {
        let b = layer.l_blocks().iter().map(|l| basis_or_empty(l)).collect::<Result<Vec<_>>>()?;
        Ok((ConfinementSide::Column, b))
    } else if !corner.r_trainable() {
        let b = layer.r_blocks().iter().map(|r| basis_or_empty(&r.transpose())).collect::<Result<Vec<_>>>()?;
        Ok((ConfinementSide::Row, b))
    } else {
        Err(Error::Contract(format!("corner {corner} has no frozen core")))
    }
}

fn basis_or_empty(m: &DenseMatrix) -> Result<DenseMatrix> {
    if m.max_abs() == 0.0 {
        return Ok(DenseMatrix::zeros(m.rows(), 0));
    }
    orthonormal_basis(m, DEFAULT_RANK_TOL)
}

/// Fraction of `‖delta‖_F²` inside the frozen subspaces, block by block:
/// `Σ_k ‖U_kᵀ ΔW_k‖_F² / ‖ΔW‖_F²` (row analogue for a frozen `R`).
pub fn block_energy_ratio(layer: &BlockTTLayer, delta: &DenseMatrix) -> Result<f64> {
    if delta.shape() != (layer.d_out(), layer.d_in()) {
        return Err(Error::dim("update shape does not match the layer"));
    }
    let total = delta.frobenius_norm().powi(2);
    if total == 0.0 {
        return Err(Error::Domain("energy ratio of a zero update".into()));
    }
    let (side, bases) = frozen_bases(layer)?;
    let mut inside = 0.0;
    for (k, u) in bases.iter().enumerate() {
        let block = layer.block_of(delta, k);
        let proj = match side {
            ConfinementSide::Column => u.t_matmul(&block)?,
            ConfinementSide::Row => block.matmul(u)?,
        };
        inside += proj.frobenius_norm().powi(2);
    }
    Ok((inside / total).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfinementReport {
    pub side: ConfinementSide,
    /// `‖(I − U_kU_kᵀ) ΔW_k‖_F` or `‖ΔW_k (I − V_kV_kᵀ)‖_F`, per block.
    pub residuals: Vec<f64>,
    pub max_residual: f64,
}

/// Residuals of `merge(after) − merge(before)` outside the subspaces of
/// `before`'s frozen core. Does not check that the frozen core is unchanged.
pub fn projection_residuals(before: &BlockTTLayer, after: &BlockTTLayer) -> Result<ConfinementReport> {
    if before.shape() != after.shape()
        || before.corner() != after.corner()
        || before.d_out() != after.d_out()
        || before.d_in() != after.d_in()
    {
        return Err(Error::dim("layers differ in shape or corner"));
    }
    let delta = after.merge().sub(&before.merge())?;
    let (side, bases) = frozen_bases(before)?;
    let mut residuals = Vec::with_capacity(bases.len());
    for (k, u) in bases.iter().enumerate() {
        let block = before.block_of(&delta, k);
        let resid = match side {
            ConfinementSide::Column => block.sub(&u.matmul(&u.t_matmul(&block)?)?)?,
            ConfinementSide::Row => block.sub(&block.matmul(u)?.matmul_t(u)?)?,
        };
        residuals.push(resid.frobenius_norm());
    }
    let max_residual = residuals.iter().copied().fold(0.0, f64::max);
    Ok(ConfinementReport { side, residuals, max_residual })
}

/// [`projection_residuals`] after verifying the frozen core is bit-identical.
pub fn confinement_check(before: &BlockTTLayer, after: &BlockTTLayer) -> Result<ConfinementReport> {
    let report = projection_residuals(before, after)?;
    if !before.frozen_cores_equal(after) {
        return Err(Error::Contract("frozen core changed between the two layers".into()));
    }
    Ok(report)
}

/// Per-index singular-value ratios and absolute singular-vector cosines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralShift {
    /// `σ′ᵢ / σᵢ`, with `0/0 = 1` and `x/0 = ∞`.
    pub sv_ratio: Vec<f64>,
    /// `|cos(u′ᵢ, uⱼ)|`, row `i` for the new vector.
    pub vector_cosines: Vec<Vec<f64>>,
}

pub fn spectral_shift(w: &DenseMatrix, w_prime: &DenseMatrix) -> Result<SpectralShift> {
    if w.shape() != w_prime.shape() {
        return Err(Error::dim("spectral shift needs matrices of equal shape"));
    }
    let a = svd_thin(w)?;
    let b = svd_thin(w_prime)?;
    let sv_ratio = a
        .sigma
        .iter()
        .zip(&b.sigma)
        .map(|(&s, &sp)| match (s == 0.0, sp == 0.0) {
            (true, true) => 1.0,
            (true, false) => f64::INFINITY,
            _ => sp / s,
        })
        .collect();
    let cos = b.u.t_matmul(&a.u)?;
    let vector_cosines = (0..cos.rows()).map(|i| cos.row(i).iter().map(|c| c.abs().min(1.0)).collect()).collect();
    Ok(SpectralShift { sv_ratio, vector_cosines })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub d_out: usize,
    pub d_in: usize,
    /// Width of the reference basis: the top `k` left singular vectors of `w`.
    pub k: usize,
    pub energy_ratio_grad: Option<f64>,
    pub energy_ratio_weight: Option<f64>,
    pub gaussian_baseline: f64,
    pub sv_ratio: Vec<f64>,
    pub vector_cosines: Vec<Vec<f64>>,
    pub eff_rank_delta: Option<f64>,
    pub stable_rank_delta: Option<f64>,
    pub numeric_rank_delta: usize,
}

/// Compares `w` and `w_prime`. Energy ratios are taken against the top-`k`
/// left singular vectors of `w`; `grad` is an optional `∂ℒ/∂W` to measure.
pub fn spectral_report(
    w: &DenseMatrix,
    w_prime: &DenseMatrix,
    grad: Option<&DenseMatrix>,
    k: usize,
) -> Result<SpectralReport> {
    let (d_out, d_in) = w.shape();
    if k == 0 || k > d_out.min(d_in) {
        return Err(Error::Domain(format!("k = {k} outside 1..={}", d_out.min(d_in))));
    }
    let shift = spectral_shift(w, w_prime)?;
    let u = svd_thin(w)?.u.col_block(0, k);
    let delta = w_prime.sub(w)?;
    let nonzero = |m: &DenseMatrix| m.frobenius_norm() > 0.0;
    let energy_ratio_weight = if nonzero(&delta) { Some(energy_ratio(&delta, &u)?) } else { None };
    let energy_ratio_grad = match grad {
        Some(g) if g.shape() != w.shape() => return Err(Error::dim("gradient shape does not match w")),
        Some(g) if nonzero(g) => Some(energy_ratio(g, &u)?),
        _ => None,
    };
    let sigma = svd_thin(&delta)?.sigma;
    let (eff_rank_delta, stable_rank_delta) = match sigma.first() {
        Some(&s1) if s1 > 0.0 => {
            (Some(effective_rank_from_spectrum(&sigma)?), Some(sigma.iter().map(|s| s * s).sum::<f64>() / (s1 * s1)))
        }
        _ => (None, None),
    };
    Ok(SpectralReport {
        d_out,
        d_in,
        k,
        energy_ratio_grad,
        energy_ratio_weight,
        gaussian_baseline: k as f64 / d_out as f64,
        sv_ratio: shift.sv_ratio,
        vector_cosines: shift.vector_cosines,
        eff_rank_delta,
        stable_rank_delta,
        numeric_rank_delta: rank_from_spectrum(&sigma, RANK_TOL),
    })
}

impl SpectralReport {
    /// Checks the report's structural invariants.
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: Option<f64>| match v {
            Some(x) if !(0.0..=1.0).contains(&x) => Err(Error::Contract(format!("{name} = {x} outside [0, 1]"))),
            _ => Ok(()),
        };
        unit("energy_ratio_grad", self.energy_ratio_grad)?;
        unit("energy_ratio_weight", self.energy_ratio_weight)?;
        let kmax = self.d_out.min(self.d_in);
        if self.k == 0 || self.k > kmax || self.gaussian_baseline != self.k as f64 / self.d_out as f64 {
            return Err(Error::Contract("gaussian baseline is not k / d_out".into()));
        }
        if self.sv_ratio.len() != kmax {
            return Err(Error::Contract(format!("sv_ratio has {} entries, expected {kmax}", self.sv_ratio.len())));
        }
        if self.sv_ratio.iter().any(|r| r.is_nan() || *r < 0.0) {
            return Err(Error::Contract("sv_ratio entries must be nonnegative".into()));
        }
        if self.vector_cosines.len() != kmax
            || self.vector_cosines.iter().any(|row| row.len() != kmax || row.iter().any(|c| !(0.0..=1.0).contains(c)))
        {
            return Err(Error::Contract("vector_cosines must be a square matrix of values in [0, 1]".into()));
        }
        if self.numeric_rank_delta > kmax {
            return Err(Error::Contract("numeric rank exceeds min(d_out, d_in)".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankWitness {
    /// Numeric rank of `ΔW` per trial; trial 0 is the zero perturbation.
    pub ranks: Vec<usize>,
    pub max_rank_seen: usize,
    pub min_rank_seen: usize,
    /// Upper bound from the parameterization, computed directly.
    pub capacity_bound: usize,
}

impl RankWitness {
    fn from_ranks(ranks: Vec<usize>, capacity_bound: usize) -> Self {
        Self {
            max_rank_seen: ranks.iter().copied().max().unwrap_or(0),
            min_rank_seen: ranks.iter().copied().min().unwrap_or(0),
            ranks,
            capacity_bound,
        }
    }
}

/// Samples `trials` Gaussian perturbations of the trainable cores of the
/// block-SVD layer for `w` and records `numeric_rank(ΔW)`. The bound is the
/// rank of the concatenated frozen blocks (`min(d_out, d_in)` for `FULL`).
pub fn rank_capacity_witness(
    w: &DenseMatrix,
    shape: BlockShape,
    corner: DesignCorner,
    trials: usize,
    seed: u64,
) -> Result<RankWitness> {
    let full = w.rows().min(w.cols());
    if numeric_rank(w, RANK_TOL)? != full {
        return Err(Error::Domain("rank capacity witness needs a full-rank weight".into()));
    }
    let layer = BlockTTLayer::block_svd_init(w, shape, corner)?;
    let base = layer.merge();
    let capacity_bound = if !corner.l_trainable() {
        numeric_rank(&DenseMatrix::hstack(layer.l_blocks())?, RANK_TOL)?
    } else if !corner.r_trainable() {
        numeric_rank(&DenseMatrix::vstack(layer.r_blocks())?, RANK_TOL)?
    } else {
        full
    };
    let mut ranks = vec![0];
    for t in 1..=trials {
        let mut rng = SeededRng::new(derive_seed(seed, t as u64));
        let mut moved = layer.clone();
        let (l, s, r) = moved.cores_mut();
        if corner.l_trainable() {
            for m in l.iter_mut() {
                let noise = rng.normal_matrix(m.rows(), m.cols(), 1.0);
                m.axpy(1.0, &noise)?;
            }
        }
        if let Some(s) = s {
            for v in s.iter_mut() {
                v.iter_mut().for_each(|x| *x += rng.standard_normal());
            }
        }
        if corner.r_trainable() {
            for m in r.iter_mut() {
                let noise = rng.normal_matrix(m.rows(), m.cols(), 1.0);
                m.axpy(1.0, &noise)?;
            }
        }
        ranks.push(numeric_rank(&moved.merge().sub(&base)?, RANK_TOL)?);
    }
    Ok(RankWitness::from_ranks(ranks, capacity_bound))
}

/// The same experiment for a rank-`r` LoRA update `ΔW = B A` with Gaussian
/// factors, trial seeds matching [`rank_capacity_witness`].
pub fn lora_rank_witness(d_out: usize, d_in: usize, r: usize, trials: usize, seed: u64) -> Result<RankWitness> {
    let mut ranks = vec![0];
    for t in 1..=trials {
        let mut rng = SeededRng::new(derive_seed(seed, t as u64));
        let b = rng.normal_matrix(d_out, r, 1.0);
        let a = rng.normal_matrix(r, d_in, 1.0);
        ranks.push(numeric_rank(&b.matmul(&a)?, RANK_TOL)?);
    }
    Ok(RankWitness::from_ranks(ranks, r.min(d_out).min(d_in)))
}

/// One row of a long-format trajectory table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub layer: String,
    pub metric: String,
    pub value: f64,
}

/// CSV with header `step,layer,metric,value`.
pub fn metrics_csv(rows: &[MetricRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["step", "layer", "metric", "value"]).map_err(|e| Error::Io(e.into()))?;
    }
    for row in rows {
        w.serialize(row).map_err(|e| Error::Io(e.into()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::backward;
    use crate::linalg::{gaussian, random_orthonormal};
    use crate::optim::sgd_step;
    use proptest::prelude::*;

    #[test]
    fn ratio_extremes() {
        let u = DenseMatrix::from_fn(4, 2, |i, j| (i == j) as u8 as f64);
        let inside = DenseMatrix::from_fn(4, 3, |i, j| if i < 2 { (i + j) as f64 + 1.0 } else { 0.0 });
        let outside = DenseMatrix::from_fn(4, 3, |i, j| if i >= 2 { (i * j) as f64 + 1.0 } else { 0.0 });
        assert_eq!(energy_ratio(&inside, &u).unwrap(), 1.0);
        assert_eq!(energy_ratio(&outside, &u).unwrap(), 0.0);
        assert!(matches!(energy_ratio(&DenseMatrix::zeros(4, 3), &u), Err(Error::Domain(_))));
        let skew = u.scale(2.0);
        assert!(matches!(energy_ratio(&inside, &skew), Err(Error::Contract(_))));
    }

    #[test]
    fn gaussian_baseline_matches_k_over_d() {
        let u = random_orthonormal(64, 16, 1).unwrap();
        let vals: Vec<f64> =
            (0..200).map(|t| energy_ratio(&gaussian(64, 64, derive_seed(2, t), 1.0), &u).unwrap()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((0.23..=0.27).contains(&mean), "mean {mean}");
    }

    #[test]
    fn shift_of_identical_and_doubled() {
        let w = gaussian(5, 4, 3, 1.0);
        let same = spectral_shift(&w, &w).unwrap();
        assert!(same.sv_ratio.iter().all(|&r| (r - 1.0).abs() < 1e-14));
        let doubled = spectral_shift(&w, &w.scale(2.0)).unwrap();
        for (i, row) in doubled.vector_cosines.iter().enumerate() {
            assert!((row[i] - 1.0).abs() < 1e-12);
            assert!((doubled.sv_ratio[i] - 2.0).abs() < 1e-12);
        }
        let z = spectral_shift(&DenseMatrix::zeros(2, 2), &DenseMatrix::from_diag(&[1.0, 0.0])).unwrap();
        assert_eq!(z.sv_ratio, vec![f64::INFINITY, 1.0]);
        assert!(spectral_shift(&w, &w.transpose()).is_err());
    }

    #[test]
    fn report_validates_and_serializes() {
        let w = gaussian(6, 5, 4, 1.0);
        let wp = w.add(&gaussian(6, 5, 5, 0.1)).unwrap();
        let g = gaussian(6, 5, 6, 1.0);
        let rep = spectral_report(&w, &wp, Some(&g), 2).unwrap();
        rep.validate().unwrap();
        assert_eq!(rep.gaussian_baseline, 2.0 / 6.0);
        assert_eq!(rep.numeric_rank_delta, 5);
        let json = rep.to_json();
        let back: SpectralReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);

        let same = spectral_report(&w, &w, None, 1).unwrap();
        same.validate().unwrap();
        assert_eq!(same.numeric_rank_delta, 0);
        assert!(same.energy_ratio_weight.is_none());
    }

    #[test]
    fn rank_witness_small_case() {
        let w = gaussian(4, 6, 7, 1.0);
        let wit = rank_capacity_witness(&w, BlockShape::column(2, 3), DesignCorner::DEFAULT, 20, 8).unwrap();
        assert_eq!(wit.min_rank_seen, 0);
        assert_eq!(wit.max_rank_seen, 4);
        assert_eq!(wit.capacity_bound, 4);
        let lora = lora_rank_witness(4, 6, 1, 20, 8).unwrap();
        assert_eq!(lora.max_rank_seen, 1);
        let deficient = DenseMatrix::outer(&[1.0, 2.0, 3.0, 4.0], &[1.0; 6]);
        assert!(matches!(
            rank_capacity_witness(&deficient, BlockShape::column(2, 3), DesignCorner::DEFAULT, 1, 0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn confinement_and_negative_control() {
        let w = gaussian(8, 8, 9, 1.0);
        let layer = BlockTTLayer::block_svd_init(&w, BlockShape::column(4, 2), DesignCorner::DEFAULT).unwrap();
        let none = confinement_check(&layer, &layer).unwrap();
        assert!(none.residuals.iter().all(|&r| r == 0.0));

        let mut rng = SeededRng::new(10);
        let mut moved = layer.clone();
        for _ in 0..10 {
            let b = backward(&moved, &rng.normal_vec(8, 1.0), &rng.normal_vec(8, 1.0)).unwrap();
            sgd_step(&mut moved, &b, 0.05).unwrap();
        }
        let rep = confinement_check(&layer, &moved).unwrap();
        assert_eq!(rep.side, ConfinementSide::Column);
        assert!(rep.max_residual <= 1e-10, "{}", rep.max_residual);
        assert!(block_energy_ratio(&layer, &moved.merge().sub(&layer.merge()).unwrap()).unwrap() > 1.0 - 1e-12);

        let mut broken = moved.clone();
        let noise = gaussian(8, 2, 11, 0.1);
        broken.l_blocks_mut()[1].axpy(1.0, &noise).unwrap();
        assert!(matches!(confinement_check(&layer, &broken), Err(Error::Contract(_))));
        assert!(projection_residuals(&layer, &broken).unwrap().max_residual > 1e-6);
    }

    #[test]
    fn csv_long_format() {
        let rows = vec![
            MetricRow { step: 0, layer: "fc".into(), metric: "loss".into(), value: 0.5 },
            MetricRow { step: 1, layer: "fc".into(), metric: "loss".into(), value: 0.25 },
        ];
        let text = metrics_csv(&rows).unwrap();
        assert_eq!(text, "step,layer,metric,value\n0,fc,loss,0.5\n1,fc,loss,0.25\n");
        assert_eq!(metrics_csv(&[]).unwrap(), "step,layer,metric,value\n");
    }

    proptest! {
        #[test]
        fn ratio_bounds_and_pythagoras(seed in any::<u64>(), rows in 2usize..12, cols in 1usize..8, k in 1usize..6) {
            let k = k.min(rows);
            let m = gaussian(rows, cols, seed, 1.0);
            let u = random_orthonormal(rows, k, seed ^ 1).unwrap();
            let rho = energy_ratio(&m, &u).unwrap();
            prop_assert!((0.0..=1.0).contains(&rho));
            let (a, b, t) = energy_split(&m, &u).unwrap();
            prop_assert!((a + b - t).abs() <= 1e-9 * t);
        }
    }
}
