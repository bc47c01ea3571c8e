use serde::{Deserialize, Serialize};

use super::config::{ShiftMode, TaskSpec};
use crate::btt::{BlockShape, BlockTTLayer};
use crate::diagnostics::{frozen_bases, ConfinementSide};
use crate::error::{Error, Result};
use crate::linalg::{
    derive_seed, gaussian, lstsq, norm2, orthonormal_basis, svd_thin, DenseMatrix, SeededRng, DEFAULT_RANK_TOL,
};

/// Singular values of the conditioned pretrained weight run linearly
/// between these two values.
const SIGMA_MAX: f64 = 1.0;
const SIGMA_MIN: f64 = 0.5;

/// Relative cutoff for the least-squares floors.
const LSTSQ_RCOND: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Heldout,
}

/// Teacher-student regression data `y = W* x + ε` around a pretrained `W₀`.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub spec: TaskSpec,
    pub seed: u64,
    pub w0: DenseMatrix,
    pub w_star: DenseMatrix,
    pub delta: DenseMatrix,
    /// Column blocks defining the shift's subspaces.
    pub shape: BlockShape,
    /// Orthonormal bases of the column spaces of the blocks of `W₀`.
    pub bases: Vec<DenseMatrix>,
    /// Inputs as columns, `d_in × N`.
    pub x_train: DenseMatrix,
    pub y_train: DenseMatrix,
    pub x_heldout: DenseMatrix,
    pub y_heldout: DenseMatrix,
}

/// Samples the task for `spec` deterministically from `seed`.
pub fn make_task(spec: &TaskSpec, seed: u64) -> Result<Task> {
    let (d_out, d_in) = (spec.d_out, spec.d_in);
    let shape = spec.shape()?;
    shape.validate(d_out, d_in)?;

    let raw = svd_thin(&gaussian(d_out, d_in, derive_seed(seed, 0), 1.0))?;
    let k = raw.sigma.len();
    let sigma: Vec<f64> = (0..k)
        .map(|i| if k == 1 { SIGMA_MAX } else { SIGMA_MAX - (SIGMA_MAX - SIGMA_MIN) * i as f64 / (k - 1) as f64 })
        .collect();
    let w0 = raw.u.scale_cols(&sigma).matmul(&raw.vt)?;

    let bases = (0..shape.n)
        .map(|j| orthonormal_basis(&w0.col_block(j * shape.b, shape.b), DEFAULT_RANK_TOL))
        .collect::<Result<Vec<_>>>()?;

    let mut rng = SeededRng::new(derive_seed(seed, 1));
    let mut delta = DenseMatrix::zeros(d_out, d_in);
    for j in 0..spec.shift_rank {
        let blk = j % shape.n;
        let u = shift_direction(&bases[blk], spec.mode, &mut rng)?;
        let mut v = vec![0.0; d_in];
        let local = rng.normal_vec(shape.b, 1.0);
        let nv = norm2(&local);
        for (c, x) in local.iter().enumerate() {
            v[blk * shape.b + c] = x / nv;
        }
        let weight = spec.shift_scale * (1.0 - 0.5 * j as f64 / spec.shift_rank as f64);
        delta.axpy(weight, &DenseMatrix::outer(&u, &v))?;
    }
    let w_star = w0.add(&delta)?;

    let n_train = spec.train_count();
    let n_held = spec.heldout_count();
    let x = gaussian(d_in, spec.samples, derive_seed(seed, 2), 1.0);
    let mut y = w_star.matmul(&x)?;
    if spec.noise_sigma > 0.0 {
        y.axpy(1.0, &gaussian(d_out, spec.samples, derive_seed(seed, 3), spec.noise_sigma))?;
    }
    let x_train = x.col_block(0, n_train);
    let y_train = y.col_block(0, n_train);
    let x_heldout = x.col_block(n_train, n_held);
    let y_heldout = y.col_block(n_train, n_held);

    Ok(Task { spec: spec.clone(), seed, w0, w_star, delta, shape, bases, x_train, y_train, x_heldout, y_heldout })
}

/// Unit vector inside, orthogonal to, or split evenly across `col(basis)`.
fn shift_direction(basis: &DenseMatrix, mode: ShiftMode, rng: &mut SeededRng) -> Result<Vec<f64>> {
    let d = basis.rows();
    let inside = |rng: &mut SeededRng| -> Result<Vec<f64>> {
        let z = rng.normal_vec(basis.cols(), 1.0);
        Ok(unit(basis.matvec(&z)?))
    };
    let outside = |rng: &mut SeededRng| -> Result<Vec<f64>> {
        let z = rng.normal_vec(d, 1.0);
        let p = basis.matvec(&basis.t_matvec(&z)?)?;
        let mut r: Vec<f64> = z.iter().zip(&p).map(|(a, b)| a - b).collect();
        // second pass keeps the residual orthogonal to working precision
        let p2 = basis.matvec(&basis.t_matvec(&r)?)?;
        r.iter_mut().zip(&p2).for_each(|(a, b)| *a -= b);
        if norm2(&r) == 0.0 {
            return Err(Error::Domain("block column space fills the output space".into()));
        }
        Ok(unit(r))
    };
    match mode {
        ShiftMode::InColumnSpace => inside(rng),
        ShiftMode::Orthogonal => outside(rng),
        ShiftMode::Mixed => {
            let a = inside(rng)?;
            let b = outside(rng)?;
            Ok(unit(a.iter().zip(&b).map(|(x, y)| x + y).collect()))
        }
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm2(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

impl Task {
    fn split(&self, split: Split) -> (&DenseMatrix, &DenseMatrix) {
        match split {
            Split::Train => (&self.x_train, &self.y_train),
            Split::Heldout => (&self.x_heldout, &self.y_heldout),
        }
    }

    /// Mean squared error `‖W X − Y‖_F² / (N · d_out)`.
    pub fn loss(&self, w: &DenseMatrix, split: Split) -> Result<f64> {
        let (x, y) = self.split(split);
        let r = w.matmul(x)?.sub(y)?;
        Ok(r.frobenius_norm().powi(2) / (x.cols() * self.spec.d_out) as f64)
    }

    /// Loss on the source task `y = W₀ x` over the held-out inputs.
    pub fn forgetting(&self, w: &DenseMatrix) -> Result<f64> {
        let r = w.sub(&self.w0)?.matmul(&self.x_heldout)?;
        Ok(r.frobenius_norm().powi(2) / (self.x_heldout.cols() * self.spec.d_out) as f64)
    }

    /// `∂ loss / ∂W` on the training split.
    pub fn gradient(&self, w: &DenseMatrix) -> Result<DenseMatrix> {
        let (x, y) = self.split(Split::Train);
        let r = w.matmul(x)?.sub(y)?;
        Ok(r.matmul_t(x)?.scale(2.0 / (x.cols() * self.spec.d_out) as f64))
    }

    /// `Σ_k ‖U_kᵀ m_k‖_F² / ‖m‖_F²` over the task's column blocks.
    pub fn shift_energy_ratio(&self, m: &DenseMatrix) -> Result<f64> {
        let total = m.frobenius_norm().powi(2);
        if total == 0.0 {
            return Err(Error::Domain("energy ratio of a zero matrix".into()));
        }
        let b = self.shape.b;
        let mut inside = 0.0;
        for (k, u) in self.bases.iter().enumerate() {
            inside += u.t_matmul(&m.col_block(k * b, b))?.frobenius_norm().powi(2);
        }
        Ok((inside / total).clamp(0.0, 1.0))
    }

    /// Smallest loss any weight reachable by `layer`'s trainable cores can
    /// attain on `split`, solved exactly by least squares.
    pub fn reachable_floor(&self, layer: &BlockTTLayer, split: Split) -> Result<f64> {
        let (x, y) = self.split(split);
        let (side, bases) = frozen_bases(layer)?;
        let (d_out, d_in) = (self.spec.d_out, self.spec.d_in);
        let n = x.cols();
        let scale = (n * d_out) as f64;
        let shape = layer.shape();

        let row_floor = |design: &DenseMatrix, target: &[f64]| -> Result<f64> {
            let z = lstsq(design, target, LSTSQ_RCOND)?;
            let fit = design.matvec(&z)?;
            Ok(fit.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        };

        let full = match side {
            ConfinementSide::Column => bases.iter().all(|u| u.cols() == d_out),
            ConfinementSide::Row => bases.iter().all(|v| v.cols() == d_in),
        };
        let mut sse = 0.0;
        if full {
            let xt = x.transpose();
            for i in 0..d_out {
                sse += row_floor(&xt, y.row(i))?;
            }
            return Ok(sse / scale);
        }
        match side {
            ConfinementSide::Row => {
                // W's rows in block k lie in row(R_k): y_i ≈ M_i (V_kᵀ X).
                for (k, v) in bases.iter().enumerate() {
                    let design = v.t_matmul(x)?.transpose();
                    for i in 0..shape.b {
                        sse += row_floor(&design, y.row(k * shape.b + i))?;
                    }
                }
            }
            ConfinementSide::Column => {
                // vec(Ŷ) = Σ_k (X_kᵀ ⊗ U_k) vec(M_k), solved jointly.
                let b = shape.b;
                let p: usize = bases.iter().map(|u| u.cols() * b).sum();
                let mut design = DenseMatrix::zeros(n * d_out, p);
                let mut col = 0;
                for (k, u) in bases.iter().enumerate() {
                    for a in 0..u.cols() {
                        for c in 0..b {
                            let xr = x.row(k * b + c);
                            for s in 0..n {
                                for i in 0..d_out {
                                    design.set(s * d_out + i, col, u.get(i, a) * xr[s]);
                                }
                            }
                            col += 1;
                        }
                    }
                }
                let target: Vec<f64> =
                    (0..n).flat_map(|s| (0..d_out).map(move |i| (s, i))).map(|(s, i)| y.get(i, s)).collect();
                sse = row_floor(&design, &target)?;
            }
        }
        Ok(sse / scale)
    }

    /// Expected loss floor over `layer`'s reachable set on fresh inputs:
    /// the shift energy outside the frozen subspaces per output, plus `σ²`.
    pub fn population_floor(&self, layer: &BlockTTLayer) -> Result<f64> {
        let (side, bases) = frozen_bases(layer)?;
        let mut outside = 0.0;
        for (k, u) in bases.iter().enumerate() {
            let dk = layer.block_of(&self.delta, k);
            let r = match side {
                ConfinementSide::Column => dk.sub(&u.matmul(&u.t_matmul(&dk)?)?)?,
                ConfinementSide::Row => dk.sub(&dk.matmul(u)?.matmul_t(u)?)?,
            };
            outside += r.frobenius_norm().powi(2);
        }
        Ok(outside / self.spec.d_out as f64 + self.spec.noise_sigma.powi(2))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::btt::DesignCorner;
    use crate::linalg::numeric_rank;

    fn spec(mode: ShiftMode, rank: usize) -> TaskSpec {
        TaskSpec {
            d_out: 12,
            d_in: 12,
            samples: 60,
            noise_sigma: 0.0,
            mode,
            shift_rank: rank,
            shift_scale: 1.0,
            block_size: Some(3),
        }
    }

    #[test]
    fn zero_shift_is_exact() {
        let task = make_task(&spec(ShiftMode::InColumnSpace, 0), 1).unwrap();
        assert_eq!(task.delta.max_abs(), 0.0);
        assert!(task.loss(&task.w0, Split::Train).unwrap() < 1e-28);
        assert_eq!(task.x_train.cols(), 48);
    }

    #[test]
    fn modes_place_the_shift() {
        let inside = make_task(&spec(ShiftMode::InColumnSpace, 3), 2).unwrap();
        assert!((inside.shift_energy_ratio(&inside.delta).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(numeric_rank(&inside.delta, 1e-9).unwrap(), 3);
        let orth = make_task(&spec(ShiftMode::Orthogonal, 3), 2).unwrap();
        assert!(orth.shift_energy_ratio(&orth.delta).unwrap() <= 1e-10);
        let mixed = make_task(&spec(ShiftMode::Mixed, 3), 2).unwrap();
        let rho = mixed.shift_energy_ratio(&mixed.delta).unwrap();
        assert!(rho > 0.2 && rho < 0.8, "{rho}");
        assert_eq!(make_task(&spec(ShiftMode::Mixed, 3), 2).unwrap(), mixed);
    }

    #[test]
    fn conditioned_spectrum() {
        let task = make_task(&spec(ShiftMode::InColumnSpace, 1), 3).unwrap();
        let s = svd_thin(&task.w0).unwrap().sigma;
        assert!((s[0] - 1.0).abs() < 1e-12 && (s[11] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn floors_bound_reachable_losses() {
        let task = make_task(&spec(ShiftMode::Orthogonal, 2), 4).unwrap();
        let layer = BlockTTLayer::block_svd_init(&task.w0, task.shape, DesignCorner::DEFAULT).unwrap();
        let floor = task.reachable_floor(&layer, Split::Train).unwrap();
        let pop = task.population_floor(&layer).unwrap();
        assert!(floor > 0.0 && pop > 0.0);
        assert!(task.loss(&task.w0, Split::Train).unwrap() >= floor);
        // the unconstrained fit reaches zero on noiseless data
        let svd = BlockTTLayer::block_svd_init(&task.w0, BlockShape::column(1, 12), DesignCorner::DEFAULT).unwrap();
        assert!(task.reachable_floor(&svd, Split::Train).unwrap() < 1e-20);
        // in-space shifts are reachable
        let easy = make_task(&spec(ShiftMode::InColumnSpace, 2), 4).unwrap();
        assert!(easy.reachable_floor(&layer, Split::Train).unwrap() < 1e-20);
        assert!(easy.population_floor(&layer).unwrap() < 1e-20);
    }
}
