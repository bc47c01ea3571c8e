//! The property battery run by `fura verify`.
//!
//! Each suite draws its inputs from the master seed, checks one family of
//! invariants and reports its worst error against the tolerance it used.

use serde::{Deserialize, Serialize};

use crate::btt::{BlockShape, BlockTTLayer, DesignCorner, Orientation, TrainableSide};
use crate::diagnostics::{
    confinement_check, energy_ratio, energy_split, lora_rank_witness, projection_residuals, rank_capacity_witness,
};
use crate::error::{Error, Result};
use crate::grad::fd::{max_relative_error, numerical_bundle, FD_STEP};
use crate::grad::{backward, effective_update, predicted_update, PreconditionerForm};
use crate::linalg::{
    derive_seed, gaussian, norm2, orthonormality_defect, random_orthonormal, svd_thin, DenseMatrix, SeededRng,
};
use crate::optim::sgd_step;
use crate::quant::{nf4_dequantize, nf4_quantize, quantize_layer, NF4_CODEBOOK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SuiteName {
    Svd,
    Lossless,
    Forward,
    Gradient,
    Preconditioner,
    Confinement,
    Energy,
    Rank,
    Nf4,
}

impl SuiteName {
    pub const ALL: [SuiteName; 9] = [
        SuiteName::Svd,
        SuiteName::Lossless,
        SuiteName::Forward,
        SuiteName::Gradient,
        SuiteName::Preconditioner,
        SuiteName::Confinement,
        SuiteName::Energy,
        SuiteName::Rank,
        SuiteName::Nf4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SuiteName::Svd => "svd",
            SuiteName::Lossless => "lossless",
            SuiteName::Forward => "forward",
            SuiteName::Gradient => "gradient",
            SuiteName::Preconditioner => "preconditioner",
            SuiteName::Confinement => "confinement",
            SuiteName::Energy => "energy",
            SuiteName::Rank => "rank",
            SuiteName::Nf4 => "nf4",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Relative SVD reconstruction error.
    pub svd: f64,
    /// `‖merge(init(W)) − W‖_F / ‖W‖_F`.
    pub lossless: f64,
    /// Relative error of the two-stage forward against `W x`.
    pub forward: f64,
    /// Normwise relative error against central differences.
    pub gradient: f64,
    /// Absolute error of the single-core closed forms.
    pub preconditioner: f64,
    /// Minimum shrink factor of the two-core residual when `η` halves.
    pub residual_ratio: f64,
    /// Per-block residual outside the frozen subspace.
    pub confinement: f64,
    /// Residual the perturbed-core control must exceed.
    pub control: f64,
    /// Relative error of the Pythagorean split.
    pub energy: f64,
    /// Standard errors allowed between the Gaussian baseline mean and `k/d`.
    pub baseline_se: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            svd: 1e-9,
            lossless: 1e-9,
            forward: 1e-10,
            gradient: 1e-6,
            preconditioner: 1e-10,
            residual_ratio: 3.5,
            confinement: 1e-10,
            control: 1e-6,
            energy: 1e-9,
            baseline_se: 3.0,
        }
    }
}

impl Tolerances {
    /// Overrides one named tolerance.
    pub fn set(&mut self, key: &str, value: f64) -> Result<()> {
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::Domain(format!("tolerance `{key}` must be positive, got {value}")));
        }
        let mut map = serde_json::to_value(&*self)?;
        match map.get_mut(key) {
            Some(slot) => *slot = value.into(),
            None => return Err(Error::Domain(format!("unknown tolerance `{key}`"))),
        }
        *self = serde_json::from_value(map)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: SuiteName,
    pub passed: bool,
    pub checks: usize,
    /// Worst measured value of the suite's headline quantity.
    pub worst: f64,
    pub tolerance: f64,
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub seed: u64,
    pub tolerances: Tolerances,
    pub suites: Vec<SuiteReport>,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    pub tolerances: Tolerances,
    /// Suites to run; all when empty.
    pub only: Vec<SuiteName>,
    /// Corrupts one suite's inputs so that it must fail.
    pub inject_fault: Option<SuiteName>,
}

struct Tally {
    checks: usize,
    worst: f64,
    failures: Vec<String>,
}

impl Tally {
    fn new() -> Self {
        Self { checks: 0, worst: 0.0, failures: Vec::new() }
    }

    /// Records `value ≤ tol` (worst tracked by maximum).
    fn at_most(&mut self, what: impl FnOnce() -> String, value: f64, tol: f64) {
        self.checks += 1;
        self.worst = self.worst.max(value);
        if !(value <= tol) {
            self.failures.push(format!("{}: {value:.3e} > {tol:.3e}", what()));
        }
    }

    fn holds(&mut self, what: impl FnOnce() -> String, ok: bool) {
        self.checks += 1;
        if !ok {
            self.failures.push(what());
        }
    }
}

pub fn verify(opts: &VerifyOptions) -> VerifyReport {
    let suites: Vec<SuiteName> = if opts.only.is_empty() {
        SuiteName::ALL.to_vec()
    } else {
        SuiteName::ALL.into_iter().filter(|s| opts.only.contains(s)).collect()
    };
    let reports: Vec<SuiteReport> =
        suites.into_iter().map(|s| run_suite(s, opts.seed, &opts.tolerances, opts.inject_fault == Some(s))).collect();
    VerifyReport {
        passed: reports.iter().all(|r| r.passed),
        seed: opts.seed,
        tolerances: opts.tolerances.clone(),
        suites: reports,
    }
}

fn run_suite(suite: SuiteName, seed: u64, tol: &Tolerances, fault: bool) -> SuiteReport {
    let seed = derive_seed(seed, suite as u64 + 1);
    let mut t = Tally::new();
    let (outcome, tolerance) = match suite {
        SuiteName::Svd => (svd_suite(&mut t, seed, tol, fault), tol.svd),
        SuiteName::Lossless => (lossless_suite(&mut t, seed, tol, fault), tol.lossless),
        SuiteName::Forward => (forward_suite(&mut t, seed, tol, fault), tol.forward),
        SuiteName::Gradient => (gradient_suite(&mut t, seed, tol, fault), tol.gradient),
        SuiteName::Preconditioner => (preconditioner_suite(&mut t, seed, tol, fault), tol.preconditioner),
        SuiteName::Confinement => (confinement_suite(&mut t, seed, tol, fault), tol.confinement),
        SuiteName::Energy => (energy_suite(&mut t, seed, tol, fault), tol.energy),
        SuiteName::Rank => (rank_suite(&mut t, seed, fault), 0.0),
        SuiteName::Nf4 => (nf4_suite(&mut t, seed, tol, fault), tol.confinement),
    };
    if let Err(e) = outcome {
        t.failures.push(format!("error: {e}"));
    }
    SuiteReport {
        suite,
        passed: t.failures.is_empty(),
        checks: t.checks,
        worst: t.worst,
        tolerance,
        failures: t.failures,
    }
}

/// A seeded random weight and a valid block layout for `corner`.
fn random_layout(rng: &mut SeededRng, corner: DesignCorner) -> (DenseMatrix, BlockShape) {
    const DIMS: [usize; 6] = [2, 4, 6, 8, 12, 16];
    let pick = |rng: &mut SeededRng| DIMS[(rng.uniform() * DIMS.len() as f64) as usize % DIMS.len()];
    let (d_out, d_in) = (pick(rng), pick(rng));
    let orientation = if corner == DesignCorner::FULL && rng.uniform() < 0.5 {
        Orientation::RowSliced
    } else {
        corner.natural_orientation()
    };
    let axis = match orientation {
        Orientation::ColumnSliced => d_in,
        Orientation::RowSliced => d_out,
    };
    let divisors: Vec<usize> = (1..=axis).filter(|b| axis % b == 0).collect();
    let b = divisors[(rng.uniform() * divisors.len() as f64) as usize % divisors.len()];
    let w = rng.normal_matrix(d_out, d_in, 1.0);
    (w, BlockShape { n: axis / b, b, orientation })
}

fn all_corners() -> impl Iterator<Item = DesignCorner> {
    DesignCorner::PEFT.into_iter().chain([DesignCorner::FULL])
}

fn svd_suite(t: &mut Tally, seed: u64, tol: &Tolerances, fault: bool) -> Result<()> {
    let shapes = [(1, 1), (3, 3), (5, 2), (2, 5), (8, 8), (16, 4), (4, 16), (12, 7), (30, 30)];
    for (i, &(r, c)) in shapes.iter().enumerate() {
        let mut m = gaussian(r, c, derive_seed(seed, i as u64), 1.0);
        if i % 3 == 2 {
            // rank-deficient copy: repeat the first column
            let first = m.col(0);
            for row in 0..r {
                m.set(row, c - 1, first[row]);
            }
        }
        let svd = svd_thin(&m)?;
        let mut rec = svd.reconstruct();
        if fault {
            rec.set(0, 0, rec.get(0, 0) + 1.0);
        }
        let err = rec.sub(&m)?.frobenius_norm() / m.frobenius_norm();
        t.at_most(|| format!("{r}x{c} reconstruction"), err, tol.svd);
        let k = r.min(c) as f64;
        t.at_most(|| format!("{r}x{c} U orthonormality"), orthonormality_defect(&svd.u), tol.svd * k.sqrt());
        t.at_most(
            || format!("{r}x{c} V orthonormality"),
            orthonormality_defect(&svd.vt.transpose()),
            tol.svd * k.sqrt(),
        );
        t.holds(
            || format!("{r}x{c} singular values sorted and nonnegative"),
            svd.sigma.windows(2).all(|w| w[0] >= w[1]) && svd.sigma.iter().all(|&s| s >= 0.0),
        );
    }
    let id = svd_thin(&DenseMatrix::identity(3))?;
    t.holds(
        || "identity factors exactly".into(),
        id.u == DenseMatrix::identity(3) && id.vt == DenseMatrix::identity(3) && id.sigma == [1.0; 3],
    );
    Ok(())
}

fn lossless_suite(t: &mut Tally, seed: u64, tol: &Tolerances, fault: bool) -> Result<()> {
    let mut rng = SeededRng::new(seed);
    for trial in 0..70 {
        let corner = all_corners().nth(trial % 7).expect("seven corners");
        let (w, shape) = random_layout(&mut rng, corner);
        let layer = BlockTTLayer::block_svd_init(&w, shape, corner)?;
        let mut merged = layer.merge();
        if fault {
            merged.set(0, 0, merged.get(0, 0) + 1.0);
        }
        let err = merged.sub(&w)?.frobenius_norm() / w.frobenius_norm();
        t.at_most(|| format!("trial {trial} ({corner}, {shape:?})"), err, tol.lossless);
    }
    let id = BlockTTLayer::block_svd_init(&DenseMatrix::identity(4), BlockShape::column(2, 2), DesignCorner::DEFAULT)?;
    t.holds(|| "identity init merges exactly".into(), id.merge() == DenseMatrix::identity(4));
    Ok(())
}

/// The layer after a few random core perturbations, so that merge differs
/// from the pretrained weight.
fn perturbed_layer(rng: &mut SeededRng, corner: DesignCorner) -> Result<BlockTTLayer> {
    let (w, shape) = random_layout(rng, corner);
    let mut layer = BlockTTLayer::block_svd_init(&w, shape, corner)?;
    let (l, s, r) = layer.cores_mut();
    for m in l.iter_mut().chain(r.iter_mut()) {
        let noise = rng.normal_matrix(m.rows(), m.cols(), 0.1);
        m.axpy(1.0, &noise)?;
    }
    if let Some(s) = s {
        for v in s.iter_mut() {
            v.iter_mut().for_each(|x| *x += 0.1 * rng.standard_normal());
        }
    }
    Ok(layer)
}

fn forward_suite(t: &mut Tally, seed: u64, tol: &Tolerances, fault: bool) -> Result<()> {
    let mut rng = SeededRng::new(seed);
    for trial in 0..140 {
        let corner = all_corners().nth(trial % 7).expect("seven corners");
        let layer = perturbed_layer(&mut rng, corner)?;
        let x = rng.normal_vec(layer.d_in(), 1.0);
        let mut y = layer.forward(&x)?;
        if fault {
            y[0] += 1.0;
        }
        let dense = layer.merge().matvec(&x)?;
        let diff: Vec<f64> = y.iter().zip(&dense).map(|(a, b)| a - b).collect();
        let err = norm2(&diff) / norm2(&dense).max(f64::MIN_POSITIVE);
        t.at_most(|| format!("trial {trial} ({corner})"), err, tol.forward);
    }
    Ok(())
}

fn gradient_suite(t: &mut Tally, seed: u64, tol: &Tolerances, fault: bool) -> Result<()> {
    let mut rng = SeededRng::new(seed);
    for corner in all_corners() {
        for trial in 0..10 {
            let layer = perturbed_layer(&mut rng, corner)?;
            let x = rng.normal_vec(layer.d_in(), 1.0);
            let g = rng.normal_vec(layer.d_out(), 1.0);
            let mut analytic = backward(&layer, &x, &g)?;
            if fault {
                let cores = analytic.g_r.iter_mut().chain(analytic.g_l.iter_mut());
                for c in cores {
                    c[0].as_mut_slice()[0] += 1.0;
                }
            }
            let numeric = numerical_bundle(&layer, &x, &g, FD_STEP)?;
            let err = max_relative_error(&analytic, &numeric);
            t.at_most(|| format!("{corner} trial {trial}"), err, tol.gradient);
        }
    }
    Ok(())
}

/// `(ΔW_effective, ΔW_predicted)` for one random sample at step size `eta`.
fn one_step(layer: &BlockTTLayer, x: &[f64], g: &[f64], eta: f64) -> Result<(DenseMatrix, DenseMatrix)> {
    let form = PreconditionerForm::for_corner(layer.corner())?;
    let bundle = backward(layer, x, g)?;
    Ok((effective_update(layer, &bundle, eta)?, predicted_update(layer, x, g, eta, form)?))
}

fn preconditioner_suite(t: &mut Tally, seed: u64, tol: &Tolerances, fault: bool) -> Result<()> {
    let mut rng = SeededRng::new(seed);
    for &corner in DesignCorner::PEFT.iter() {
        let form = PreconditionerForm::for_corner(corner)?;
        for trial in 0..8 {
            let (w, shape) = random_layout(&mut rng, corner);
            let layer = BlockTTLayer::block_svd_init(&w, shape, corner)?;
            let x = rng.normal_vec(layer.d_in(), 1.0);
            let mut g = rng.normal_vec(layer.d_out(), 1.0);
            if fault {
                g.iter_mut().for_each(|v| *v *= 1e4);
            }
            if form.is_single_core() {
                let (eff, pred) = one_step(&layer, &x, &g, 0.05)?;
                let err = eff.sub(&pred)?.max_abs();
                t.at_most(|| format!("{corner} trial {trial}"), err, tol.preconditioner);
            } else {
                let resid = |eta: f64| -> Result<f64> {
                    let (eff, pred) = one_step(&layer, &x, &g, eta)?;
                    Ok(eff.sub(&pred)?.frobenius_norm())
                };
                for eta in [1e-2, 1e-3, 1e-4] {
                    let (a, b) = (resid(eta)?, resid(eta / 2.0)?);
                    if a == 0.0 {
                        // exact cancellation (e.g. a zero magnitude step) is trivially second order
                        t.holds(|| format!("{corner} trial {trial} eta {eta}"), b == 0.0);
                        continue;
                    }
                    let ratio = a / b;
                    t.holds(
                        || {
                            format!(
                                "{corner} trial {trial} eta {eta}: residual ratio {ratio:.3} < {}",
                                tol.residual_ratio
                            )
                        },
                        ratio >= tol.residual_ratio && !fault,
                    );
                }
            }
        }
    }
    Ok(())
}

fn confinement_suite(t: &mut Tally, seed: u64, tol: &Tolerances, fault: bool) -> Result<()> {
    let mut rng = SeededRng::new(seed);
    let inputs = DesignCorner::PEFT.into_iter().filter(|c| c.side == TrainableSide::Input);
    for corner in inputs {
        let w = rng.normal_matrix(8, 12, 1.0);
        let before = BlockTTLayer::block_svd_init(&w, BlockShape::column(3, 4), corner)?;
        let mut after = before.clone();
        for _ in 0..50 {
            let b = backward(&after, &rng.normal_vec(12, 1.0), &rng.normal_vec(8, 1.0))?;
            sgd_step(&mut after, &b, 0.05)?;
        }
        if fault {
            after.l_blocks_mut()[0].set(0, 0, 0.5);
            let rep = projection_residuals(&before, &after)?;
            t.at_most(|| format!("{corner} residual"), rep.max_residual, tol.confinement);
            continue;
        }
        let rep = confinement_check(&before, &after)?;
        t.at_most(|| format!("{corner} residual"), rep.max_residual, tol.confinement);

        let mut broken = after.clone();
        let noise = rng.normal_matrix(8, 4, 0.05);
        broken.l_blocks_mut()[1].axpy(1.0, &noise)?;
        let control = projection_residuals(&before, &broken)?.max_residual;
        t.holds(
            || format!("{corner} negative control residual {control:.3e} not above {:.1e}", tol.control),
            control > tol.control,
        );
    }
    Ok(())
}

fn energy_suite(t: &mut Tally, seed: u64, tol: &Tolerances, fault: bool) -> Result<()> {
    let mut rng = SeededRng::new(seed);
    for trial in 0..50 {
        let rows = 2 + (rng.uniform() * 14.0) as usize;
        let cols = 1 + (rng.uniform() * 10.0) as usize;
        let k = 1 + (rng.uniform() * rows as f64) as usize % rows;
        let m = rng.normal_matrix(rows, cols, 1.0);
        let u = random_orthonormal(rows, k, derive_seed(seed, 1000 + trial))?;
        let rho = energy_ratio(&m, &u)?;
        t.holds(|| format!("trial {trial}: rho {rho} outside [0, 1]"), (0.0..=1.0).contains(&rho));
        let (inside, outside, total) = energy_split(&m, &u)?;
        let skew = if fault { 1.0 } else { 0.0 };
        t.at_most(
            || format!("trial {trial} Pythagorean split"),
            ((inside + outside + skew - total) / total).abs(),
            tol.energy,
        );
    }
    let (d, k, n) = (64, 16, 1000);
    let u = random_orthonormal(d, k, derive_seed(seed, 1))?;
    let vals = (0..n)
        .map(|i| energy_ratio(&gaussian(d, d, derive_seed(seed, 2000 + i), 1.0), &u))
        .collect::<Result<Vec<_>>>()?;
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let target = if fault { 0.5 } else { k as f64 / d as f64 };
    let z = (mean - target).abs() / se;
    t.holds(
        || format!("Gaussian baseline mean {mean:.5} is {z:.2} standard errors from {target}"),
        z <= tol.baseline_se,
    );
    Ok(())
}

fn rank_suite(t: &mut Tally, seed: u64, fault: bool) -> Result<()> {
    let w = gaussian(4, 6, seed, 1.0);
    let wit = rank_capacity_witness(&w, BlockShape::column(2, 3), DesignCorner::DEFAULT, 20, seed)?;
    let target = if fault { 5 } else { 4 };
    t.holds(|| format!("max witnessed rank {} != {target}", wit.max_rank_seen), wit.max_rank_seen == target);
    t.holds(|| format!("min witnessed rank {} != 0", wit.min_rank_seen), wit.min_rank_seen == 0);
    t.holds(
        || format!("max rank {} exceeds capacity {}", wit.max_rank_seen, wit.capacity_bound),
        wit.max_rank_seen <= wit.capacity_bound,
    );
    let lora = lora_rank_witness(4, 6, 1, 20, seed)?;
    t.holds(|| format!("LoRA r=1 reached rank {}", lora.max_rank_seen), lora.max_rank_seen <= 1);
    Ok(())
}

fn nf4_suite(t: &mut Tally, seed: u64, tol: &Tolerances, fault: bool) -> Result<()> {
    let mut rng = SeededRng::new(seed);
    for trial in 0..20 {
        let m = rng.normal_matrix(8, 16, 1.0 + trial as f64);
        let g = [1, 7, 16, 64][trial % 4];
        let q = nf4_quantize(&m, g)?;
        let scales = q.scales();
        let mut optimal = true;
        for (i, (&v, &c)) in m.as_slice().iter().zip(q.codes()).enumerate() {
            let s = scales[i / g];
            let err = (NF4_CODEBOOK[usize::from(c)] * s - v).abs();
            optimal &= NF4_CODEBOOK.iter().all(|&l| err <= (l * s - v).abs());
        }
        t.holds(|| format!("trial {trial}: a code is not the nearest level"), optimal && !fault);
        let again = nf4_quantize(&nf4_dequantize(&q)?, g)?;
        t.holds(|| format!("trial {trial}: re-quantization changed codes or scales"), again == q);
    }
    let ends = DenseMatrix::from_rows(&[vec![3.0, -3.0]])?;
    t.holds(
        || "endpoints [3, -3] do not round-trip exactly".into(),
        nf4_dequantize(&nf4_quantize(&ends, 64)?)? == ends,
    );

    let w = rng.normal_matrix(16, 16, 0.25);
    let layer = BlockTTLayer::block_svd_init(&w, BlockShape::column(4, 4), DesignCorner::DEFAULT)?;
    let (q, _) = quantize_layer(&layer, 16)?;
    let before = q.layer().clone();
    let mut after = before.clone();
    for _ in 0..20 {
        let b = backward(&after, &rng.normal_vec(16, 1.0), &rng.normal_vec(16, 1.0))?;
        sgd_step(&mut after, &b, 0.05)?;
    }
    let rep = confinement_check(&before, &after)?;
    t.at_most(|| "QFuRA confinement to the dequantized core".into(), rep.max_residual, tol.confinement);
    Ok(())
}
