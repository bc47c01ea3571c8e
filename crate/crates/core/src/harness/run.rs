use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, MethodSpec, OptimizerKind};
use super::task::{make_task, Split, Task};
use crate::btt::{BlockTTLayer, DesignCorner};
use crate::diagnostics::{metrics_csv, projection_residuals, spectral_report, MetricRow, SpectralReport, RANK_TOL};
use crate::error::{Error, Result};
use crate::grad::{backward_dense, LoraAdapter};
use crate::linalg::{derive_seed, effective_rank, numeric_rank, DenseMatrix};
use crate::optim::{adamw_step, lr_at, sgd_step, AdamWState, ParamGroup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub heldout_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub report: SpectralReport,
}

/// Exact lower bounds on the loss over a factored method's reachable set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossFloors {
    pub train: f64,
    pub heldout: f64,
    /// Expected loss floor on fresh inputs.
    pub population: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub schema_version: u32,
    pub method: String,
    pub config: ExperimentConfig,
    /// Step 0 holds the initial metrics.
    pub steps: Vec<StepRecord>,
    pub snapshots: Vec<Snapshot>,
    pub final_weights: DenseMatrix,
    pub numeric_rank_delta: usize,
    pub effective_rank_delta: Option<f64>,
    /// Block energy ratio of `ΔW` against the task's column bases.
    pub energy_ratio_delta: Option<f64>,
    /// Loss on the pretrained task `y = W₀ x` after fine-tuning.
    pub forgetting: f64,
    pub floors: Option<LossFloors>,
    /// Largest per-block residual outside the frozen subspaces.
    pub max_confinement_residual: Option<f64>,
    pub frozen_unchanged: Option<bool>,
    pub wall_ms: f64,
}

impl RunLog {
    pub fn initial(&self) -> &StepRecord {
        &self.steps[0]
    }

    pub fn last(&self) -> &StepRecord {
        self.steps.last().expect("step 0 is always recorded")
    }

    /// The log with timing zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        Self { wall_ms: 0.0, ..self.clone() }
    }

    pub fn metric_rows(&self) -> Vec<MetricRow> {
        let layer = "fc".to_string();
        let row = |step, metric: &str, value| MetricRow { step, layer: layer.clone(), metric: metric.into(), value };
        let mut rows = Vec::new();
        for s in &self.steps {
            rows.push(row(s.step, "lr", s.lr));
            rows.push(row(s.step, "train_loss", s.train_loss));
            rows.push(row(s.step, "heldout_loss", s.heldout_loss));
        }
        for snap in &self.snapshots {
            let r = &snap.report;
            if let Some(v) = r.energy_ratio_grad {
                rows.push(row(snap.step, "energy_ratio_grad", v));
            }
            if let Some(v) = r.energy_ratio_weight {
                rows.push(row(snap.step, "energy_ratio_weight", v));
            }
            if let Some(v) = r.eff_rank_delta {
                rows.push(row(snap.step, "eff_rank_delta", v));
            }
            rows.push(row(snap.step, "numeric_rank_delta", r.numeric_rank_delta as f64));
        }
        rows
    }
}

enum Model {
    Dense(DenseMatrix),
    Lora { w0: DenseMatrix, adapter: LoraAdapter },
    Factored(BlockTTLayer),
}

enum OptState {
    Sgd,
    Adamw(AdamWState),
}

impl Model {
    fn weights(&self) -> DenseMatrix {
        match self {
            Model::Dense(w) => w.clone(),
            Model::Lora { w0, adapter } => w0.add(&adapter.delta()).expect("adapter fits"),
            Model::Factored(layer) => layer.merge(),
        }
    }

    fn step(&mut self, grad: &DenseMatrix, lr: f64, opt: &mut OptState) -> Result<()> {
        match (self, opt) {
            (Model::Dense(w), OptState::Sgd) => w.axpy(-lr, grad),
            (Model::Dense(w), OptState::Adamw(state)) => {
                let mut groups =
                    [ParamGroup { param: w.as_mut_slice(), grad: grad.as_slice(), decay: true, lr_scale: 1.0 }];
                state.step_groups(&mut groups, lr)
            }
            (Model::Lora { adapter, .. }, opt) => {
                let (ga, gb) = adapter.gradients(grad)?;
                match opt {
                    OptState::Sgd => {
                        adapter.a.axpy(-lr, &ga)?;
                        adapter.b.axpy(-lr, &gb)
                    }
                    OptState::Adamw(state) => {
                        let mut groups = [
                            ParamGroup {
                                param: adapter.a.as_mut_slice(),
                                grad: ga.as_slice(),
                                decay: true,
                                lr_scale: 1.0,
                            },
                            ParamGroup {
                                param: adapter.b.as_mut_slice(),
                                grad: gb.as_slice(),
                                decay: true,
                                lr_scale: 1.0,
                            },
                        ];
                        state.step_groups(&mut groups, lr)
                    }
                }
            }
            (Model::Factored(layer), opt) => {
                let bundle = backward_dense(layer, grad)?;
                match opt {
                    OptState::Sgd => sgd_step(layer, &bundle, lr),
                    OptState::Adamw(state) => adamw_step(layer, &bundle, state, lr),
                }
            }
        }
    }
}

fn build_model(config: &ExperimentConfig, task: &Task) -> Result<Model> {
    let (d_out, d_in) = (task.spec.d_out, task.spec.d_in);
    Ok(match &config.method {
        MethodSpec::FullFt => Model::Dense(task.w0.clone()),
        MethodSpec::Lora { rank } => Model::Lora {
            w0: task.w0.clone(),
            adapter: LoraAdapter::init(d_out, d_in, *rank, derive_seed(config.seed, 4)),
        },
        method => {
            let (shape, corner) = method.shape(d_out, d_in)?.expect("factored method");
            Model::Factored(BlockTTLayer::block_svd_init(&task.w0, shape, corner)?)
        }
    })
}

#[derive(Serialize)]
struct NanDump<'a> {
    step: usize,
    method: &'a str,
    steps: &'a [StepRecord],
    last_finite_weights: &'a DenseMatrix,
}

/// Runs one experiment. Fails with [`Error::NonFinite`] as soon as a loss
/// is not finite, after writing `nan_dump.json` to the output directory if
/// one is configured.
pub fn run(config: &ExperimentConfig) -> Result<RunLog> {
    config.validate()?;
    let task = make_task(&config.task, config.seed)?;
    run_on_task(config, &task)
}

fn run_on_task(config: &ExperimentConfig, task: &Task) -> Result<RunLog> {
    let started = Instant::now();
    let method = config.method.label();
    let mut model = build_model(config, task)?;
    let initial_layer = match &model {
        Model::Factored(l) => Some(l.clone()),
        _ => None,
    };
    let mut opt = match config.optimizer.kind {
        OptimizerKind::Sgd => OptState::Sgd,
        OptimizerKind::Adamw => OptState::Adamw(AdamWState::new(config.optimizer.adamw)),
    };
    let peak = config.lr();
    let k = config.report_k();

    let mut w = model.weights();
    let mut steps = vec![StepRecord {
        step: 0,
        lr: 0.0,
        train_loss: task.loss(&w, Split::Train)?,
        heldout_loss: task.loss(&w, Split::Heldout)?,
    }];
    let mut snapshots = Vec::new();
    let mut grad = task.gradient(&w)?;
    snapshots.push(Snapshot { step: 0, report: spectral_report(&task.w0, &w, Some(&grad), k)? });

    for t in 0..config.steps {
        let lr = lr_at(config.optimizer.schedule, peak, t, config.steps)?;
        model.step(&grad, lr, &mut opt)?;
        let next = model.weights();
        let record = StepRecord {
            step: t + 1,
            lr,
            train_loss: task.loss(&next, Split::Train)?,
            heldout_loss: task.loss(&next, Split::Heldout)?,
        };
        if !(record.train_loss.is_finite() && record.heldout_loss.is_finite() && next.is_finite()) {
            if let Some(dir) = &config.output.dir {
                fs::create_dir_all(dir)?;
                let dump = NanDump { step: t + 1, method: &method, steps: &steps, last_finite_weights: &w };
                fs::write(dir.join("nan_dump.json"), serde_json::to_string_pretty(&dump)?)?;
            }
            return Err(Error::NonFinite { step: t + 1, method });
        }
        steps.push(record);
        w = next;
        grad = task.gradient(&w)?;
        let last = t + 1 == config.steps;
        if last || (config.snapshot_every > 0 && (t + 1) % config.snapshot_every == 0) {
            snapshots.push(Snapshot { step: t + 1, report: spectral_report(&task.w0, &w, Some(&grad), k)? });
        }
    }

    let delta = w.sub(&task.w0)?;
    let moved = delta.frobenius_norm() > 0.0;
    let (floors, max_confinement_residual, frozen_unchanged) = match (&model, &initial_layer) {
        (Model::Factored(layer), Some(init)) if init.corner() != DesignCorner::FULL => (
            Some(LossFloors {
                train: task.reachable_floor(init, Split::Train)?,
                heldout: task.reachable_floor(init, Split::Heldout)?,
                population: task.population_floor(init)?,
            }),
            Some(projection_residuals(init, layer)?.max_residual),
            Some(init.frozen_cores_equal(layer)),
        ),
        _ => (None, None, None),
    };

    Ok(RunLog {
        schema_version: super::config::SCHEMA_VERSION,
        method,
        config: config.clone(),
        steps,
        snapshots,
        numeric_rank_delta: numeric_rank(&delta, RANK_TOL)?,
        effective_rank_delta: if moved { Some(effective_rank(&delta)?) } else { None },
        energy_ratio_delta: if moved { Some(task.shift_energy_ratio(&delta)?) } else { None },
        forgetting: task.forgetting(&w)?,
        final_weights: w,
        floors,
        max_confinement_residual,
        frozen_unchanged,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Writes `run.json` and `metrics.csv` into `dir`.
pub fn write_run(log: &RunLog, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("run.json"), serde_json::to_string_pretty(log)?)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&log.metric_rows())?)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    pub final_train_loss: f64,
    pub heldout_loss: f64,
    pub numeric_rank_delta: usize,
    pub effective_rank_delta: Option<f64>,
    pub energy_ratio_delta: Option<f64>,
    pub forgetting: f64,
    pub step_wall_ms: f64,
}

impl CompareRow {
    pub fn of(log: &RunLog) -> Self {
        let steps = log.config.steps.max(1) as f64;
        Self {
            method: log.method.clone(),
            final_train_loss: log.last().train_loss,
            heldout_loss: log.last().heldout_loss,
            numeric_rank_delta: log.numeric_rank_delta,
            effective_rank_delta: log.effective_rank_delta,
            energy_ratio_delta: log.energy_ratio_delta,
            forgetting: log.forgetting,
            step_wall_ms: log.wall_ms / steps,
        }
    }
}

/// Runs every config on their shared task.
pub fn compare(configs: &[ExperimentConfig]) -> Result<(Vec<RunLog>, Vec<CompareRow>)> {
    let first = configs.first().ok_or_else(|| Error::Contract("compare needs at least one config".into()))?;
    if let Some((i, _)) = configs.iter().enumerate().find(|(_, c)| c.task != first.task || c.seed != first.seed) {
        return Err(Error::Contract(format!("config {i} does not share the task of config 0")));
    }
    for c in configs {
        c.validate()?;
    }
    let task = make_task(&first.task, first.seed)?;
    let logs = configs.iter().map(|c| run_on_task(c, &task)).collect::<Result<Vec<_>>>()?;
    let rows = logs.iter().map(CompareRow::of).collect();
    Ok((logs, rows))
}

/// Header: `method,final_train_loss,heldout_loss,numeric_rank_delta,
/// effective_rank_delta,energy_ratio_delta,forgetting,step_wall_ms`.
/// Missing values are empty fields.
pub fn compare_csv(rows: &[CompareRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.into()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
