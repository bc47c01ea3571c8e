use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::btt::{BlockShape, DesignCorner, Orientation};
use crate::error::{Error, Result};
use crate::optim::{AdamWConfig, Schedule};

pub const SCHEMA_VERSION: u32 = 1;

/// How the teacher shift `Δ = W* − W₀` relates to the pretrained blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    /// Each block of `Δ` lies in the column space of the matching block of `W₀`.
    InColumnSpace,
    /// Each block of `Δ` is orthogonal to that column space.
    Orthogonal,
    /// Equal parts of both.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub d_out: usize,
    pub d_in: usize,
    pub samples: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    pub mode: ShiftMode,
    /// Rank of `Δ`; 0 gives `W* = W₀`.
    pub shift_rank: usize,
    #[serde(default = "default_shift_scale")]
    pub shift_scale: f64,
    /// Column-block width used to define the subspaces; defaults to the
    /// balanced divisor of `d_in`.
    #[serde(default)]
    pub block_size: Option<usize>,
}

fn default_shift_scale() -> f64 {
    1.0
}

impl TaskSpec {
    pub fn shape(&self) -> Result<BlockShape> {
        match self.block_size {
            Some(b) if b == 0 || self.d_in % b != 0 => {
                Err(Error::config("task.block_size", format!("{b} does not divide d_in = {}", self.d_in)))
            }
            Some(b) => Ok(BlockShape::column(self.d_in / b, b)),
            None => BlockShape::balanced(self.d_out, self.d_in, Orientation::ColumnSliced),
        }
    }

    pub fn heldout_count(&self) -> usize {
        self.samples / 5
    }

    pub fn train_count(&self) -> usize {
        self.samples - self.heldout_count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodSpec {
    FullFt,
    Lora {
        rank: usize,
    },
    /// One block: the whole left singular basis frozen.
    SvdFt,
    Fura {
        #[serde(default = "default_corner")]
        corner: DesignCorner,
        /// Block width along the sliced axis; balanced divisor if absent.
        #[serde(default)]
        b: Option<usize>,
    },
}

fn default_corner() -> DesignCorner {
    DesignCorner::DEFAULT
}

impl MethodSpec {
    pub fn label(&self) -> String {
        match self {
            MethodSpec::FullFt => "full_ft".into(),
            MethodSpec::Lora { rank } => format!("lora_r{rank}"),
            MethodSpec::SvdFt => "svd_ft".into(),
            MethodSpec::Fura { corner, b: Some(b) } => format!("fura_{}_b{b}", corner.id()),
            MethodSpec::Fura { corner, b: None } => format!("fura_{}", corner.id()),
        }
    }

    /// Block layout of the factored methods; `None` for Full FT and LoRA.
    pub fn shape(&self, d_out: usize, d_in: usize) -> Result<Option<(BlockShape, DesignCorner)>> {
        match *self {
            MethodSpec::FullFt | MethodSpec::Lora { .. } => Ok(None),
            MethodSpec::SvdFt => Ok(Some((BlockShape::column(1, d_in), DesignCorner::DEFAULT))),
            MethodSpec::Fura { corner, b } => {
                let orientation = corner.natural_orientation();
                let shape = match b {
                    Some(b) => {
                        let len = match orientation {
                            Orientation::ColumnSliced => d_in,
                            Orientation::RowSliced => d_out,
                        };
                        if b == 0 || len % b != 0 {
                            return Err(Error::config("method.b", format!("{b} does not divide {len}")));
                        }
                        BlockShape { n: len / b, b, orientation }
                    }
                    None => BlockShape::balanced(d_out, d_in, orientation)?,
                };
                Ok(Some((shape, corner)))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    /// Peak learning rate; the method's tuned default if absent.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub adamw: AdamWConfig,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        Self { kind: OptimizerKind::Adamw, lr: None, schedule: Schedule::default(), adamw: AdamWConfig::default() }
    }
}

/// Learning rates picked by `examples/lr_grid.rs` on the reference task
/// (d = 32, 500 samples, rank-4 in-column-space shift, 200 steps).
pub fn default_lr(method: &MethodSpec, kind: OptimizerKind) -> f64 {
    use crate::btt::{SPlacement, TrainableSide};
    match (kind, method) {
        (OptimizerKind::Adamw, MethodSpec::FullFt | MethodSpec::SvdFt) => 1e-2,
        (OptimizerKind::Adamw, MethodSpec::Lora { .. }) => 3e-2,
        (OptimizerKind::Adamw, MethodSpec::Fura { corner, .. }) => match (corner.side, corner.placement) {
            (TrainableSide::Input, SPlacement::Separate) => 1e-2,
            (TrainableSide::Input, _) => 3e-2,
            (TrainableSide::All, _) => 1e-2,
            // the output corners plateau early; smaller steps are as good and safer
            (TrainableSide::Output, _) => 3e-3,
        },
        (OptimizerKind::Sgd, MethodSpec::FullFt) => 1.0,
        (OptimizerKind::Sgd, MethodSpec::Lora { .. } | MethodSpec::SvdFt) => 3.0,
        (OptimizerKind::Sgd, MethodSpec::Fura { corner, .. }) => match corner.side {
            TrainableSide::Input | TrainableSide::All => 1.0,
            TrainableSide::Output => 0.3,
        },
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub task: TaskSpec,
    pub method: MethodSpec,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    pub steps: usize,
    pub seed: u64,
    /// Spectral snapshot interval in steps; 0 records only the first and
    /// last step.
    #[serde(default)]
    pub snapshot_every: usize,
    /// Width of the reference basis in spectral reports; `min(d) / 4` if absent.
    #[serde(default)]
    pub report_k: Option<usize>,
    #[serde(default)]
    pub output: OutputSpec,
}

impl ExperimentConfig {
    pub fn lr(&self) -> f64 {
        self.optimizer.lr.unwrap_or_else(|| default_lr(&self.method, self.optimizer.kind))
    }

    pub fn report_k(&self) -> usize {
        self.report_k.unwrap_or_else(|| (self.task.d_out.min(self.task.d_in) / 4).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        let t = &self.task;
        if t.d_out == 0 || t.d_in == 0 {
            return Err(Error::config("task", "dimensions must be positive"));
        }
        if t.samples < 5 {
            return Err(Error::config("task.samples", "need at least 5 samples for the held-out split"));
        }
        if !(t.noise_sigma.is_finite() && t.noise_sigma >= 0.0) {
            return Err(Error::config("task.noise_sigma", "must be finite and nonnegative"));
        }
        if !(t.shift_scale.is_finite() && t.shift_scale > 0.0) {
            return Err(Error::config("task.shift_scale", "must be finite and positive"));
        }
        if t.shift_rank > t.d_out.min(t.d_in) {
            return Err(Error::config("task.shift_rank", "exceeds min(d_out, d_in)"));
        }
        let shape = t.shape()?;
        if t.mode != ShiftMode::InColumnSpace && t.shift_rank > 0 && shape.b >= t.d_out {
            return Err(Error::config(
                "task.block_size",
                "block column spaces fill the output space, so no orthogonal shift exists",
            ));
        }
        if let MethodSpec::Lora { rank } = self.method {
            if rank == 0 || rank > t.d_out.min(t.d_in) {
                return Err(Error::config("method.rank", format!("{rank} outside 1..={}", t.d_out.min(t.d_in))));
            }
        }
        self.method.shape(t.d_out, t.d_in)?;
        let lr = self.lr();
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::config("optimizer.lr", "must be finite and positive"));
        }
        if let Schedule::Linear { warmup_ratio } = self.optimizer.schedule {
            if !(0.0..=1.0).contains(&warmup_ratio) {
                return Err(Error::config("optimizer.schedule.warmup_ratio", "must lie in [0, 1]"));
            }
        }
        let k = self.report_k();
        if k == 0 || k > t.d_out.min(t.d_in) {
            return Err(Error::config("report_k", format!("{k} outside 1..={}", t.d_out.min(t.d_in))));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Several runs sharing one task, compared row by row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub schema_version: u32,
    pub configs: Vec<ExperimentConfig>,
}

impl SuiteConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let suite: Self = serde_json::from_str(text)?;
        if suite.schema_version != SCHEMA_VERSION {
            return Err(Error::config("schema_version", format!("unsupported version {}", suite.schema_version)));
        }
        for (i, c) in suite.configs.iter().enumerate() {
            c.validate().map_err(|e| match e {
                Error::Config { path, message } => Error::config(format!("configs[{i}].{path}"), message),
                other => other,
            })?;
        }
        Ok(suite)
    }
}

/// Either a single experiment or a suite, told apart by the `configs` key.
pub enum ConfigFile {
    Single(Box<ExperimentConfig>),
    Suite(SuiteConfig),
}

pub fn parse_config_file(text: &str) -> Result<ConfigFile> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    if value.get("configs").is_some() {
        Ok(ConfigFile::Suite(SuiteConfig::from_json(text)?))
    } else {
        Ok(ConfigFile::Single(Box::new(ExperimentConfig::from_json(text)?)))
    }
}
