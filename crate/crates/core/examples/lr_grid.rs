//! Grid search behind `harness::default_lr`.
//!
//! Runs every method on the reference task for each candidate peak rate and
//! prints the final held-out loss. The chosen rate is the smallest one whose
//! loss is within 1% of the best.
//!
//!     cargo run --release --example lr_grid

use fura::btt::DesignCorner;
use fura::harness::{
    run, ExperimentConfig, MethodSpec, OptimizerKind, OptimizerSpec, OutputSpec, ShiftMode, TaskSpec, SCHEMA_VERSION,
};
use fura::optim::Schedule;

const GRID: [f64; 10] = [1e-3, 3e-3, 1e-2, 3e-2, 0.1, 0.3, 1.0, 3.0, 10.0, 30.0];

fn reference(method: MethodSpec, kind: OptimizerKind, lr: f64) -> ExperimentConfig {
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        task: TaskSpec {
            d_out: 32,
            d_in: 32,
            samples: 500,
            noise_sigma: 0.01,
            mode: ShiftMode::InColumnSpace,
            shift_rank: 4,
            shift_scale: 1.0,
            block_size: None,
        },
        method,
        optimizer: OptimizerSpec {
            kind,
            lr: Some(lr),
            schedule: match kind {
                OptimizerKind::Sgd => Schedule::Constant,
                OptimizerKind::Adamw => Schedule::default(),
            },
            ..OptimizerSpec::default()
        },
        steps: 200,
        seed: 0,
        snapshot_every: 0,
        report_k: None,
        output: OutputSpec::default(),
    }
}

fn main() {
    let mut methods = vec![MethodSpec::FullFt, MethodSpec::Lora { rank: 4 }, MethodSpec::SvdFt];
    methods.extend(DesignCorner::PEFT.iter().map(|&corner| MethodSpec::Fura { corner, b: None }));
    for kind in [OptimizerKind::Adamw, OptimizerKind::Sgd] {
        println!("{kind:?}");
        for method in &methods {
            let mut line = format!("  {:<28}", method.label());
            let losses: Vec<f64> = GRID
                .iter()
                .map(|&lr| match run(&reference(method.clone(), kind, lr)) {
                    Ok(log) => log.last().heldout_loss,
                    Err(_) => f64::INFINITY,
                })
                .collect();
            for loss in &losses {
                line.push_str(&format!(" {loss:9.2e}"));
            }
            let best = losses.iter().copied().fold(f64::INFINITY, f64::min);
            let pick = GRID.iter().zip(&losses).find(|(_, &l)| l <= best * 1.01).map(|(&lr, _)| lr).unwrap_or(f64::NAN);
            println!("{line}   lr {pick:e}");
        }
    }
}
