use fura::btt::{DesignCorner, TrainableSide};
use fura::harness::{
    compare, run, ExperimentConfig, MethodSpec, OptimizerKind, OptimizerSpec, OutputSpec, ShiftMode, TaskSpec,
    SCHEMA_VERSION,
};

fn reference(mode: ShiftMode, method: MethodSpec, steps: usize) -> ExperimentConfig {
    ExperimentConfig {
        schema_version: SCHEMA_VERSION,
        task: TaskSpec {
            d_out: 32,
            d_in: 32,
            samples: 500,
            noise_sigma: 0.01,
            mode,
            shift_rank: 4,
            shift_scale: 1.0,
            block_size: None,
        },
        method,
        optimizer: OptimizerSpec::default(),
        steps,
        seed: 0,
        snapshot_every: 0,
        report_k: None,
        output: OutputSpec::default(),
    }
}

fn methods() -> Vec<MethodSpec> {
    let mut m = vec![MethodSpec::FullFt, MethodSpec::Lora { rank: 4 }, MethodSpec::SvdFt];
    m.extend(
        DesignCorner::PEFT.into_iter().chain([DesignCorner::FULL]).map(|corner| MethodSpec::Fura { corner, b: None }),
    );
    m
}

#[test]
fn default_rates_decrease_loss_early() {
    for kind in [OptimizerKind::Adamw, OptimizerKind::Sgd] {
        for method in methods() {
            let mut cfg = reference(ShiftMode::InColumnSpace, method, 10);
            cfg.optimizer.kind = kind;
            let log = run(&cfg).unwrap();
            let decreased = log.steps.windows(2).any(|w| w[1].train_loss < w[0].train_loss);
            assert!(decreased, "{} with {kind:?} never decreased", log.method);
            assert!(log.steps.iter().all(|s| s.train_loss.is_finite() && s.heldout_loss.is_finite()));
        }
    }
}

#[test]
fn default_corner_fits_in_space_shift() {
    let log =
        run(&reference(ShiftMode::InColumnSpace, MethodSpec::Fura { corner: DesignCorner::DEFAULT, b: None }, 200))
            .unwrap();
    assert!(log.last().heldout_loss <= 0.1 * log.initial().heldout_loss);
    assert_eq!(log.frozen_unchanged, Some(true));
}

#[test]
fn input_corners_reach_noise_level_in_space() {
    for corner in DesignCorner::PEFT.into_iter().filter(|c| c.side == TrainableSide::Input) {
        let log = run(&reference(ShiftMode::InColumnSpace, MethodSpec::Fura { corner, b: None }, 200)).unwrap();
        // noise variance 1e-4 is the best any method can do on held-out data
        assert!(log.last().heldout_loss <= 1.1e-4, "{}: {}", log.method, log.last().heldout_loss);
    }
}

#[test]
fn comparison_rows_follow_confinement() {
    let configs: Vec<ExperimentConfig> = DesignCorner::PEFT
        .into_iter()
        .map(|corner| reference(ShiftMode::InColumnSpace, MethodSpec::Fura { corner, b: None }, 30))
        .collect();
    let (logs, rows) = compare(&configs).unwrap();
    assert_eq!(rows.len(), 6);
    for (log, row) in logs.iter().zip(&rows) {
        assert_eq!(log.frozen_unchanged, Some(true));
        let rho = row.energy_ratio_delta.unwrap();
        if log.config.method.shape(32, 32).unwrap().unwrap().1.side == TrainableSide::Input {
            assert!((rho - 1.0).abs() < 1e-9, "{}: rho {rho}", row.method);
            assert!(log.max_confinement_residual.unwrap() < 1e-10);
        } else {
            assert!(rho < 1.0 - 1e-6, "{}: rho {rho}", row.method);
        }
    }
}

#[test]
fn full_ft_leaves_column_space_on_orthogonal_task() {
    let (_, rows) = compare(&[reference(ShiftMode::Orthogonal, MethodSpec::FullFt, 50)]).unwrap();
    assert!(rows[0].energy_ratio_delta.unwrap() < 1.0 - 1e-3);
}

#[test]
fn duplicated_configs_give_identical_rows() {
    let cfg = reference(ShiftMode::Mixed, MethodSpec::Lora { rank: 2 }, 15);
    let (logs, mut rows) = compare(&[cfg.clone(), cfg]).unwrap();
    assert_eq!(logs[0].without_timing(), logs[1].without_timing());
    rows.iter_mut().for_each(|r| r.step_wall_ms = 0.0);
    assert_eq!(rows[0], rows[1]);
}
