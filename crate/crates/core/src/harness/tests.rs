use std::fs;

use super::*;
use crate::datastore::{write_dataset, Dataset};
use crate::imitation::TrainConfig;
use crate::models::MethodConfig;
use crate::netblocks::{ConvEncoderSpec, ConvLayerSpec};
use crate::worlds::{generate_demos, SuiteConfig, TaskSpec, REACH3D_TRAIN_Z};

const SIZE: usize = 16;

fn small_layers() -> Vec<ConvLayerSpec> {
    let l = ConvLayerSpec {
        channels: 4,
        kernel: 3,
        stride: 2,
    };
    vec![l, l]
}

fn small_spec(task: TaskId) -> TaskSpec {
    TaskSpec {
        render_size: SIZE,
        ..TaskSpec::new(task)
    }
}

fn small_suite(tasks: &[TaskId]) -> SuiteConfig {
    SuiteConfig::new(tasks.iter().map(|&t| small_spec(t)).collect()).unwrap()
}

fn small_dataset(dir: &std::path::Path, suite: &SuiteConfig, n: usize) -> Dataset {
    let mut trajs = Vec::new();
    for s in suite.specs() {
        trajs.extend(generate_demos(s, n, 11).unwrap());
    }
    write_dataset(dir, suite, 11, &trajs).unwrap();
    Dataset::open_for_suite(dir, suite).unwrap()
}

fn small_matrix() -> MatrixConfig {
    MatrixConfig {
        eval: EvalConfig {
            trials: 2,
            base_seed: 100,
        },
        train: TrainConfig {
            epochs: 1,
            samples_per_epoch: Some(8),
            batch_size: 4,
            ..TrainConfig::default()
        },
        encoder_layers: small_layers(),
        latent: 8,
        ..MatrixConfig::default()
    }
}

fn small_model(method: Method) -> Model {
    let encoder = ConvEncoderSpec::for_size(SIZE, small_layers(), 8);
    Model::new(MethodConfig::new(method).with_encoder(encoder)).unwrap()
}

#[test]
fn protocol_defaults() {
    let c = EvalConfig::default();
    assert_eq!(c.trials, 20);
    assert_eq!(EvalConfig { base_seed: 7, ..c }.seeds()[..3], [7, 8, 9]);
    assert!(EvalConfig {
        trials: 0,
        base_seed: 0
    }
    .validate()
    .is_err());
    let labels: Vec<&str> = Row::ALL.iter().map(|r| r.label()).collect();
    assert_eq!(labels, ["BC", "TE-BC", "UPN", "CPN", "random"]);
    assert_eq!("random".parse::<Row>().unwrap(), Row::Random);
    assert_eq!("te-bc".parse::<Row>().unwrap(), Row::Method(Method::TeBc));
    let m = MatrixConfig::default();
    assert_eq!(m.rows(), Row::ALL.to_vec());
    assert_eq!(m.train.epochs, 50);
}

#[test]
fn binomial_band_quantiles() {
    assert_eq!(binomial_band(20, 0.5), (6, 14));
    assert_eq!(binomial_band(20, 0.0), (0, 0));
    assert_eq!(binomial_band(20, 1.0), (20, 20));
    // P(X = 0) = 0.95^20 ≈ 0.358, P(X ≤ 3) ≈ 0.984.
    assert_eq!(binomial_band(20, 0.05), (0, 3));
}

#[test]
fn random_policy_is_seeded() {
    let spec = small_spec(TaskId::Reach);
    let cfg = EvalConfig::default();
    let a = evaluate(Controller::Random, &spec, &cfg).unwrap();
    let b = evaluate(Controller::Random, &spec, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.seeds(), cfg.seeds());
    assert_eq!(a.trials(), 20);
    let other = evaluate(
        Controller::Random,
        &spec,
        &EvalConfig {
            base_seed: 1000,
            ..cfg
        },
    )
    .unwrap();
    assert_ne!(a.outcomes, other.outcomes);
}

#[test]
fn mpc_executes_first_planned_action() {
    let model = small_model(Method::Cpn);
    let params = model.init_params(1).unwrap();
    let spec = TaskSpec {
        horizon: 6,
        ..small_spec(TaskId::Reach)
    };
    let t = run_trial_traced(
        Controller::Trained {
            model: &model,
            params: &params,
        },
        &spec,
        3,
    )
    .unwrap();
    assert_eq!(t.executed.len(), t.outcome.steps);
    assert_eq!(t.replans, t.executed.len());
    for (e, p) in t.executed.iter().zip(&t.planned_first) {
        assert_eq!(
            e.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            p.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn faults_fail_the_trial_only() {
    let model = small_model(Method::Upn);
    let mut params = model.init_params(1).unwrap();
    params.get_mut("g.dyn1.b").unwrap().data_mut()[0] = f64::NAN;
    let spec = small_spec(TaskId::Reach);
    let cfg = EvalConfig {
        trials: 3,
        base_seed: 0,
    };
    let cell = evaluate(
        Controller::Trained {
            model: &model,
            params: &params,
        },
        &spec,
        &cfg,
    )
    .unwrap();
    assert_eq!(cell.trials(), 3);
    assert_eq!(cell.faults(), 3);
    assert_eq!(cell.successes(), 0);
}

#[test]
fn reactive_evaluation_is_deterministic() {
    let model = small_model(Method::TeBc);
    let params = model.init_params(2).unwrap();
    let spec = small_spec(TaskId::Push);
    let cfg = EvalConfig {
        trials: 3,
        base_seed: 5,
    };
    let c = Controller::Trained {
        model: &model,
        params: &params,
    };
    assert_eq!(
        evaluate(c, &spec, &cfg).unwrap(),
        evaluate(c, &spec, &cfg).unwrap()
    );
}

#[test]
fn matrix_cells_audit_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let suite = small_suite(&[TaskId::Reach, TaskId::Button]);
    let data = small_dataset(&dir.path().join("data"), &suite, 3);
    let cfg = MatrixConfig {
        methods: vec![Method::Bc, Method::Cpn],
        ..small_matrix()
    };
    let report_dir = dir.path().join("report");
    let report = run_matrix(&cfg, &suite, &data, Some(&report_dir)).unwrap();
    assert_eq!(report.cells.len(), 2 * 3);
    for ((task, row), cell) in &report.cells {
        assert_eq!(cell.seeds(), vec![100, 101]);
        if let Row::Method(m) = row {
            let t = cell.train.as_ref().unwrap();
            assert_eq!((t.epochs, t.demos), (1, 3));
            assert!(report_dir.join(format!("ckpt/{task}-{m}.cpnp")).is_file());
        }
    }
    // The last holdout's reads are still in the audit.
    let reads = data.accessed();
    assert_eq!(reads.len(), 3);
    assert!(reads.iter().all(|p| p.starts_with("reach/")));

    let replay = replay_cell(&cfg, &suite, &data, TaskId::Reach, Row::Method(Method::Cpn)).unwrap();
    assert_eq!(
        &replay,
        report
            .cell(TaskId::Reach, Row::Method(Method::Cpn))
            .unwrap()
    );

    let matrix = fs::read_to_string(report_dir.join("matrix.tsv")).unwrap();
    assert_eq!(matrix.lines().next().unwrap(), "task\tBC\tCPN\trandom");
    let first = fs::read(report_dir.join("trials.tsv")).unwrap();
    emit_report(&report, &report_dir).unwrap();
    assert_eq!(fs::read(report_dir.join("trials.tsv")).unwrap(), first);
}

#[test]
fn matrix_rejects_foreign_suite() {
    let dir = tempfile::tempdir().unwrap();
    let suite = small_suite(&[TaskId::Reach, TaskId::Button]);
    let data = small_dataset(dir.path(), &suite, 1);
    let other = small_suite(&[TaskId::Reach, TaskId::Push]);
    assert!(run_matrix(&small_matrix(), &other, &data, None).is_err());
}

#[test]
fn matrix_text_format() {
    let mut report = EvalReport::new(
        &EvalConfig {
            trials: 2,
            base_seed: 0,
        },
        &TrainConfig::default(),
    );
    let outcome = |seed, success| TrialOutcome {
        seed,
        success,
        steps: 3,
        fault: None,
    };
    for row in [
        Row::Random,
        Row::Method(Method::Upn),
        Row::Method(Method::Bc),
    ] {
        report.insert(CellResult {
            row,
            task: TaskId::Push,
            outcomes: vec![outcome(0, true), outcome(1, row == Row::Random)],
            train: None,
        });
    }
    assert_eq!(
        report.matrix_text(),
        "task\tBC\tUPN\trandom\npush\t1/2 (0.5000)\t1/2 (0.5000)\t2/2 (1.0000)\n"
    );
    assert!(report.trials_text().starts_with(
        "task\tmethod\ttrial\tseed\tsuccess\tsteps\tfault\npush\tBC\t0\t0\t1\t3\t-\n"
    ));
}

#[test]
fn grid_parsing() {
    assert_eq!(
        parse_grid("H=3,5;U=1,2").unwrap(),
        vec![(3, 1), (3, 2), (5, 1), (5, 2)]
    );
    assert_eq!(parse_grid("H=3,5,8;U=1,2,5").unwrap().len(), 9);
    assert!(parse_grid("H=3").is_err());
    assert!(parse_grid("H=3;X=1").is_err());
    assert_eq!(ExtrapolationConfig::default().trajectories, 21);
}

#[test]
fn extrapolation_study_reports_every_cell() {
    let spec = small_spec(TaskId::Reach3d);
    let trajs = generate_demos(&spec, 3, 4).unwrap();
    let cfg = ExtrapolationConfig {
        trajectories: 3,
        grid: parse_grid("H=2,3;U=1").unwrap(),
        train: TrainConfig {
            epochs: 1,
            samples_per_epoch: Some(4),
            ..TrainConfig::default()
        },
        encoder_layers: small_layers(),
        latent: 8,
        probes: 2,
        ..ExtrapolationConfig::default()
    };
    let report = extrapolation_study(&cfg, &spec, &trajs).unwrap();
    assert_eq!(report.cells.len(), 2);
    assert!(report.zero_plan_deviation > 0.0);
    assert!(report.to_text().contains("# selected H="));
    assert_eq!(extrapolation_study(&cfg, &spec, &trajs).unwrap(), report);

    let mut moved = spec.clone();
    moved.bounds.insert(
        "target.z".into(),
        crate::worlds::Range::new(REACH3D_TRAIN_Z, 0.3),
    );
    let varied = generate_demos(&moved, 3, 4).unwrap();
    assert!(extrapolation_study(&cfg, &moved, &varied).is_err());
    let wrong = generate_demos(&small_spec(TaskId::Reach), 3, 4).unwrap();
    assert!(extrapolation_study(&cfg, &spec, &wrong).is_err());
}
