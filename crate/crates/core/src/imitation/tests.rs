use super::*;
use crate::models::{GoalMode, Method, MethodConfig};
use crate::netblocks::{ConvEncoderSpec, ConvLayerSpec};
use crate::planner::{LinearToy, PlanInit};
use crate::worlds::{generate_demos, TaskId, TaskSpec};

fn tiny_encoder(size: usize) -> ConvEncoderSpec {
    ConvEncoderSpec {
        height: size,
        width: size,
        channels: 3,
        layers: vec![
            ConvLayerSpec {
                channels: 4,
                kernel: 3,
                stride: 2,
            },
            ConvLayerSpec {
                channels: 4,
                kernel: 3,
                stride: 2,
            },
        ],
        latent: 8,
    }
}

fn tiny_model(method: Method) -> Model {
    Model::new(MethodConfig::new(method).with_encoder(tiny_encoder(16))).unwrap()
}

fn small_demos(task: TaskId, n: usize) -> Vec<Trajectory> {
    let spec = TaskSpec {
        render_size: 16,
        ..TaskSpec::new(task)
    };
    generate_demos(&spec, n, 5).unwrap()
}

fn toy_cfg() -> PlannerConfig {
    PlannerConfig {
        horizon: 2,
        updates: 1,
        step_size: 0.1,
        huber_delta: 1.0,
        init: PlanInit::Zeros,
    }
}

fn toy_loss(gain: f64, demo: &[f64], second_order: bool) -> (f64, f64) {
    let mut tape = Tape::new();
    let toy = LinearToy::new(&mut tape, Tensor::vector(vec![gain]), true).unwrap();
    let x = tape.constant(Tensor::vector(vec![0.0]));
    let g = tape.constant(Tensor::vector(vec![1.0]));
    let (loss, _) =
        plan_cloning_loss(&toy, &mut tape, x, g, demo, &toy_cfg(), second_order).unwrap();
    let grads = tape.backward(loss).unwrap();
    (
        tape.value(loss).item(),
        grads.get_or_zeros(&tape, toy.gain).item(),
    )
}

#[test]
fn toy_outer_loss_vanishes_on_matching_demo() {
    let (loss, _) = toy_loss(1.0, &[0.1, 0.1], true);
    assert!(loss.abs() < 1e-24);
    let (loss, _) = toy_loss(1.0, &[0.3, 0.1], true);
    assert!((loss - 0.02).abs() < 1e-12);
}

#[test]
fn second_order_term_matches_finite_differences() {
    let demo = [0.4, -0.2];
    for gain in [0.7, 1.0, 1.6] {
        let (_, second) = toy_loss(gain, &demo, true);
        let (_, first) = toy_loss(gain, &demo, false);
        let h = 1e-5;
        let fd =
            (toy_loss(gain + h, &demo, true).0 - toy_loss(gain - h, &demo, true).0) / (2.0 * h);
        // Zero-initialized plans see the gain only through the inner gradient.
        assert_eq!(first, 0.0);
        let term = second - first;
        assert!(
            (term - fd).abs() / fd.abs().max(1e-4) < 1e-6,
            "{term} vs {fd}"
        );
    }
}

#[test]
fn orders_agree_without_inner_updates() {
    let mut config = MethodConfig::new(Method::Cpn).with_encoder(tiny_encoder(16));
    config.planner = Some(PlannerConfig {
        updates: 0,
        init: PlanInit::Policy,
        ..PlannerConfig::default()
    });
    let model = Model::new(config).unwrap();
    let params = model.init_params(2).unwrap();
    let demos = small_demos(TaskId::Reach, 1);
    let data = TrainData::images(&demos);
    let s = Sample { traj: 0, t: 0 };
    let a = sample_gradient(&model, &params, &data, s, true).unwrap();
    let b = sample_gradient(&model, &params, &data, s, false).unwrap();
    assert_eq!(a.loss, b.loss);
    assert_eq!(a.grads, b.grads);
    assert!(a.grads["g.pol1.w"].max_abs() > 0.0);
}

#[test]
fn second_order_reaches_every_parameter_group() {
    let mut config = MethodConfig::new(Method::Cpn).with_encoder(tiny_encoder(16));
    config.planner = Some(PlannerConfig {
        init: PlanInit::Zeros,
        ..PlannerConfig::default()
    });
    let model = Model::new(config).unwrap();
    let params = model.init_params(3).unwrap();
    let demos = small_demos(TaskId::Push, 1);
    let data = TrainData::images(&demos);
    let g = sample_gradient(&model, &params, &data, Sample { traj: 0, t: 1 }, true).unwrap();
    for name in [
        "enc.conv0.w",
        "g.trunk.w",
        "g.dyn1.w",
        "g.dyn0.att_w.l1.w",
        "g.trunk.att_b.l0.w",
    ] {
        assert!(g.grads[name].max_abs() > 0.0, "{name}");
    }
    // A zero plan depends on the parameters only through the inner gradient.
    let first = sample_gradient(&model, &params, &data, Sample { traj: 0, t: 1 }, false).unwrap();
    assert!(first.grads.values().all(|t| t.max_abs() == 0.0));
    // A policy-initialized plan also trains the policy branch directly.
    let model = tiny_model(Method::Cpn);
    let first = sample_gradient(&model, &params, &data, Sample { traj: 0, t: 1 }, false).unwrap();
    assert!(first.grads["g.pol1.w"].max_abs() > 0.0);
}

#[test]
fn reactive_loss_cases() {
    let model = tiny_model(Method::Bc);
    let mut params = model.init_params(0).unwrap();
    for name in ["head.l2.w", "head.l2.b"] {
        let t = params.get_mut(name).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let obs = Tensor::filled(&[16, 16, 3], 0.3);
    let mut tape = Tape::new();
    let b = params.bind(&mut tape, false);
    let unit = outer_loss_reactive(&model, &mut tape, &b, &obs, None, &[1.0; 4]).unwrap();
    assert_eq!(tape.value(unit).item(), 1.0);
    let zero = outer_loss_reactive(&model, &mut tape, &b, &obs, None, &[0.0; 4]).unwrap();
    assert_eq!(tape.value(zero).item(), 0.0);

    let params = model.init_params(1).unwrap();
    let demos = small_demos(TaskId::Reach, 1);
    let data = TrainData::images(&demos);
    let g = sample_gradient(&model, &params, &data, Sample { traj: 0, t: 0 }, true).unwrap();
    let name = "enc.conv0.w";
    let h = 1e-5;
    let loss_at = |delta: f64| {
        let mut p = params.clone();
        p.get_mut(name).unwrap().data_mut()[5] += delta;
        sample_gradient(&model, &p, &data, Sample { traj: 0, t: 0 }, true)
            .unwrap()
            .loss
    };
    let fd = (loss_at(h) - loss_at(-h)) / (2.0 * h);
    let an = g.grads[name].data()[5];
    assert!(
        (an - fd).abs() / an.abs().max(fd.abs()).max(1e-4) < 1e-4,
        "{an} vs {fd}"
    );
}

#[test]
fn window_length_contract() {
    let mut tape = Tape::new();
    let toy = LinearToy::unit(&mut tape, 1);
    let x = tape.constant(Tensor::vector(vec![0.0]));
    let res = plan_cloning_loss(&toy, &mut tape, x, x, &[0.1], &toy_cfg(), true);
    assert!(matches!(res, Err(Error::Contract(_))));
}

#[test]
fn batch_gradient_is_the_ordered_mean() {
    let model = tiny_model(Method::Upn);
    let params = model.init_params(4).unwrap();
    let demos = small_demos(TaskId::Reach, 2);
    let data = TrainData::images(&demos);
    let batch = all_samples(&demos);
    let (mean, _) = batch_gradient(&model, &params, &data, &batch, true).unwrap();
    let mut manual: BTreeMap<String, Tensor> = params
        .iter()
        .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
        .collect();
    for s in &batch {
        let g = sample_gradient(&model, &params, &data, *s, true).unwrap();
        for (n, t) in &g.grads {
            manual.get_mut(n).unwrap().add_assign(t);
        }
    }
    for t in manual.values_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v *= 1.0 / batch.len() as f64);
    }
    assert_eq!(mean, manual);
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let model = tiny_model(Method::Bc);
    let demos = small_demos(TaskId::Reach, 5);
    let data = TrainData::images(&demos);
    let cfg = TrainConfig {
        seed: 3,
        epochs: 200,
        ..TrainConfig::default()
    };
    let (p1, r1) = train(&model, None, &data, &cfg).unwrap();
    let (p2, r2) = train(&model, None, &data, &cfg).unwrap();
    assert_eq!(r1.epochs.len(), 200);
    assert_eq!(r1.checksum, r2.checksum);
    assert_eq!(p1, p2);
    let losses = r1.losses();
    assert!(
        losses[199] <= 0.5 * losses[0],
        "{} -> {}",
        losses[0],
        losses[199]
    );
}

#[test]
fn planning_training_records_inner_loss() {
    let model = tiny_model(Method::Cpn);
    let demos = small_demos(TaskId::Reach, 2);
    let data = TrainData::images(&demos);
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let (_, rec) = train(&model, None, &data, &cfg).unwrap();
    assert!(rec.epochs.iter().all(|e| e.inner_loss.is_some()));
    assert!(train(&model, None, &TrainData::images(&[]), &cfg).is_err());
    assert!(train(&model, None, &data, &TrainConfig { epochs: 0, ..cfg }).is_err());
}

#[test]
fn vector_goal_training_runs() {
    let model = Model::new(
        MethodConfig::new(Method::Cpn)
            .with_encoder(tiny_encoder(16))
            .with_goal_mode(GoalMode::Vector),
    )
    .unwrap();
    let demos = small_demos(TaskId::Reach3d, 2);
    let goals = vec![[0.1, 0.2, 0.1], [-0.1, 0.0, 0.1]];
    let data = TrainData {
        trajectories: &demos,
        goal_vectors: Some(&goals),
    };
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let (params, _) = train(&model, None, &data, &cfg).unwrap();
    assert!(params.contains("goal.w"));
    let short = [[0.0; 3]];
    let bad = TrainData {
        trajectories: &demos,
        goal_vectors: Some(&short),
    };
    assert!(train(&model, None, &bad, &cfg).is_err());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(Method::Cpn);
    let mut params = model.init_params(8).unwrap();
    let meta = |p: &ParamBundle| CheckpointMeta {
        config: model.config().clone(),
        seed: 8,
        epochs: 0,
        holdout: Some("push".into()),
        checksum: p.checksum(),
    };
    let path = dir.path().join("cpn.cpnp");
    assert!(save_checkpoint(&path, &params, &meta(&params)).is_err());
    params.round_to_f32();
    save_checkpoint(&path, &params, &meta(&params)).unwrap();
    let (m2, p2, meta2) = load_checkpoint(&path).unwrap();
    assert_eq!(m2.config(), model.config());
    assert_eq!(p2, params);
    assert_eq!(meta2, meta(&params));
    let side = dir.path().join("cpn.cpnp.meta");
    let text = std::fs::read_to_string(&side)
        .unwrap()
        .replace("checksum = ", "checksum = 00");
    std::fs::write(&side, text).unwrap();
    assert!(load_checkpoint(&path).is_err());
}

#[test]
fn protocol_defaults() {
    let c = TrainConfig::default();
    assert_eq!((c.epochs, c.batch_size, c.second_order), (50, 32, true));
    assert_eq!(
        c.adam,
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8
        }
    );
}
