use super::*;
use crate::netblocks::ConvLayerSpec;
use rand::Rng;

fn tiny_encoder() -> ConvEncoderSpec {
    ConvEncoderSpec {
        height: 12,
        width: 12,
        channels: 3,
        layers: vec![ConvLayerSpec {
            channels: 4,
            kernel: 3,
            stride: 2,
        }],
        latent: 8,
    }
}

fn tiny(method: Method) -> Model {
    Model::new(MethodConfig::new(method).with_encoder(tiny_encoder())).unwrap()
}

fn image(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(
        vec![h, w, 3],
        (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

fn linear_count(i: usize, o: usize) -> usize {
    o * i + o
}

fn neuromod_count(i: usize, o: usize) -> usize {
    let hidden = 16;
    linear_count(i, o)
        + linear_count(i, hidden)
        + linear_count(hidden, o * i)
        + linear_count(i, hidden)
        + linear_count(hidden, o)
}

#[test]
fn exact_parameter_counts_default_config() {
    let (d, h, a) = (128, 32, 4);
    let encoder =
        16 * (3 * 9 + 1) + 32 * (16 * 9 + 1) + 2 * 32 * (32 * 9 + 1) + linear_count(512, d);
    let upn_core = linear_count(d, h)
        + linear_count(h, h)
        + linear_count(h, a)
        + linear_count(h + a, h)
        + linear_count(h, d);
    let cpn_core = neuromod_count(2 * d, h)
        + neuromod_count(h, h)
        + neuromod_count(h, a)
        + neuromod_count(h + a, h)
        + neuromod_count(h, d);
    let bc_head = linear_count(d, h) + linear_count(h, h) + linear_count(h, a);
    let tebc_head = linear_count(2 * d, h) + linear_count(h, h) + linear_count(h, a);
    let expected = [
        (Method::Bc, encoder + bc_head),
        (Method::TeBc, encoder + tebc_head),
        (Method::Upn, encoder + upn_core),
        (Method::Cpn, encoder + cpn_core),
    ];
    for (method, count) in expected {
        let model = Model::new(MethodConfig::new(method)).unwrap();
        assert_eq!(model.num_params(), count, "{method}");
        assert_eq!(
            model.init_params(1).unwrap().num_scalars(),
            count,
            "{method}"
        );
    }
    assert!(encoder + cpn_core > encoder + upn_core);
}

#[test]
fn step_shapes_and_bounds() {
    for method in [Method::Upn, Method::Cpn] {
        let model = tiny(method);
        let mut params = model.init_params(3).unwrap();
        for (_, t) in params.iter_mut() {
            for v in t.data_mut() {
                *v *= 40.0;
            }
        }
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let x = model.encode(&mut tape, &bound, &image(1, 12, 12)).unwrap();
        let g = model.encode(&mut tape, &bound, &image(2, 12, 12)).unwrap();
        let (act, next) = model
            .policy_dynamics_step(&mut tape, &bound, x, Some(g), None)
            .unwrap();
        assert_eq!(tape.shape(act), &[4]);
        assert_eq!(tape.shape(next), &[8]);
        assert!(tape
            .value(act)
            .data()
            .iter()
            .all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn encode_is_deterministic() {
    let model = tiny(Method::Bc);
    let params = model.init_params(0).unwrap();
    let img = image(5, 12, 12);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let a = model.encode(&mut tape, &bound, &img).unwrap();
    let b = model.encode(&mut tape, &bound, &img).unwrap();
    assert_eq!(tape.value(a), tape.value(b));
    assert_eq!(tape.shape(a), &[8]);
}

#[test]
fn reactive_goal_wiring() {
    let bc = tiny(Method::Bc);
    let params = bc.init_params(0).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let o = image(1, 12, 12);
    let a1 = bc
        .reactive_action(&mut tape, &bound, &o, Some(&image(2, 12, 12)))
        .unwrap();
    let a2 = bc
        .reactive_action(&mut tape, &bound, &o, Some(&image(3, 12, 12)))
        .unwrap();
    let a3 = bc.reactive_action(&mut tape, &bound, &o, None).unwrap();
    assert_eq!(tape.value(a1), tape.value(a2));
    assert_eq!(tape.value(a1), tape.value(a3));
    assert_eq!(tape.shape(a1), &[4]);

    let tebc = tiny(Method::TeBc);
    let params = tebc.init_params(0).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    assert_eq!(tebc.reactive().unwrap().input_width(), 16);
    assert!(matches!(
        tebc.reactive_action(&mut tape, &bound, &o, None),
        Err(Error::Contract(_))
    ));
}

#[test]
fn upn_ignores_goal_cpn_requires_it() {
    let upn = tiny(Method::Upn);
    let params = upn.init_params(0).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(Tensor::filled(&[8], 0.2));
    let g1 = tape.constant(Tensor::filled(&[8], -1.0));
    let g2 = tape.constant(Tensor::filled(&[8], 3.0));
    let (a1, n1) = upn
        .policy_dynamics_step(&mut tape, &bound, x, Some(g1), None)
        .unwrap();
    let (a2, n2) = upn
        .policy_dynamics_step(&mut tape, &bound, x, Some(g2), None)
        .unwrap();
    assert_eq!(tape.value(a1), tape.value(a2));
    assert_eq!(tape.value(n1), tape.value(n2));

    let cpn = tiny(Method::Cpn);
    let params = cpn.init_params(0).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = tape.constant(Tensor::filled(&[8], 0.2));
    assert!(matches!(
        cpn.policy_dynamics_step(&mut tape, &bound, x, None, None),
        Err(Error::Contract(_))
    ));
    let short = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(
        cpn.policy_dynamics_step(&mut tape, &bound, short, Some(x), None),
        Err(Error::Contract(_))
    ));
}

#[test]
fn pinned_cpn_reduces_to_upn() {
    let mut cpn = tiny(Method::Cpn);
    let params = cpn.init_params(11).unwrap();
    let (upn, upn_params) = cpn.reduce_to_upn(&params).unwrap();
    assert_eq!(upn.method(), Method::Upn);
    cpn.pin_attenuation_ones();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let xs: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let act: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let bc = params.bind(&mut tape, false);
        let bu = upn_params.bind(&mut tape, false);
        let x = tape.constant(Tensor::vector(xs));
        let a = tape.constant(Tensor::vector(act));
        let zero = tape.constant(Tensor::zeros(&[8]));
        let (pa, pn) = cpn
            .policy_dynamics_step(&mut tape, &bc, x, Some(zero), Some(a))
            .unwrap();
        let (ua, un) = upn
            .policy_dynamics_step(&mut tape, &bu, x, None, Some(a))
            .unwrap();
        for (p, u) in [(pa, ua), (pn, un)] {
            for (l, r) in tape.value(p).data().iter().zip(tape.value(u).data()) {
                assert!((l - r).abs() <= 1e-12);
            }
        }
    }
}

fn spot_check(
    model: &Model,
    params: &ParamBundle,
    names: &[&str],
    loss_fn: &dyn Fn(&Model, &mut Tape, &BoundParams) -> NodeId,
) {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let loss = loss_fn(model, &mut tape, &bound);
    let grads = tape.backward(loss).unwrap();
    for name in names {
        let id = bound.get(name).unwrap();
        let g = grads.get_or_zeros(&tape, id);
        let n = params.get(name).unwrap().numel();
        for idx in [0, n / 2, n - 1] {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.get_mut(name).unwrap().data_mut()[idx] += delta;
                let mut t = Tape::new();
                let b = p.bind(&mut t, false);
                let l = loss_fn(model, &mut t, &b);
                t.value(l).item()
            };
            let h = 1e-5;
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = g.data()[idx];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-4);
            assert!(rel < 1e-4, "{name}[{idx}]: {an} vs {fd}");
        }
    }
    assert!(names.iter().any(|n| grads
        .get(bound.get(n).unwrap())
        .is_some_and(|g| g.max_abs() > 0.0)));
}

#[test]
fn gradients_reach_theta_beta_gamma() {
    let model = tiny(Method::Cpn);
    let params = model.init_params(4).unwrap();
    let loss = |m: &Model, tape: &mut Tape, b: &BoundParams| {
        let x = m.encode(tape, b, &image(7, 12, 12)).unwrap();
        let g = m.encode(tape, b, &image(8, 12, 12)).unwrap();
        let (_, next) = m.policy_dynamics_step(tape, b, x, Some(g), None).unwrap();
        let sq = tape.mul(next, next).unwrap();
        tape.sum(sq).unwrap()
    };
    spot_check(
        &model,
        &params,
        &[
            "g.trunk.w",
            "g.dyn1.b",
            "g.dyn0.att_w.l1.w",
            "g.trunk.att_b.l0.w",
            "enc.conv0.w",
        ],
        &loss,
    );
}

#[test]
fn vector_goal_mode() {
    let model = Model::new(
        MethodConfig::new(Method::Cpn)
            .with_encoder(tiny_encoder())
            .with_goal_mode(GoalMode::Vector),
    )
    .unwrap();
    let params = model.init_params(9).unwrap();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = model.encode(&mut tape, &bound, &image(1, 12, 12)).unwrap();
    let (a, n) = model
        .vector_goal_step(&mut tape, &bound, x, [0.0; 3])
        .unwrap();
    assert_eq!(
        (tape.shape(a), tape.shape(n)),
        (&[4usize][..], &[8usize][..])
    );
    assert!(matches!(
        model.encode_goal(&mut tape, &bound, &Goal::Image(image(1, 12, 12))),
        Err(Error::Contract(_))
    ));

    let loss = |m: &Model, tape: &mut Tape, b: &BoundParams| {
        let x = m.encode(tape, b, &image(3, 12, 12)).unwrap();
        let (_, next) = m.vector_goal_step(tape, b, x, [0.2, -0.1, 0.4]).unwrap();
        let sq = tape.mul(next, next).unwrap();
        tape.sum(sq).unwrap()
    };
    spot_check(&model, &params, &["goal.w", "goal.b"], &loss);

    let image_model = tiny(Method::Cpn);
    let p = image_model.init_params(0).unwrap();
    let mut tape = Tape::new();
    let b = p.bind(&mut tape, false);
    let x = tape.constant(Tensor::zeros(&[8]));
    assert!(matches!(
        image_model.vector_goal_step(&mut tape, &b, x, [0.0; 3]),
        Err(Error::Contract(_))
    ));
}

#[test]
fn config_contracts() {
    let mut c = MethodConfig::new(Method::Bc);
    c.planner = Some(PlannerConfig::default());
    assert!(matches!(Model::new(c), Err(Error::Contract(_))));
    let mut c = MethodConfig::new(Method::Upn);
    c.planner = None;
    assert!(matches!(Model::new(c), Err(Error::Contract(_))));
    assert!(Model::new(MethodConfig::new(Method::TeBc).with_goal_mode(GoalMode::Vector)).is_err());
    let d = MethodConfig::new(Method::Cpn);
    assert_eq!((d.actions, d.hidden, d.second_order), (4, 32, true));
    assert_eq!(
        (d.encoder.height, d.encoder.width, d.encoder.channels),
        (84, 84, 3)
    );
}

#[test]
fn method_names_round_trip() {
    for m in Method::ALL {
        assert_eq!(m.key().parse::<Method>().unwrap(), m);
        assert_eq!(m.label().parse::<Method>().unwrap(), m);
    }
    assert!("dqn".parse::<Method>().is_err());
}
