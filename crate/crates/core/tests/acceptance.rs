//! Acceptance run: one PASS/FAIL line per criterion. Runs without the libtest
//! harness so the lines reach the console; the process exits 0 either way.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cpn_core::datastore::{write_dataset, Dataset};
use cpn_core::diffcore::{mse, Tape, Tensor};
use cpn_core::harness::{
    binomial_band, evaluate, extrapolation_study, parse_grid, replay_cell, run_matrix,
    run_trial_traced, Controller, EvalConfig, ExtrapolationConfig, MatrixConfig, Row,
    DEFAULT_TRIALS,
};
use cpn_core::imitation::{plan_cloning_loss, train, TrainConfig, TrainData};
use cpn_core::models::{Method, MethodConfig, Model, HIDDEN_WIDTH};
use cpn_core::netblocks::{
    ConvEncoder, ConvEncoderSpec, ConvLayerSpec, Dense, LayerKind, ModulationSource,
    NeuromodLinear, ParamBundle,
};
use cpn_core::planner::{refine_latent, LinearToy, PlanInit, PlannerConfig};
use cpn_core::worlds::{
    generate_demos, render, reset, SuiteConfig, TaskId, TaskSpec, DEMOS_PER_TASK,
};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// `|a - b| / max(|a|, |b|, floor)`.
fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

// 1. Reverse mode against central differences on random networks.

const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-6;

enum Act {
    Relu,
    Sigmoid,
    Identity,
}

struct RandomNet {
    conv: Option<ConvEncoder>,
    layers: Vec<(Dense, Act)>,
    input: Tensor,
    target: Tensor,
    huber: bool,
}

impl RandomNet {
    fn new(seed: u64) -> (Self, ParamBundle) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bundle = ParamBundle::new();
        let mut width = rng.gen_range(2..=4);
        let conv = (seed % 3 == 0).then(|| {
            let layer = ConvLayerSpec {
                channels: 2,
                kernel: 3,
                stride: 1,
            };
            let enc =
                ConvEncoder::new("c", ConvEncoderSpec::for_size(5, vec![layer], width)).unwrap();
            enc.init(&mut bundle, &mut rng).unwrap();
            enc
        });
        let input = match &conv {
            Some(_) => Tensor::new(
                vec![5, 5, 3],
                (0..75).map(|_| rng.gen_range(0.0..1.0)).collect(),
            )
            .unwrap(),
            None => Tensor::vector((0..width).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        };
        let depth = rng.gen_range(1..=3);
        let mut layers = Vec::new();
        for i in 0..depth {
            // Every network carries at least one neuromodulated layer.
            let kind = if i == 0 || rng.gen_bool(0.5) {
                LayerKind::Neuromodulated
            } else {
                LayerKind::Plain
            };
            let out = rng.gen_range(2..=4);
            let layer = Dense::new(kind, &format!("l{i}"), width, out);
            layer.init(&mut bundle, &mut rng).unwrap();
            let act = match rng.gen_range(0..3) {
                0 => Act::Relu,
                1 => Act::Sigmoid,
                _ => Act::Identity,
            };
            layers.push((layer, act));
            width = out;
        }
        // Move the attenuators away from their flat initial point.
        for (_, t) in bundle.iter_mut() {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        let target = Tensor::vector((0..width).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let net = Self {
            conv,
            layers,
            input,
            target,
            huber: rng.gen_bool(0.5),
        };
        (net, bundle)
    }

    fn loss(
        &self,
        tape: &mut Tape,
        params: &ParamBundle,
        grad: bool,
    ) -> (cpn_core::diffcore::NodeId, cpn_core::netblocks::BoundParams) {
        let bound = params.bind(tape, grad);
        let mut h = match &self.conv {
            Some(c) => c.encode_image(tape, &bound, &self.input).unwrap(),
            None => tape.constant(self.input.clone()),
        };
        for (layer, act) in &self.layers {
            h = layer.forward(tape, &bound, h).unwrap();
            h = match act {
                Act::Relu => tape.relu(h).unwrap(),
                Act::Sigmoid => tape.sigmoid(h).unwrap(),
                Act::Identity => h,
            };
        }
        let t = tape.constant(self.target.clone());
        let loss = if self.huber {
            cpn_core::diffcore::huber(tape, h, t, 0.5).unwrap()
        } else {
            mse(tape, h, t).unwrap()
        };
        (loss, bound)
    }

    fn value(&self, params: &ParamBundle) -> f64 {
        let mut tape = Tape::new();
        let (loss, _) = self.loss(&mut tape, params, false);
        tape.value(loss).item()
    }
}

fn gradient_oracle() -> Verdict {
    let networks = 120;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    let mut max_params = 0usize;
    for seed in 0..networks {
        let (net, params) = RandomNet::new(seed);
        max_params = max_params.max(params.num_scalars());
        let mut tape = Tape::new();
        let (loss, bound) = net.loss(&mut tape, &params, true);
        let grads = tape.backward(loss).unwrap();
        for (name, tensor) in params.iter() {
            let analytic = grads.get_or_zeros(&tape, bound.get(name).unwrap());
            for i in 0..tensor.numel() {
                let mut plus = params.clone();
                plus.get_mut(name).unwrap().data_mut()[i] += FD_STEP;
                let mut minus = params.clone();
                minus.get_mut(name).unwrap().data_mut()[i] -= FD_STEP;
                let fd = (net.value(&plus) - net.value(&minus)) / (2.0 * FD_STEP);
                worst = worst.max(rel_err(analytic.data()[i], fd, FD_FLOOR));
                checked += 1;
            }
        }
    }
    Verdict::new(
        worst < 1e-4,
        format!("{networks} networks, {checked} parameters (max {max_params} per network), max rel err {worst:.2e} < 1e-4"),
    )
}

// 2. Second order through one inner update on the 1-D toy.

fn toy_planner(updates: usize) -> PlannerConfig {
    PlannerConfig {
        horizon: 2,
        updates,
        step_size: 0.1,
        huber_delta: 1.0,
        init: PlanInit::Zeros,
    }
}

fn toy_outer(gain: f64, demo: &[f64], second_order: bool) -> (f64, f64) {
    let mut tape = Tape::new();
    let toy = LinearToy::new(&mut tape, Tensor::vector(vec![gain]), true).unwrap();
    let x = tape.constant(Tensor::vector(vec![0.0]));
    let g = tape.constant(Tensor::vector(vec![1.0]));
    let (loss, _) =
        plan_cloning_loss(&toy, &mut tape, x, g, demo, &toy_planner(1), second_order).unwrap();
    let grads = tape.backward(loss).unwrap();
    (
        tape.value(loss).item(),
        grads.get_or_zeros(&tape, toy.gain).item(),
    )
}

/// Hand derivation: from a zero plan the residual is -1, inside the quadratic
/// Huber branch, so each action becomes `α·gain` and the outer loss is `mean((α·gain - d_i)^2)` with derivative
/// `2α·mean(α·gain - d_i)`.
fn toy_hand_gradient(gain: f64, demo: &[f64]) -> f64 {
    let alpha = 0.1;
    2.0 * alpha * demo.iter().map(|d| alpha * gain - d).sum::<f64>() / demo.len() as f64
}

fn second_order_oracle() -> Verdict {
    let demo = [0.4, -0.2];
    let h = 1e-5;
    let mut worst_fd = 0.0f64;
    let mut worst_hand = 0.0f64;
    for gain in [0.5, 0.8, 1.0, 1.3, 1.7] {
        let (_, analytic) = toy_outer(gain, &demo, true);
        let (_, first) = toy_outer(gain, &demo, false);
        let plus = toy_outer(gain + h, &demo, false).0;
        let minus = toy_outer(gain - h, &demo, false).0;
        let fd = (plus - minus) / (2.0 * h);
        // The first-order gradient ignores the gain entirely on a zero plan.
        if first != 0.0 {
            return Verdict::new(false, format!("first-order gradient {first} should be 0"));
        }
        worst_fd = worst_fd.max(rel_err(analytic, fd, 1e-8));
        worst_hand = worst_hand.max(rel_err(analytic, toy_hand_gradient(gain, &demo), 1e-8));
    }
    Verdict::new(
        worst_fd < 1e-3 && worst_hand < 1e-3,
        format!("5 gains, rel err vs finite differences {worst_fd:.2e}, vs hand derivative {worst_hand:.2e} (< 1e-3)"),
    )
}

// 3. Neuromodulated layer with unit attenuation is a plain linear layer.

fn neuromod_identity() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let cases = 1000;
    for _ in 0..cases {
        let (input, output) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let mut layer = NeuromodLinear::new("n", input, output, ModulationSource::LayerInput);
        let mut bundle = ParamBundle::new();
        layer.init(&mut bundle, &mut rng).unwrap();
        for (_, t) in bundle.iter_mut() {
            for v in t.data_mut() {
                *v = rng.gen_range(-2.0..2.0);
            }
        }
        layer.pin_ones();
        let x: Vec<f64> = (0..input).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut tape = Tape::new();
        let bound = bundle.bind(&mut tape, false);
        let xn = tape.constant(Tensor::vector(x.clone()));
        let y = layer.forward(&mut tape, &bound, xn).unwrap();
        let w = bundle.get("n.w").unwrap().data();
        let b = bundle.get("n.b").unwrap().data();
        for (o, got) in tape.value(y).data().iter().enumerate() {
            let want: f64 = b[o] + (0..input).map(|i| w[o * input + i] * x[i]).sum::<f64>();
            worst = worst.max((got - want).abs());
        }
    }
    Verdict::new(
        worst <= 1e-12,
        format!("{cases} cases, max abs diff {worst:.2e} <= 1e-12"),
    )
}

// 4. Planner on the hand-solvable linear toy.

/// Plain gradient descent on `0.5 (Σa - 1)^2` (quadratic Huber branch).
fn toy_hand_plan(updates: usize) -> (Vec<f64>, Vec<f64>) {
    let (alpha, goal) = (0.1, 1.0);
    let mut a = [0.0f64; 2];
    let mut trace = Vec::new();
    for _ in 0..updates {
        let r = a.iter().sum::<f64>() - goal;
        trace.push(0.5 * r * r);
        for ai in &mut a {
            *ai = (*ai - alpha * r).clamp(-1.0, 1.0);
        }
    }
    let r = a.iter().sum::<f64>() - goal;
    trace.push(0.5 * r * r);
    (a.to_vec(), trace)
}

fn planner_oracle() -> Verdict {
    let plan = |updates| {
        let mut tape = Tape::new();
        let toy = LinearToy::unit(&mut tape, 1);
        refine_latent(
            &toy,
            &mut tape,
            &Tensor::vector(vec![0.0]),
            &Tensor::vector(vec![1.0]),
            &toy_planner(updates),
        )
        .unwrap()
    };
    let one = plan(1);
    let actions = one.actions.data().to_vec();
    let exact = actions.iter().all(|a| (a - 0.1).abs() <= 1e-9);
    let (hand, _) = toy_hand_plan(1);
    let ten = plan(10);
    let (_, hand_trace) = toy_hand_plan(10);
    let decreasing = ten.loss_trace.windows(2).all(|w| w[1] < w[0]);
    let trace_match = ten
        .loss_trace
        .iter()
        .zip(&hand_trace)
        .all(|(a, b)| (a - b).abs() <= 1e-12);
    let hand_match = actions
        .iter()
        .zip(&hand)
        .all(|(a, b)| (a - b).abs() <= 1e-12);
    Verdict::new(
        exact && hand_match && decreasing && trace_match && ten.loss_trace.len() == 11,
        format!(
            "U=1 actions {actions:?} (target 0.1 within 1e-9), U=10 trace strictly decreasing: {decreasing}, matches hand descent: {trace_match}"
        ),
    )
}

// 5. MPC executes the first planned action and replans every step.

fn mpc_contract() -> Verdict {
    let mut steps = 0;
    let mut problems = Vec::new();
    for method in [Method::Upn, Method::Cpn] {
        let model = Model::new(MethodConfig::new(method)).unwrap();
        let params = model.init_params(1).unwrap();
        for task in [TaskId::Reach, TaskId::Push] {
            let spec = TaskSpec::new(task);
            for seed in 0..2 {
                let trace = run_trial_traced(
                    Controller::Trained {
                        model: &model,
                        params: &params,
                    },
                    &spec,
                    seed,
                )
                .unwrap();
                let n = trace.outcome.steps;
                steps += n;
                let bitwise = trace.executed.len() == n
                    && trace.planned_first.len() == n
                    && trace
                        .executed
                        .iter()
                        .zip(&trace.planned_first)
                        .all(|(e, p)| {
                            e.len() == p.len()
                                && e.iter().zip(p).all(|(a, b)| a.to_bits() == b.to_bits())
                        });
                if !bitwise || trace.replans != n || n == 0 {
                    problems.push(format!("{method} {task} seed {seed}"));
                }
            }
        }
    }
    Verdict::new(
        problems.is_empty(),
        format!("{steps} steps over 8 episodes, executed == planned[0] bitwise and one replan per step; violations: {problems:?}"),
    )
}

// 6. BC on 100 reach demonstrations.

fn bc_reach() -> Verdict {
    let spec = TaskSpec::new(TaskId::Reach);
    let demos = generate_demos(&spec, DEMOS_PER_TASK, 0).unwrap();
    let model = Model::new(MethodConfig::new(Method::Bc)).unwrap();
    let cfg = TrainConfig::default();
    let start = Instant::now();
    let (params, record) = train(&model, None, &TrainData::images(&demos), &cfg).unwrap();
    let cell = evaluate(
        Controller::Trained {
            model: &model,
            params: &params,
        },
        &spec,
        &EvalConfig::default(),
    )
    .unwrap();
    let losses = record.losses();
    Verdict::new(
        cell.successes() * 10 >= cell.trials() * 9,
        format!(
            "{}/{} successes (need >= 90%), {} epochs, loss {:.4} -> {:.4}, {:.0}s",
            cell.successes(),
            cell.trials(),
            record.epochs.len(),
            losses[0],
            losses[losses.len() - 1],
            start.elapsed().as_secs_f64()
        ),
    )
}

// 7 and 10. Leave-one-task-out matrix at desk budget, replay and audit.

/// Desk budget: the full protocol (every offset of 400 demonstrations for
/// 50 epochs per cell) does not fit on one core.
fn desk_matrix() -> MatrixConfig {
    MatrixConfig {
        train: TrainConfig {
            epochs: 5,
            samples_per_epoch: Some(512),
            ..TrainConfig::default()
        },
        ..MatrixConfig::default()
    }
}

const CHANCE_TRIALS: usize = 400;
const CHANCE_SEED: u64 = 1_000_000;

fn matrix_and_replay() -> (Verdict, Verdict) {
    let dir = tempfile::tempdir().unwrap();
    let suite = SuiteConfig::default();
    let mut trajs = Vec::new();
    for spec in suite.specs() {
        trajs.extend(generate_demos(spec, DEMOS_PER_TASK, 0).unwrap());
    }
    let root = dir.path().join("data");
    write_dataset(&root, &suite, 0, &trajs).unwrap();
    drop(trajs);
    let data = Dataset::open_for_suite(&root, &suite).unwrap();
    let cfg = desk_matrix();
    let start = Instant::now();
    let report = run_matrix(&cfg, &suite, &data, Some(&dir.path().join("report"))).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let matrix_text = report.matrix_text();

    let mut in_band = true;
    let mut beats = Vec::new();
    let mut notes = Vec::new();
    for spec in suite.specs() {
        let task = spec.id;
        let chance = evaluate(
            Controller::Random,
            spec,
            &EvalConfig {
                trials: CHANCE_TRIALS,
                base_seed: CHANCE_SEED,
            },
        )
        .unwrap();
        let random = report.cell(task, Row::Random).unwrap();
        let (lo, hi) = binomial_band(random.trials(), chance.rate());
        let k = random.successes();
        in_band &= (lo..=hi).contains(&k);
        notes.push(format!(
            "{task} random {k} in [{lo}, {hi}] (p={:.3})",
            chance.rate()
        ));
        for m in Method::ALL {
            if report.cell(task, Row::Method(m)).unwrap().successes() > k {
                beats.push(format!("{m}@{task}"));
            }
        }
    }
    let complete = report.cells.len() == suite.specs().len() * Row::ALL.len();

    let mut replay_ok = true;
    let mut leaks = 0;
    let mut replayed = Vec::new();
    for (task, row) in [
        (TaskId::Button, Row::Method(Method::Bc)),
        (TaskId::Lever, Row::Method(Method::Cpn)),
        (TaskId::Reach, Row::Random),
    ] {
        let again = replay_cell(&cfg, &suite, &data, task, row).unwrap();
        replay_ok &= Some(&again) == report.cell(task, row);
        let prefix = format!("{task}/");
        leaks += data
            .accessed()
            .iter()
            .filter(|p| p.starts_with(&prefix))
            .count();
        replayed.push(format!("{row}@{task}"));
    }
    print!("{matrix_text}");
    (
        Verdict::new(
            complete && in_band && !beats.is_empty(),
            format!(
                "{} cells in {:.0}s; {}; methods above random: {beats:?}",
                report.cells.len(),
                secs,
                notes.join(", ")
            ),
        ),
        Verdict::new(
            replay_ok && leaks == 0,
            format!("replayed {replayed:?} bit-identically: {replay_ok}; holdout files read during training: {leaks}"),
        ),
    )
}

// 8. Vector-goal extrapolation on reach3d.

fn extrapolation() -> Verdict {
    let spec = TaskSpec::new(TaskId::Reach3d);
    let cfg = ExtrapolationConfig {
        grid: parse_grid("H=3,5;U=1,5").unwrap(),
        ..ExtrapolationConfig::default()
    };
    let trajs = generate_demos(&spec, cfg.trajectories, 0).unwrap();
    let start = Instant::now();
    let report = extrapolation_study(&cfg, &spec, &trajs).unwrap();
    let s = report.selected_cell();
    Verdict::new(
        report.reduction() >= 0.5,
        format!(
            "selected H={} U={}: offset-goal deviation {:.4} vs zero plan {:.4}, reduction {:.1}% (need >= 50%), {:.0}s",
            s.horizon,
            s.updates,
            s.offset_deviation,
            report.zero_plan_deviation,
            100.0 * report.reduction(),
            start.elapsed().as_secs_f64()
        ),
    )
}

// 9. Protocol constants.

fn protocol_constants() -> Verdict {
    let spec = TaskSpec::new(TaskId::Push);
    let start = reset(&spec, 0).unwrap();
    let image = render(&spec, &start.state);
    let planner = PlannerConfig::default();
    let train = TrainConfig::default();
    let eval = EvalConfig::default();
    let method = MethodConfig::new(Method::Cpn);
    let checks: BTreeMap<&str, bool> = [
        ("demos per task 100", DEMOS_PER_TASK == 100),
        (
            "observation 84x84x3",
            image.dims() == [84, 84, 3] && start.observation.dims() == [84, 84, 3],
        ),
        (
            "4-dim actions",
            cpn_core::worlds::ACTION_WIDTH == 4
                && cpn_core::models::ACTION_WIDTH == 4
                && method.actions == 4,
        ),
        ("32-unit hidden", HIDDEN_WIDTH == 32 && method.hidden == 32),
        ("H=5", planner.horizon == 5),
        ("U=1", planner.updates == 1),
        (
            "50 epochs",
            train.epochs == 50 && MatrixConfig::default().train.epochs == 50,
        ),
        ("20 trials", eval.trials == 20 && DEFAULT_TRIALS == 20),
        (
            "seeds base+i",
            EvalConfig {
                base_seed: 40,
                ..eval.clone()
            }
            .seeds()
                == (40..60).collect::<Vec<_>>(),
        ),
    ]
    .into_iter()
    .collect();
    let failed: Vec<&str> = checks
        .iter()
        .filter(|(_, ok)| !**ok)
        .map(|(k, _)| *k)
        .collect();
    Verdict::new(
        failed.is_empty(),
        format!("{} constants checked; wrong: {failed:?}", checks.len()),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // `cargo test -- --list` and filters from other targets pass through here.
    if args.iter().any(|a| a == "--list") {
        return;
    }
    // Numeric arguments select criteria, e.g. `cargo test --test acceptance -- 1 4`.
    let only: Vec<usize> = args.iter().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: usize| only.is_empty() || only.contains(&id);
    let mut lines: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut run = |id, name, f: &dyn Fn() -> Verdict| {
        if !wanted(id) {
            return;
        }
        let t = Instant::now();
        let v = f();
        println!(
            "criterion {id:>2} {} {name} ({:.1}s): {}",
            if v.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            v.detail
        );
        lines.push((id, name, v));
    };
    run(1, "gradient oracle", &gradient_oracle);
    run(2, "second-order oracle", &second_order_oracle);
    run(3, "neuromodulation identity", &neuromod_identity);
    run(4, "planner hand oracle", &planner_oracle);
    run(5, "MPC contract", &mpc_contract);
    run(9, "protocol constants", &protocol_constants);
    run(6, "BC reach sanity", &bc_reach);
    run(8, "vector-goal extrapolation", &extrapolation);
    if wanted(7) || wanted(10) {
        let t = Instant::now();
        let (matrix, replay) = matrix_and_replay();
        for (id, name, v) in [
            (7, "zero-shot matrix", matrix),
            (10, "determinism and no-leak", replay),
        ] {
            println!(
                "criterion {id:>2} {} {name} ({:.1}s): {}",
                if v.pass { "PASS" } else { "FAIL" },
                t.elapsed().as_secs_f64(),
                v.detail
            );
            lines.push((id, name, v));
        }
    }
    lines.sort_by_key(|l| l.0);
    println!("\nsummary");
    for (id, name, v) in &lines {
        println!(
            "criterion {id:>2} {} {name}",
            if v.pass { "PASS" } else { "FAIL" }
        );
    }
    let passed = lines.iter().filter(|l| l.2.pass).count();
    println!("{passed}/{} criteria pass", lines.len());
}
