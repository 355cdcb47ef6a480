use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Parser, Subcommand};

use cpn_core::datastore::{leave_one_out_split, write_dataset, Dataset};
use cpn_core::harness::{
    emit_extrapolation, emit_report, evaluate, extrapolation_study, parse_switch, run_matrix,
    Controller, EvalConfig, EvalReport, ExtrapolationConfig, MatrixConfig,
};
use cpn_core::imitation::{
    load_checkpoint, save_checkpoint, train, CheckpointMeta, TrainConfig, TrainData,
};
use cpn_core::kv;
use cpn_core::models::{Method, Model};
use cpn_core::netblocks::ConvLayerSpec;
use cpn_core::worlds::{generate_demos, SuiteConfig, TaskId, DEMOS_PER_TASK};
use cpn_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "cpn",
    version,
    about = "Latent planning networks: demos, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted demonstrations into a dataset directory.
    GenDemos {
        /// Task name or `all`.
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Task suite file (`key = value`).
        #[arg(long)]
        suite: Option<PathBuf>,
        /// `key = value` file with any of the flags above.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one method on every task except the holdout.
    Train {
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        holdout: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// `on` or `off`.
        #[arg(long = "second-order")]
        second_order: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "batch-size")]
        batch_size: Option<usize>,
        #[arg(long = "samples-per-epoch")]
        samples_per_epoch: Option<usize>,
        #[arg(long = "demos-per-task")]
        demos_per_task: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        updates: Option<usize>,
        #[arg(long)]
        latent: Option<usize>,
        /// Encoder stages as `channels/kernel/stride,...`.
        #[arg(long = "encoder-layers")]
        encoder_layers: Option<String>,
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one task over seeded trials.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Also evaluate the random policy (`on` or `off`).
        #[arg(long)]
        random: Option<String>,
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Leave-one-task-out matrix over all methods plus the random policy.
    Matrix {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Vector-goal extrapolation study on reach3d.
    Extrapolate {
        #[arg(long)]
        data: Option<PathBuf>,
        /// For example `H=3,5,8;U=1,2,5`.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Flag values layered over a `key = value` file.
struct Settings {
    origin: PathBuf,
    file: BTreeMap<String, String>,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self {
                origin: PathBuf::from("<flags>"),
                file: BTreeMap::new(),
            });
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            origin: path.to_path_buf(),
            file: kv::parse(&text, path)?.into_iter().collect(),
        })
    }

    /// Reject keys outside `known`.
    fn only(&self, known: &[&str]) -> Result<()> {
        match self.file.keys().find(|k| !known.contains(&k.as_str())) {
            Some(k) => Err(Error::format(&self.origin, format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }

    fn raw(&self, key: &str, flag: Option<String>) -> Option<String> {
        flag.or_else(|| self.file.get(key).cloned())
    }

    fn get<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self
                .file
                .get(key)
                .map(|v| kv::parse_value(key, v, &self.origin))
                .transpose(),
        }
    }

    fn or<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        Ok(self.get(key, flag)?.unwrap_or(default))
    }

    fn require<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<T> {
        self.get(key, flag)?
            .ok_or_else(|| Error::contract(format!("`--{}` is required", key.replace('_', "-"))))
    }

    fn switch(&self, key: &str, flag: Option<String>, default: bool) -> Result<bool> {
        match self.raw(key, flag) {
            Some(v) => parse_switch(key, &v, &self.origin),
            None => Ok(default),
        }
    }

    fn suite(&self, flag: Option<PathBuf>) -> Result<SuiteConfig> {
        match self.get::<PathBuf>("suite", flag)? {
            Some(p) => SuiteConfig::load(&p),
            None => Ok(SuiteConfig::default()),
        }
    }
}

fn parse_named<T: FromStr>(what: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::contract(format!("unknown {what} `{value}`")))
}

fn gen_demos(
    task: Option<String>,
    n: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    suite: Option<PathBuf>,
    config: Option<PathBuf>,
) -> Result<()> {
    let s = Settings::load(config.as_deref())?;
    s.only(&["task", "n", "seed", "out", "suite"])?;
    let suite = s.suite(suite)?;
    let task = s.raw("task", task).unwrap_or_else(|| "all".into());
    let n = s.or("n", n, DEMOS_PER_TASK)?;
    let seed = s.or("seed", seed, 0)?;
    let out: PathBuf = s.require("out", out)?;
    let tasks = if task == "all" {
        suite.tasks()
    } else {
        vec![parse_named::<TaskId>("task", &task)?]
    };
    let mut trajs = Vec::new();
    for t in tasks {
        let spec = suite.spec(t)?;
        trajs.extend(generate_demos(spec, n, seed)?);
        eprintln!("{t}: {n} demonstrations");
    }
    let manifest = write_dataset(&out, &suite, seed, &trajs)?;
    println!(
        "wrote {} trajectories to {}",
        manifest.entries.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    method: Option<String>,
    holdout: Option<String>,
    data: Option<PathBuf>,
    epochs: Option<usize>,
    second_order: Option<String>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    batch_size: Option<usize>,
    samples_per_epoch: Option<usize>,
    demos_per_task: Option<usize>,
    horizon: Option<usize>,
    updates: Option<usize>,
    latent: Option<usize>,
    encoder_layers: Option<String>,
    suite: Option<PathBuf>,
    config: Option<PathBuf>,
) -> Result<()> {
    let s = Settings::load(config.as_deref())?;
    s.only(&[
        "method",
        "holdout",
        "data",
        "epochs",
        "second_order",
        "seed",
        "out",
        "batch_size",
        "samples_per_epoch",
        "demos_per_task",
        "horizon",
        "updates",
        "latent",
        "encoder_layers",
        "suite",
    ])?;
    let suite = s.suite(suite)?;
    let method: Method = parse_named("method", &s.require::<String>("method", method)?)?;
    let holdout: TaskId = parse_named("task", &s.require::<String>("holdout", holdout)?)?;
    let data: PathBuf = s.require("data", data)?;
    let out: PathBuf = s.require("out", out)?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: s.or("epochs", epochs, defaults.epochs)?,
        batch_size: s.or("batch_size", batch_size, defaults.batch_size)?,
        second_order: s.switch("second_order", second_order, true)?,
        seed: s.or("seed", seed, 0)?,
        samples_per_epoch: s.get("samples_per_epoch", samples_per_epoch)?,
        ..defaults
    };
    let mut matrix = MatrixConfig {
        train: cfg.clone(),
        ..MatrixConfig::default()
    };
    matrix.planner.horizon = s.or("horizon", horizon, matrix.planner.horizon)?;
    matrix.planner.updates = s.or("updates", updates, matrix.planner.updates)?;
    matrix.latent = s.or("latent", latent, matrix.latent)?;
    if let Some(l) = s.raw("encoder_layers", encoder_layers) {
        matrix.encoder_layers = ConvLayerSpec::parse_list(&l)
            .ok_or_else(|| Error::contract("bad `--encoder-layers`"))?;
    }
    let render = suite.spec(holdout)?.render_size;
    let model = Model::new(matrix.method_config(method, render))?;

    let dataset = Dataset::open_for_suite(&data, &suite)?;
    let split = leave_one_out_split(dataset.manifest(), holdout)?;
    let limit = s.get::<usize>("demos_per_task", demos_per_task)?;
    let mut seen: BTreeMap<TaskId, usize> = BTreeMap::new();
    let entries: Vec<_> = split
        .train
        .into_iter()
        .filter(|e| {
            let k = seen.entry(e.task).or_default();
            *k += 1;
            limit.is_none_or(|l| *k <= l)
        })
        .collect();
    let trajs = dataset.load_all(&entries)?;
    let (params, record) = train(&model, None, &TrainData::images(&trajs), &cfg)?;
    let meta = CheckpointMeta {
        config: model.config().clone(),
        seed: cfg.seed,
        epochs: cfg.epochs,
        holdout: Some(holdout.to_string()),
        checksum: params.checksum(),
    };
    save_checkpoint(&out, &params, &meta)?;
    let mut log = String::from("epoch\touter_loss\tinner_loss_first\tinner_loss_last\n");
    for (i, e) in record.epochs.iter().enumerate() {
        let (a, z) = e.inner_loss.unwrap_or((f64::NAN, f64::NAN));
        log.push_str(&format!("{i}\t{:.9}\t{:.9}\t{:.9}\n", e.outer_loss, a, z));
    }
    let mut log_path = out.clone().into_os_string();
    log_path.push(".log.tsv");
    fs::write(&log_path, log).map_err(|e| Error::io(PathBuf::from(&log_path), e))?;
    println!(
        "trained {} on {} trajectories, final loss {:.6}, checksum {}, {:.1}s",
        method.label(),
        trajs.len(),
        record.losses().last().copied().unwrap_or(f64::NAN),
        record.checksum,
        record.wall_time_secs
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    ckpt: Option<PathBuf>,
    task: Option<String>,
    trials: Option<usize>,
    seed: Option<u64>,
    report: Option<PathBuf>,
    random: Option<String>,
    suite: Option<PathBuf>,
    config: Option<PathBuf>,
) -> Result<()> {
    let s = Settings::load(config.as_deref())?;
    s.only(&[
        "ckpt", "task", "trials", "seed", "report", "random", "suite",
    ])?;
    let suite = s.suite(suite)?;
    let ckpt: PathBuf = s.require("ckpt", ckpt)?;
    let task: TaskId = parse_named("task", &s.require::<String>("task", task)?)?;
    let report_dir: PathBuf = s.require("report", report)?;
    let cfg = EvalConfig {
        trials: s.or("trials", trials, EvalConfig::default().trials)?,
        base_seed: s.or("seed", seed, 0)?,
    };
    let (model, params, meta) = load_checkpoint(&ckpt)?;
    if meta.holdout.as_deref().is_some_and(|h| h != task.name()) {
        eprintln!(
            "note: checkpoint was trained with holdout {}",
            meta.holdout.as_deref().unwrap()
        );
    }
    let spec = suite.spec(task)?;
    let mut report = EvalReport::new(
        &cfg,
        &TrainConfig {
            epochs: meta.epochs,
            ..TrainConfig::default()
        },
    );
    let cell = evaluate(
        Controller::Trained {
            model: &model,
            params: &params,
        },
        spec,
        &cfg,
    )?;
    println!(
        "{} on {task}: {}/{}",
        model.method().label(),
        cell.successes(),
        cell.trials()
    );
    report.insert(cell);
    if s.switch("random", random, false)? {
        let cell = evaluate(Controller::Random, spec, &cfg)?;
        println!("random on {task}: {}/{}", cell.successes(), cell.trials());
        report.insert(cell);
    }
    emit_report(&report, &report_dir)
}

fn matrix_cmd(
    data: Option<PathBuf>,
    config: Option<PathBuf>,
    report: Option<PathBuf>,
) -> Result<()> {
    let s = Settings::load(config.as_deref())?;
    let mut cfg = MatrixConfig::default();
    let rest: Vec<(String, String)> = s
        .file
        .iter()
        .filter(|(k, _)| !matches!(k.as_str(), "data" | "report" | "suite" | "config"))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    cfg.apply(&rest, &s.origin)?;
    let suite = s.suite(None)?;
    let data: PathBuf = s.require("data", data)?;
    let report_dir: PathBuf = s.require("report", report)?;
    let dataset = Dataset::open_for_suite(&data, &suite)?;
    let report = run_matrix(&cfg, &suite, &dataset, Some(&report_dir))?;
    print!("{}", report.matrix_text());
    Ok(())
}

fn extrapolate_cmd(
    data: Option<PathBuf>,
    grid: Option<String>,
    report: Option<PathBuf>,
    config: Option<PathBuf>,
) -> Result<()> {
    let s = Settings::load(config.as_deref())?;
    let mut cfg = ExtrapolationConfig::default();
    let mut rest: Vec<(String, String)> = s
        .file
        .iter()
        .filter(|(k, _)| !matches!(k.as_str(), "data" | "report" | "suite" | "grid"))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    if let Some(g) = s.raw("grid", grid) {
        rest.push(("grid".into(), g));
    }
    cfg.apply(&rest, &s.origin)?;
    let suite = s.suite(None)?;
    let data: PathBuf = s.require("data", data)?;
    let report_dir: PathBuf = s.require("report", report)?;
    let dataset = Dataset::open_for_suite(&data, &suite)?;
    let entries: Vec<_> = dataset
        .manifest()
        .entries_for(TaskId::Reach3d)
        .take(cfg.trajectories)
        .cloned()
        .collect();
    let trajs = dataset.load_all(&entries)?;
    let study = extrapolation_study(&cfg, suite.spec(TaskId::Reach3d)?, &trajs)?;
    emit_extrapolation(&study, &report_dir)?;
    print!("{}", study.to_text());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenDemos {
            task,
            n,
            seed,
            out,
            suite,
            config,
        } => gen_demos(task, n, seed, out, suite, config),
        Command::Train {
            method,
            holdout,
            data,
            epochs,
            second_order,
            seed,
            out,
            batch_size,
            samples_per_epoch,
            demos_per_task,
            horizon,
            updates,
            latent,
            encoder_layers,
            suite,
            config,
        } => train_cmd(
            method,
            holdout,
            data,
            epochs,
            second_order,
            seed,
            out,
            batch_size,
            samples_per_epoch,
            demos_per_task,
            horizon,
            updates,
            latent,
            encoder_layers,
            suite,
            config,
        ),
        Command::Eval {
            ckpt,
            task,
            trials,
            seed,
            report,
            random,
            suite,
            config,
        } => eval_cmd(ckpt, task, trials, seed, report, random, suite, config),
        Command::Matrix {
            data,
            config,
            report,
        } => matrix_cmd(data, config, report),
        Command::Extrapolate {
            data,
            grid,
            report,
            config,
        } => extrapolate_cmd(data, grid, report, config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
