use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use super::report::{emit_report, EvalReport};
use super::{evaluate, CellResult, Controller, EvalConfig, Row, TrainSummary, TrialOutcome};
use crate::datastore::{leave_one_out_split, Dataset, ManifestEntry, Trajectory};
use crate::error::{Error, Result};
use crate::imitation::{save_checkpoint, train, CheckpointMeta, TrainConfig, TrainData};
use crate::kv;
use crate::models::{Method, MethodConfig, Model, LATENT_WIDTH};
use crate::netblocks::{ConvEncoderSpec, ConvLayerSpec};
use crate::par;
use crate::planner::{PlanInit, PlannerConfig};
use crate::worlds::{SuiteConfig, TaskId};

/// Settings shared by every cell of a leave-one-task-out matrix. All methods
/// get the same training budget, demonstrations and trial seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixConfig {
    pub methods: Vec<Method>,
    /// Holdout tasks; `None` means every task in the dataset.
    pub tasks: Option<Vec<TaskId>>,
    pub eval: EvalConfig,
    pub train: TrainConfig,
    pub planner: PlannerConfig,
    pub encoder_layers: Vec<ConvLayerSpec>,
    pub latent: usize,
    /// Use only the first `n` demonstrations of each training task.
    pub demos_per_task: Option<usize>,
    pub include_random: bool,
    pub workers: usize,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            tasks: None,
            eval: EvalConfig::default(),
            train: TrainConfig::default(),
            planner: PlannerConfig::default(),
            encoder_layers: ConvEncoderSpec::default().layers,
            latent: LATENT_WIDTH,
            demos_per_task: None,
            include_random: true,
            workers: 1,
        }
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str, origin: &Path) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::format(origin, format!("bad entry `{v}` in `{key}`")))
        })
        .collect()
}

impl MatrixConfig {
    /// Keys accepted by [`MatrixConfig::apply`].
    pub const KEYS: [&'static str; 20] = [
        "methods",
        "tasks",
        "trials",
        "seed",
        "train_seed",
        "epochs",
        "batch_size",
        "learning_rate",
        "second_order",
        "samples_per_epoch",
        "demos_per_task",
        "latent",
        "encoder.layers",
        "horizon",
        "updates",
        "step_size",
        "huber_delta",
        "plan_init",
        "random",
        "workers",
    ];

    /// Apply `key = value` settings on top of `self`.
    pub fn apply(&mut self, pairs: &[(String, String)], origin: &Path) -> Result<()> {
        for (key, value) in pairs {
            let v = value.as_str();
            match key.as_str() {
                "methods" => self.methods = parse_list(key, v, origin)?,
                "tasks" => self.tasks = Some(parse_list(key, v, origin)?),
                "trials" => self.eval.trials = kv::parse_value(key, v, origin)?,
                "seed" => self.eval.base_seed = kv::parse_value(key, v, origin)?,
                "train_seed" => self.train.seed = kv::parse_value(key, v, origin)?,
                "epochs" => self.train.epochs = kv::parse_value(key, v, origin)?,
                "batch_size" => self.train.batch_size = kv::parse_value(key, v, origin)?,
                "learning_rate" => self.train.adam.learning_rate = kv::parse_value(key, v, origin)?,
                "second_order" => self.train.second_order = parse_switch(key, v, origin)?,
                "samples_per_epoch" => {
                    self.train.samples_per_epoch = Some(kv::parse_value(key, v, origin)?)
                }
                "demos_per_task" => self.demos_per_task = Some(kv::parse_value(key, v, origin)?),
                "latent" => self.latent = kv::parse_value(key, v, origin)?,
                "encoder.layers" => {
                    self.encoder_layers = ConvLayerSpec::parse_list(v)
                        .ok_or_else(|| Error::format(origin, "bad value for `encoder.layers`"))?
                }
                "horizon" => self.planner.horizon = kv::parse_value(key, v, origin)?,
                "updates" => self.planner.updates = kv::parse_value(key, v, origin)?,
                "step_size" => self.planner.step_size = kv::parse_value(key, v, origin)?,
                "huber_delta" => self.planner.huber_delta = kv::parse_value(key, v, origin)?,
                "plan_init" => {
                    self.planner.init = PlanInit::parse(v).ok_or_else(|| {
                        Error::format(origin, "`plan_init` is `zeros` or `policy`")
                    })?
                }
                "random" => self.include_random = parse_switch(key, v, origin)?,
                "workers" => self.workers = kv::parse_value(key, v, origin)?,
                other => return Err(Error::format(origin, format!("unknown key `{other}`"))),
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(&kv::parse(text, origin)?, origin)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() && !self.include_random {
            return Err(Error::contract("the matrix has no rows"));
        }
        if self.demos_per_task == Some(0) {
            return Err(Error::contract("demos_per_task must be at least 1"));
        }
        self.eval.validate()?;
        self.train.validate()?;
        self.planner.validate()
    }

    pub fn rows(&self) -> Vec<Row> {
        let mut rows: Vec<Row> = self.methods.iter().map(|&m| Row::Method(m)).collect();
        rows.sort();
        rows.dedup();
        if self.include_random {
            rows.push(Row::Random);
        }
        rows
    }

    /// The model configuration every cell of `method` trains.
    pub fn method_config(&self, method: Method, render_size: usize) -> MethodConfig {
        let encoder =
            ConvEncoderSpec::for_size(render_size, self.encoder_layers.clone(), self.latent);
        let mut config = MethodConfig::new(method).with_encoder(encoder);
        config.second_order = self.train.second_order;
        if method.is_planning() {
            config.planner = Some(self.planner.clone());
        }
        config
    }
}

/// `on`/`off`, `true`/`false`.
pub fn parse_switch(key: &str, value: &str, origin: &Path) -> Result<bool> {
    match value {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(Error::format(origin, format!("`{key}` is `on` or `off`"))),
    }
}

/// Training entries of the split for `holdout`, limited per task.
fn training_entries(
    dataset: &Dataset,
    holdout: TaskId,
    limit: Option<usize>,
) -> Result<Vec<ManifestEntry>> {
    let split = leave_one_out_split(dataset.manifest(), holdout)?;
    let mut per_task: BTreeMap<TaskId, usize> = BTreeMap::new();
    Ok(split
        .train
        .into_iter()
        .filter(|e| {
            let n = per_task.entry(e.task).or_default();
            *n += 1;
            limit.is_none_or(|l| *n <= l)
        })
        .collect())
}

/// Load the training split for `holdout` and check the read audit: no file of
/// the holdout task may have been opened.
fn load_training(
    dataset: &Dataset,
    holdout: TaskId,
    limit: Option<usize>,
) -> Result<Vec<Trajectory>> {
    dataset.clear_accessed();
    let entries = training_entries(dataset, holdout, limit)?;
    let trajs = dataset.load_all(&entries)?;
    let held: Vec<&str> = dataset
        .manifest()
        .entries_for(holdout)
        .map(|e| e.path.as_str())
        .collect();
    if dataset
        .accessed()
        .iter()
        .any(|p| held.contains(&p.as_str()))
    {
        return Err(Error::contract(format!(
            "holdout task {holdout} was read while building its training set"
        )));
    }
    Ok(trajs)
}

fn checkpoint_path(dir: &Path, holdout: TaskId, method: Method) -> std::path::PathBuf {
    dir.join("ckpt").join(format!("{holdout}-{method}.cpnp"))
}

fn run_cell(
    cfg: &MatrixConfig,
    suite: &SuiteConfig,
    holdout: TaskId,
    row: Row,
    trajs: &[Trajectory],
    report_dir: Option<&Path>,
) -> Result<CellResult> {
    let spec = suite.spec(holdout)?;
    let method = match row {
        Row::Random => return evaluate(Controller::Random, spec, &cfg.eval),
        Row::Method(m) => m,
    };
    let model = Model::new(cfg.method_config(method, spec.render_size))?;
    let (params, record) = match train(&model, None, &TrainData::images(trajs), &cfg.train) {
        Ok(r) => r,
        Err(e @ Error::NumericFault { .. }) => {
            let fault = format!("training: {e}");
            return Ok(CellResult {
                row,
                task: holdout,
                outcomes: cfg
                    .eval
                    .seeds()
                    .into_iter()
                    .map(|seed| TrialOutcome {
                        seed,
                        success: false,
                        steps: 0,
                        fault: Some(fault.clone()),
                    })
                    .collect(),
                train: None,
            });
        }
        Err(e) => return Err(e),
    };
    if let Some(dir) = report_dir {
        let meta = CheckpointMeta {
            config: model.config().clone(),
            seed: cfg.train.seed,
            epochs: cfg.train.epochs,
            holdout: Some(holdout.to_string()),
            checksum: params.checksum(),
        };
        save_checkpoint(&checkpoint_path(dir, holdout, method), &params, &meta)?;
    }
    let mut cell = evaluate(
        Controller::Trained {
            model: &model,
            params: &params,
        },
        spec,
        &cfg.eval,
    )?;
    cell.train = Some(TrainSummary {
        epochs: record.epochs.len(),
        demos: trajs.len(),
        final_loss: record.losses().last().copied().unwrap_or(f64::NAN),
        checksum: record.checksum,
    });
    Ok(cell)
}

/// Leave-one-task-out evaluation. For each holdout task the remaining
/// tasks' demonstrations train every method with the same budget, and each
/// trained model is evaluated on the holdout. With `report_dir` the report is
/// rewritten after every completed cell and checkpoints go to `ckpt/`.
pub fn run_matrix(
    cfg: &MatrixConfig,
    suite: &SuiteConfig,
    dataset: &Dataset,
    report_dir: Option<&Path>,
) -> Result<EvalReport> {
    cfg.validate()?;
    if dataset.manifest().suite_hash != suite.hash() {
        return Err(Error::contract(
            "dataset was generated with a different suite configuration",
        ));
    }
    let holdouts = match &cfg.tasks {
        Some(t) => t.clone(),
        None => dataset.manifest().tasks(),
    };
    if let Some(dir) = report_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let rows = cfg.rows();
    let report = Mutex::new(EvalReport::new(&cfg.eval, &cfg.train));
    for holdout in holdouts {
        let trajs = load_training(dataset, holdout, cfg.demos_per_task)?;
        let cells = par::with_workers(cfg.workers, || {
            par::map(&rows, |&row| -> Result<()> {
                let cell = run_cell(cfg, suite, holdout, row, &trajs, report_dir)?;
                let mut r = report.lock().unwrap();
                r.insert(cell);
                if let Some(dir) = report_dir {
                    emit_report(&r, dir)?;
                }
                Ok(())
            })
        });
        par::collect_ordered(cells)?;
    }
    Ok(report.into_inner().unwrap())
}

/// Recompute one cell from scratch: same split, training seed and trial
/// seeds. A deterministic pipeline returns a cell equal to the original.
pub fn replay_cell(
    cfg: &MatrixConfig,
    suite: &SuiteConfig,
    dataset: &Dataset,
    holdout: TaskId,
    row: Row,
) -> Result<CellResult> {
    cfg.validate()?;
    let trajs = load_training(dataset, holdout, cfg.demos_per_task)?;
    run_cell(cfg, suite, holdout, row, &trajs, None)
}
