//! Evaluation: seeded first-attempt trials, the leave-one-task-out matrix,
//! the vector-goal extrapolation study, and their report files.

mod extrapolate;
mod matrix;
mod report;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tape;
use crate::error::{Error, Result};
use crate::models::{Goal, GoalMode, Method, Model};
use crate::netblocks::ParamBundle;
use crate::par;
use crate::planner::MpcController;
use crate::worlds::{reset, step, TaskId, TaskSpec, ACTION_WIDTH};

pub use extrapolate::{
    extrapolation_study, parse_grid, ExtrapolationConfig, ExtrapolationReport, GridCell,
};
pub use matrix::{parse_switch, replay_cell, run_matrix, MatrixConfig};
pub use report::{emit_extrapolation, emit_report, EvalReport};

/// Number of evaluation trials per cell.
pub const DEFAULT_TRIALS: usize = 20;

const RANDOM_POLICY_SALT: u64 = 0x7261_6E64_6F6D;

/// A row of the evaluation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Row {
    Method(Method),
    Random,
}

impl Row {
    /// Methods in ladder order, then the random policy.
    pub const ALL: [Row; 5] = [
        Row::Method(Method::Bc),
        Row::Method(Method::TeBc),
        Row::Method(Method::Upn),
        Row::Method(Method::Cpn),
        Row::Random,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Row::Method(m) => m.label(),
            Row::Random => "random",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Row::Method(m) => m.key(),
            Row::Random => "random",
        }
    }
}

impl fmt::Display for Row {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Row {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("random") {
            Ok(Row::Random)
        } else {
            s.parse().map(Row::Method)
        }
    }
}

/// Trials per cell and the seeds they use.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalConfig {
    pub trials: usize,
    pub base_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trials: DEFAULT_TRIALS,
            base_seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::contract("evaluation needs at least one trial"));
        }
        Ok(())
    }

    /// Trial `i` uses seed `base + i`.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.trials as u64)
            .map(|i| self.base_seed.wrapping_add(i))
            .collect()
    }
}

/// Outcome of one first-attempt episode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrialOutcome {
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    /// Set when a numeric fault ended the episode.
    pub fault: Option<String>,
}

/// Training summary kept with a matrix cell.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub epochs: usize,
    pub demos: usize,
    pub final_loss: f64,
    pub checksum: String,
}

/// All trials of one (row, task) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub row: Row,
    pub task: TaskId,
    pub outcomes: Vec<TrialOutcome>,
    pub train: Option<TrainSummary>,
}

impl CellResult {
    pub fn trials(&self) -> usize {
        self.outcomes.len()
    }

    pub fn successes(&self) -> usize {
        self.outcomes.iter().filter(|o| o.success).count()
    }

    pub fn rate(&self) -> f64 {
        self.successes() as f64 / self.trials() as f64
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.outcomes.iter().map(|o| o.seed).collect()
    }

    pub fn faults(&self) -> usize {
        self.outcomes.iter().filter(|o| o.fault.is_some()).count()
    }
}

/// What chooses actions during a trial.
#[derive(Clone, Copy)]
pub enum Controller<'a> {
    Trained {
        model: &'a Model,
        params: &'a ParamBundle,
    },
    /// Uniform in `[-1, 1]^4` per step, seeded from the trial seed.
    Random,
}

impl Controller<'_> {
    pub fn row(&self) -> Row {
        match self {
            Controller::Trained { model, .. } => Row::Method(model.method()),
            Controller::Random => Row::Random,
        }
    }
}

/// A trial with the per-step planning record.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialTrace {
    pub outcome: TrialOutcome,
    pub executed: Vec<Vec<f64>>,
    /// First action of the plan made at each step (planning methods only).
    pub planned_first: Vec<Vec<f64>>,
    pub replans: usize,
}

enum Driver<'a> {
    Mpc(MpcController<'a>),
    Reactive {
        model: &'a Model,
        params: &'a ParamBundle,
        goal: crate::diffcore::Tensor,
    },
    Random(ChaCha8Rng),
}

/// One episode from `reset(spec, seed)` until success or the horizon.
pub fn run_trial_traced(
    controller: Controller<'_>,
    spec: &TaskSpec,
    seed: u64,
) -> Result<TrialTrace> {
    let start = reset(spec, seed)?;
    let mut driver = match controller {
        Controller::Random => Driver::Random(ChaCha8Rng::seed_from_u64(seed ^ RANDOM_POLICY_SALT)),
        Controller::Trained { model, params } if model.method().is_planning() => {
            let mut mpc = MpcController::new(model, params, model.config().planner()?.clone())?;
            let goal = match model.config().goal_mode {
                GoalMode::Image => Goal::Image(start.goal.to_tensor()),
                GoalMode::Vector => Goal::Vector(start.state.goal_vector()),
            };
            mpc.begin_episode(&goal)?;
            Driver::Mpc(mpc)
        }
        Controller::Trained { model, params } => Driver::Reactive {
            model,
            params,
            goal: start.goal.to_tensor(),
        },
    };
    let mut state = start.state;
    let mut obs = start.observation;
    let mut trace = TrialTrace {
        outcome: TrialOutcome {
            seed,
            success: state.success,
            steps: 0,
            fault: None,
        },
        executed: Vec::new(),
        planned_first: Vec::new(),
        replans: 0,
    };
    while !state.success && state.step < spec.horizon {
        let action = match &mut driver {
            Driver::Random(rng) => (0..ACTION_WIDTH)
                .map(|_| rng.gen_range(-1.0..=1.0))
                .collect(),
            Driver::Mpc(mpc) => match mpc.act(&obs.to_tensor()) {
                Ok(a) => {
                    trace
                        .planned_first
                        .push(mpc.last_plan().unwrap().first_action().to_vec());
                    trace.replans = mpc.replans();
                    a
                }
                Err(e @ Error::NumericFault { .. }) => {
                    trace.outcome.fault =
                        Some(e.with_context(format!("step {}", state.step)).to_string());
                    break;
                }
                Err(e) => return Err(e),
            },
            Driver::Reactive {
                model,
                params,
                goal,
            } => {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape, false);
                let a = model.reactive_action(&mut tape, &bound, &obs.to_tensor(), Some(goal))?;
                let a = tape.value(a).data().to_vec();
                if a.iter().any(|v| !v.is_finite()) {
                    trace.outcome.fault = Some(format!("non-finite action at step {}", state.step));
                    break;
                }
                a
            }
        };
        let (next, next_obs, success) = step(spec, &state, &action)?;
        trace.executed.push(action);
        state = next;
        obs = next_obs;
        trace.outcome.steps = state.step;
        trace.outcome.success = success;
    }
    Ok(trace)
}

pub fn run_trial(controller: Controller<'_>, spec: &TaskSpec, seed: u64) -> Result<TrialOutcome> {
    run_trial_traced(controller, spec, seed).map(|t| t.outcome)
}

/// Evaluate a controller on `spec` over the configured seeds. Parameters are
/// checksummed before and after; any change is a contract violation.
pub fn evaluate(
    controller: Controller<'_>,
    spec: &TaskSpec,
    cfg: &EvalConfig,
) -> Result<CellResult> {
    cfg.validate()?;
    let before = match controller {
        Controller::Trained { params, .. } => Some(params.checksum()),
        Controller::Random => None,
    };
    let seeds = cfg.seeds();
    let outcomes = par::collect_ordered(par::map(&seeds, |&s| run_trial(controller, spec, s)))?;
    if let Controller::Trained { params, .. } = controller {
        if before.as_deref() != Some(params.checksum().as_str()) {
            return Err(Error::contract("parameters changed during evaluation"));
        }
    }
    Ok(CellResult {
        row: controller.row(),
        task: spec.id,
        outcomes,
        train: None,
    })
}

fn binomial_cdf(n: usize, p: f64) -> Vec<f64> {
    let mut pmf = vec![0.0; n + 1];
    if p <= 0.0 {
        pmf[0] = 1.0;
    } else if p >= 1.0 {
        pmf[n] = 1.0;
    } else {
        let (lp, lq) = (p.ln(), (1.0 - p).ln());
        let mut log_choose = 0.0;
        for (k, slot) in pmf.iter_mut().enumerate() {
            if k > 0 {
                log_choose += ((n - k + 1) as f64).ln() - (k as f64).ln();
            }
            *slot = (log_choose + k as f64 * lp + (n - k) as f64 * lq).exp();
        }
    }
    let mut acc = 0.0;
    pmf.iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect()
}

/// Central 95% band `[lo, hi]` of success counts for `n` trials at rate `p`:
/// the 2.5% and 97.5% quantiles of Binomial(n, p).
pub fn binomial_band(n: usize, p: f64) -> (usize, usize) {
    let cdf = binomial_cdf(n, p);
    let quantile = |q: f64| cdf.iter().position(|&c| c >= q - 1e-12).unwrap_or(n);
    (quantile(0.025), quantile(0.975))
}

#[cfg(test)]
mod tests;
