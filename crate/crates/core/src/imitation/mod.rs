//! Outer-loop training. Planning methods are trained by behavior cloning on
//! the actions of a refined plan, differentiating through the inner update
//! when `second_order` is on; reactive methods clone actions directly.

mod adam;
mod checkpoint;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datastore::Trajectory;
use crate::diffcore::{mse, NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::models::{Goal, Model};
use crate::netblocks::{BoundParams, ParamBundle};
use crate::par;
use crate::planner::{refine_on_tape, InnerGradient, LatentDynamics, PlannerConfig, TapePlan};

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub second_order: bool,
    pub seed: u64,
    /// Use only the first `n` shuffled samples of each epoch.
    pub samples_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            adam: AdamConfig::default(),
            second_order: true,
            seed: 0,
            samples_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract("epochs and batch size must be at least 1"));
        }
        self.adam.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub outer_loss: f64,
    /// Mean inner loss before the first and after the last update, for
    /// planning methods.
    pub inner_loss: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub epochs: Vec<EpochStats>,
    pub samples_per_epoch: usize,
    pub wall_time_secs: f64,
    pub checksum: String,
}

impl TrainRecord {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.outer_loss).collect()
    }
}

/// Demonstrations plus an optional goal vector per trajectory. Without goal
/// vectors the final frame of each trajectory is its goal.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub trajectories: &'a [Trajectory],
    pub goal_vectors: Option<&'a [[f64; 3]]>,
}

impl<'a> TrainData<'a> {
    pub fn images(trajectories: &'a [Trajectory]) -> Self {
        Self {
            trajectories,
            goal_vectors: None,
        }
    }

    fn goal(&self, traj: usize) -> Goal {
        match self.goal_vectors {
            Some(v) => Goal::Vector(v[traj]),
            None => Goal::Image(self.trajectories[traj].goal.to_tensor()),
        }
    }
}

/// One training example: trajectory index and time offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub traj: usize,
    pub t: usize,
}

/// Every offset that carries a demonstrated action (the final frame does not).
pub fn all_samples(trajectories: &[Trajectory]) -> Vec<Sample> {
    trajectories
        .iter()
        .enumerate()
        .flat_map(|(traj, tr)| (0..tr.len() - 1).map(move |t| Sample { traj, t }))
        .collect()
}

/// Behavior-cloning loss on a plan refined from latents `x` toward `goal`:
/// `mse(plan actions, demo window)` over the `H × A` window.
pub fn plan_cloning_loss(
    dynamics: &dyn LatentDynamics,
    tape: &mut Tape,
    x: NodeId,
    goal: NodeId,
    demo: &[f64],
    cfg: &PlannerConfig,
    second_order: bool,
) -> Result<(NodeId, TapePlan)> {
    let a = dynamics.action_width();
    if demo.len() != cfg.horizon * a {
        return Err(Error::contract(format!(
            "demo window has {} values, the plan needs {}",
            demo.len(),
            cfg.horizon * a
        )));
    }
    let mode = if second_order {
        InnerGradient::SecondOrder
    } else {
        InnerGradient::FirstOrder
    };
    let plan = refine_on_tape(dynamics, tape, x, goal, cfg, mode)?;
    let actions = tape.concat(&plan.actions)?;
    let target = tape.constant(Tensor::vector(demo.to_vec()));
    Ok((mse(tape, actions, target)?, plan))
}

/// [`plan_cloning_loss`] from an observation image and a goal.
#[allow(clippy::too_many_arguments)]
pub fn outer_loss_planning(
    model: &Model,
    tape: &mut Tape,
    params: &BoundParams,
    observation: &Tensor,
    goal: &Goal,
    demo: &[f64],
    cfg: &PlannerConfig,
    second_order: bool,
) -> Result<(NodeId, TapePlan)> {
    let x = model.encode(tape, params, observation)?;
    let g = model.encode_goal(tape, params, goal)?;
    let dynamics = model.bind(params.clone());
    plan_cloning_loss(&dynamics, tape, x, g, demo, cfg, second_order)
}

/// `mse(reactive action, a_t)`.
pub fn outer_loss_reactive(
    model: &Model,
    tape: &mut Tape,
    params: &BoundParams,
    observation: &Tensor,
    goal: Option<&Tensor>,
    action: &[f64],
) -> Result<NodeId> {
    let pred = model.reactive_action(tape, params, observation, goal)?;
    let target = tape.constant(Tensor::vector(action.to_vec()));
    mse(tape, pred, target)
}

/// Loss, inner-loss endpoints and per-parameter gradients of one sample.
pub struct SampleGradient {
    pub loss: f64,
    pub inner: Option<(f64, f64)>,
    pub grads: BTreeMap<String, Tensor>,
}

pub fn sample_gradient(
    model: &Model,
    params: &ParamBundle,
    data: &TrainData<'_>,
    sample: Sample,
    second_order: bool,
) -> Result<SampleGradient> {
    let traj = data
        .trajectories
        .get(sample.traj)
        .ok_or_else(|| Error::contract(format!("no trajectory {}", sample.traj)))?;
    let step = traj.steps.get(sample.t).ok_or_else(|| {
        Error::contract(format!(
            "trajectory {} has no step {}",
            sample.traj, sample.t
        ))
    })?;
    let observation = step.image.to_tensor();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let (loss, inner) = if model.method().is_planning() {
        let cfg = model.config().planner()?;
        let demo = traj.action_window(sample.t, cfg.horizon);
        let goal = data.goal(sample.traj);
        let (loss, plan) = outer_loss_planning(
            model,
            &mut tape,
            &bound,
            &observation,
            &goal,
            &demo,
            cfg,
            second_order,
        )?;
        let trace = &plan.loss_trace;
        (loss, Some((trace[0], *trace.last().unwrap())))
    } else {
        let goal = model
            .reactive()?
            .goal_input()
            .then(|| traj.goal.to_tensor());
        let action = traj.action_window(sample.t, 1);
        (
            outer_loss_reactive(
                model,
                &mut tape,
                &bound,
                &observation,
                goal.as_ref(),
                &action,
            )?,
            None,
        )
    };
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let grads = bound
        .iter()
        .map(|(name, &id)| (name.clone(), grads.get_or_zeros(&tape, id)))
        .collect();
    Ok(SampleGradient {
        loss: value,
        inner,
        grads,
    })
}

/// Mean gradient of a batch. Per-sample work may run in parallel; the sum is
/// taken in sample order so the result does not depend on scheduling.
pub fn batch_gradient(
    model: &Model,
    params: &ParamBundle,
    data: &TrainData<'_>,
    batch: &[Sample],
    second_order: bool,
) -> Result<(BTreeMap<String, Tensor>, Vec<SampleGradient>)> {
    let parts = par::collect_ordered(par::map(batch, |&s| {
        sample_gradient(model, params, data, s, second_order)
    }))?;
    let mut total: BTreeMap<String, Tensor> = params
        .iter()
        .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
        .collect();
    for p in &parts {
        for (name, g) in &p.grads {
            total
                .get_mut(name)
                .expect("same parameter names")
                .add_assign(g);
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for t in total.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok((total, parts))
}

/// Train from seeded initial parameters (or `init`). The returned
/// parameters are rounded to `f32` so they equal their saved checkpoint.
pub fn train(
    model: &Model,
    init: Option<ParamBundle>,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
) -> Result<(ParamBundle, TrainRecord)> {
    cfg.validate()?;
    if data.trajectories.is_empty() {
        return Err(Error::contract("training split is empty"));
    }
    if let Some(v) = data.goal_vectors {
        if v.len() != data.trajectories.len() {
            return Err(Error::contract(
                "one goal vector per trajectory is required",
            ));
        }
    }
    let started = Instant::now();
    let mut params = match init {
        Some(p) => {
            model.check_params(&p)?;
            p
        }
        None => model.init_params(cfg.seed)?,
    };
    let mut adam = Adam::new(cfg.adam.clone());
    let mut samples = all_samples(data.trajectories);
    let per_epoch = cfg
        .samples_per_epoch
        .map_or(samples.len(), |n| n.min(samples.len()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696E);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        samples.shuffle(&mut rng);
        let (mut loss_sum, mut inner0, mut inner1) = (0.0, 0.0, 0.0);
        for (b, batch) in samples[..per_epoch].chunks(cfg.batch_size).enumerate() {
            let (grads, parts) = batch_gradient(model, &params, data, batch, cfg.second_order)
                .map_err(|e| e.with_context(format!("epoch {epoch}, batch {b}")))?;
            for p in &parts {
                loss_sum += p.loss;
                if let Some((a, z)) = p.inner {
                    inner0 += a;
                    inner1 += z;
                }
            }
            adam.step(&mut params, &grads)
                .map_err(|e| e.with_context(format!("epoch {epoch}, batch {b}")))?;
        }
        let n = per_epoch as f64;
        epochs.push(EpochStats {
            outer_loss: loss_sum / n,
            inner_loss: model
                .method()
                .is_planning()
                .then(|| (inner0 / n, inner1 / n)),
        });
    }
    params.round_to_f32();
    let record = TrainRecord {
        epochs,
        samples_per_epoch: per_epoch,
        wall_time_secs: started.elapsed().as_secs_f64(),
        checksum: params.checksum(),
    };
    Ok((params, record))
}

#[cfg(test)]
mod tests;
