//! Planning by gradient descent: a zero-initialized action plan is rolled
//! through the latent dynamics, scored by the Huber distance between the
//! final predicted latent and the goal latent, and updated by projected
//! gradient steps. Model-predictive control executes the first action of a
//! fresh plan at every step.

mod mpc;
mod toy;

use std::fmt::Write as _;

use crate::diffcore::{huber, NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::models::{Goal, GoalMode, Model};
use crate::netblocks::ParamBundle;

pub use mpc::MpcController;
pub use toy::LinearToy;

/// Where the action plan starts before the first inner update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlanInit {
    Zeros,
    /// The policy branch's own rollout.
    Policy,
}

impl PlanInit {
    pub fn name(self) -> &'static str {
        match self {
            PlanInit::Zeros => "zeros",
            PlanInit::Policy => "policy",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        match text {
            "zeros" => Some(PlanInit::Zeros),
            "policy" => Some(PlanInit::Policy),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlannerConfig {
    pub horizon: usize,
    pub updates: usize,
    pub step_size: f64,
    pub huber_delta: f64,
    pub init: PlanInit,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 5,
            updates: 1,
            step_size: 0.1,
            huber_delta: 1.0,
            init: PlanInit::Policy,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::contract("planning horizon must be at least 1"));
        }
        if !(self.step_size > 0.0) || !(self.huber_delta > 0.0) {
            return Err(Error::contract(
                "inner step size and Huber delta must be positive",
            ));
        }
        Ok(())
    }
}

/// A policy/dynamics model viewed as a latent transition function.
pub trait LatentDynamics {
    fn latent_width(&self) -> usize;
    fn action_width(&self) -> usize;
    /// Returns the policy action and the next latent. When `action` is given
    /// it drives the transition instead of the policy action.
    fn step(
        &self,
        tape: &mut Tape,
        x: NodeId,
        goal: Option<NodeId>,
        action: Option<NodeId>,
    ) -> Result<(NodeId, NodeId)>;
}

/// How the inner update is recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InnerGradient {
    /// Plain numbers: each update starts from fresh action leaves.
    Detached,
    /// The inner gradient enters the updated actions as a constant.
    FirstOrder,
    /// The inner gradient is itself a differentiable expression.
    SecondOrder,
}

/// Nodes of a rollout recorded on a tape.
#[derive(Clone, Debug)]
pub struct TapeRollout {
    pub latents: Vec<NodeId>,
    pub policy_actions: Vec<NodeId>,
}

/// Plan refined on a tape; `actions` are the updated action rows.
#[derive(Clone, Debug)]
pub struct TapePlan {
    pub actions: Vec<NodeId>,
    pub rollout: TapeRollout,
    pub loss_trace: Vec<f64>,
}

/// A refined plan as plain values.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    /// `[H, A]`
    pub actions: Tensor,
    /// `[H + 1, d]`; row 0 is the current latent.
    pub predicted_latents: Tensor,
    /// Inner loss before each update and after the last (`U + 1` entries).
    pub loss_trace: Vec<f64>,
    /// `[H, A]` policy branch outputs along the final rollout.
    pub policy_actions: Tensor,
}

fn stack(tape: &Tape, rows: &[NodeId]) -> Result<Tensor> {
    let width = rows.first().map_or(0, |r| tape.value(*r).numel());
    let data: Vec<f64> = rows
        .iter()
        .flat_map(|r| tape.value(*r).data().to_vec())
        .collect();
    Tensor::new(vec![rows.len(), width], data)
}

impl TapePlan {
    pub fn to_plan(&self, tape: &Tape) -> Result<Plan> {
        Ok(Plan {
            actions: stack(tape, &self.actions)?,
            predicted_latents: stack(tape, &self.rollout.latents)?,
            loss_trace: self.loss_trace.clone(),
            policy_actions: stack(tape, &self.rollout.policy_actions)?,
        })
    }

    pub fn final_latent(&self) -> NodeId {
        *self.rollout.latents.last().expect("rollout has latents")
    }
}

impl Plan {
    pub fn horizon(&self) -> usize {
        self.actions.shape()[0]
    }

    pub fn action(&self, step: usize) -> &[f64] {
        let a = self.actions.shape()[1];
        &self.actions.data()[step * a..(step + 1) * a]
    }

    pub fn first_action(&self) -> &[f64] {
        self.action(0)
    }

    pub fn final_latent(&self) -> &[f64] {
        let (rows, d) = (
            self.predicted_latents.shape()[0],
            self.predicted_latents.shape()[1],
        );
        &self.predicted_latents.data()[(rows - 1) * d..]
    }

    /// Tab-separated dump: one `action` row per step, one `loss` row per
    /// entry of the inner-loss trace.
    pub fn dump(&self) -> String {
        let mut out = String::from("index\tkind\tvalues\n");
        for k in 0..self.horizon() {
            let vals: Vec<String> = self.action(k).iter().map(|v| format!("{v:.9}")).collect();
            let _ = writeln!(out, "{k}\taction\t{}", vals.join("\t"));
        }
        for (k, l) in self.loss_trace.iter().enumerate() {
            let _ = writeln!(out, "{k}\tloss\t{l:.9}");
        }
        out
    }
}

/// Unroll `actions` from `x0`. `latents[0] = x0`; the supplied actions drive
/// the transitions while the policy outputs are recorded alongside.
pub fn rollout(
    dynamics: &dyn LatentDynamics,
    tape: &mut Tape,
    x0: NodeId,
    goal: Option<NodeId>,
    actions: &[NodeId],
) -> Result<TapeRollout> {
    if tape.shape(x0) != [dynamics.latent_width()] {
        return Err(Error::contract(format!(
            "rollout start must have width {}, got {:?}",
            dynamics.latent_width(),
            tape.shape(x0)
        )));
    }
    let mut latents = vec![x0];
    let mut policy_actions = Vec::with_capacity(actions.len());
    for &a in actions {
        if tape.shape(a) != [dynamics.action_width()] {
            return Err(Error::contract(format!(
                "plan actions must have width {}, got {:?}",
                dynamics.action_width(),
                tape.shape(a)
            )));
        }
        let (p, next) = dynamics.step(tape, *latents.last().unwrap(), goal, Some(a))?;
        policy_actions.push(p);
        latents.push(next);
    }
    Ok(TapeRollout {
        latents,
        policy_actions,
    })
}

fn initial_actions(
    dynamics: &dyn LatentDynamics,
    tape: &mut Tape,
    x0: NodeId,
    goal: NodeId,
    cfg: &PlannerConfig,
    mode: InnerGradient,
) -> Result<Vec<NodeId>> {
    let a = dynamics.action_width();
    match cfg.init {
        PlanInit::Zeros => Ok((0..cfg.horizon)
            .map(|_| tape.leaf(Tensor::zeros(&[a]), true))
            .collect()),
        PlanInit::Policy => {
            let mut x = x0;
            let mut out = Vec::with_capacity(cfg.horizon);
            for _ in 0..cfg.horizon {
                let (p, next) = dynamics.step(tape, x, Some(goal), None)?;
                out.push(p);
                x = next;
            }
            if mode == InnerGradient::Detached {
                out = out
                    .into_iter()
                    .map(|p| {
                        let v = tape.value(p).clone();
                        tape.leaf(v, true)
                    })
                    .collect();
            }
            Ok(out)
        }
    }
}

fn inner_loss(tape: &mut Tape, latent: NodeId, goal: NodeId, delta: f64) -> Result<(NodeId, f64)> {
    let loss = huber(tape, latent, goal, delta)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NumericFault {
            op: "huber",
            context: "inner planning loss".into(),
        });
    }
    Ok((loss, value))
}

/// Refine a plan from `x0` toward `goal` on `tape`. Only the actions change;
/// the model is read, never written.
pub fn refine_on_tape(
    dynamics: &dyn LatentDynamics,
    tape: &mut Tape,
    x0: NodeId,
    goal: NodeId,
    cfg: &PlannerConfig,
    mode: InnerGradient,
) -> Result<TapePlan> {
    cfg.validate()?;
    if tape.shape(goal) != [dynamics.latent_width()] {
        return Err(Error::contract(format!(
            "goal latent must have width {}, got {:?}",
            dynamics.latent_width(),
            tape.shape(goal)
        )));
    }
    let mut actions = initial_actions(dynamics, tape, x0, goal, cfg, mode)?;
    let mut loss_trace = Vec::with_capacity(cfg.updates + 1);
    for _ in 0..cfg.updates {
        let roll = rollout(dynamics, tape, x0, Some(goal), &actions)?;
        let (loss, value) = inner_loss(tape, *roll.latents.last().unwrap(), goal, cfg.huber_delta)?;
        loss_trace.push(value);
        actions = match mode {
            InnerGradient::SecondOrder => {
                let grads = tape.backward_differentiable(loss, &actions)?;
                let mut next = Vec::with_capacity(actions.len());
                for &a in &actions {
                    next.push(match grads.get(a) {
                        Some(g) => {
                            let step = tape.scale(g, cfg.step_size)?;
                            let moved = tape.sub(a, step)?;
                            tape.clamp(moved, -1.0, 1.0)?
                        }
                        None => a,
                    });
                }
                next
            }
            InnerGradient::FirstOrder | InnerGradient::Detached => {
                let grads = tape.backward_wrt(loss, &actions)?;
                let mut next = Vec::with_capacity(actions.len());
                for &a in &actions {
                    let g = grads.get_or_zeros(tape, a);
                    if mode == InnerGradient::Detached {
                        let v = tape
                            .value(a)
                            .zip(&g, |a, g| (a - cfg.step_size * g).clamp(-1.0, 1.0));
                        next.push(tape.leaf(v, true));
                    } else {
                        let g = tape.constant(g.map(|e| cfg.step_size * e));
                        let moved = tape.sub(a, g)?;
                        next.push(tape.clamp(moved, -1.0, 1.0)?);
                    }
                }
                next
            }
        };
    }
    let roll = rollout(dynamics, tape, x0, Some(goal), &actions)?;
    let (_, value) = inner_loss(tape, *roll.latents.last().unwrap(), goal, cfg.huber_delta)?;
    loss_trace.push(value);
    Ok(TapePlan {
        actions,
        rollout: roll,
        loss_trace,
    })
}

/// Refine a plan from raw latent values with a fresh tape.
pub fn refine_latent(
    dynamics: &dyn LatentDynamics,
    tape: &mut Tape,
    x0: &Tensor,
    goal: &Tensor,
    cfg: &PlannerConfig,
) -> Result<Plan> {
    let x = tape.constant(x0.clone());
    let g = tape.constant(goal.clone());
    refine_on_tape(dynamics, tape, x, g, cfg, InnerGradient::Detached)?.to_plan(tape)
}

/// Plan from an observation toward a goal with frozen parameters.
pub fn refine_plan(
    model: &Model,
    params: &ParamBundle,
    observation: &Tensor,
    goal: &Goal,
    cfg: &PlannerConfig,
) -> Result<Plan> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let x = model.encode(&mut tape, &bound, observation)?;
    let g = model.encode_goal(&mut tape, &bound, goal)?;
    let dynamics = model.bind(bound);
    refine_on_tape(&dynamics, &mut tape, x, g, cfg, InnerGradient::Detached)?.to_plan(&tape)
}

/// Maps a plan to the point in goal space it is predicted to reach.
pub trait EndpointReadout {
    fn endpoint(&self, plan: &Plan) -> Vec<f64>;
}

/// Known agent kinematics: `start + scale · Σ_k a_k` over the first
/// `start.len()` action components, clamped to the arena box when given.
#[derive(Clone, Debug, PartialEq)]
pub struct KinematicReadout {
    pub start: Vec<f64>,
    pub scale: f64,
    pub bounds: Option<(f64, f64)>,
}

impl EndpointReadout for KinematicReadout {
    fn endpoint(&self, plan: &Plan) -> Vec<f64> {
        let mut p = self.start.clone();
        for k in 0..plan.horizon() {
            for (pi, a) in p.iter_mut().zip(plan.action(k)) {
                *pi += self.scale * a;
                if let Some((lo, hi)) = self.bounds {
                    *pi = pi.clamp(lo, hi);
                }
            }
        }
        p
    }
}

/// The final predicted latent itself is the endpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LatentReadout;

impl EndpointReadout for LatentReadout {
    fn endpoint(&self, plan: &Plan) -> Vec<f64> {
        plan.final_latent().to_vec()
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Plan toward a goal vector and measure how far the plan's endpoint lands
/// from it.
pub fn plan_endpoint_deviation(
    model: &Model,
    params: &ParamBundle,
    observation: &Tensor,
    goal: [f64; 3],
    readout: &dyn EndpointReadout,
    cfg: &PlannerConfig,
) -> Result<(f64, Plan)> {
    if model.config().goal_mode != GoalMode::Vector {
        return Err(Error::contract(
            "endpoint deviation needs a vector-goal model",
        ));
    }
    let plan = refine_plan(model, params, observation, &Goal::Vector(goal), cfg)?;
    let end = readout.endpoint(&plan);
    Ok((euclidean(&end, &goal), plan))
}
