use super::{refine_on_tape, InnerGradient, Plan, PlannerConfig};
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::models::{Goal, Model};
use crate::netblocks::ParamBundle;

/// Receding-horizon control: a fresh plan every step, first action executed.
/// The goal latent is computed once per episode.
pub struct MpcController<'a> {
    model: &'a Model,
    params: &'a ParamBundle,
    cfg: PlannerConfig,
    goal_latent: Option<Tensor>,
    last_plan: Option<Plan>,
    replans: usize,
}

impl<'a> MpcController<'a> {
    pub fn new(model: &'a Model, params: &'a ParamBundle, cfg: PlannerConfig) -> Result<Self> {
        model.planning()?;
        cfg.validate()?;
        Ok(Self {
            model,
            params,
            cfg,
            goal_latent: None,
            last_plan: None,
            replans: 0,
        })
    }

    pub fn begin_episode(&mut self, goal: &Goal) -> Result<()> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let g = self.model.encode_goal(&mut tape, &bound, goal)?;
        self.goal_latent = Some(tape.value(g).clone());
        self.last_plan = None;
        self.replans = 0;
        Ok(())
    }

    /// Plan from `observation` and return the first planned action.
    pub fn act(&mut self, observation: &Tensor) -> Result<Vec<f64>> {
        let goal = self
            .goal_latent
            .clone()
            .ok_or_else(|| Error::contract("episode not started"))?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = self.model.encode(&mut tape, &bound, observation)?;
        let g = tape.constant(goal);
        let dynamics = self.model.bind(bound);
        let plan = refine_on_tape(
            &dynamics,
            &mut tape,
            x,
            g,
            &self.cfg,
            InnerGradient::Detached,
        )?
        .to_plan(&tape)?;
        let action = plan.first_action().to_vec();
        self.last_plan = Some(plan);
        self.replans += 1;
        Ok(action)
    }

    pub fn last_plan(&self) -> Option<&Plan> {
        self.last_plan.as_ref()
    }

    /// Plans computed since the episode began.
    pub fn replans(&self) -> usize {
        self.replans
    }

    pub fn goal_latent(&self) -> Option<&Tensor> {
        self.goal_latent.as_ref()
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.cfg
    }
}
