//! The four compared methods assembled from a shared image encoder: reactive
//! behavior cloning (BC), goal-conditioned behavior cloning (TE-BC), and the
//! two planning models (UPN, CPN) built on a combined policy and dynamics
//! network.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::netblocks::{
    BoundParams, ConvEncoder, ConvEncoderSpec, Dense, LayerKind, Linear, ParamBundle,
};
use crate::planner::{LatentDynamics, PlannerConfig};

/// Default action width.
pub const ACTION_WIDTH: usize = 4;
/// Default hidden width of the policy/dynamics layers.
pub const HIDDEN_WIDTH: usize = 32;
/// Default latent width of the encoder.
pub const LATENT_WIDTH: usize = 128;
/// Width of a goal given as a position vector.
pub const GOAL_VECTOR_WIDTH: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Bc,
    TeBc,
    Upn,
    Cpn,
}

impl Method {
    /// Ladder order used in reports.
    pub const ALL: [Method; 4] = [Method::Bc, Method::TeBc, Method::Upn, Method::Cpn];

    pub fn is_planning(self) -> bool {
        matches!(self, Method::Upn | Method::Cpn)
    }

    /// Whether the goal embedding is an input of the network itself.
    pub fn conditions_on_goal(self) -> bool {
        matches!(self, Method::TeBc | Method::Cpn)
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Bc => "BC",
            Method::TeBc => "TE-BC",
            Method::Upn => "UPN",
            Method::Cpn => "CPN",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Method::Bc => "bc",
            Method::TeBc => "tebc",
            Method::Upn => "upn",
            Method::Cpn => "cpn",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "bc" => Ok(Method::Bc),
            "tebc" => Ok(Method::TeBc),
            "upn" => Ok(Method::Upn),
            "cpn" | "tecpn" => Ok(Method::Cpn),
            _ => Err(Error::contract(format!("unknown method `{s}`"))),
        }
    }
}

/// How goals reach the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GoalMode {
    /// Goal images share the observation encoder.
    Image,
    /// A 3-vector projected to the latent width by one linear layer.
    Vector,
}

/// A goal as handed to a model.
#[derive(Clone, Debug, PartialEq)]
pub enum Goal {
    Image(Tensor),
    Vector([f64; GOAL_VECTOR_WIDTH]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodConfig {
    pub method: Method,
    /// Present exactly for planning methods.
    pub planner: Option<PlannerConfig>,
    pub latent: usize,
    pub hidden: usize,
    pub actions: usize,
    pub second_order: bool,
    pub encoder: ConvEncoderSpec,
    pub goal_mode: GoalMode,
}

impl MethodConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            planner: method.is_planning().then(PlannerConfig::default),
            latent: LATENT_WIDTH,
            hidden: HIDDEN_WIDTH,
            actions: ACTION_WIDTH,
            second_order: true,
            encoder: ConvEncoderSpec::default(),
            goal_mode: GoalMode::Image,
        }
    }

    /// Replace the encoder and adopt its latent width.
    pub fn with_encoder(mut self, encoder: ConvEncoderSpec) -> Self {
        self.latent = encoder.latent;
        self.encoder = encoder;
        self
    }

    pub fn with_goal_mode(mut self, mode: GoalMode) -> Self {
        self.goal_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 || self.hidden == 0 || self.actions == 0 {
            return Err(Error::contract("model widths must be positive"));
        }
        if self.encoder.latent != self.latent {
            return Err(Error::contract(format!(
                "encoder latent width {} differs from model latent width {}",
                self.encoder.latent, self.latent
            )));
        }
        match (&self.planner, self.method.is_planning()) {
            (Some(p), true) => p.validate()?,
            (None, false) => {}
            (Some(_), false) => {
                return Err(Error::contract(format!(
                    "{} is reactive and takes no planner settings",
                    self.method.label()
                )))
            }
            (None, true) => {
                return Err(Error::contract(format!(
                    "{} needs planner settings",
                    self.method.label()
                )))
            }
        }
        if self.goal_mode == GoalMode::Vector && !self.method.is_planning() {
            return Err(Error::contract(
                "vector goals are only supported by planning methods",
            ));
        }
        self.encoder.stage_shapes().map(|_| ())
    }

    pub fn planner(&self) -> Result<&PlannerConfig> {
        self.planner
            .as_ref()
            .ok_or_else(|| Error::contract(format!("{} does not plan", self.method.label())))
    }
}

/// Combined policy and dynamics network. A trunk layer feeds a policy branch
/// (`h → h → A`, clamped) and a dynamics branch over `[trunk, â]`
/// (`h + A → h → d`).
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyDynamicsModel {
    trunk: Dense,
    policy: [Dense; 2],
    dynamics: [Dense; 2],
    latent: usize,
    actions: usize,
    goal_input: bool,
}

impl PolicyDynamicsModel {
    pub fn new(
        kind: LayerKind,
        latent: usize,
        hidden: usize,
        actions: usize,
        goal_input: bool,
    ) -> Self {
        let trunk_in = if goal_input { 2 * latent } else { latent };
        Self {
            trunk: Dense::new(kind, "g.trunk", trunk_in, hidden),
            policy: [
                Dense::new(kind, "g.pol0", hidden, hidden),
                Dense::new(kind, "g.pol1", hidden, actions),
            ],
            dynamics: [
                Dense::new(kind, "g.dyn0", hidden + actions, hidden),
                Dense::new(kind, "g.dyn1", hidden, latent),
            ],
            latent,
            actions,
            goal_input,
        }
    }

    pub fn goal_input(&self) -> bool {
        self.goal_input
    }

    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        std::iter::once(&self.trunk)
            .chain(&self.policy)
            .chain(&self.dynamics)
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        std::iter::once(&mut self.trunk)
            .chain(&mut self.policy)
            .chain(&mut self.dynamics)
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(Dense::num_params).sum()
    }

    pub fn init(&self, bundle: &mut ParamBundle, rng: &mut ChaCha8Rng) -> Result<()> {
        self.layers().try_for_each(|l| l.init(bundle, rng))
    }

    pub fn pin_attenuation_ones(&mut self) {
        self.layers_mut().for_each(Dense::pin_ones);
    }

    fn check_width(tape: &Tape, id: NodeId, width: usize, what: &str) -> Result<()> {
        if tape.shape(id) != [width] {
            return Err(Error::contract(format!(
                "{what} must have width {width}, got shape {:?}",
                tape.shape(id)
            )));
        }
        Ok(())
    }

    /// One step. Returns the policy action and the predicted next latent; an
    /// `action_override` replaces the policy action as dynamics input.
    pub fn step(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        x: NodeId,
        goal: Option<NodeId>,
        action_override: Option<NodeId>,
    ) -> Result<(NodeId, NodeId)> {
        Self::check_width(tape, x, self.latent, "latent state")?;
        let input = match (self.goal_input, goal) {
            (true, Some(g)) => {
                Self::check_width(tape, g, self.latent, "goal latent")?;
                tape.concat(&[x, g])?
            }
            (true, None) => {
                return Err(Error::contract(
                    "this model is conditioned on a goal latent",
                ))
            }
            (false, _) => x,
        };
        let t = self.trunk.forward(tape, params, input)?;
        let t = tape.relu(t)?;
        let p = self.policy[0].forward(tape, params, t)?;
        let p = tape.relu(p)?;
        let p = self.policy[1].forward(tape, params, p)?;
        let action = tape.clamp(p, -1.0, 1.0)?;
        let used = match action_override {
            Some(a) => {
                Self::check_width(tape, a, self.actions, "action")?;
                a
            }
            None => action,
        };
        let h = tape.concat(&[t, used])?;
        let h = self.dynamics[0].forward(tape, params, h)?;
        let h = tape.relu(h)?;
        let next = self.dynamics[1].forward(tape, params, h)?;
        Ok((action, next))
    }
}

/// Reactive head `in → h → h → A` over the observation latent (BC) or the
/// observation and goal latents (TE-BC).
#[derive(Clone, Debug, PartialEq)]
pub struct ReactivePolicy {
    layers: [Linear; 3],
    goal_input: bool,
}

impl ReactivePolicy {
    pub fn new(latent: usize, hidden: usize, actions: usize, goal_input: bool) -> Self {
        let input = if goal_input { 2 * latent } else { latent };
        Self {
            layers: [
                Linear::new("head.l0", input, hidden),
                Linear::new("head.l1", hidden, hidden),
                Linear::new("head.l2", hidden, actions),
            ],
            goal_input,
        }
    }

    pub fn goal_input(&self) -> bool {
        self.goal_input
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Linear::num_params).sum()
    }

    pub fn init(&self, bundle: &mut ParamBundle, rng: &mut ChaCha8Rng) -> Result<()> {
        self.layers.iter().try_for_each(|l| l.init(bundle, rng))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        x: NodeId,
        goal: Option<NodeId>,
    ) -> Result<NodeId> {
        let input = match (self.goal_input, goal) {
            (true, Some(g)) => tape.concat(&[x, g])?,
            (true, None) => return Err(Error::contract("TE-BC needs a goal observation")),
            (false, _) => x,
        };
        let mut h = input;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, params, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        tape.clamp(h, -1.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelCore {
    Reactive(ReactivePolicy),
    Planning(PolicyDynamicsModel),
}

/// Encoder plus reactive head or policy/dynamics network for one method.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: MethodConfig,
    encoder: ConvEncoder,
    goal_projection: Option<Linear>,
    core: ModelCore,
}

impl Model {
    pub fn new(config: MethodConfig) -> Result<Self> {
        config.validate()?;
        let encoder = ConvEncoder::new("enc", config.encoder.clone())?;
        let goal_projection = (config.goal_mode == GoalMode::Vector)
            .then(|| Linear::new("goal", GOAL_VECTOR_WIDTH, config.latent));
        let (d, h, a) = (config.latent, config.hidden, config.actions);
        let core = match config.method {
            Method::Bc => ModelCore::Reactive(ReactivePolicy::new(d, h, a, false)),
            Method::TeBc => ModelCore::Reactive(ReactivePolicy::new(d, h, a, true)),
            Method::Upn => {
                ModelCore::Planning(PolicyDynamicsModel::new(LayerKind::Plain, d, h, a, false))
            }
            Method::Cpn => ModelCore::Planning(PolicyDynamicsModel::new(
                LayerKind::Neuromodulated,
                d,
                h,
                a,
                true,
            )),
        };
        Ok(Self {
            config,
            encoder,
            goal_projection,
            core,
        })
    }

    pub fn config(&self) -> &MethodConfig {
        &self.config
    }

    pub fn method(&self) -> Method {
        self.config.method
    }

    pub fn encoder(&self) -> &ConvEncoder {
        &self.encoder
    }

    pub fn core(&self) -> &ModelCore {
        &self.core
    }

    pub fn latent_width(&self) -> usize {
        self.config.latent
    }

    pub fn action_width(&self) -> usize {
        self.config.actions
    }

    pub fn num_params(&self) -> usize {
        let core = match &self.core {
            ModelCore::Reactive(r) => r.num_params(),
            ModelCore::Planning(p) => p.num_params(),
        };
        self.encoder.num_params()
            + self.goal_projection.as_ref().map_or(0, Linear::num_params)
            + core
    }

    /// Seeded initial parameters.
    pub fn init_params(&self, seed: u64) -> Result<ParamBundle> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bundle = ParamBundle::new();
        self.encoder.init(&mut bundle, &mut rng)?;
        if let Some(g) = &self.goal_projection {
            g.init(&mut bundle, &mut rng)?;
        }
        match &self.core {
            ModelCore::Reactive(r) => r.init(&mut bundle, &mut rng)?,
            ModelCore::Planning(p) => p.init(&mut bundle, &mut rng)?,
        }
        Ok(bundle)
    }

    /// Check that a bundle has exactly the tensors this model expects.
    pub fn check_params(&self, params: &ParamBundle) -> Result<()> {
        let reference = self.init_params(0)?;
        if !reference.same_layout(params) {
            return Err(Error::contract(format!(
                "parameter bundle does not match the {} layout",
                self.method().label()
            )));
        }
        Ok(())
    }

    pub fn planning(&self) -> Result<&PolicyDynamicsModel> {
        match &self.core {
            ModelCore::Planning(p) => Ok(p),
            ModelCore::Reactive(_) => Err(Error::contract(format!(
                "{} has no dynamics model",
                self.method().label()
            ))),
        }
    }

    pub fn reactive(&self) -> Result<&ReactivePolicy> {
        match &self.core {
            ModelCore::Reactive(r) => Ok(r),
            ModelCore::Planning(_) => Err(Error::contract(format!(
                "{} is not reactive",
                self.method().label()
            ))),
        }
    }

    /// Test hook: fix every attenuation of a CPN model to 1.
    pub fn pin_attenuation_ones(&mut self) {
        if let ModelCore::Planning(p) = &mut self.core {
            p.pin_attenuation_ones();
        }
    }

    /// Encode an `[84, 84, 3]` observation image.
    pub fn encode(&self, tape: &mut Tape, params: &BoundParams, image: &Tensor) -> Result<NodeId> {
        self.encoder.encode_image(tape, params, image)
    }

    /// Goal latent: the encoded goal image, or the projected goal vector.
    pub fn encode_goal(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        goal: &Goal,
    ) -> Result<NodeId> {
        match (goal, &self.goal_projection) {
            (Goal::Image(img), None) => self.encode(tape, params, img),
            (Goal::Vector(v), Some(proj)) => {
                let g = tape.constant(Tensor::vector(v.to_vec()));
                proj.forward(tape, params, g)
            }
            (Goal::Image(_), Some(_)) => {
                Err(Error::contract("model expects a goal vector, got an image"))
            }
            (Goal::Vector(_), None) => {
                Err(Error::contract("model expects a goal image, got a vector"))
            }
        }
    }

    /// Reactive action for BC / TE-BC.
    pub fn reactive_action(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        observation: &Tensor,
        goal: Option<&Tensor>,
    ) -> Result<NodeId> {
        let head = self.reactive()?;
        let x = self.encode(tape, params, observation)?;
        let g = match (head.goal_input(), goal) {
            (true, Some(img)) => Some(self.encode(tape, params, img)?),
            (true, None) => return Err(Error::contract("TE-BC needs a goal observation")),
            (false, _) => None,
        };
        head.forward(tape, params, x, g)
    }

    /// One policy/dynamics step from latents.
    pub fn policy_dynamics_step(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        x: NodeId,
        goal: Option<NodeId>,
        action_override: Option<NodeId>,
    ) -> Result<(NodeId, NodeId)> {
        self.planning()?
            .step(tape, params, x, goal, action_override)
    }

    /// A step conditioned on a goal position vector.
    pub fn vector_goal_step(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        x: NodeId,
        goal: [f64; GOAL_VECTOR_WIDTH],
    ) -> Result<(NodeId, NodeId)> {
        if self.config.goal_mode != GoalMode::Vector {
            return Err(Error::contract("model was not built for vector goals"));
        }
        let g = self.encode_goal(tape, params, &Goal::Vector(goal))?;
        self.policy_dynamics_step(tape, params, x, Some(g), None)
    }

    /// Pair the model with parameters bound on a tape.
    pub fn bind<'a>(&'a self, params: BoundParams) -> BoundModel<'a> {
        BoundModel {
            model: self,
            params,
        }
    }

    /// A UPN model and parameters equivalent to this CPN with attenuations
    /// fixed at 1 and a zero goal latent: the trunk keeps the observation
    /// columns of its weight, attenuator parameters are dropped.
    pub fn reduce_to_upn(&self, params: &ParamBundle) -> Result<(Model, ParamBundle)> {
        if self.method() != Method::Cpn {
            return Err(Error::contract("only CPN reduces to UPN"));
        }
        let mut config = self.config.clone();
        config.method = Method::Upn;
        let upn = Model::new(config)?;
        let mut out = ParamBundle::new();
        for (name, _) in upn.init_params(0)?.iter() {
            let src = params.get(name)?;
            let value = if name == "g.trunk.w" {
                let (h, d) = (src.shape()[0], self.config.latent);
                let data = (0..h)
                    .flat_map(|r| src.data()[r * 2 * d..r * 2 * d + d].to_vec())
                    .collect();
                Tensor::new(vec![h, d], data)?
            } else {
                src.clone()
            };
            out.insert(name.clone(), value)?;
        }
        Ok((upn, out))
    }
}

/// A planning model with parameters bound on a tape.
pub struct BoundModel<'a> {
    pub model: &'a Model,
    pub params: BoundParams,
}

impl LatentDynamics for BoundModel<'_> {
    fn latent_width(&self) -> usize {
        self.model.latent_width()
    }

    fn action_width(&self) -> usize {
        self.model.action_width()
    }

    fn step(
        &self,
        tape: &mut Tape,
        x: NodeId,
        goal: Option<NodeId>,
        action: Option<NodeId>,
    ) -> Result<(NodeId, NodeId)> {
        self.model
            .policy_dynamics_step(tape, &self.params, x, goal, action)
    }
}

#[cfg(test)]
mod tests;
