//! A deterministic kinematic manipulation suite: five tasks sharing one
//! 84x84x3 observation and 4-wide action interface, with seeded placements,
//! latched success predicates and scripted demonstrators.

mod render;
mod suite;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datastore::{Step, Trajectory};
use crate::error::{Error, Result};

pub use render::{fill, Image, Pane, Shape};
pub use suite::SuiteConfig;

/// Positions live in `[-ARENA, ARENA]` on every axis.
pub const ARENA: f64 = 0.5;
pub const ACTION_WIDTH: usize = 4;
/// Demonstrations generated per task.
pub const DEMOS_PER_TASK: usize = 100;
pub const AGENT_RADIUS: f64 = 0.04;
pub const TARGET_RADIUS: f64 = 0.04;
pub const BLOCK_HALF: f64 = 0.05;
pub const BUTTON_HALF: f64 = 0.05;
/// Press and grip range.
pub const INTERACT_RADIUS: f64 = 0.05;
pub const LEVER_THRESHOLD: f64 = 0.2;
pub const LEVER_TRAVEL: f64 = 0.3;
/// Where the demonstrator parks a gripped lever handle.
pub const LEVER_PARK: f64 = 0.25;
/// Training height of reach3d targets.
pub const REACH3D_TRAIN_Z: f64 = 0.1;

const SETTLE_TOL: f64 = 1e-9;

const BACKGROUND: [f32; 3] = [0.92, 0.92, 0.92];
const AGENT_COLOR: [f32; 3] = [0.1, 0.3, 0.9];
const TARGET_COLOR: [f32; 3] = [0.9, 0.2, 0.2];
const BLOCK_COLOR: [f32; 3] = [0.2, 0.7, 0.3];
const BUTTON_COLOR: [f32; 3] = [0.95, 0.8, 0.1];
const BUTTON_PRESSED_COLOR: [f32; 3] = [0.5, 0.35, 0.05];
const TRACK_COLOR: [f32; 3] = [0.6, 0.6, 0.6];
const HANDLE_COLOR: [f32; 3] = [0.6, 0.2, 0.7];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TaskId {
    Reach,
    Push,
    Button,
    Lever,
    Reach3d,
}

impl TaskId {
    pub const ALL: [TaskId; 5] = [
        TaskId::Reach,
        TaskId::Push,
        TaskId::Button,
        TaskId::Lever,
        TaskId::Reach3d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Reach => "reach",
            TaskId::Push => "push",
            TaskId::Button => "button",
            TaskId::Lever => "lever",
            TaskId::Reach3d => "reach3d",
        }
    }

    /// Number of position axes the agent moves along.
    pub fn dims(self) -> usize {
        if self == TaskId::Reach3d {
            3
        } else {
            2
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown task `{s}`")))
    }
}

/// Closed sampling interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn fixed(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.gen_range(self.lo..=self.hi)
        }
    }
}

/// Bound names each task samples, in draw order.
fn bound_names(task: TaskId) -> &'static [&'static str] {
    match task {
        TaskId::Reach => &["agent.x", "agent.y", "target.x", "target.y"],
        TaskId::Push => &["agent.x", "agent.y", "block.x", "block.y", "push.distance"],
        TaskId::Button => &["agent.x", "agent.y", "button.x", "button.y"],
        TaskId::Lever => &["agent.x", "agent.y", "handle.x", "handle.y"],
        TaskId::Reach3d => &["target.x", "target.y", "target.z", "start.offset"],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub id: TaskId,
    pub bounds: BTreeMap<String, Range>,
    pub horizon: usize,
    pub action_scale: f64,
    pub success_radius: f64,
    pub render_size: usize,
}

impl TaskSpec {
    pub fn new(id: TaskId) -> Self {
        let r = Range::new;
        let bounds: Vec<(&str, Range)> = match id {
            TaskId::Reach => vec![
                ("agent.x", r(-0.4, 0.4)),
                ("agent.y", r(-0.4, 0.4)),
                ("target.x", r(-0.4, 0.4)),
                ("target.y", r(-0.4, 0.4)),
            ],
            TaskId::Push => vec![
                ("agent.x", r(-0.45, -0.3)),
                ("agent.y", r(-0.4, 0.4)),
                ("block.x", r(-0.15, 0.05)),
                ("block.y", r(-0.3, 0.3)),
                ("push.distance", r(0.15, 0.3)),
            ],
            TaskId::Button => vec![
                ("agent.x", r(-0.4, 0.4)),
                ("agent.y", r(-0.4, 0.4)),
                ("button.x", r(-0.35, 0.35)),
                ("button.y", r(-0.35, 0.35)),
            ],
            TaskId::Lever => vec![
                ("agent.x", r(-0.4, 0.4)),
                ("agent.y", r(-0.4, 0.4)),
                ("handle.x", r(-0.35, 0.0)),
                ("handle.y", r(-0.35, 0.35)),
            ],
            TaskId::Reach3d => vec![
                ("target.x", r(-0.25, 0.25)),
                ("target.y", r(-0.25, 0.25)),
                ("target.z", Range::fixed(REACH3D_TRAIN_Z)),
                ("start.offset", r(-0.2, 0.2)),
            ],
        };
        Self {
            id,
            bounds: bounds
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            horizon: 100,
            action_scale: 0.05,
            success_radius: if id == TaskId::Push { 0.03 } else { 0.05 },
            render_size: 84,
        }
    }

    pub fn bound(&self, name: &str) -> Result<Range> {
        self.bounds
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("task {} has no bound `{name}`", self.id)))
    }

    pub fn validate(&self) -> Result<()> {
        for name in bound_names(self.id) {
            let b = self.bound(name)?;
            if !(b.lo <= b.hi) || !b.lo.is_finite() || !b.hi.is_finite() {
                return Err(Error::contract(format!(
                    "bound `{name}` of {} is empty",
                    self.id
                )));
            }
        }
        if let Some(extra) = self
            .bounds
            .keys()
            .find(|k| !bound_names(self.id).contains(&k.as_str()))
        {
            return Err(Error::contract(format!(
                "task {} has no bound `{extra}`",
                self.id
            )));
        }
        if self.horizon == 0
            || !(self.action_scale > 0.0)
            || !(self.success_radius > 0.0)
            || self.render_size < 8
        {
            return Err(Error::contract(format!(
                "invalid settings for task {}",
                self.id
            )));
        }
        Ok(())
    }

    /// The horizon limit must allow at least one full plan.
    pub fn check_plan_horizon(&self, horizon: usize) -> Result<()> {
        if self.horizon < horizon {
            return Err(Error::contract(format!(
                "episode limit {} is shorter than plan horizon {horizon}",
                self.horizon
            )));
        }
        Ok(())
    }
}

/// Task objects.
#[derive(Clone, Debug, PartialEq)]
pub enum Scene {
    Reach { target: [f64; 3] },
    Push { block: [f64; 3], goal: [f64; 3] },
    Button { button: [f64; 3], pressed: bool },
    Lever { handle: [f64; 3], start_x: f64 },
    Reach3d { target: [f64; 3] },
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub task: TaskId,
    pub agent: [f64; 3],
    pub scene: Scene,
    pub success: bool,
    pub step: usize,
}

fn dist(a: &[f64; 3], b: &[f64; 3], dims: usize) -> f64 {
    (0..dims).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

impl WorldState {
    /// Goal position in world coordinates: the reach target, the push goal,
    /// the button, or the lever's parked handle position.
    pub fn goal_vector(&self) -> [f64; 3] {
        match &self.scene {
            Scene::Reach { target } | Scene::Reach3d { target } => *target,
            Scene::Push { goal, .. } => *goal,
            Scene::Button { button, .. } => *button,
            Scene::Lever { handle, start_x } => [start_x + LEVER_PARK, handle[1], 0.0],
        }
    }

    fn solved(&self, spec: &TaskSpec) -> bool {
        match &self.scene {
            Scene::Reach { target } => dist(&self.agent, target, 2) < spec.success_radius,
            Scene::Reach3d { target } => dist(&self.agent, target, 3) < spec.success_radius,
            Scene::Push { block, goal } => dist(block, goal, 2) < spec.success_radius,
            Scene::Button { pressed, .. } => *pressed,
            Scene::Lever { handle, start_x } => handle[0] - start_x >= LEVER_THRESHOLD - 1e-12,
        }
    }
}

/// Draw a placement for `spec` from `seed`.
pub fn place(spec: &TaskSpec, seed: u64) -> Result<WorldState> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |name: &str| -> Result<f64> { Ok(spec.bound(name)?.sample(&mut rng)) };
    let (agent, scene) = match spec.id {
        TaskId::Reach => {
            let agent = [draw("agent.x")?, draw("agent.y")?, 0.0];
            (
                agent,
                Scene::Reach {
                    target: [draw("target.x")?, draw("target.y")?, 0.0],
                },
            )
        }
        TaskId::Push => {
            let agent = [draw("agent.x")?, draw("agent.y")?, 0.0];
            let block = [draw("block.x")?, draw("block.y")?, 0.0];
            let d = draw("push.distance")?;
            let goal = [(block[0] + d).min(ARENA - BLOCK_HALF), block[1], 0.0];
            (agent, Scene::Push { block, goal })
        }
        TaskId::Button => {
            let agent = [draw("agent.x")?, draw("agent.y")?, 0.0];
            let button = [draw("button.x")?, draw("button.y")?, 0.0];
            (
                agent,
                Scene::Button {
                    button,
                    pressed: false,
                },
            )
        }
        TaskId::Lever => {
            let agent = [draw("agent.x")?, draw("agent.y")?, 0.0];
            let handle = [draw("handle.x")?, draw("handle.y")?, 0.0];
            (
                agent,
                Scene::Lever {
                    handle,
                    start_x: handle[0],
                },
            )
        }
        TaskId::Reach3d => {
            let target = [draw("target.x")?, draw("target.y")?, draw("target.z")?];
            let mut agent = [0.0; 3];
            for (a, t) in agent.iter_mut().zip(target) {
                *a = (t + draw("start.offset")?).clamp(-ARENA + AGENT_RADIUS, ARENA - AGENT_RADIUS);
            }
            (agent, Scene::Reach3d { target })
        }
    };
    let mut state = WorldState {
        task: spec.id,
        agent,
        scene,
        success: false,
        step: 0,
    };
    state.success = state.solved(spec);
    Ok(state)
}

/// Pure kinematic transition. Actions are clamped to `[-1, 1]`, motion to
/// the arena.
pub fn step_state(spec: &TaskSpec, state: &WorldState, action: &[f64]) -> Result<WorldState> {
    if action.len() != ACTION_WIDTH {
        return Err(Error::contract(format!(
            "actions have width {ACTION_WIDTH}, got {}",
            action.len()
        )));
    }
    if state.step >= spec.horizon {
        return Err(Error::contract("episode already reached its horizon limit"));
    }
    let a: Vec<f64> = action.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
    let mut next = state.clone();
    let prev = state.agent;
    for i in 0..spec.id.dims() {
        next.agent[i] = (prev[i] + spec.action_scale * a[i]).clamp(-ARENA, ARENA);
    }
    let engage = a[3] > 0.5;
    match &mut next.scene {
        Scene::Push { block, .. } => {
            let reach = BLOCK_HALF + AGENT_RADIUS;
            let (dx, dy) = (block[0] - next.agent[0], block[1] - next.agent[1]);
            let (px, py) = (reach - dx.abs(), reach - dy.abs());
            if px > 0.0 && py > 0.0 {
                let limit = ARENA - BLOCK_HALF;
                if px <= py {
                    block[0] = (block[0] + dx.signum() * px).clamp(-limit, limit);
                } else {
                    block[1] = (block[1] + dy.signum() * py).clamp(-limit, limit);
                }
            }
        }
        Scene::Button { button, pressed } => {
            if engage && dist(&next.agent, button, 2) < INTERACT_RADIUS {
                *pressed = true;
            }
        }
        Scene::Lever { handle, start_x } => {
            if engage && dist(&prev, handle, 2) < INTERACT_RADIUS {
                handle[0] =
                    (handle[0] + next.agent[0] - prev[0]).clamp(*start_x, *start_x + LEVER_TRAVEL);
            }
        }
        Scene::Reach { .. } | Scene::Reach3d { .. } => {}
    }
    next.success = state.success || next.solved(spec);
    next.step += 1;
    Ok(next)
}

/// Proportional move toward `target` on the first `dims` axes.
fn toward(pos: &[f64; 3], target: &[f64; 3], scale: f64, dims: usize) -> [f64; ACTION_WIDTH] {
    let mut a = [0.0; ACTION_WIDTH];
    for i in 0..dims {
        a[i] = ((target[i] - pos[i]) / scale).clamp(-1.0, 1.0);
    }
    a
}

/// Scripted controller. Returns the action and whether the final waypoint
/// has been reached.
pub fn heuristic_action(spec: &TaskSpec, state: &WorldState) -> ([f64; ACTION_WIDTH], bool) {
    let s = spec.action_scale;
    let agent = &state.agent;
    match &state.scene {
        Scene::Reach { target } => (
            toward(agent, target, s, 2),
            dist(agent, target, 2) < SETTLE_TOL,
        ),
        Scene::Reach3d { target } => (
            toward(agent, target, s, 3),
            dist(agent, target, 3) < SETTLE_TOL,
        ),
        Scene::Push { block, goal } => {
            let reach = BLOCK_HALF + AGENT_RADIUS;
            let behind = (agent[1] - block[1]).abs() < SETTLE_TOL
                && agent[0] <= block[0] - reach + SETTLE_TOL;
            if behind {
                let t = [goal[0] - reach, block[1], 0.0];
                (toward(agent, &t, s, 2), dist(block, goal, 2) < 1e-6)
            } else {
                let t = [block[0] - reach - 0.02, block[1], 0.0];
                (toward(agent, &t, s, 2), false)
            }
        }
        Scene::Button { button, pressed } => {
            if dist(agent, button, 2) < SETTLE_TOL {
                ([0.0, 0.0, 0.0, 1.0], *pressed)
            } else {
                (toward(agent, button, s, 2), false)
            }
        }
        Scene::Lever { handle, start_x } => {
            if dist(agent, handle, 2) < SETTLE_TOL {
                let t = [start_x + LEVER_PARK, handle[1], 0.0];
                let mut a = toward(agent, &t, s, 2);
                a[3] = 1.0;
                (a, (agent[0] - t[0]).abs() < SETTLE_TOL)
            } else {
                (toward(agent, handle, s, 2), false)
            }
        }
    }
}

/// Run the demonstrator from `state` until the task is solved and the final
/// waypoint is reached. Returns every visited state and the actions taken.
pub fn run_heuristic(
    spec: &TaskSpec,
    start: WorldState,
    seed: u64,
) -> Result<(Vec<WorldState>, Vec<[f64; ACTION_WIDTH]>)> {
    let mut states = vec![start];
    let mut actions = Vec::new();
    loop {
        let state = states.last().unwrap();
        let (a, settled) = heuristic_action(spec, state);
        if state.success && settled {
            return Ok((states, actions));
        }
        if state.step >= spec.horizon {
            return Err(Error::DemonstratorFailure {
                task: spec.id.to_string(),
                seed,
            });
        }
        let next = step_state(spec, state, &a)?;
        actions.push(a);
        states.push(next);
    }
}

/// Render a state at `spec.render_size`. Two-dimensional tasks show the
/// arena from above; reach3d shows an x-y pane on the left and a z-y pane
/// on the right.
pub fn render(spec: &TaskSpec, state: &WorldState) -> Image {
    let n = spec.render_size;
    let mut img = Image::filled(n, n, BACKGROUND);
    let full = Pane {
        col0: 0,
        cols: n,
        rows: n,
    };
    let circle = |p: &[f64; 3], r| Shape::Circle {
        u: p[0],
        v: p[1],
        r,
    };
    match &state.scene {
        Scene::Reach { target } => {
            fill(&mut img, full, circle(target, TARGET_RADIUS), TARGET_COLOR)
        }
        Scene::Push { block, .. } => fill(
            &mut img,
            full,
            Shape::Rect {
                u: block[0],
                v: block[1],
                hu: BLOCK_HALF,
                hv: BLOCK_HALF,
            },
            BLOCK_COLOR,
        ),
        Scene::Button { button, pressed } => fill(
            &mut img,
            full,
            Shape::Rect {
                u: button[0],
                v: button[1],
                hu: BUTTON_HALF,
                hv: BUTTON_HALF,
            },
            if *pressed {
                BUTTON_PRESSED_COLOR
            } else {
                BUTTON_COLOR
            },
        ),
        Scene::Lever { handle, start_x } => {
            let half = (LEVER_TRAVEL + 0.04) / 2.0;
            fill(
                &mut img,
                full,
                Shape::Rect {
                    u: start_x + LEVER_TRAVEL / 2.0,
                    v: handle[1],
                    hu: half,
                    hv: 0.01,
                },
                TRACK_COLOR,
            );
            fill(
                &mut img,
                full,
                Shape::Rect {
                    u: handle[0],
                    v: handle[1],
                    hu: 0.03,
                    hv: 0.06,
                },
                HANDLE_COLOR,
            );
        }
        Scene::Reach3d { target } => {
            let left = Pane {
                col0: 0,
                cols: n / 2,
                rows: n,
            };
            let right = Pane {
                col0: n / 2,
                cols: n - n / 2,
                rows: n,
            };
            for (p, color, r) in [
                (target, TARGET_COLOR, TARGET_RADIUS),
                (&state.agent, AGENT_COLOR, AGENT_RADIUS),
            ] {
                fill(
                    &mut img,
                    left,
                    Shape::Circle {
                        u: p[0],
                        v: p[1],
                        r,
                    },
                    color,
                );
                fill(
                    &mut img,
                    right,
                    Shape::Circle {
                        u: p[2],
                        v: p[1],
                        r,
                    },
                    color,
                );
            }
            return img;
        }
    }
    fill(
        &mut img,
        full,
        circle(&state.agent, AGENT_RADIUS),
        AGENT_COLOR,
    );
    img
}

/// Start of an episode.
#[derive(Clone, Debug)]
pub struct Reset {
    pub state: WorldState,
    pub observation: Image,
    pub goal: Image,
}

/// Seeded placement, its observation, and the goal image rendered from the
/// demonstrator's solved configuration.
pub fn reset(spec: &TaskSpec, seed: u64) -> Result<Reset> {
    let state = place(spec, seed)?;
    let (states, _) = run_heuristic(spec, state.clone(), seed)?;
    let goal = render(spec, states.last().unwrap());
    Ok(Reset {
        observation: render(spec, &state),
        state,
        goal,
    })
}

/// One environment step with rendering.
pub fn step(
    spec: &TaskSpec,
    state: &WorldState,
    action: &[f64],
) -> Result<(WorldState, Image, bool)> {
    let next = step_state(spec, state, action)?;
    let obs = render(spec, &next);
    let success = next.success;
    Ok((next, obs, success))
}

/// Record one demonstration from `seed`, or `None` when the placement is
/// already solved (a demonstration needs at least one move).
pub fn demonstrate(spec: &TaskSpec, seed: u64) -> Result<Option<Trajectory>> {
    let start = place(spec, seed)?;
    let (states, actions) = run_heuristic(spec, start, seed)?;
    if actions.is_empty() {
        return Ok(None);
    }
    let mut steps: Vec<Step> = states
        .iter()
        .zip(&actions)
        .map(|(s, a)| Step {
            image: render(spec, s),
            action: a.iter().map(|&v| v as f32).collect(),
        })
        .collect();
    let last = render(spec, states.last().unwrap());
    steps.push(Step {
        image: last.clone(),
        action: vec![0.0; ACTION_WIDTH],
    });
    Trajectory::new(spec.id, seed, steps, last, true).map(Some)
}

/// Per-demonstration seeds derived from a base seed.
pub fn demo_seed(base: u64, index: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ 0x5851_F42D)
}

/// `n` successful demonstrations. Trivially solved or failed placements are
/// skipped in favor of the next derived seed, up to `10 n` attempts.
pub fn generate_demos(spec: &TaskSpec, n: usize, seed: u64) -> Result<Vec<Trajectory>> {
    if n == 0 {
        return Err(Error::contract("need at least one demonstration"));
    }
    let mut out = Vec::with_capacity(n);
    let mut last_failure = None;
    for index in 0..(10 * n as u64) {
        if out.len() == n {
            break;
        }
        let s = demo_seed(seed, index);
        match demonstrate(spec, s) {
            Ok(Some(t)) => out.push(t),
            Ok(None) => {}
            Err(e @ Error::DemonstratorFailure { .. }) => last_failure = Some(e),
            Err(e) => return Err(e),
        }
    }
    if out.len() < n {
        return Err(last_failure.unwrap_or(Error::DemonstratorFailure {
            task: spec.id.to_string(),
            seed,
        }));
    }
    Ok(out)
}
