use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use super::matrix::parse_switch;

use crate::datastore::Trajectory;
use crate::error::{Error, Result};
use crate::imitation::{train, TrainConfig, TrainData};
use crate::kv;
use crate::models::{GoalMode, Method, MethodConfig, Model};
use crate::netblocks::{ConvEncoderSpec, ConvLayerSpec, ParamBundle};
use crate::par;
use crate::planner::{
    euclidean, plan_endpoint_deviation, KinematicReadout, PlanInit, PlannerConfig,
};
use crate::worlds::{demo_seed, place, render, TaskId, TaskSpec, WorldState, AGENT_RADIUS, ARENA};

/// Settings of the vector-goal extrapolation study.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtrapolationConfig {
    /// Number of training trajectories taken from the data.
    pub trajectories: usize,
    /// Candidate `(H, U)` pairs.
    pub grid: Vec<(usize, usize)>,
    pub train: TrainConfig,
    pub step_size: f64,
    pub huber_delta: f64,
    pub plan_init: PlanInit,
    pub encoder_layers: Vec<ConvLayerSpec>,
    pub latent: usize,
    /// Fresh placements used for selection and testing.
    pub probes: usize,
    pub probe_seed: u64,
    /// Offsets added to the goal's z coordinate at test time.
    pub z_offsets: Vec<f64>,
    pub workers: usize,
}

impl Default for ExtrapolationConfig {
    fn default() -> Self {
        let planner = PlannerConfig::default();
        Self {
            trajectories: 21,
            grid: parse_grid("H=3,5,8;U=1,2,5").unwrap(),
            train: TrainConfig::default(),
            step_size: planner.step_size,
            huber_delta: planner.huber_delta,
            plan_init: planner.init,
            encoder_layers: ConvEncoderSpec::default().layers,
            latent: ConvEncoderSpec::default().latent,
            probes: 8,
            probe_seed: 0x7072_6F62,
            z_offsets: vec![-0.2, -0.1, 0.1, 0.2],
            workers: 1,
        }
    }
}

impl ExtrapolationConfig {
    /// Apply `key = value` settings on top of `self`.
    pub fn apply(&mut self, pairs: &[(String, String)], origin: &Path) -> Result<()> {
        for (key, value) in pairs {
            let v = value.as_str();
            match key.as_str() {
                "trajectories" => self.trajectories = kv::parse_value(key, v, origin)?,
                "grid" => self.grid = parse_grid(v)?,
                "epochs" => self.train.epochs = kv::parse_value(key, v, origin)?,
                "seed" => self.train.seed = kv::parse_value(key, v, origin)?,
                "batch_size" => self.train.batch_size = kv::parse_value(key, v, origin)?,
                "learning_rate" => self.train.adam.learning_rate = kv::parse_value(key, v, origin)?,
                "second_order" => self.train.second_order = parse_switch(key, v, origin)?,
                "samples_per_epoch" => {
                    self.train.samples_per_epoch = Some(kv::parse_value(key, v, origin)?)
                }
                "step_size" => self.step_size = kv::parse_value(key, v, origin)?,
                "huber_delta" => self.huber_delta = kv::parse_value(key, v, origin)?,
                "plan_init" => {
                    self.plan_init = PlanInit::parse(v).ok_or_else(|| {
                        Error::format(origin, "`plan_init` is `zeros` or `policy`")
                    })?
                }
                "latent" => self.latent = kv::parse_value(key, v, origin)?,
                "encoder.layers" => {
                    self.encoder_layers = ConvLayerSpec::parse_list(v)
                        .ok_or_else(|| Error::format(origin, "bad value for `encoder.layers`"))?
                }
                "probes" => self.probes = kv::parse_value(key, v, origin)?,
                "probe_seed" => self.probe_seed = kv::parse_value(key, v, origin)?,
                "z_offsets" => {
                    self.z_offsets = v
                        .split(',')
                        .map(|x| kv::parse_value(key, x.trim(), origin))
                        .collect::<Result<_>>()?
                }
                "workers" => self.workers = kv::parse_value(key, v, origin)?,
                other => return Err(Error::format(origin, format!("unknown key `{other}`"))),
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.trajectories == 0 || self.probes == 0 {
            return Err(Error::contract(
                "the study needs training trajectories and probes",
            ));
        }
        if self.grid.is_empty() || self.z_offsets.is_empty() {
            return Err(Error::contract(
                "the study needs a grid and at least one z offset",
            ));
        }
        self.train.validate()?;
        for &(h, u) in &self.grid {
            self.planner(h, u).validate()?;
        }
        Ok(())
    }

    pub fn planner(&self, horizon: usize, updates: usize) -> PlannerConfig {
        PlannerConfig {
            horizon,
            updates,
            step_size: self.step_size,
            huber_delta: self.huber_delta,
            init: self.plan_init,
        }
    }

    pub fn method_config(
        &self,
        horizon: usize,
        updates: usize,
        render_size: usize,
    ) -> MethodConfig {
        let encoder =
            ConvEncoderSpec::for_size(render_size, self.encoder_layers.clone(), self.latent);
        let mut config = MethodConfig::new(Method::Cpn)
            .with_encoder(encoder)
            .with_goal_mode(GoalMode::Vector);
        config.second_order = self.train.second_order;
        config.planner = Some(self.planner(horizon, updates));
        config
    }
}

/// `"H=3,5,8;U=1,2,5"` into the cartesian product of horizons and updates.
pub fn parse_grid(text: &str) -> Result<Vec<(usize, usize)>> {
    let mut hs = None;
    let mut us = None;
    for part in text.split(';') {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::contract(format!("grid part `{part}` is not `KEY=v,v`")))?;
        let vals: Vec<usize> = v
            .split(',')
            .map(|x| {
                x.trim()
                    .parse()
                    .map_err(|_| Error::contract(format!("bad grid value `{x}`")))
            })
            .collect::<Result<_>>()?;
        match k.trim() {
            "H" | "h" => hs = Some(vals),
            "U" | "u" => us = Some(vals),
            other => return Err(Error::contract(format!("unknown grid key `{other}`"))),
        }
    }
    let (hs, us) = match (hs, us) {
        (Some(h), Some(u)) => (h, u),
        _ => return Err(Error::contract("the grid needs both H and U")),
    };
    Ok(hs
        .iter()
        .flat_map(|&h| us.iter().map(move |&u| (h, u)))
        .collect())
}

/// Deviations of one trained `(H, U)` cell, averaged over probes.
#[derive(Clone, Debug, PartialEq)]
pub struct GridCell {
    pub horizon: usize,
    pub updates: usize,
    pub final_loss: f64,
    /// On the training placements and their goals.
    pub train_deviation: f64,
    /// On fresh placements with goals from the training distribution.
    pub heldin_deviation: f64,
    /// On fresh placements with z-offset goals.
    pub offset_deviation: f64,
    pub offset_deviation_z: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtrapolationReport {
    pub cells: Vec<GridCell>,
    /// Index of the cell with the lowest held-in deviation.
    pub selected: usize,
    /// Zero-plan deviation on the z-offset goals: the distance from start to goal.
    pub zero_plan_deviation: f64,
    pub zero_plan_deviation_z: f64,
    pub training_trajectories: usize,
}

impl ExtrapolationReport {
    pub fn selected_cell(&self) -> &GridCell {
        &self.cells[self.selected]
    }

    /// `1 - offset / zero-plan` deviation for the selected cell.
    pub fn reduction(&self) -> f64 {
        1.0 - self.selected_cell().offset_deviation / self.zero_plan_deviation
    }

    pub fn to_text(&self) -> String {
        let s = self.selected_cell();
        let mut out = format!(
            "# trajectories {}\n# selected H={} U={}\n# zero_plan_deviation {:.9}\n# zero_plan_deviation_z {:.9}\n# reduction {:.9}\n",
            self.training_trajectories,
            s.horizon,
            s.updates,
            self.zero_plan_deviation,
            self.zero_plan_deviation_z,
            self.reduction()
        );
        out.push_str("H\tU\tfinal_loss\ttrain_dev\theldin_dev\toffset_dev\toffset_dev_z\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.9}\t{:.9}\t{:.9}\t{:.9}\t{:.9}",
                c.horizon,
                c.updates,
                c.final_loss,
                c.train_deviation,
                c.heldin_deviation,
                c.offset_deviation,
                c.offset_deviation_z
            );
        }
        out
    }
}

fn readout(spec: &TaskSpec, state: &WorldState) -> KinematicReadout {
    let edge = ARENA - AGENT_RADIUS;
    KinematicReadout {
        start: state.agent.to_vec(),
        scale: spec.action_scale,
        bounds: Some((-edge, edge)),
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

struct Probe {
    state: WorldState,
    observation: crate::diffcore::Tensor,
}

fn probe(spec: &TaskSpec, state: WorldState) -> Probe {
    Probe {
        observation: render(spec, &state).to_tensor(),
        state,
    }
}

fn offset_goal(state: &WorldState, dz: f64) -> [f64; 3] {
    let mut g = state.goal_vector();
    g[2] += dz;
    g
}

fn deviation(
    model: &Model,
    params: &ParamBundle,
    spec: &TaskSpec,
    p: &Probe,
    goal: [f64; 3],
) -> Result<(f64, f64)> {
    let ro = readout(spec, &p.state);
    let (dev, plan) = plan_endpoint_deviation(
        model,
        params,
        &p.observation,
        goal,
        &ro,
        model.config().planner()?,
    )?;
    let end = crate::planner::EndpointReadout::endpoint(&ro, &plan);
    Ok((dev, (end[2] - goal[2]).abs()))
}

/// Train a vector-goal CPN per grid cell on reach3d trajectories whose goals
/// share one z, select `(H, U)` by held-in endpoint deviation, and measure
/// deviation on goals offset along z against the zero plan.
pub fn extrapolation_study(
    cfg: &ExtrapolationConfig,
    spec: &TaskSpec,
    trajectories: &[Trajectory],
) -> Result<ExtrapolationReport> {
    cfg.validate()?;
    if spec.id != TaskId::Reach3d {
        return Err(Error::contract("the extrapolation study runs on reach3d"));
    }
    if trajectories.len() < cfg.trajectories {
        return Err(Error::contract(format!(
            "the study needs {} trajectories, got {}",
            cfg.trajectories,
            trajectories.len()
        )));
    }
    let trajs = &trajectories[..cfg.trajectories];
    let mut train_states = Vec::with_capacity(trajs.len());
    for t in trajs {
        if t.task != TaskId::Reach3d {
            return Err(Error::contract(
                "training trajectories must come from reach3d",
            ));
        }
        train_states.push(place(spec, t.seed)?);
    }
    let goals: Vec<[f64; 3]> = train_states.iter().map(|s| s.goal_vector()).collect();
    if goals.iter().any(|g| g[2] != goals[0][2]) {
        return Err(Error::contract(
            "training goals must share one z coordinate",
        ));
    }
    let used: BTreeSet<u64> = trajs.iter().map(|t| t.seed).collect();
    let mut probes = Vec::with_capacity(cfg.probes);
    let mut index = 0;
    while probes.len() < cfg.probes {
        let seed = demo_seed(cfg.probe_seed, index);
        index += 1;
        if index > 100 * cfg.probes as u64 {
            return Err(Error::contract("could not draw enough probe placements"));
        }
        let state = place(spec, seed)?;
        if !used.contains(&seed) && !state.success {
            probes.push(probe(spec, state));
        }
    }
    let train_probes: Vec<Probe> = train_states.into_iter().map(|s| probe(spec, s)).collect();

    let mut zero = Vec::new();
    let mut zero_z = Vec::new();
    for p in &probes {
        for &dz in &cfg.z_offsets {
            let g = offset_goal(&p.state, dz);
            zero.push(euclidean(&p.state.agent, &g));
            zero_z.push((p.state.agent[2] - g[2]).abs());
        }
    }

    let data = TrainData {
        trajectories: trajs,
        goal_vectors: Some(&goals),
    };
    let cells = par::with_workers(cfg.workers, || {
        par::map(&cfg.grid, |&(h, u)| -> Result<GridCell> {
            let model = Model::new(cfg.method_config(h, u, spec.render_size))?;
            let (params, record) = train(&model, None, &data, &cfg.train)?;
            let train_dev: Vec<f64> = train_probes
                .iter()
                .map(|p| deviation(&model, &params, spec, p, p.state.goal_vector()).map(|d| d.0))
                .collect::<Result<_>>()?;
            let heldin: Vec<f64> = probes
                .iter()
                .map(|p| deviation(&model, &params, spec, p, p.state.goal_vector()).map(|d| d.0))
                .collect::<Result<_>>()?;
            let mut off = Vec::new();
            let mut off_z = Vec::new();
            for p in &probes {
                for &dz in &cfg.z_offsets {
                    let (d, dzv) = deviation(&model, &params, spec, p, offset_goal(&p.state, dz))?;
                    off.push(d);
                    off_z.push(dzv);
                }
            }
            Ok(GridCell {
                horizon: h,
                updates: u,
                final_loss: record.losses().last().copied().unwrap_or(f64::NAN),
                train_deviation: mean(&train_dev),
                heldin_deviation: mean(&heldin),
                offset_deviation: mean(&off),
                offset_deviation_z: mean(&off_z),
            })
        })
    });
    let cells = par::collect_ordered(cells)?;
    let selected = cells
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.heldin_deviation.total_cmp(&b.1.heldin_deviation))
        .map(|(i, _)| i)
        .unwrap();
    Ok(ExtrapolationReport {
        cells,
        selected,
        zero_plan_deviation: mean(&zero),
        zero_plan_deviation_z: mean(&zero_z),
        training_trajectories: trajs.len(),
    })
}
