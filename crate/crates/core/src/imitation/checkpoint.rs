use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::kv;
use crate::models::{GoalMode, Method, MethodConfig, Model};
use crate::netblocks::{ConvEncoderSpec, ConvLayerSpec, ParamBundle};
use crate::planner::{PlanInit, PlannerConfig};

/// Sidecar describing a checkpoint: enough to rebuild the model and to
/// trace where the parameters came from.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub config: MethodConfig,
    pub seed: u64,
    pub epochs: usize,
    pub holdout: Option<String>,
    pub checksum: String,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

impl CheckpointMeta {
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let e = &c.encoder;
        let mut out = format!(
            "method = {}\nseed = {}\nepochs = {}\nholdout = {}\nchecksum = {}\nsecond_order = {}\n\
             latent = {}\nhidden = {}\nactions = {}\ngoal_mode = {}\nencoder.input = {}x{}x{}\nencoder.layers = {}\n",
            c.method,
            self.seed,
            self.epochs,
            self.holdout.as_deref().unwrap_or("-"),
            self.checksum,
            c.second_order,
            c.latent,
            c.hidden,
            c.actions,
            match c.goal_mode {
                GoalMode::Image => "image",
                GoalMode::Vector => "vector",
            },
            e.height,
            e.width,
            e.channels,
            ConvLayerSpec::format_list(&e.layers),
        );
        if let Some(p) = &c.planner {
            out.push_str(&format!(
                "horizon = {}\nupdates = {}\nstep_size = {}\nhuber_delta = {}\nplan_init = {}\n",
                p.horizon,
                p.updates,
                p.step_size,
                p.huber_delta,
                p.init.name()
            ));
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let pairs = kv::parse(text, origin)?;
        let get = |k: &str| -> Result<&str> {
            pairs
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::format(origin, format!("missing `{k}`")))
        };
        let num = |k: &str| -> Result<usize> { kv::parse_value(k, get(k)?, origin) };
        let bad = |k: &str| Error::format(origin, format!("bad value for `{k}`"));
        let method: Method = get("method")?.parse().map_err(|_| bad("method"))?;
        let dims: Vec<usize> = get("encoder.input")?
            .split('x')
            .map(|d| d.parse().map_err(|_| bad("encoder.input")))
            .collect::<Result<_>>()?;
        if dims.len() != 3 {
            return Err(bad("encoder.input"));
        }
        let layers = ConvLayerSpec::parse_list(get("encoder.layers")?)
            .ok_or_else(|| bad("encoder.layers"))?;
        let latent = num("latent")?;
        let mut config = MethodConfig::new(method).with_encoder(ConvEncoderSpec {
            height: dims[0],
            width: dims[1],
            channels: dims[2],
            layers,
            latent,
        });
        config.hidden = num("hidden")?;
        config.actions = num("actions")?;
        config.second_order = kv::parse_value("second_order", get("second_order")?, origin)?;
        config.goal_mode = match get("goal_mode")? {
            "image" => GoalMode::Image,
            "vector" => GoalMode::Vector,
            _ => return Err(bad("goal_mode")),
        };
        if method.is_planning() {
            config.planner = Some(PlannerConfig {
                horizon: num("horizon")?,
                updates: num("updates")?,
                step_size: kv::parse_value("step_size", get("step_size")?, origin)?,
                huber_delta: kv::parse_value("huber_delta", get("huber_delta")?, origin)?,
                init: PlanInit::parse(get("plan_init")?).ok_or_else(|| bad("plan_init"))?,
            });
        }
        let holdout = match get("holdout")? {
            "-" => None,
            h => Some(h.to_string()),
        };
        Ok(Self {
            config,
            seed: kv::parse_value("seed", get("seed")?, origin)?,
            epochs: num("epochs")?,
            holdout,
            checksum: get("checksum")?.to_string(),
        })
    }
}

/// Write `path` (`CPNP` parameters) and `path.meta`.
pub fn save_checkpoint(path: &Path, params: &ParamBundle, meta: &CheckpointMeta) -> Result<()> {
    if meta.checksum != params.checksum() {
        return Err(Error::contract(
            "checkpoint metadata checksum does not match the parameters",
        ));
    }
    let mut rounded = params.clone();
    rounded.round_to_f32();
    if rounded != *params {
        return Err(Error::contract(
            "round parameters to f32 before saving a checkpoint",
        ));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    params.save(path)?;
    let side = sidecar(path);
    fs::write(&side, meta.to_text()).map_err(|e| Error::io(&side, e))
}

/// Read a checkpoint and rebuild its model. Fails when the parameters do not
/// match the recorded checksum or the model layout.
pub fn load_checkpoint(path: &Path) -> Result<(Model, ParamBundle, CheckpointMeta)> {
    let params = ParamBundle::load(path)?;
    let side = sidecar(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta = CheckpointMeta::parse(&text, &side)?;
    if params.checksum() != meta.checksum {
        return Err(Error::format(
            path,
            "parameter checksum does not match the sidecar",
        ));
    }
    let model = Model::new(meta.config.clone())?;
    model.check_params(&params)?;
    Ok((model, params, meta))
}
