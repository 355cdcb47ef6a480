use std::fs;
use std::path::Path;

use super::{Range, TaskId, TaskSpec};
use crate::datastore::sha256_hex;
use crate::error::{Error, Result};
use crate::kv;

/// Task list and shared settings. The text form is `key = value` lines:
///
/// ```text
/// tasks = reach,push,button,lever,reach3d
/// horizon = 100
/// action_scale = 0.05
/// render_size = 84
/// push.success_radius = 0.03
/// push.block.x = -0.15,0.05
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    specs: Vec<TaskSpec>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            specs: TaskId::ALL.into_iter().map(TaskSpec::new).collect(),
        }
    }
}

impl SuiteConfig {
    pub fn new(specs: Vec<TaskSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::contract("a suite needs at least one task"));
        }
        let first = &specs[0];
        for s in &specs {
            s.validate()?;
            if s.horizon != first.horizon
                || s.action_scale != first.action_scale
                || s.render_size != first.render_size
            {
                return Err(Error::contract(
                    "tasks in a suite share horizon, action scale and render size",
                ));
            }
        }
        let mut ids: Vec<TaskId> = specs.iter().map(|s| s.id).collect();
        ids.sort();
        ids.dedup();
        if ids.len() != specs.len() {
            return Err(Error::contract("a task is listed twice"));
        }
        let mut specs = specs;
        specs.sort_by_key(|s| s.id);
        Ok(Self { specs })
    }

    pub fn specs(&self) -> &[TaskSpec] {
        &self.specs
    }

    pub fn tasks(&self) -> Vec<TaskId> {
        self.specs.iter().map(|s| s.id).collect()
    }

    pub fn spec(&self, task: TaskId) -> Result<&TaskSpec> {
        self.specs
            .iter()
            .find(|s| s.id == task)
            .ok_or_else(|| Error::contract(format!("task {task} is not in the suite")))
    }

    pub fn to_text(&self) -> String {
        let first = &self.specs[0];
        let names: Vec<&str> = self.specs.iter().map(|s| s.id.name()).collect();
        let mut out = format!(
            "tasks = {}\nhorizon = {}\naction_scale = {}\nrender_size = {}\n",
            names.join(","),
            first.horizon,
            first.action_scale,
            first.render_size
        );
        for s in &self.specs {
            out.push_str(&format!("{}.success_radius = {}\n", s.id, s.success_radius));
            for (name, r) in &s.bounds {
                out.push_str(&format!("{}.{name} = {},{}\n", s.id, r.lo, r.hi));
            }
        }
        out
    }

    /// Hex SHA-256 of the canonical text form.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    /// Parse a config; unspecified values keep their defaults.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let pairs = kv::parse(text, origin)?;
        let get = |k: &str| {
            pairs
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
        };
        let ids: Vec<TaskId> = match get("tasks") {
            Some(list) => list
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse()
                        .map_err(|_| Error::format(origin, format!("unknown task `{t}`")))
                })
                .collect::<Result<_>>()?,
            None => TaskId::ALL.to_vec(),
        };
        let mut specs: Vec<TaskSpec> = ids.into_iter().map(TaskSpec::new).collect();
        for (key, value) in &pairs {
            match key.as_str() {
                "tasks" => {}
                "horizon" => {
                    let v = kv::parse_value(key, value, origin)?;
                    specs.iter_mut().for_each(|s| s.horizon = v);
                }
                "action_scale" => {
                    let v = kv::parse_value(key, value, origin)?;
                    specs.iter_mut().for_each(|s| s.action_scale = v);
                }
                "render_size" => {
                    let v = kv::parse_value(key, value, origin)?;
                    specs.iter_mut().for_each(|s| s.render_size = v);
                }
                other => {
                    let (task, rest) = other
                        .split_once('.')
                        .ok_or_else(|| Error::format(origin, format!("unknown key `{other}`")))?;
                    let task: TaskId = task
                        .parse()
                        .map_err(|_| Error::format(origin, format!("unknown key `{other}`")))?;
                    let spec = specs.iter_mut().find(|s| s.id == task).ok_or_else(|| {
                        Error::format(origin, format!("`{other}` names a task not in the list"))
                    })?;
                    if rest == "success_radius" {
                        spec.success_radius = kv::parse_value(key, value, origin)?;
                    } else if spec.bounds.contains_key(rest) {
                        let (lo, hi) = value.split_once(',').ok_or_else(|| {
                            Error::format(origin, format!("`{key}` needs `lo,hi`"))
                        })?;
                        let lo = kv::parse_value(key, lo.trim(), origin)?;
                        let hi = kv::parse_value(key, hi.trim(), origin)?;
                        spec.bounds.insert(rest.to_string(), Range::new(lo, hi));
                    } else {
                        return Err(Error::format(origin, format!("unknown key `{other}`")));
                    }
                }
            }
        }
        Self::new(specs).map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}
