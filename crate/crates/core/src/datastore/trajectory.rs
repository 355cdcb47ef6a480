use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::worlds::{Image, TaskId};

const MAGIC: &[u8; 4] = b"CPNT";
pub const FORMAT_VERSION: u32 = 1;
/// Magic, version, step count, action width and three image dims.
pub const HEADER_BYTES: usize = 4 + 4 * 6;

/// One observation and the action taken from it.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub image: Image,
    pub action: Vec<f32>,
}

/// A demonstration. The last step carries the final frame, which is also the
/// goal image, with a zero action.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub task: TaskId,
    pub seed: u64,
    pub steps: Vec<Step>,
    pub goal: Image,
    pub success: bool,
}

impl Trajectory {
    pub fn new(
        task: TaskId,
        seed: u64,
        steps: Vec<Step>,
        goal: Image,
        success: bool,
    ) -> Result<Self> {
        let t = Self {
            task,
            seed,
            steps,
            goal,
            success,
        };
        t.check()?;
        Ok(t)
    }

    fn check(&self) -> Result<()> {
        if self.steps.len() < 2 {
            return Err(Error::contract("a trajectory needs at least two steps"));
        }
        let dims = self.goal.dims();
        let width = self.steps[0].action.len();
        if width == 0 {
            return Err(Error::contract("trajectory actions are empty"));
        }
        for s in &self.steps {
            if s.image.dims() != dims || s.action.len() != width {
                return Err(Error::contract(
                    "trajectory steps disagree on image or action shape",
                ));
            }
        }
        if self.steps.last().unwrap().image != self.goal {
            return Err(Error::contract("goal image must equal the final frame"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn action_width(&self) -> usize {
        self.steps[0].action.len()
    }

    /// Actions widened to f64, zero beyond the last step so that windows
    /// starting near the end can be filled.
    pub fn action_window(&self, start: usize, len: usize) -> Vec<f64> {
        let a = self.action_width();
        let mut out = vec![0.0; len * a];
        for k in 0..len {
            if let Some(step) = self.steps.get(start + k) {
                for (o, &v) in out[k * a..(k + 1) * a].iter_mut().zip(&step.action) {
                    *o = v as f64;
                }
            }
        }
        out
    }

    /// Size of the encoded file in bytes.
    pub fn encoded_len(&self) -> usize {
        let img = self.goal.data().len();
        HEADER_BYTES + self.steps.len() * (img + self.action_width()) * 4 + img * 4
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check()?;
        if !self.success {
            return Err(Error::contract("only successful demonstrations are stored"));
        }
        let [h, w, c] = self.goal.dims();
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        for v in [
            FORMAT_VERSION,
            self.steps.len() as u32,
            self.action_width() as u32,
            h as u32,
            w as u32,
            c as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for s in &self.steps {
            s.image
                .data()
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            s.action
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        self.goal
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], task: TaskId, seed: u64, origin: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(origin, reason.to_string());
        if bytes.len() < HEADER_BYTES || &bytes[..4] != MAGIC {
            return Err(bad("not a CPNT trajectory file"));
        }
        let word =
            |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        if word(0) != FORMAT_VERSION as usize {
            return Err(bad("unsupported CPNT version"));
        }
        let (n, a, h, w, c) = (word(1), word(2), word(3), word(4), word(5));
        let img = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| bad("image dims overflow"))?;
        let expected = n
            .checked_mul(img + a)
            .and_then(|v| v.checked_add(img))
            .and_then(|v| v.checked_mul(4))
            .and_then(|v| v.checked_add(HEADER_BYTES))
            .ok_or_else(|| bad("size overflow"))?;
        if bytes.len() != expected {
            return Err(bad(&format!(
                "expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let mut floats = bytes[HEADER_BYTES..]
            .chunks_exact(4)
            .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()));
        let mut take = |k: usize| -> Vec<f32> { floats.by_ref().take(k).collect() };
        let mut steps = Vec::with_capacity(n);
        for _ in 0..n {
            let image = Image::new(h, w, c, take(img))?;
            steps.push(Step {
                image,
                action: take(a),
            });
        }
        let goal = Image::new(h, w, c, take(img))?;
        Trajectory::new(task, seed, steps, goal, true).map_err(|e| bad(&e.to_string()))
    }
}

/// Write under an exclusive lock on the destination file.
pub fn write_trajectory(traj: &Trajectory, path: &Path) -> Result<()> {
    let bytes = traj.to_bytes()?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut file = OpenOptions::new()
        .write(true)
        .create(true)
        .truncate(false)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    file.lock().map_err(|e| Error::io(path, e))?;
    let result = file
        .set_len(0)
        .and_then(|_| file.write_all(&bytes))
        .and_then(|_| file.sync_all());
    let _ = file.unlock();
    result.map_err(|e| Error::io(path, e))
}

pub fn read_trajectory(path: &Path, task: TaskId, seed: u64) -> Result<Trajectory> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Trajectory::from_bytes(&bytes, task, seed, path)
}
