//! Trajectory files, dataset manifests and leave-one-task-out splits.
//!
//! A dataset directory holds one `CPNT` file per demonstration and a text
//! manifest, `manifest.txt`:
//!
//! ```text
//! cpn-manifest 1
//! seed 7
//! suite <sha256 of the suite config>
//! count push 100
//! traj push push/0000.cpnt <demo seed> <sha256 of the file>
//! ```

mod trajectory;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::netblocks::hex;
use crate::worlds::{SuiteConfig, TaskId};

pub use trajectory::{
    read_trajectory, write_trajectory, Step, Trajectory, FORMAT_VERSION, HEADER_BYTES,
};

pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_HEADER: &str = "cpn-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub task: TaskId,
    /// Relative to the dataset root.
    pub path: String,
    pub seed: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub suite_hash: String,
    pub entries: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

impl DatasetManifest {
    pub fn counts(&self) -> BTreeMap<TaskId, usize> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            *out.entry(e.task).or_insert(0) += 1;
        }
        out
    }

    pub fn tasks(&self) -> Vec<TaskId> {
        self.counts().into_keys().collect()
    }

    pub fn entries_for(&self, task: TaskId) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.task == task)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{MANIFEST_HEADER} {}\nseed {}\nsuite {}\n",
            self.version, self.seed, self.suite_hash
        );
        for (task, n) in self.counts() {
            out.push_str(&format!("count {task} {n}\n"));
        }
        for e in &self.entries {
            out.push_str(&format!(
                "traj {} {} {} {}\n",
                e.task, e.path, e.seed, e.sha256
            ));
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let bad =
            |line: usize, reason: &str| Error::format(origin, format!("line {line}: {reason}"));
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let mut field = |name: &str| -> Result<(usize, String)> {
            let (i, l) = lines
                .next()
                .ok_or_else(|| bad(0, "manifest is truncated"))?;
            l.strip_prefix(name)
                .map(|v| (i + 1, v.trim().to_string()))
                .ok_or_else(|| bad(i + 1, &format!("expected `{name}`")))
        };
        let (i, version) = field(MANIFEST_HEADER)?;
        let version: u32 = version.parse().map_err(|_| bad(i, "bad version"))?;
        if version != MANIFEST_VERSION {
            return Err(bad(i, "unsupported manifest version"));
        }
        let (i, seed) = field("seed")?;
        let seed = seed.parse().map_err(|_| bad(i, "bad seed"))?;
        let (_, suite_hash) = field("suite")?;
        let mut declared = BTreeMap::new();
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().skip(3) {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                [] => {}
                ["count", task, n] => {
                    let task: TaskId = task.parse().map_err(|_| bad(i + 1, "unknown task"))?;
                    let n: usize = n.parse().map_err(|_| bad(i + 1, "bad count"))?;
                    declared.insert(task, n);
                }
                ["traj", task, path, seed, sha] => entries.push(ManifestEntry {
                    task: task.parse().map_err(|_| bad(i + 1, "unknown task"))?,
                    path: path.to_string(),
                    seed: seed.parse().map_err(|_| bad(i + 1, "bad seed"))?,
                    sha256: sha.to_string(),
                }),
                _ => return Err(bad(i + 1, "unrecognized record")),
            }
        }
        let manifest = Self {
            version,
            seed,
            suite_hash,
            entries,
        };
        if manifest.counts() != declared {
            return Err(Error::format(
                origin,
                "declared counts do not match trajectory records",
            ));
        }
        Ok(manifest)
    }

    /// Atomically replace `root/manifest.txt`.
    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        let tmp = root.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, self.to_text()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

/// Write trajectories as `<task>/<index>.cpnt` under `root` plus the manifest.
pub fn write_dataset(
    root: &Path,
    suite: &SuiteConfig,
    seed: u64,
    trajectories: &[Trajectory],
) -> Result<DatasetManifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut index: BTreeMap<TaskId, usize> = BTreeMap::new();
    let mut entries = Vec::with_capacity(trajectories.len());
    for t in trajectories {
        let k = index.entry(t.task).or_insert(0);
        let rel = format!("{}/{:04}.cpnt", t.task, *k);
        *k += 1;
        let bytes = t.to_bytes()?;
        write_trajectory(t, &root.join(&rel))?;
        entries.push(ManifestEntry {
            task: t.task,
            path: rel,
            seed: t.seed,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed,
        suite_hash: suite.hash(),
        entries,
    };
    manifest.write(root)?;
    Ok(manifest)
}

/// An opened dataset. Every trajectory load is recorded so tests can audit
/// which files a run touched.
#[derive(Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
    accessed: Mutex<Vec<String>>,
}

impl Dataset {
    /// Open and check that every listed file exists.
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = DatasetManifest::parse(&text, &path)?;
        for e in &manifest.entries {
            let p = root.join(&e.path);
            if !p.is_file() {
                return Err(Error::format(
                    &path,
                    format!("listed file {} is missing", e.path),
                ));
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            accessed: Mutex::new(Vec::new()),
        })
    }

    /// Open and require the manifest to match `suite`.
    pub fn open_for_suite(root: &Path, suite: &SuiteConfig) -> Result<Self> {
        let ds = Self::open(root)?;
        if ds.manifest.suite_hash != suite.hash() {
            return Err(Error::format(
                root.join(MANIFEST_FILE),
                "dataset was generated with a different suite configuration",
            ));
        }
        Ok(ds)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    /// Read one trajectory, checking its hash.
    pub fn load(&self, entry: &ManifestEntry) -> Result<Trajectory> {
        self.accessed.lock().unwrap().push(entry.path.clone());
        let path = self.root.join(&entry.path);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::format(
                &path,
                "content hash does not match the manifest",
            ));
        }
        Trajectory::from_bytes(&bytes, entry.task, entry.seed, &path)
    }

    pub fn load_all(&self, entries: &[ManifestEntry]) -> Result<Vec<Trajectory>> {
        entries.iter().map(|e| self.load(e)).collect()
    }

    /// Relative paths of every load so far, in order.
    pub fn accessed(&self) -> Vec<String> {
        self.accessed.lock().unwrap().clone()
    }

    pub fn clear_accessed(&self) {
        self.accessed.lock().unwrap().clear();
    }
}

/// Training entries for every task except `holdout`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub holdout: TaskId,
    pub train: Vec<ManifestEntry>,
}

pub fn leave_one_out_split(manifest: &DatasetManifest, holdout: TaskId) -> Result<Split> {
    if !manifest.entries.iter().any(|e| e.task == holdout) {
        return Err(Error::contract(format!(
            "task {holdout} is not in the dataset"
        )));
    }
    let train: Vec<ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| e.task != holdout)
        .cloned()
        .collect();
    if train.iter().any(|e| e.task == holdout) {
        return Err(Error::contract("split leaked holdout trajectories"));
    }
    Ok(Split { holdout, train })
}
