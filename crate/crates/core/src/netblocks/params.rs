use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::diffcore::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CPNP";
const VERSION: u32 = 1;

/// Named parameter tensors. Iteration order is the sorted name order, which
/// fixes the on-disk layout and the order gradients are reduced in.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamBundle {
    tensors: BTreeMap<String, Tensor>,
}

/// Parameter names mapped to their leaves on one tape.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    ids: BTreeMap<String, NodeId>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }
}

impl ParamBundle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor; each name can be registered once.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::contract(format!("invalid parameter name `{name}`")));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::contract(format!(
                "parameter `{name}` registered twice"
            )));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Same names and shapes.
    pub fn same_layout(&self, other: &ParamBundle) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape())
    }

    /// Put every tensor on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        let ids = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), requires_grad)))
            .collect();
        BoundParams { ids }
    }

    /// Round every value through `f32`, so the bundle survives a save/load
    /// cycle unchanged.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors.values_mut() {
            for x in t.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    /// SHA-256 over names, shapes and the exact `f64` bit patterns.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in t.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// `CPNP` v1: magic, version (u32 LE), manifest byte length (u32 LE), a
    /// text manifest with one `name dims offset` line per tensor (dims joined
    /// by `x`, `-` for a scalar, offset in elements), then every tensor as
    /// little-endian `f32` in manifest order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = String::new();
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let dims = if t.shape().is_empty() {
                "-".to_string()
            } else {
                t.shape()
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join("x")
            };
            manifest.push_str(&format!("{name} {dims} {offset}\n"));
            offset += t.numel();
        }
        let mut out = Vec::with_capacity(12 + manifest.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for t in self.tensors.values() {
            for x in t.data() {
                out.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::format(origin, reason);
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("missing CPNP magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes
            .get(12..12 + mlen)
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest = std::str::from_utf8(body).map_err(|_| bad("manifest is not UTF-8"))?;
        let data = &bytes[12 + mlen..];
        if data.len() % 4 != 0 {
            return Err(bad("data section is not a whole number of f32 values"));
        }
        let floats: Vec<f64> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let mut bundle = ParamBundle::new();
        let mut expected_offset = 0usize;
        for line in manifest.lines() {
            let fields: Vec<&str> = line.split(' ').collect();
            let [name, dims, offset] = fields[..] else {
                return Err(bad(&format!("malformed manifest line `{line}`")));
            };
            let shape: Vec<usize> = if dims == "-" {
                vec![]
            } else {
                dims.split('x')
                    .map(|d| d.parse().map_err(|_| bad("bad dimension")))
                    .collect::<Result<_>>()?
            };
            let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
            if offset != expected_offset {
                return Err(bad("manifest offsets are not contiguous"));
            }
            let n: usize = shape.iter().product();
            let values = floats
                .get(offset..offset + n)
                .ok_or_else(|| bad("tensor extends past the data section"))?;
            bundle.insert(name, Tensor::new(shape, values.to_vec())?)?;
            expected_offset += n;
        }
        if expected_offset != floats.len() {
            return Err(bad("trailing data after the last tensor"));
        }
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
