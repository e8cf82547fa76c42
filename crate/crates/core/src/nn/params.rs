//! Named parameter storage, initialization and the checkpoint file format.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::scalar::Real;

use super::Tensor;

/// Handle to one entry of a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Non-trainable entries hold buffers (batch-norm running statistics) or frozen weights.
    pub trainable: bool,
    pub velocity: Option<Vec<T>>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(Param {
            name,
            value,
            trainable,
            velocity: None,
        });
        ParamId(id)
    }

    /// Kaiming-uniform weight for a layer with the given fan-in.
    pub fn add_kaiming<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::lit(rng.random_range(-bound..bound)))
            .collect();
        self.add(name, Tensor::new(shape, data).expect("valid shape"), true)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.value.zero_grad();
        }
    }

    /// Marks every entry whose name starts with `prefix` as (non-)trainable.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.entries {
            if p.name.starts_with(prefix) && !is_buffer_name(&p.name) {
                p.trainable = trainable;
            }
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Copies values of same-named, same-shaped entries from `other`.
    pub fn load_from(&mut self, other: &ParamStore<T>, prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for p in &mut self.entries {
            if !p.name.starts_with(prefix) {
                continue;
            }
            let Some(src) = other.id(&p.name).map(|id| other.get(id)) else {
                bail!(Dependency, "checkpoint lacks parameter {}", p.name);
            };
            if src.value.shape() != p.value.shape() {
                bail!(
                    Shape,
                    "parameter {} has shape {:?} in checkpoint, expected {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                );
            }
            p.value.data_mut().copy_from_slice(src.value.data());
            copied += 1;
        }
        Ok(copied)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                    velocity: None,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

pub(crate) fn is_buffer_name(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

const MAGIC: &[u8; 8] = b"MVFCKPT1";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    pub params: Vec<CheckpointEntry>,
    pub epoch: usize,
    pub seed: u64,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Writes `MAGIC`, a little-endian `u64` header length, the JSON header and
/// then every tensor as little-endian `f32` in header order.
pub fn write_checkpoint<T: Real>(
    path: &Path,
    store: &ParamStore<T>,
    epoch: usize,
    seed: u64,
    meta: serde_json::Value,
) -> Result<()> {
    let header = CheckpointHeader {
        params: store
            .entries
            .iter()
            .map(|p| CheckpointEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
        epoch,
        seed,
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 4 * store.entries.iter().map(|p| p.value.len()).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in &store.entries {
        for v in p.value.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Real>(path: &Path) -> Result<(ParamStore<T>, CheckpointHeader)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "missing checkpoint magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16 + hlen;
    if bytes.len() < body {
        return Err(Error::format(path, "truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..body])?;
    let mut store = ParamStore::new();
    let mut off = body;
    for e in &header.params {
        let n: usize = e.shape.iter().product();
        let end = off + 4 * n;
        if bytes.len() < end {
            return Err(Error::format(path, format!("truncated data for {}", e.name)));
        }
        let data = bytes[off..end]
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        store.add(e.name.clone(), Tensor::new(e.shape.clone(), data)?, e.trainable);
        off = end;
    }
    if off != bytes.len() {
        return Err(Error::format(path, "trailing bytes after tensor data"));
    }
    Ok((store, header))
}
