//! Binary checkpoints: `"MJAM"`, a little-endian `u32` format version, a
//! little-endian `u64` manifest length, the JSON manifest, then every tensor
//! as raw little-endian `f32` in manifest order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{numel, AdamState, ParamStore, TensorBuf};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MJAM";
pub const VERSION: u32 = 1;

const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Free-form metadata plus named `f32` tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, TensorData>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn add_params(&mut self, params: &ParamStore<f32>) {
        for (name, t) in params.iter() {
            self.tensors.insert(
                name.to_string(),
                TensorData {
                    shape: t.shape.clone(),
                    values: t.values.clone(),
                },
            );
        }
    }

    pub fn add_adam(&mut self, params: &ParamStore<f32>, adam: &AdamState<f32>) {
        for (name, t) in params.iter() {
            for (prefix, moments) in [(ADAM_M, &adam.m), (ADAM_V, &adam.v)] {
                if let Some(values) = moments.get(name) {
                    self.tensors.insert(
                        format!("{prefix}{name}"),
                        TensorData {
                            shape: t.shape.clone(),
                            values: values.clone(),
                        },
                    );
                }
            }
        }
    }

    /// Parameters, i.e. every tensor that is not an optimizer moment.
    pub fn params(&self) -> Result<ParamStore<f32>> {
        let mut store = ParamStore::new();
        for (name, t) in &self.tensors {
            if name.starts_with(ADAM_M) || name.starts_with(ADAM_V) {
                continue;
            }
            store.insert(name.clone(), TensorBuf::new(t.shape.clone(), t.values.clone())?)?;
        }
        Ok(store)
    }

    /// Restores optimizer moments into `adam` for every parameter.
    pub fn restore_adam(&self, params: &ParamStore<f32>, adam: &mut AdamState<f32>) -> Result<()> {
        for (name, t) in params.iter() {
            for (prefix, moments) in [(ADAM_M, &mut adam.m), (ADAM_V, &mut adam.v)] {
                let key = format!("{prefix}{name}");
                let data = self
                    .tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing `{key}`")))?;
                if data.values.len() != t.len() {
                    return Err(Error::Checkpoint(format!("`{key}` has the wrong size")));
                }
                moments.insert(name.to_string(), data.values.clone());
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let manifest = Manifest {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape.clone(),
                    dtype: "f32".into(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for t in self.tensors.values() {
            let mut buf = Vec::with_capacity(t.values.len() * 4);
            for v in &t.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version,
                expected: VERSION,
            });
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)
            .map_err(|_| Error::Checkpoint("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&json)?;
        let mut tensors = BTreeMap::new();
        for entry in manifest.tensors {
            if entry.dtype != "f32" {
                return Err(Error::Checkpoint(format!("unsupported dtype {}", entry.dtype)));
            }
            let n = numel(&entry.shape);
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)
                .map_err(|_| Error::Checkpoint(format!("truncated tensor `{}`", entry.name)))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(
                entry.name,
                TensorData {
                    shape: entry.shape,
                    values,
                },
            );
        }
        Ok(Self {
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}
