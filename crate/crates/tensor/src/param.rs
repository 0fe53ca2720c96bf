use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::random::RandomSource;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Accumulated gradient, same shape as `value`.
    pub grad: Tensor,
    pub trainable: bool,
}

/// Named, ordered collection of model parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(TensorError::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name,
            value,
            grad,
            trainable: true,
        });
        Ok(ParamId(id))
    }

    /// Adds a parameter drawn uniformly from ±√(1/fan_in).
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut RandomSource,
    ) -> Result<ParamId> {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
        self.add(name, Tensor::new(shape, data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Writes `path` (raw little-endian f64 values) and `path.json` (manifest).
    pub fn save_checkpoint(&self, path: &Path, metadata: serde_json::Value) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.num_values() * 8);
        let mut entries = Vec::with_capacity(self.params.len());
        for p in &self.params {
            entries.push(ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset: bytes.len() as u64,
            });
            for v in p.value.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.to_string(),
            params: entries,
            metadata,
        };
        fs::write(path, bytes)?;
        fs::write(manifest_path(path), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    /// Overwrites parameter values from a checkpoint; names and shapes must match.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<serde_json::Value> {
        let manifest = read_manifest(path)?;
        let bytes = fs::read(path)?;
        for entry in &manifest.params {
            let id = self.id(&entry.name).ok_or_else(|| {
                TensorError::Checkpoint(format!("unknown parameter `{}`", entry.name))
            })?;
            let param = &mut self.params[id.0];
            if param.value.shape() != entry.shape.as_slice() {
                return Err(TensorError::Checkpoint(format!(
                    "shape mismatch for `{}`: {:?} vs {:?}",
                    entry.name,
                    param.value.shape(),
                    entry.shape
                )));
            }
            let start = entry.offset as usize;
            let end = start + param.value.len() * 8;
            if end > bytes.len() {
                return Err(TensorError::Checkpoint(format!("truncated data for `{}`", entry.name)));
            }
            for (dst, chunk) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(bytes[start..end].chunks_exact(8))
            {
                *dst = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
        }
        if manifest.params.len() != self.params.len() {
            return Err(TensorError::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                manifest.params.len(),
                self.params.len()
            )));
        }
        Ok(manifest.metadata)
    }
}

pub const CHECKPOINT_FORMAT: &str = "tokcomm-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data file.
    pub offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub params: Vec<ManifestEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(manifest_path(path))?)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(TensorError::Checkpoint(format!("unsupported format `{}`", manifest.format)));
    }
    Ok(manifest)
}
