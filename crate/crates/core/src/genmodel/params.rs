//! Named parameter sets and checkpoint directories.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{BackboneConfig, GenError};
use crate::diffcore::{lsct, Array};
use crate::geometry::io::IoError;
use crate::rng::{normal_vec, rng_from, Rng};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_MANIFEST: &str = "manifest.json";

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Arc<Array>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.entries.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Result<&Arc<Array>, GenError> {
        self.entries.get(name).ok_or_else(|| GenError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Names starting with `prefix`, in order.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.names().filter(move |n| n.starts_with(prefix))
    }

    pub fn merge(&mut self, other: &ParamSet) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Every value rounded to `f32`, which is what checkpoints store.
    pub fn quantized_f32(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.map(|x| x as f32 as f64))))
                .collect(),
        }
    }
}

/// He-style initialization for a `k^3 * cin -> cout` convolution.
pub(crate) fn init_conv(p: &mut ParamSet, rng: &mut Rng, name: &str, k: usize, cin: usize, cout: usize) {
    let fan_in = (k * k * k * cin) as f64;
    let std = (1.0 / fan_in).sqrt();
    let w = normal_vec(rng, k * k * k * cin * cout).into_iter().map(|v| v * std).collect();
    p.insert(format!("{name}.w"), Array::new(vec![k, k, k, cin, cout], w).expect("conv init shape"));
    p.insert(format!("{name}.b"), Array::zeros(&[cout]));
}

pub(crate) fn init_matrix(p: &mut ParamSet, rng: &mut Rng, name: &str, rows: usize, cols: usize, std: f64) {
    let w = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0) * std * 3f64.sqrt()).collect();
    p.insert(name, Array::new(vec![rows, cols], w).expect("matrix init shape"));
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

/// Checkpoint manifest: tensors plus whatever training metadata was recorded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub config: BackboneConfig,
    pub tensors: Vec<TensorEntry>,
    pub corpus_fingerprint: Option<String>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub training: serde_json::Value,
}

fn file_err(path: &Path, source: std::io::Error) -> GenError {
    GenError::Io(IoError::File {
        path: path.display().to_string(),
        source,
    })
}

/// Writes every tensor as an LSCT file plus `manifest.json` into `dir`.
pub fn save_checkpoint(dir: &Path, params: &ParamSet, manifest_extra: CheckpointManifest) -> Result<(), GenError> {
    fs::create_dir_all(dir).map_err(|e| file_err(dir, e))?;
    let mut manifest = manifest_extra;
    manifest.version = CHECKPOINT_VERSION;
    manifest.tensors.clear();
    for (name, value) in params.iter() {
        let file = format!("{name}.lsct");
        lsct::save(&dir.join(&file), value).map_err(|e| GenError::Io(e.into()))?;
        manifest.tensors.push(TensorEntry {
            name: name.to_string(),
            shape: value.shape().to_vec(),
            file,
        });
    }
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = dir.join(CHECKPOINT_MANIFEST);
    fs::write(&path, json).map_err(|e| file_err(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParamSet, CheckpointManifest), GenError> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let bytes = fs::read(&path).map_err(|e| file_err(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes).map_err(|e| GenError::Checkpoint {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(GenError::Checkpoint {
            path: path.display().to_string(),
            message: format!("unsupported version {}", manifest.version),
        });
    }
    let mut params = ParamSet::new();
    for entry in &manifest.tensors {
        let value = lsct::load(&dir.join(&entry.file)).map_err(|e| GenError::Io(e.into()))?;
        if value.shape() != entry.shape.as_slice() {
            return Err(GenError::Checkpoint {
                path: entry.file.clone(),
                message: format!("shape {:?} does not match manifest {:?}", value.shape(), entry.shape),
            });
        }
        params.insert(entry.name.clone(), value);
    }
    Ok((params, manifest))
}

pub(crate) fn seeded(seed: u64) -> Rng {
    rng_from(seed)
}
