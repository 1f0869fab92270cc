//! Named parameter storage, binding parameters onto a tape, and checkpoint IO.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Gradients, Graph, Rng, Tensor, Var};

pub const CHECKPOINT_FORMAT: &str = "lmp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Ordered map from parameter name to value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
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

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, t)| t.len()).sum()
    }

    /// Subset of parameters whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Overwrites every `dst_prefix*` parameter with its `src_prefix*` twin.
    pub fn copy_prefix(&mut self, src_prefix: &str, dst_prefix: &str) -> Result<usize> {
        let copies: Vec<(String, Tensor)> = self
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(src_prefix).map(|rest| (format!("{dst_prefix}{rest}"), v.clone())))
            .collect();
        let dst_count = self.tensors.keys().filter(|k| k.starts_with(dst_prefix)).count();
        if dst_count != 0 && dst_count != copies.len() {
            return Err(Error::BadShape(format!(
                "{src_prefix}* has {} tensors but {dst_prefix}* has {dst_count}",
                copies.len()
            )));
        }
        for (name, t) in &copies {
            if let Some(existing) = self.tensors.get(name) {
                if existing.shape() != t.shape() {
                    return Err(Error::BadShape(format!("{name}: shape {:?} vs {:?}", existing.shape(), t.shape())));
                }
            }
        }
        let n = copies.len();
        self.tensors.extend(copies);
        Ok(n)
    }
}

/// Which parameters receive gradients on a tape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    None,
    Prefixes(Vec<String>),
}

impl Trainable {
    pub fn allows(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::None => false,
            Trainable::Prefixes(ps) => ps.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

/// A tape plus lazily bound parameters.
pub struct Session<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    trainable: Trainable,
    bound: HashMap<String, Var>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, trainable: Trainable) -> Self {
        Session { g: Graph::new(), store, trainable, bound: HashMap::new() }
    }

    /// Forward-only session.
    pub fn inference(store: &'a ParamStore) -> Self {
        Session::new(store, Trainable::None)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Leaf for parameter `name`; the same leaf is reused on repeat calls.
    ///
    /// Panics if the parameter is missing, which indicates a model/config mismatch.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let t = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from store"))
            .clone();
        let v = if self.trainable.allows(name) { self.g.variable(t) } else { self.g.constant(t) };
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Gradients of every trainable bound parameter, zeros for those the root
    /// does not depend on.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter(|(name, _)| self.trainable.allows(name))
            .map(|(name, &v)| (name.clone(), grads.get_or_zeros(v)))
            .collect()
    }
}

/// Uniform fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_uniform(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-bound, bound)).collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// On-disk checkpoint: a versioned named-tensor map plus run metadata.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub stage: String,
    pub step: usize,
    /// Run configuration in TOML, so the checkpoint can be evaluated alone.
    #[serde(default)]
    pub config: Option<String>,
    params: BTreeMap<String, CheckpointTensor>,
}

impl Checkpoint {
    pub fn new(store: &ParamStore, config_hash: &str, seed: u64, stage: &str, step: usize) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.into(),
            seed,
            stage: stage.into(),
            step,
            config: None,
            params: store
                .iter()
                .map(|(k, t)| (k.clone(), CheckpointTensor { shape: t.shape().to_vec(), data: t.data().to_vec() }))
                .collect(),
        }
    }

    pub fn with_config(mut self, toml: String) -> Self {
        self.config = Some(toml);
        self
    }

    pub fn params(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, ct) in &self.params {
            if ct.shape.iter().product::<usize>() != ct.data.len() || ct.shape.contains(&0) {
                return Err(Error::BadData(format!("checkpoint tensor {name} has inconsistent shape")));
            }
            store.insert(name.clone(), Tensor::new(&ct.shape, ct.data.clone()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::BadData(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        Ok(ck)
    }
}
