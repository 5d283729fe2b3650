//! Named parameter storage and the checkpoint file format.
//!
//! A checkpoint is a single JSON document:
//!
//! ```text
//! {
//!   "format": "pdc-refine-checkpoint",
//!   "version": 1,
//!   "metadata": { ... },
//!   "params": [ { "name": "...", "shape": [r, c], "values": [ ... ] }, ... ]
//! }
//! ```
//!
//! `values` is the flat row-major array; floats are written in shortest
//! round-trip form so a save/load cycle is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "pdc-refine-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

#[derive(Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    #[serde(default)]
    metadata: serde_json::Value,
    params: Vec<ParamRecord>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params.get(name).ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    pub fn to_json(&self, metadata: serde_json::Value) -> Result<String> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            metadata,
            params: self
                .params
                .iter()
                .map(|(name, t)| ParamRecord { name: name.clone(), shape: t.shape().to_vec(), values: t.data().to_vec() })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<(ParamStore, serde_json::Value)> {
        let file: CheckpointFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", file.version)));
        }
        let mut store = ParamStore::new();
        for rec in file.params {
            let t = Tensor::new(rec.shape, rec.values).map_err(|e| Error::Checkpoint(format!("{}: {e}", rec.name)))?;
            if store.params.insert(rec.name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter {}", rec.name)));
            }
        }
        Ok((store, file.metadata))
    }

    pub fn save(&self, path: &Path, metadata: serde_json::Value) -> Result<()> {
        std::fs::write(path, self.to_json(metadata)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
        ParamStore::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::matrix(2, 2, vec![0.1, -1.0 / 3.0, 1e-300, 7.25]).unwrap());
        store.insert("b", Tensor::vector(vec![std::f64::consts::PI]));
        let meta = serde_json::json!({"width": 32});
        let text = store.to_json(meta.clone()).unwrap();
        let (back, m) = ParamStore::from_json(&text).unwrap();
        assert_eq!(back, store);
        assert_eq!(m, meta);
    }

    #[test]
    fn rejects_foreign_documents() {
        let text = r#"{"format":"other","version":1,"params":[]}"#;
        assert!(ParamStore::from_json(text).is_err());
        let text = r#"{"format":"pdc-refine-checkpoint","version":1,"params":[{"name":"x","shape":[3],"values":[1,2]}]}"#;
        assert!(ParamStore::from_json(text).is_err());
    }
}
