//! Named parameter collections split into trunk (shared backbone) and head
//! (task-specific) parameters.

use std::collections::BTreeMap;
use std::path::Path;

use crate::codec::{sha256_hex, Provenance, Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Prefix marking task-specific parameters.
pub const HEAD_PREFIX: &str = "head.";

const MAGIC: &[u8; 4] = b"TFPS";
const VERSION: u32 = 1;

/// Parameters keyed by name, iterated in sorted order.
///
/// Membership is encoded in the name: entries under [`HEAD_PREFIX`] are head
/// parameters, everything else is trunk. The prunable set is every rank-2
/// trunk entry (projection matrices and embedding tables); biases and
/// normalization vectors are rank 1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Dimension(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Dimension(format!("missing parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn is_head(name: &str) -> bool {
        name.starts_with(HEAD_PREFIX)
    }

    pub fn trunk_names(&self) -> Vec<&str> {
        self.names().filter(|n| !Self::is_head(n)).collect()
    }

    pub fn head_names(&self) -> Vec<&str> {
        self.names().filter(|n| Self::is_head(n)).collect()
    }

    pub fn is_prunable(name: &str, value: &Tensor) -> bool {
        !Self::is_head(name) && value.rank() == 2
    }

    pub fn prunable_names(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(n, v)| Self::is_prunable(n, v))
            .map(|(n, _)| n.as_str())
            .collect()
    }

    /// (name, shape) of every prunable entry, in sorted order.
    pub fn prunable_layout(&self) -> Vec<(String, Vec<usize>)> {
        self.entries
            .iter()
            .filter(|(n, v)| Self::is_prunable(n, v))
            .map(|(n, v)| (n.clone(), v.shape().to_vec()))
            .collect()
    }

    pub fn trunk_len(&self) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| !Self::is_head(n))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Keep trunk entries of `self` and take every head entry from `heads`.
    pub fn with_head_from(&self, heads: &ParamStore) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, v) in self.iter().filter(|(n, _)| !Self::is_head(n)) {
            out.insert(n.clone(), v.clone());
        }
        for (n, v) in heads.iter().filter(|(n, _)| Self::is_head(n)) {
            out.insert(n.clone(), v.clone());
        }
        out
    }

    /// Serialize with an all-zero provenance; used for hashing contents.
    pub fn content_bytes(&self) -> Vec<u8> {
        self.to_bytes(&Provenance::default())
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(&self.content_bytes())
    }

    pub fn to_bytes(&self, provenance: &Provenance) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.bytes(&provenance.0);
        w.u32(self.entries.len() as u32);
        for (name, t) in &self.entries {
            w.name(name);
            w.shape(t.shape());
            for &v in t.data() {
                w.f64(v);
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Provenance)> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MAGIC, VERSION)?;
        let provenance = r.provenance()?;
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name = r.name()?;
            let shape = r.shape()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("`{name}`: {e}")))?;
            if store.entries.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate entry `{name}`")));
            }
        }
        r.finish()?;
        Ok((store, provenance))
    }

    pub fn save(&self, path: &Path, provenance: &Provenance) -> Result<()> {
        crate::artifact::write_atomic(path, &self.to_bytes(provenance))
    }

    pub fn load(path: &Path) -> Result<(Self, Provenance)> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
