//! Immutable parameter snapshots keyed by training step.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::codec::Provenance;
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointStore {
    snapshots: BTreeMap<u64, Vec<u8>>,
}

impl CheckpointStore {
    /// Store seeded with `theta0` at step 0.
    pub fn new(theta0: &ParamStore) -> Self {
        let mut snapshots = BTreeMap::new();
        snapshots.insert(0, theta0.content_bytes());
        Self { snapshots }
    }

    /// Record the snapshot after `step` updates; steps must strictly increase.
    pub fn insert(&mut self, step: u64, params: &ParamStore) -> Result<()> {
        let last = *self.snapshots.keys().next_back().expect("step 0 always present");
        if step <= last {
            return Err(Error::Checkpoint(format!("step {step} does not follow latest step {last}")));
        }
        self.snapshots.insert(step, params.content_bytes());
        Ok(())
    }

    pub fn steps(&self) -> Vec<u64> {
        self.snapshots.keys().copied().collect()
    }

    pub fn contains(&self, step: u64) -> bool {
        self.snapshots.contains_key(&step)
    }

    pub fn get(&self, step: u64) -> Result<ParamStore> {
        let bytes = self.snapshots.get(&step).ok_or(Error::MissingCheckpoint(step))?;
        Ok(ParamStore::from_bytes(bytes)?.0)
    }

    pub fn file_name(step: u64) -> String {
        format!("ckpt_{step:08}.tfps")
    }

    /// Write every snapshot under `dir`, stamped with `provenance`.
    pub fn save_dir(&self, dir: &Path, provenance: &Provenance) -> Result<Vec<PathBuf>> {
        let mut paths = Vec::new();
        for &step in self.snapshots.keys() {
            let path = dir.join(Self::file_name(step));
            self.get(step)?.save(&path, provenance)?;
            paths.push(path);
        }
        Ok(paths)
    }

    /// Load the snapshots written by [`CheckpointStore::save_dir`].
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut snapshots = BTreeMap::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            let Some(step) = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("ckpt_")?.strip_suffix(".tfps")?.parse::<u64>().ok())
            else {
                continue;
            };
            let (params, _) = ParamStore::load(&path)?;
            snapshots.insert(step, params.content_bytes());
        }
        if !snapshots.contains_key(&0) {
            return Err(Error::MissingCheckpoint(0));
        }
        Ok(Self { snapshots })
    }
}
