//! Binary masks over the prunable subset of the trunk.

use std::collections::BTreeMap;
use std::path::Path;

use crate::codec::{sha256_hex, Provenance, Reader, Writer};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TFMK";
const VERSION: u32 = 1;

/// Ordered (name, shape) list describing a prunable set.
pub type Layout = Vec<(String, Vec<usize>)>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskEntry {
    shape: Vec<usize>,
    keep: Vec<bool>,
}

impl MaskEntry {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn zeros(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        Tensor::new(self.shape.clone(), data).expect("mask shape matches its flags")
    }
}

/// A ticket: one keep-flag per prunable weight.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    entries: BTreeMap<String, MaskEntry>,
}

impl Mask {
    pub fn ones(layout: &[(String, Vec<usize>)]) -> Self {
        let entries = layout
            .iter()
            .map(|(n, s)| {
                let len = s.iter().product();
                (
                    n.clone(),
                    MaskEntry {
                        shape: s.clone(),
                        keep: vec![true; len],
                    },
                )
            })
            .collect();
        Mask { entries }
    }

    pub fn ones_for(params: &ParamStore) -> Self {
        Self::ones(&params.prunable_layout())
    }

    /// Build from explicit flags; used by tests and the random baseline.
    pub fn from_flags(entries: Vec<(String, Vec<usize>, Vec<bool>)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (name, shape, keep) in entries {
            if shape.iter().product::<usize>() != keep.len() {
                return Err(Error::Mask(format!("`{name}`: {} flags for shape {shape:?}", keep.len())));
            }
            map.insert(name, MaskEntry { shape, keep });
        }
        Ok(Mask { entries: map })
    }

    pub fn layout(&self) -> Layout {
        self.entries
            .iter()
            .map(|(n, e)| (n.clone(), e.shape.clone()))
            .collect()
    }

    pub fn entry(&self, name: &str) -> Option<&MaskEntry> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &MaskEntry)> {
        self.entries.iter()
    }

    pub(crate) fn keep_mut(&mut self, name: &str) -> Option<&mut [bool]> {
        self.entries.get_mut(name).map(|e| e.keep.as_mut_slice())
    }

    pub fn total(&self) -> usize {
        self.entries.values().map(|e| e.keep.len()).sum()
    }

    pub fn zeros(&self) -> usize {
        self.entries.values().map(MaskEntry::zeros).sum()
    }

    pub fn kept(&self) -> usize {
        self.total() - self.zeros()
    }

    /// Fraction of masked weights over the prunable set.
    pub fn sparsity(&self) -> f64 {
        self.zeros() as f64 / self.total() as f64
    }

    /// Fraction of masked weights over every trunk parameter.
    pub fn trunk_sparsity(&self, params: &ParamStore) -> f64 {
        self.zeros() as f64 / params.trunk_len() as f64
    }

    /// Flattened keep flags in layout order.
    pub fn flat(&self) -> Vec<bool> {
        self.entries.values().flat_map(|e| e.keep.iter().copied()).collect()
    }

    pub fn check_layout(&self, layout: &[(String, Vec<usize>)]) -> Result<()> {
        if self.entries.len() != layout.len() {
            return Err(Error::Mask(format!(
                "mask has {} entries, layout has {}",
                self.entries.len(),
                layout.len()
            )));
        }
        for ((name, entry), (lname, lshape)) in self.entries.iter().zip(layout) {
            if name != lname || &entry.shape != lshape {
                return Err(Error::Mask(format!(
                    "mask entry `{name}` {:?} does not match `{lname}` {lshape:?}",
                    entry.shape
                )));
            }
        }
        Ok(())
    }

    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        self.check_layout(&params.prunable_layout())
    }

    /// Zero every masked position of `params` in place.
    pub fn apply(&self, params: &mut ParamStore) -> Result<()> {
        self.check_params(params)?;
        for (name, entry) in &self.entries {
            let t = params.get_mut(name)?;
            for (v, &k) in t.data_mut().iter_mut().zip(&entry.keep) {
                if !k {
                    *v = 0.0;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self, provenance: &Provenance) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.bytes(&provenance.0);
        w.u32(self.entries.len() as u32);
        for (name, e) in &self.entries {
            w.name(name);
            w.shape(&e.shape);
            let mut packed = vec![0u8; e.keep.len().div_ceil(8)];
            for (i, &k) in e.keep.iter().enumerate() {
                if k {
                    packed[i / 8] |= 1 << (i % 8);
                }
            }
            w.bytes(&packed);
            w.u64(e.zeros() as u64);
        }
        w.u64(self.total() as u64);
        w.u64(self.zeros() as u64);
        w.f64(self.sparsity());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Provenance)> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MAGIC, VERSION)?;
        let provenance = r.provenance()?;
        let count = r.u32()? as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name = r.name()?;
            let shape = r.shape()?;
            let n: usize = shape.iter().product();
            let packed = r.take(n.div_ceil(8))?;
            let keep: Vec<bool> = (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
            if !n.is_multiple_of(8) && packed[n / 8] >> (n % 8) != 0 {
                return Err(Error::Format(format!("`{name}`: nonzero padding bits")));
            }
            let entry = MaskEntry { shape, keep };
            let zeros = r.u64()? as usize;
            if zeros != entry.zeros() {
                return Err(Error::Format(format!("`{name}`: zero count {zeros} disagrees with payload")));
            }
            if entries.insert(name.clone(), entry).is_some() {
                return Err(Error::Format(format!("duplicate entry `{name}`")));
            }
        }
        let mask = Mask { entries };
        let (total, zeros, sparsity) = (r.u64()? as usize, r.u64()? as usize, r.f64()?);
        if total != mask.total() || zeros != mask.zeros() || sparsity.to_bits() != mask.sparsity().to_bits() {
            return Err(Error::Format("footer disagrees with entries".into()));
        }
        r.finish()?;
        Ok((mask, provenance))
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(&self.to_bytes(&Provenance::default()))
    }

    pub fn save(&self, path: &Path, provenance: &Provenance) -> Result<()> {
        crate::artifact::write_atomic(path, &self.to_bytes(provenance))
    }

    pub fn load(path: &Path) -> Result<(Self, Provenance)> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
