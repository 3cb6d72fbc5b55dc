//! Named parameter sets and the checkpoint format.
//!
//! Canonical parameter storage is plain float64 buffers, owned by the
//! training loop (single writer). Graphs bind read-only copies as leaves,
//! so evaluation never mutates a checkpointed value.
//!
//! Checkpoint layout (versioned, little-endian):
//!
//! ```text
//! magic  8 bytes  "FSCKPT1\n"
//! count  u64
//! entry  u64 name_len | name bytes | u64 rank | rank x u64 extents | f64 data
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

const MAGIC: &[u8; 8] = b"FSCKPT1\n";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<NamedParam>,
    index: BTreeMap<String, usize>,
}

/// Graph-bound leaves for a `ParamSet`, in entry order.
pub struct Bound {
    pub tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| Error::State(format!("no bound parameter named '{name}'")))
    }

    /// Same name index over replacement tensors (e.g. inner-loop adapted
    /// parameters); order must match the original entry order.
    pub fn replace(&self, tensors: Vec<Tensor>) -> Result<Bound> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::State(format!(
                "replace: {} tensors for {} slots",
                tensors.len(),
                self.tensors.len()
            )));
        }
        Ok(Bound {
            tensors,
            index: self.index.clone(),
        })
    }

    /// Position of a named parameter in the tensor order.
    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::State(format!("duplicate parameter name '{name}'")));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Dim(format!(
                "parameter '{name}': shape {shape:?} vs {} values",
                values.len()
            )));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(NamedParam {
            name: name.to_string(),
            shape: shape.to_vec(),
            values,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedParam> {
        self.entries.iter()
    }

    pub fn get(&self, name: &str) -> Option<&NamedParam> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NamedParam> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i])
    }

    pub fn entry(&self, i: usize) -> &NamedParam {
        &self.entries[i]
    }

    pub fn entry_mut(&mut self, i: usize) -> &mut NamedParam {
        &mut self.entries[i]
    }

    /// Total scalar parameter count.
    pub fn count_values(&self) -> usize {
        self.entries.iter().map(|p| p.values.len()).sum()
    }

    /// Bind every entry as a graph leaf (in entry order).
    pub fn bind(&self, g: &Graph, requires_grad: bool) -> Result<Bound> {
        let mut tensors = Vec::with_capacity(self.entries.len());
        for p in &self.entries {
            tensors.push(g.leaf(p.values.clone(), &p.shape, requires_grad)?);
        }
        Ok(Bound {
            tensors,
            index: self.index.clone(),
        })
    }

    /// Constant (graph-free) tensors for evaluation paths.
    pub fn bind_const(&self) -> Result<Bound> {
        let mut tensors = Vec::with_capacity(self.entries.len());
        for p in &self.entries {
            tensors.push(Tensor::from_vec(p.values.clone(), &p.shape)?);
        }
        Ok(Bound {
            tensors,
            index: self.index.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for p in &self.entries {
            bytes.extend_from_slice(&(p.name.len() as u64).to_le_bytes());
            bytes.extend_from_slice(p.name.as_bytes());
            bytes.extend_from_slice(&(p.shape.len() as u64).to_le_bytes());
            for &e in &p.shape {
                bytes.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in &p.values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<ParamSet> {
        let bytes = fs::read(path)
            .map_err(|e| Error::State(format!("checkpoint {} unreadable: {e}", path.display())))?;
        let corrupt = || Error::State(format!("checkpoint {} is corrupt", path.display()));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt());
        }
        let mut off = 8usize;
        let take_u64 = |off: &mut usize| -> Result<u64> {
            if *off + 8 > bytes.len() {
                return Err(corrupt());
            }
            let v = u64::from_le_bytes(bytes[*off..*off + 8].try_into().unwrap());
            *off += 8;
            Ok(v)
        };
        let count = take_u64(&mut off)? as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name_len = take_u64(&mut off)? as usize;
            if off + name_len > bytes.len() {
                return Err(corrupt());
            }
            let name = std::str::from_utf8(&bytes[off..off + name_len])
                .map_err(|_| corrupt())?
                .to_string();
            off += name_len;
            let rank = take_u64(&mut off)? as usize;
            if rank > 8 {
                return Err(corrupt());
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(take_u64(&mut off)? as usize);
            }
            let numel: usize = shape.iter().product();
            if off + numel * 8 > bytes.len() {
                return Err(corrupt());
            }
            let mut values = Vec::with_capacity(numel);
            for i in 0..numel {
                values.push(f64::from_le_bytes(
                    bytes[off + i * 8..off + (i + 1) * 8].try_into().unwrap(),
                ));
            }
            off += numel * 8;
            set.push(&name, &shape, values)
                .map_err(|_| corrupt())?;
        }
        if off != bytes.len() {
            return Err(corrupt());
        }
        Ok(set)
    }

    /// Warm start: copy values for every name shared with `source` (shape
    /// checked). At least one parameter must match.
    pub fn load_matching(&mut self, source: &ParamSet) -> Result<usize> {
        let mut matched = 0;
        for p in &mut self.entries {
            if let Some(src) = source.get(&p.name) {
                if src.shape != p.shape {
                    return Err(Error::State(format!(
                        "parameter '{}': checkpoint shape {:?} vs model shape {:?}",
                        p.name, src.shape, p.shape
                    )));
                }
                p.values = src.values.clone();
                matched += 1;
            }
        }
        if matched == 0 {
            return Err(Error::State(
                "checkpoint shares no parameter names with the model".into(),
            ));
        }
        Ok(matched)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet {
        let mut s = ParamSet::new();
        s.push("backbone.0.weight", &[2, 3], vec![0.5; 6]).unwrap();
        s.push("backbone.0.bias", &[1, 3], vec![0.0, 1.0, -1.0]).unwrap();
        s
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        let s = sample();
        s.save(&path).unwrap();
        let l = ParamSet::load(&path).unwrap();
        assert_eq!(s, l);
    }

    #[test]
    fn corrupt_checkpoint_is_state_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt");
        sample().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 5);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(ParamSet::load(&path), Err(Error::State(_))));
    }

    #[test]
    fn warm_start_matches_by_name() {
        let mut dst = sample();
        let mut src = ParamSet::new();
        src.push("backbone.0.weight", &[2, 3], vec![9.0; 6]).unwrap();
        src.push("other", &[1], vec![1.0]).unwrap();
        assert_eq!(dst.load_matching(&src).unwrap(), 1);
        assert_eq!(dst.get("backbone.0.weight").unwrap().values, vec![9.0; 6]);
        assert_eq!(dst.get("backbone.0.bias").unwrap().values, vec![0.0, 1.0, -1.0]);
    }

    #[test]
    fn warm_start_shape_mismatch_rejected() {
        let mut dst = sample();
        let mut src = ParamSet::new();
        src.push("backbone.0.weight", &[3, 2], vec![9.0; 6]).unwrap();
        assert!(matches!(dst.load_matching(&src), Err(Error::State(_))));
    }
}
