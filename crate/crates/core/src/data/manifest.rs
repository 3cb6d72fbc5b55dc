//! Dataset manifests.
//!
//! A dataset root holds one manifest per split (`<root>/<split>.csv`, header
//! `id,feature_file,label`) plus the referenced feature files. Feature files
//! come in two formats, chosen by suffix:
//!
//! - `.bin`: little-endian u64 rank, then `rank` little-endian u64 extents,
//!   then the row-major float64 payload;
//! - `.csv`: one line of comma-separated floats (a flat vector).
//!
//! Features load eagerly; manifests are immutable afterwards and safe to
//! share across threads.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: String,
    pub feature_file: String,
    pub label: String,
}

/// One split of a dataset with all features resident in memory.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    pub records: Vec<Record>,
    /// Sorted unique class labels.
    pub classes: Vec<String>,
    /// Per class (aligned with `classes`): record indices in file order.
    pub class_records: Vec<Vec<usize>>,
    /// Shape shared by every sample (e.g. `[d]` or `[c, h, w]`).
    pub feature_shape: Vec<usize>,
    features: Vec<Vec<f64>>,
}

impl DatasetManifest {
    /// Parse `<root>/<split>.csv` and load every referenced feature file.
    pub fn load(root: &Path, split: &str) -> Result<DatasetManifest> {
        let path = root.join(format!("{split}.csv"));
        let text = fs::read_to_string(&path).map_err(|e| {
            Error::Load(format!("manifest {} unreadable: {e}", path.display()))
        })?;
        let mut lines = text.lines();
        match lines.next() {
            Some("id,feature_file,label") => {}
            other => {
                return Err(Error::Load(format!(
                    "manifest {}: expected header 'id,feature_file,label', got {:?}",
                    path.display(),
                    other.unwrap_or("")
                )))
            }
        }
        let mut records = Vec::new();
        let mut seen = BTreeSet::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::Load(format!(
                    "manifest {} line {}: expected 3 fields, got {}",
                    path.display(),
                    lineno + 2,
                    fields.len()
                )));
            }
            let (id, feature_file, label) = (fields[0], fields[1], fields[2]);
            if label.is_empty() {
                return Err(Error::Load(format!(
                    "manifest {} line {}: empty class label",
                    path.display(),
                    lineno + 2
                )));
            }
            if !seen.insert(id.to_string()) {
                return Err(Error::Load(format!(
                    "manifest {} line {}: duplicate sample id '{id}'",
                    path.display(),
                    lineno + 2
                )));
            }
            records.push(Record {
                id: id.to_string(),
                feature_file: feature_file.to_string(),
                label: label.to_string(),
            });
        }

        let mut feature_shape: Vec<usize> = Vec::new();
        let mut features = Vec::with_capacity(records.len());
        for r in &records {
            let (shape, values) = read_feature_file(&root.join(&r.feature_file))?;
            if feature_shape.is_empty() {
                feature_shape = shape;
            } else if feature_shape != shape {
                return Err(Error::Load(format!(
                    "feature {}: shape {:?} differs from declared {:?}",
                    r.feature_file, shape, feature_shape
                )));
            }
            features.push(values);
        }

        let classes: Vec<String> = records
            .iter()
            .map(|r| r.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut class_records = vec![Vec::new(); classes.len()];
        for (i, r) in records.iter().enumerate() {
            let c = classes.binary_search(&r.label).expect("label in class set");
            class_records[c].push(i);
        }

        Ok(DatasetManifest {
            root: root.to_path_buf(),
            split: split.to_string(),
            records,
            classes,
            class_records,
            feature_shape,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn feature(&self, record: usize) -> &[f64] {
        &self.features[record]
    }

    pub fn feature_len(&self) -> usize {
        self.feature_shape.iter().product()
    }

    /// Class index (into `classes`) of a record.
    pub fn class_of(&self, record: usize) -> usize {
        self.classes
            .binary_search(&self.records[record].label)
            .expect("label in class set")
    }

    /// Smallest per-class record count.
    pub fn min_class_size(&self) -> usize {
        self.class_records.iter().map(Vec::len).min().unwrap_or(0)
    }
}

/// Class labels present in both manifests.
pub fn class_overlap(a: &DatasetManifest, b: &DatasetManifest) -> Vec<String> {
    let set: BTreeSet<&String> = b.classes.iter().collect();
    a.classes
        .iter()
        .filter(|c| set.contains(c))
        .cloned()
        .collect()
}

/// Error when the two manifests share any class label.
pub fn audit_class_disjoint(a: &DatasetManifest, b: &DatasetManifest) -> Result<()> {
    let shared = class_overlap(a, b);
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::Protocol(format!(
            "splits '{}' and '{}' share class labels: {}",
            a.split,
            b.split,
            shared.join(", ")
        )))
    }
}

/// Read a feature file; the format is chosen by the `.bin`/`.csv` suffix.
pub fn read_feature_file(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let name = path.to_string_lossy();
    let (shape, values) = if name.ends_with(".bin") {
        read_bin(path)?
    } else if name.ends_with(".csv") {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Load(format!("feature {} unreadable: {e}", path.display())))?;
        let mut values = Vec::new();
        for tok in text.trim().split(',') {
            values.push(tok.trim().parse::<f64>().map_err(|_| {
                Error::Load(format!("feature {}: bad float '{tok}'", path.display()))
            })?);
        }
        (vec![values.len()], values)
    } else {
        return Err(Error::Load(format!(
            "feature {}: unknown suffix (want .bin or .csv)",
            path.display()
        )));
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Load(format!(
            "feature {}: non-finite value",
            path.display()
        )));
    }
    Ok((shape, values))
}

fn read_bin(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Load(format!("feature {} unreadable: {e}", path.display())))?;
    let mut off = 0usize;
    let take_u64 = |off: &mut usize| -> Result<u64> {
        if *off + 8 > bytes.len() {
            return Err(Error::Load(format!(
                "feature {}: truncated header",
                path.display()
            )));
        }
        let v = u64::from_le_bytes(bytes[*off..*off + 8].try_into().unwrap());
        *off += 8;
        Ok(v)
    };
    let rank = take_u64(&mut off)? as usize;
    if rank > 4 {
        return Err(Error::Load(format!(
            "feature {}: implausible rank {rank}",
            path.display()
        )));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(take_u64(&mut off)? as usize);
    }
    let numel: usize = shape.iter().product();
    if bytes.len() != off + numel * 8 {
        return Err(Error::Load(format!(
            "feature {}: expected {} payload bytes, got {}",
            path.display(),
            numel * 8,
            bytes.len() - off
        )));
    }
    let mut values = Vec::with_capacity(numel);
    for i in 0..numel {
        values.push(f64::from_le_bytes(
            bytes[off + i * 8..off + (i + 1) * 8].try_into().unwrap(),
        ));
    }
    Ok((shape, values))
}

pub fn write_feature_bin(path: &Path, shape: &[usize], values: &[f64]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != values.len() {
        return Err(Error::Dim(format!(
            "write_feature_bin: shape {shape:?} vs {} values",
            values.len()
        )));
    }
    let mut bytes = Vec::with_capacity(8 * (1 + shape.len() + values.len()));
    bytes.extend_from_slice(&(shape.len() as u64).to_le_bytes());
    for &e in shape {
        bytes.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn write_feature_csv(path: &Path, values: &[f64]) -> Result<()> {
    let line = values
        .iter()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join(",");
    fs::write(path, line + "\n").map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Write `<root>/<split>.csv` in record order.
pub fn write_manifest(root: &Path, split: &str, records: &[Record]) -> Result<()> {
    let mut text = String::from("id,feature_file,label\n");
    for r in records {
        text.push_str(&format!("{},{},{}\n", r.id, r.feature_file, r.label));
    }
    let path = root.join(format!("{split}.csv"));
    fs::write(&path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}
