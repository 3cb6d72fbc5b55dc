//! Synthetic dataset generation.
//!
//! Gaussian class clusters at desk scale: each class draws a center once
//! from `center_scale * N(0, I)` (optionally shifted), then samples are
//! `center + noise_sigma * N(0, I)`. Splits get globally distinct class
//! identities, so the class-disjointness invariant holds by construction.
//! Spatial mode emits an `h x w` grid of `feature_dim`-dimensional
//! descriptors per sample, all drawn around the same class center.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use super::manifest::{write_feature_bin, write_feature_csv, write_manifest, Record};
use crate::error::{Error, Result};
use crate::rng::{substream, tag};

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub samples_per_class: usize,
    pub feature_dim: usize,
    pub center_scale: f64,
    pub noise_sigma: f64,
    /// `Some((h, w))` emits `[feature_dim, h, w]` descriptor grids.
    pub spatial: Option<(usize, usize)>,
    /// Added to every coordinate of every class center (domain shift knob).
    pub center_shift: f64,
    /// Prefix for class labels; distinct prefixes keep two generated
    /// datasets class-disjoint for cross-domain protocols.
    pub class_prefix: String,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            train_classes: 10,
            val_classes: 5,
            test_classes: 5,
            samples_per_class: 20,
            feature_dim: 8,
            center_scale: 1.0,
            noise_sigma: 0.2,
            spatial: None,
            center_shift: 0.0,
            class_prefix: "cls".into(),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.noise_sigma <= 0.0 {
            return Err(Error::Parameter(format!(
                "noise_sigma must be positive, got {}",
                self.noise_sigma
            )));
        }
        if self.feature_dim < 2 {
            return Err(Error::Parameter(format!(
                "feature_dim must be >= 2, got {}",
                self.feature_dim
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Parameter("samples_per_class must be >= 1".into()));
        }
        if self.train_classes == 0 || self.val_classes == 0 || self.test_classes == 0 {
            return Err(Error::Parameter(
                "every split needs at least one class".into(),
            ));
        }
        if let Some((h, w)) = self.spatial {
            if h == 0 || w == 0 {
                return Err(Error::Parameter("spatial grid extents must be >= 1".into()));
            }
        }
        Ok(())
    }

    fn sample_shape(&self) -> Vec<usize> {
        match self.spatial {
            Some((h, w)) => vec![self.feature_dim, h, w],
            None => vec![self.feature_dim],
        }
    }
}

/// Generate the dataset under `root`: `train/val/test.csv` manifests plus a
/// `features/` directory. Deterministic under `spec.seed`; flat features go
/// to `.csv` files, spatial grids to `.bin`.
pub fn generate_synthetic(root: &Path, spec: &SyntheticSpec) -> Result<()> {
    spec.validate()?;
    fs::create_dir_all(root.join("features"))
        .map_err(|e| Error::Io(format!("{}: {e}", root.display())))?;

    let splits = [
        ("train", spec.train_classes),
        ("val", spec.val_classes),
        ("test", spec.test_classes),
    ];
    let mut global_class = 0usize;
    for (split, n_classes) in splits {
        let mut records = Vec::with_capacity(n_classes * spec.samples_per_class);
        for _ in 0..n_classes {
            let label = format!("{}{:04}", spec.class_prefix, global_class);
            let mut center_rng = substream(spec.seed, &[tag::CENTER, global_class as u64]);
            let center: Vec<f64> = (0..spec.feature_dim)
                .map(|_| {
                    spec.center_scale * center_rng.sample::<f64, _>(StandardNormal)
                        + spec.center_shift
                })
                .collect();
            let mut sample_rng = substream(spec.seed, &[tag::SAMPLE, global_class as u64]);
            for s in 0..spec.samples_per_class {
                let id = format!("{label}_{s:04}");
                let shape = spec.sample_shape();
                let numel: usize = shape.iter().product();
                let positions = numel / spec.feature_dim;
                let mut values = vec![0.0; numel];
                // layout [d, h, w]: channel-major, positions fastest
                for ch in 0..spec.feature_dim {
                    for p in 0..positions {
                        values[ch * positions + p] = center[ch]
                            + spec.noise_sigma * sample_rng.sample::<f64, _>(StandardNormal);
                    }
                }
                let rel = if spec.spatial.is_some() {
                    let rel = format!("features/{id}.bin");
                    write_feature_bin(&root.join(&rel), &shape, &values)?;
                    rel
                } else {
                    let rel = format!("features/{id}.csv");
                    write_feature_csv(&root.join(&rel), &values)?;
                    rel
                };
                records.push(Record {
                    id,
                    feature_file: rel,
                    label: label.clone(),
                });
            }
            global_class += 1;
        }
        write_manifest(root, split, &records)?;
    }
    Ok(())
}
