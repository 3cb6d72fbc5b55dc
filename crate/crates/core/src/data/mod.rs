//! Datasets and episodes: manifest loading, synthetic data generation,
//! the C-way K-shot sampler, and support/query transform hooks.

mod episode;
mod manifest;
mod synthetic;
mod transform;

pub use episode::{sample_episode, Episode};
pub use manifest::{
    audit_class_disjoint, class_overlap, read_feature_file, write_feature_bin,
    write_feature_csv, write_manifest, DatasetManifest, Record,
};
pub use synthetic::{generate_synthetic, SyntheticSpec};
pub use transform::{apply_transforms, FeatureTransform, GaussianJitter, Identity};
