//! C-way K-shot episodes and the episodic sampler.

use rand_chacha::ChaCha8Rng;

use super::manifest::DatasetManifest;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One sampled task: a labeled support set and a query set over the same C
/// episode-local classes. Feature buffers are materialized copies, so an
/// episode is self-contained and cheap to move across threads.
#[derive(Debug, Clone)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub query_per_class: usize,
    /// Per-sample feature shape (`[d]` or `[c, h, w]`).
    pub feature_shape: Vec<usize>,
    /// `way * shot` rows, grouped by class.
    pub support_features: Vec<f64>,
    pub support_labels: Vec<usize>,
    /// Manifest record indices behind the support rows.
    pub support_records: Vec<usize>,
    /// `way * query_per_class` rows, grouped by class.
    pub query_features: Vec<f64>,
    pub query_labels: Vec<usize>,
    pub query_records: Vec<usize>,
    /// Episode-local label -> original class label.
    pub class_map: Vec<String>,
}

impl Episode {
    pub fn feature_len(&self) -> usize {
        self.feature_shape.iter().product()
    }

    pub fn n_support(&self) -> usize {
        self.way * self.shot
    }

    pub fn n_query(&self) -> usize {
        self.way * self.query_per_class
    }

    /// Support features as a `[C*K, ...]` constant tensor.
    pub fn support_tensor(&self) -> Result<Tensor> {
        let mut shape = vec![self.n_support()];
        shape.extend_from_slice(&self.feature_shape);
        Tensor::from_vec(self.support_features.clone(), &shape)
    }

    /// Query features as a `[C*Q, ...]` constant tensor.
    pub fn query_tensor(&self) -> Result<Tensor> {
        let mut shape = vec![self.n_query()];
        shape.extend_from_slice(&self.feature_shape);
        Tensor::from_vec(self.query_features.clone(), &shape)
    }
}

/// Sample a C-way K-shot episode with Q queries per class.
///
/// Classes are chosen without replacement; within a class, K+Q records are
/// chosen without replacement, the first K forming the support set, so
/// support and query are disjoint. Labels are remapped to `[0, C)` in class
/// selection order.
pub fn sample_episode(
    manifest: &DatasetManifest,
    way: usize,
    shot: usize,
    query: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    if way < 1 || shot < 1 || query < 1 {
        return Err(Error::Parameter(format!(
            "way/shot/query must be >= 1, got {way}/{shot}/{query}"
        )));
    }
    if manifest.n_classes() < way {
        return Err(Error::Capacity(format!(
            "split '{}' has {} classes, need {way}",
            manifest.split,
            manifest.n_classes()
        )));
    }
    if manifest.min_class_size() < shot + query {
        return Err(Error::Capacity(format!(
            "split '{}' has a class with {} samples, need {}",
            manifest.split,
            manifest.min_class_size(),
            shot + query
        )));
    }

    let chosen = rand::seq::index::sample(rng, manifest.n_classes(), way);
    let feature_len = manifest.feature_len();
    let mut ep = Episode {
        way,
        shot,
        query_per_class: query,
        feature_shape: manifest.feature_shape.clone(),
        support_features: Vec::with_capacity(way * shot * feature_len),
        support_labels: Vec::with_capacity(way * shot),
        support_records: Vec::with_capacity(way * shot),
        query_features: Vec::with_capacity(way * query * feature_len),
        query_labels: Vec::with_capacity(way * query),
        query_records: Vec::with_capacity(way * query),
        class_map: Vec::with_capacity(way),
    };

    for (local, class_idx) in chosen.into_iter().enumerate() {
        ep.class_map.push(manifest.classes[class_idx].clone());
        let pool = &manifest.class_records[class_idx];
        let picks = rand::seq::index::sample(rng, pool.len(), shot + query);
        for (i, p) in picks.into_iter().enumerate() {
            let record = pool[p];
            if i < shot {
                ep.support_records.push(record);
                ep.support_labels.push(local);
                ep.support_features.extend_from_slice(manifest.feature(record));
            } else {
                ep.query_records.push(record);
                ep.query_labels.push(local);
                ep.query_features.extend_from_slice(manifest.feature(record));
            }
        }
    }
    Ok(ep)
}
