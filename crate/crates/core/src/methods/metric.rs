//! The metric-learning family: ProtoNet prototypes and DN4's
//! local-descriptor image-to-class measure. Trained purely episodically;
//! evaluation is a single forward pass with no per-task fitting.

use super::{Classifier, Family};
use crate::backbone::{image_descriptors, EmbeddingModel};
use crate::data::Episode;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::tensor::functional::{cosine_sim_matrix, sq_pairwise_dist};
use crate::tensor::Tensor;

const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProtoDistance {
    SqEuclidean,
    /// `1 - cosine similarity`.
    Cosine,
}

/// Per-class arithmetic means of support embeddings `[CK, d] -> [C, d]`.
/// Every class must contribute the same shot count.
pub fn compute_prototypes(
    support_embeddings: &Tensor,
    labels: &[usize],
    way: usize,
) -> Result<Tensor> {
    let (n, _d) = support_embeddings.rank2("compute_prototypes")?;
    if labels.len() != n {
        return Err(Error::Dim(format!(
            "compute_prototypes: {n} embeddings but {} labels",
            labels.len()
        )));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); way];
    for (i, &l) in labels.iter().enumerate() {
        if l >= way {
            return Err(Error::Label(format!(
                "compute_prototypes: label {l} out of range [0, {way})"
            )));
        }
        per_class[l].push(i);
    }
    let shot = per_class[0].len();
    for (c, rows) in per_class.iter().enumerate() {
        if rows.is_empty() || rows.len() != shot {
            return Err(Error::Coverage(format!(
                "compute_prototypes: class {c} has {} support rows, expected {shot}",
                rows.len()
            )));
        }
    }
    let mean_row = Tensor::from_vec(vec![1.0 / shot as f64; shot], &[1, shot])?;
    let mut protos = Vec::with_capacity(way);
    for rows in &per_class {
        let class_rows = support_embeddings.gather_rows(rows)?;
        protos.push(mean_row.matmul(&class_rows)?);
    }
    let refs: Vec<&Tensor> = protos.iter().collect();
    Tensor::concat_rows(&refs)
}

/// Distances from queries to prototypes under the chosen metric.
fn proto_distances(
    query_embeddings: &Tensor,
    prototypes: &Tensor,
    distance: ProtoDistance,
) -> Result<Tensor> {
    match distance {
        ProtoDistance::SqEuclidean => sq_pairwise_dist(query_embeddings, prototypes),
        ProtoDistance::Cosine => {
            let sim = cosine_sim_matrix(query_embeddings, prototypes, NORM_EPS)?;
            Tensor::ones(sim.shape()).sub(&sim)
        }
    }
}

/// Softmax posteriors `exp(-D) / sum exp(-D)` row-wise (`[M, C]`).
pub fn proto_posterior(
    query_embeddings: &Tensor,
    prototypes: &Tensor,
    distance: ProtoDistance,
) -> Result<Tensor> {
    proto_distances(query_embeddings, prototypes, distance)?
        .neg()?
        .softmax_rows()
}

/// DN4 image-to-class similarity: cosine similarities between the query's
/// `n` descriptors and the class pool's `nK` descriptors, summing the `k`
/// largest per query descriptor.
///
/// `frobenius` switches to the literal whole-matrix normalization
/// `(Q^T S) / (||Q||_F ||S||_F)` instead of per-descriptor cosine.
pub fn dn4_i2c(
    query_desc: &Tensor,
    class_desc: &Tensor,
    k: usize,
    frobenius: bool,
) -> Result<Tensor> {
    let (_n, d) = query_desc.rank2("dn4_i2c")?;
    let (nk, d2) = class_desc.rank2("dn4_i2c")?;
    if d != d2 {
        return Err(Error::Dim(format!(
            "dn4_i2c: descriptor dims {d} vs {d2}"
        )));
    }
    if k < 1 || k > nk {
        return Err(Error::Parameter(format!(
            "dn4_i2c: k = {k} out of range [1, {nk}]"
        )));
    }
    let sim = if frobenius {
        let fq = query_desc.mul(query_desc)?.sum_all()?.sqrt()?;
        let fs = class_desc.mul(class_desc)?.sum_all()?.sqrt()?;
        let inv = Tensor::scalar(1.0).div(&fq.mul(&fs)?)?;
        query_desc
            .matmul(&class_desc.transpose()?)?
            .mul_scalar_t(&inv)?
    } else {
        cosine_sim_matrix(query_desc, class_desc, NORM_EPS)?
    };
    sim.topk_rowsum(k)
}

/// ProtoNet behind the classifier interface.
pub struct ProtoNet {
    id: &'static str,
    pub distance: ProtoDistance,
}

impl ProtoNet {
    pub fn new(id: &'static str, distance: ProtoDistance) -> Self {
        ProtoNet { id, distance }
    }

    fn episode_logits(
        &self,
        model: &EmbeddingModel,
        bound: &Bound,
        episode: &Episode,
    ) -> Result<Tensor> {
        let sup = model.embed(bound, &episode.support_tensor()?)?;
        let qry = model.embed(bound, &episode.query_tensor()?)?;
        let protos = compute_prototypes(&sup, &episode.support_labels, episode.way)?;
        proto_distances(&qry, &protos, self.distance)?.neg()
    }
}

impl Classifier for ProtoNet {
    fn id(&self) -> &str {
        self.id
    }

    fn family(&self) -> Family {
        Family::Metric
    }

    fn episode_loss(
        &self,
        model: &EmbeddingModel,
        bound: &Bound,
        episode: &Episode,
    ) -> Result<Tensor> {
        // cross-entropy over -D logits == NLL of the Eq-style posterior
        self.episode_logits(model, bound, episode)?
            .cross_entropy(&episode.query_labels)
    }

    fn eval_scores(
        &self,
        model: &EmbeddingModel,
        params: &ParamSet,
        episode: &Episode,
    ) -> Result<Vec<f64>> {
        let bound = params.bind_const()?;
        Ok(self.episode_logits(model, &bound, episode)?.values().to_vec())
    }
}

/// DN4 behind the classifier interface.
pub struct Dn4 {
    pub k: usize,
    pub frobenius: bool,
}

impl Dn4 {
    pub fn new(k: usize, frobenius: bool) -> Self {
        Dn4 { k, frobenius }
    }

    fn episode_logits(
        &self,
        model: &EmbeddingModel,
        bound: &Bound,
        episode: &Episode,
    ) -> Result<Tensor> {
        if !model.output_mode.is_spatial() {
            return Err(Error::Config(
                "dn4 needs a spatial backbone (tinyconv-2)".into(),
            ));
        }
        let sup = model.embed(bound, &episode.support_tensor()?)?;
        let qry = model.embed(bound, &episode.query_tensor()?)?;

        // per-class descriptor pools [K*h*w, d]
        let mut class_desc = Vec::with_capacity(episode.way);
        for c in 0..episode.way {
            let mut parts = Vec::new();
            for (i, &l) in episode.support_labels.iter().enumerate() {
                if l == c {
                    parts.push(image_descriptors(&sup, i)?);
                }
            }
            if parts.is_empty() {
                return Err(Error::Coverage(format!(
                    "dn4: class {c} has no support descriptors"
                )));
            }
            let refs: Vec<&Tensor> = parts.iter().collect();
            class_desc.push(Tensor::concat_rows(&refs)?);
        }

        let m = episode.n_query();
        let mut rows = Vec::with_capacity(m);
        for i in 0..m {
            let qd = image_descriptors(&qry, i)?;
            let mut sims = Vec::with_capacity(episode.way);
            for cd in &class_desc {
                let s = dn4_i2c(&qd, cd, self.k, self.frobenius)?;
                sims.push(s.reshape(&[1, 1])?);
            }
            let refs: Vec<&Tensor> = sims.iter().collect();
            rows.push(Tensor::concat_rows(&refs)?.transpose()?); // [1, C]
        }
        let refs: Vec<&Tensor> = rows.iter().collect();
        Tensor::concat_rows(&refs) // [M, C]
    }
}

impl Classifier for Dn4 {
    fn id(&self) -> &str {
        "dn4"
    }

    fn family(&self) -> Family {
        Family::Metric
    }

    fn needs_spatial(&self) -> bool {
        true
    }

    fn episode_loss(
        &self,
        model: &EmbeddingModel,
        bound: &Bound,
        episode: &Episode,
    ) -> Result<Tensor> {
        self.episode_logits(model, bound, episode)?
            .cross_entropy(&episode.query_labels)
    }

    fn eval_scores(
        &self,
        model: &EmbeddingModel,
        params: &ParamSet,
        episode: &Episode,
    ) -> Result<Vec<f64>> {
        let bound = params.bind_const()?;
        Ok(self.episode_logits(model, &bound, episode)?.values().to_vec())
    }
}
