//! The fine-tuning family: global pre-training over base classes, then a
//! per-task test-time classifier on the frozen embedding.
//!
//! Heads: `linear` (baseline), `cosine` (baseline++), `logistic_l2`
//! (rfs-simple), and the nearest-centroid heads `nn_l2` / `nn_raw`
//! (rfs-nn with and without l2 normalization). Fitting touches only
//! support data; the embedding is never modified.

use rand::seq::SliceRandom;

use super::{Classifier, Family};
use crate::backbone::EmbeddingModel;
use crate::data::{DatasetManifest, Episode};
use crate::error::{Error, Result};
use crate::optim::Optimizer;
use crate::params::{Bound, ParamSet};
use crate::rng::{substream, tag};
use crate::tensor::functional::{broadcast_row, l2_normalize_rows};
use crate::tensor::{grad, Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Linear,
    Cosine,
    LogisticL2,
    NnL2,
    NnRaw,
}

#[derive(Debug, Clone)]
pub struct HeadHyper {
    pub steps: usize,
    pub lr: f64,
    /// Cosine-score temperature (scores divided by tau before softmax).
    pub tau: f64,
    pub max_steps: usize,
    pub tol: f64,
    /// nn_* heads: score by min distance over shots instead of centroids.
    pub min_over_shots: bool,
    pub epsilon: f64,
}

/// A fitted per-task classifier.
pub struct TestHead {
    pub kind: HeadKind,
    way: usize,
    dim: usize,
    hyper: HeadHyper,
    /// `[d, C]` for gradient-trained and logistic heads.
    weight: Option<Vec<f64>>,
    /// `[C]`; absent for the cosine head.
    bias: Option<Vec<f64>>,
    /// `[C, d]` class centroids for nn heads.
    centroids: Option<Vec<f64>>,
    /// All (possibly normalized) support embeddings for min-over-shots.
    shots: Option<(Vec<f64>, Vec<usize>)>,
    /// Objective trace of the logistic solver (non-increasing).
    pub objective_trace: Vec<f64>,
    fitted: bool,
}

fn coverage_check(labels: &[usize], way: usize) -> Result<()> {
    for c in 0..way {
        if !labels.contains(&c) {
            return Err(Error::Coverage(format!(
                "support set is missing class {c} of {way}"
            )));
        }
    }
    Ok(())
}

fn normalize_raw(rows: &mut [f64], n: usize, d: usize, eps: f64) {
    for i in 0..n {
        let row = &mut rows[i * d..(i + 1) * d];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
        row.iter_mut().for_each(|v| *v /= norm);
    }
}

fn class_centroids(rows: &[f64], labels: &[usize], way: usize, d: usize) -> Vec<f64> {
    let mut cent = vec![0.0; way * d];
    let mut counts = vec![0usize; way];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for j in 0..d {
            cent[l * d + j] += rows[i * d + j];
        }
    }
    for (l, &n) in counts.iter().enumerate() {
        cent[l * d..(l + 1) * d].iter_mut().for_each(|v| *v /= n as f64);
    }
    cent
}

/// Fit a test-time head of the given kind on support embeddings `[CK, d]`.
pub fn fit_head(
    kind: HeadKind,
    support_embeddings: &Tensor,
    labels: &[usize],
    way: usize,
    hyper: &HeadHyper,
) -> Result<TestHead> {
    let (n, d) = support_embeddings.rank2("fit_head")?;
    if labels.len() != n {
        return Err(Error::Dim(format!(
            "fit_head: {n} embeddings but {} labels",
            labels.len()
        )));
    }
    coverage_check(labels, way)?;

    let mut head = TestHead {
        kind,
        way,
        dim: d,
        hyper: hyper.clone(),
        weight: None,
        bias: None,
        centroids: None,
        shots: None,
        objective_trace: Vec::new(),
        fitted: false,
    };

    match kind {
        HeadKind::NnL2 | HeadKind::NnRaw => {
            let mut rows = support_embeddings.values().to_vec();
            if kind == HeadKind::NnL2 {
                normalize_raw(&mut rows, n, d, hyper.epsilon);
            }
            head.centroids = Some(class_centroids(&rows, labels, way, d));
            if hyper.min_over_shots {
                head.shots = Some((rows, labels.to_vec()));
            }
        }
        HeadKind::Linear => {
            let (w, b) = fit_gradient_head(support_embeddings, labels, way, hyper, false)?;
            head.weight = Some(w);
            head.bias = Some(b);
        }
        HeadKind::Cosine => {
            let (w, _) = fit_gradient_head(support_embeddings, labels, way, hyper, true)?;
            head.weight = Some(w);
        }
        HeadKind::LogisticL2 => {
            let xn = l2_normalize_rows(support_embeddings, hyper.epsilon)?.detach();
            let (w, b, trace) = fit_logistic(&xn, labels, way, hyper)?;
            head.weight = Some(w);
            head.bias = Some(b);
            head.objective_trace = trace;
        }
    }
    head.fitted = true;
    Ok(head)
}

fn cosine_logits(x: &Tensor, w: &Tensor, tau: f64, eps: f64) -> Result<Tensor> {
    let xn = l2_normalize_rows(x, eps)?;
    let wn = l2_normalize_rows(&w.transpose()?, eps)?; // columns of w are class vectors
    xn.matmul(&wn.transpose()?)?.scale(1.0 / tau)
}

/// Plain fixed-step gradient descent on the support cross-entropy.
fn fit_gradient_head(
    x: &Tensor,
    labels: &[usize],
    way: usize,
    hyper: &HeadHyper,
    cosine: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, d) = x.rank2("fit_gradient_head")?;
    let xc = x.detach();
    let mut w = vec![0.0; d * way];
    let mut b = vec![0.0; way];
    for _ in 0..hyper.steps {
        let g = Graph::new();
        let wt = g.leaf(w.clone(), &[d, way], true)?;
        let bt = g.leaf(b.clone(), &[1, way], true)?;
        let logits = if cosine {
            cosine_logits(&xc, &wt, hyper.tau, hyper.epsilon)?
        } else {
            xc.matmul(&wt)?.add(&broadcast_row(&bt, n)?)?
        };
        let loss = logits.cross_entropy(labels)?;
        let grads = grad(&loss, &[wt, bt], false)?;
        for (v, gv) in w.iter_mut().zip(grads[0].values()) {
            *v -= hyper.lr * gv;
        }
        if !cosine {
            for (v, gv) in b.iter_mut().zip(grads[1].values()) {
                *v -= hyper.lr * gv;
            }
        }
    }
    Ok((w, b))
}

/// Full-batch gradient descent with step halving on objective increase;
/// stops at gradient norm <= tol or the step cap. The accepted objective
/// sequence is non-increasing by construction.
fn fit_logistic(
    xn: &Tensor,
    labels: &[usize],
    way: usize,
    hyper: &HeadHyper,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let (n, d) = xn.rank2("fit_logistic")?;
    let mut w = vec![0.0; d * way];
    let mut b = vec![0.0; way];
    let mut lr = hyper.lr;

    let objective = |w: &[f64], b: &[f64]| -> Result<f64> {
        let wt = Tensor::from_vec(w.to_vec(), &[d, way])?;
        let bt = Tensor::from_vec(b.to_vec(), &[1, way])?;
        xn.matmul(&wt)?
            .add(&broadcast_row(&bt, n)?)?
            .cross_entropy(labels)?
            .item()
    };

    let mut trace = vec![objective(&w, &b)?];
    for _ in 0..hyper.max_steps {
        let g = Graph::new();
        let wt = g.leaf(w.clone(), &[d, way], true)?;
        let bt = g.leaf(b.clone(), &[1, way], true)?;
        let loss = xn
            .matmul(&wt)?
            .add(&broadcast_row(&bt, n)?)?
            .cross_entropy(labels)?;
        let current = loss.item()?;
        let grads = grad(&loss, &[wt, bt], false)?;
        let gw = grads[0].values();
        let gb = grads[1].values();
        let gnorm = gw
            .iter()
            .chain(gb.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if gnorm <= hyper.tol {
            break;
        }
        // step halving until the objective does not increase
        loop {
            let wc: Vec<f64> = w.iter().zip(gw).map(|(v, g)| v - lr * g).collect();
            let bc: Vec<f64> = b.iter().zip(gb).map(|(v, g)| v - lr * g).collect();
            let cand = objective(&wc, &bc)?;
            if cand <= current {
                w = wc;
                b = bc;
                trace.push(cand);
                break;
            }
            lr *= 0.5;
            if lr < 1e-15 {
                return Ok((w, b, trace));
            }
        }
    }
    Ok((w, b, trace))
}

/// Scores `[M, C]` for query embeddings under a fitted head.
pub fn predict(head: &TestHead, query_embeddings: &Tensor) -> Result<Vec<f64>> {
    if !head.fitted {
        return Err(Error::State("predict called on an unfitted head".into()));
    }
    let (m, d) = query_embeddings.rank2("predict")?;
    if d != head.dim {
        return Err(Error::Dim(format!(
            "predict: query dim {d} vs head dim {}",
            head.dim
        )));
    }
    let way = head.way;
    match head.kind {
        HeadKind::Linear | HeadKind::LogisticL2 => {
            let x = if head.kind == HeadKind::LogisticL2 {
                l2_normalize_rows(query_embeddings, head.hyper.epsilon)?
            } else {
                query_embeddings.clone()
            };
            let w = Tensor::from_vec(head.weight.clone().unwrap(), &[d, way])?;
            let b = head.bias.as_ref().unwrap();
            let mut out = x.matmul(&w)?.values().to_vec();
            for i in 0..m {
                for c in 0..way {
                    out[i * way + c] += b[c];
                }
            }
            Ok(out)
        }
        HeadKind::Cosine => {
            let w = Tensor::from_vec(head.weight.clone().unwrap(), &[d, way])?;
            Ok(cosine_logits(query_embeddings, &w, head.hyper.tau, head.hyper.epsilon)?
                .values()
                .to_vec())
        }
        HeadKind::NnL2 | HeadKind::NnRaw => {
            let mut rows = query_embeddings.values().to_vec();
            if head.kind == HeadKind::NnL2 {
                normalize_raw(&mut rows, m, d, head.hyper.epsilon);
            }
            let mut out = vec![0.0; m * way];
            if let Some((shots, labels)) = &head.shots {
                for i in 0..m {
                    let q = &rows[i * d..(i + 1) * d];
                    let mut best = vec![f64::INFINITY; way];
                    for (s, &l) in labels.iter().enumerate() {
                        let srow = &shots[s * d..(s + 1) * d];
                        let dist: f64 =
                            q.iter().zip(srow).map(|(a, b)| (a - b) * (a - b)).sum();
                        if dist < best[l] {
                            best[l] = dist;
                        }
                    }
                    for c in 0..way {
                        out[i * way + c] = -best[c];
                    }
                }
            } else {
                let cent = head.centroids.as_ref().unwrap();
                for i in 0..m {
                    let q = &rows[i * d..(i + 1) * d];
                    for c in 0..way {
                        let crow = &cent[c * d..(c + 1) * d];
                        let dist: f64 =
                            q.iter().zip(crow).map(|(a, b)| (a - b) * (a - b)).sum();
                        out[i * way + c] = -dist;
                    }
                }
            }
            Ok(out)
        }
    }
}

/// One epoch of Eq-1 style pre-training: minibatch SGD on the global
/// cross-entropy over all base classes. Returns the mean minibatch loss.
///
/// Expects `pretrain.weight` / `pretrain.bias` head entries in `params`.
pub fn pretrain_epoch(
    model: &EmbeddingModel,
    params: &mut ParamSet,
    manifest: &DatasetManifest,
    optimizer: &mut Optimizer,
    batch_size: usize,
    epoch: usize,
    seed: u64,
) -> Result<f64> {
    if manifest.is_empty() {
        return Err(Error::Capacity("pretraining on an empty manifest".into()));
    }
    let n_base = manifest.n_classes();
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    let mut rng = substream(seed, &[tag::SHUFFLE, epoch as u64]);
    order.shuffle(&mut rng);

    let flen = manifest.feature_len();
    let mut losses = Vec::new();
    for batch in order.chunks(batch_size.max(1)) {
        let mut feats = Vec::with_capacity(batch.len() * flen);
        let mut labels = Vec::with_capacity(batch.len());
        for &r in batch {
            feats.extend_from_slice(manifest.feature(r));
            labels.push(manifest.class_of(r));
        }
        let mut shape = vec![batch.len()];
        shape.extend_from_slice(&manifest.feature_shape);
        let x = Tensor::from_vec(feats, &shape)?;

        let g = Graph::new();
        let bound = params.bind(&g, true)?;
        let emb = model.embed(&bound, &x)?;
        let w = bound.get("pretrain.weight")?;
        let b = bound.get("pretrain.bias")?;
        let logits = emb.matmul(w)?.add(&broadcast_row(b, batch.len())?)?;
        let loss = logits.cross_entropy(&labels)?;
        if !loss.item()?.is_finite() {
            return Err(Error::Training("pre-training loss diverged".into()));
        }
        let grads = grad(&loss, &bound.tensors, false)?;
        let grad_values: Vec<&[f64]> = grads.iter().map(|t| t.values()).collect();
        optimizer.step(params, &grad_values, epoch)?;
        losses.push(loss.item()?);
        let _ = n_base;
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Register the global pre-training head for `n_base` classes.
pub fn register_pretrain_head(
    model: &EmbeddingModel,
    n_base: usize,
    params: &mut ParamSet,
    seed: u64,
) -> Result<()> {
    let d = model.output_mode.dim();
    let bound = 1.0 / (d as f64).sqrt();
    let mut rng = substream(seed, &[tag::HEAD, 0]);
    let w: Vec<f64> = (0..d * n_base)
        .map(|_| rand::Rng::random_range(&mut rng, -bound..bound))
        .collect();
    params.push("pretrain.weight", &[d, n_base], w)?;
    params.push("pretrain.bias", &[1, n_base], vec![0.0; n_base])?;
    Ok(())
}

/// Fine-tuning methods as a classifier: evaluation embeds the episode with
/// the frozen backbone, fits the head on support, and scores the queries.
pub struct FineTune {
    id: &'static str,
    pub head: HeadKind,
    hyper: HeadHyper,
}

impl FineTune {
    pub fn new(id: &'static str, head: HeadKind, hyper: HeadHyper) -> Self {
        FineTune { id, head, hyper }
    }
}

impl Classifier for FineTune {
    fn id(&self) -> &str {
        self.id
    }

    fn family(&self) -> Family {
        Family::FineTune
    }

    fn episode_loss(
        &self,
        _model: &EmbeddingModel,
        _bound: &Bound,
        _episode: &Episode,
    ) -> Result<Tensor> {
        Err(Error::State(format!(
            "method '{}' trains by pre-training, not episodically",
            self.id
        )))
    }

    fn eval_scores(
        &self,
        model: &EmbeddingModel,
        params: &ParamSet,
        episode: &Episode,
    ) -> Result<Vec<f64>> {
        let bound = params.bind_const()?;
        let sup = model.embed(&bound, &episode.support_tensor()?)?.detach();
        let qry = model.embed(&bound, &episode.query_tensor()?)?.detach();
        let head = fit_head(self.head, &sup, &episode.support_labels, episode.way, &self.hyper)?;
        predict(&head, &qry)
    }
}

/// Episode-level training accuracy of a fitted head, used by tests.
pub fn support_accuracy(head: &TestHead, embeddings: &Tensor, labels: &[usize]) -> Result<f64> {
    let scores = predict(head, embeddings)?;
    Ok(super::accuracy(&scores, labels, head.way))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper() -> HeadHyper {
        HeadHyper {
            steps: 100,
            lr: 0.5,
            tau: 0.1,
            max_steps: 1000,
            tol: 1e-6,
            min_over_shots: false,
            epsilon: 1e-12,
        }
    }

    #[test]
    fn nn_l2_single_shot_centroid_is_normalized_embedding() {
        let emb = Tensor::from_vec(vec![3.0, 4.0, 0.0, -5.0], &[2, 2]).unwrap();
        let head = fit_head(HeadKind::NnL2, &emb, &[0, 1], 2, &hyper()).unwrap();
        let cent = head.centroids.as_ref().unwrap();
        assert!((cent[0] - 0.6).abs() < 1e-12 && (cent[1] - 0.8).abs() < 1e-12);
        assert!((cent[2] - 0.0).abs() < 1e-12 && (cent[3] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn missing_class_is_coverage_error() {
        let emb = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        assert!(matches!(
            fit_head(HeadKind::NnL2, &emb, &[0, 0], 2, &hyper()),
            Err(Error::Coverage(_))
        ));
    }

    #[test]
    fn logistic_on_separable_support_hits_full_accuracy() {
        // two well-separated directions
        let emb = Tensor::from_vec(
            vec![2.0, 0.1, 1.9, -0.1, -2.0, 0.2, -2.1, -0.2],
            &[4, 2],
        )
        .unwrap();
        let labels = [0, 0, 1, 1];
        let head = fit_head(HeadKind::LogisticL2, &emb, &labels, 2, &hyper()).unwrap();
        assert_eq!(support_accuracy(&head, &emb, &labels).unwrap(), 1.0);
        // objective non-increasing
        for w in head.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn nn_head_picks_nearest_centroid() {
        let emb = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let head = fit_head(HeadKind::NnRaw, &emb, &[0, 1], 2, &hyper()).unwrap();
        let q = Tensor::from_vec(vec![0.9, 0.05], &[1, 2]).unwrap();
        let scores = predict(&head, &q).unwrap();
        assert_eq!(super::super::argmax_row(&scores), 0);
    }

    #[test]
    fn zero_linear_head_ties_break_to_lowest_index() {
        let emb = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let mut h = hyper();
        h.steps = 0; // keep W = 0, b = 0
        let head = fit_head(HeadKind::Linear, &emb, &[0, 1], 2, &h).unwrap();
        let q = Tensor::from_vec(vec![0.3, -0.4], &[1, 2]).unwrap();
        let scores = predict(&head, &q).unwrap();
        assert_eq!(scores, vec![0.0, 0.0]);
        assert_eq!(super::super::argmax_row(&scores), 0);
    }

    #[test]
    fn cosine_scores_invariant_to_query_rescaling() {
        let emb = Tensor::from_vec(vec![1.0, 0.2, -0.3, 1.0], &[2, 2]).unwrap();
        let head = fit_head(HeadKind::Cosine, &emb, &[0, 1], 2, &hyper()).unwrap();
        let q = Tensor::from_vec(vec![0.5, -0.7], &[1, 2]).unwrap();
        let q_scaled = q.scale(37.5).unwrap();
        let a = predict(&head, &q).unwrap();
        let b = predict(&head, &q_scaled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn unfitted_predict_is_prevented_by_construction() {
        // fit_head is the only constructor, so heads are always fitted;
        // the state error is still exercised through the struct invariant.
        let emb = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let mut head = fit_head(HeadKind::NnRaw, &emb, &[0, 1], 2, &hyper()).unwrap();
        head.fitted = false;
        assert!(matches!(
            predict(&head, &emb),
            Err(Error::State(_))
        ));
    }
}
