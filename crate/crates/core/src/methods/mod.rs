//! The three method families behind one classifier interface.
//!
//! Every method implements [`Classifier`] with a training-mode entry
//! (`episode_loss`, the set-forward-loss path) and an evaluation-mode entry
//! (`eval_scores`, the set-forward path). Fine-tuning methods train by
//! global pre-training instead of episodic losses, so their `episode_loss`
//! is a state error; the engine dispatches on [`Family`].

mod finetune;
mod meta;
mod metric;

pub use finetune::{
    fit_head, predict, pretrain_epoch, register_pretrain_head, support_accuracy, FineTune,
    HeadHyper, HeadKind, TestHead,
};
pub use meta::{maml_inner, maml_outer_grad, r2d2_episode_loss, ridge_solve, Maml, MamlConfig, R2d2};
pub use metric::{compute_prototypes, dn4_i2c, proto_posterior, Dn4, ProtoDistance, ProtoNet};

use crate::backbone::EmbeddingModel;
use crate::data::Episode;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    FineTune,
    Meta,
    Metric,
}

/// The polymorphic classifier `C_omega` with distinct train-mode and
/// eval-mode behavior.
pub trait Classifier: Sync {
    fn id(&self) -> &str;

    fn family(&self) -> Family;

    /// Whether the method needs a spatial (descriptor-grid) backbone.
    fn needs_spatial(&self) -> bool {
        false
    }

    /// Register method-owned trainable parameters (classifier heads,
    /// calibration scalars) into the shared set.
    fn register_params(
        &self,
        _model: &EmbeddingModel,
        _train_way: usize,
        _params: &mut ParamSet,
        _seed: u64,
    ) -> Result<()> {
        Ok(())
    }

    /// Training-mode loss for one episode over graph-bound parameters.
    fn episode_loss(
        &self,
        model: &EmbeddingModel,
        bound: &Bound,
        episode: &Episode,
    ) -> Result<crate::tensor::Tensor>;

    /// Evaluation-mode scores, `M x C` row-major. Must not mutate any
    /// canonical parameter (meta methods adapt copies).
    fn eval_scores(
        &self,
        model: &EmbeddingModel,
        params: &ParamSet,
        episode: &Episode,
    ) -> Result<Vec<f64>>;
}

/// Every tunable a method reads; built from the run configuration.
#[derive(Debug, Clone)]
pub struct MethodSettings {
    pub head_steps: usize,
    pub head_lr: f64,
    pub tau: f64,
    pub logistic_max_steps: usize,
    pub logistic_tol: f64,
    pub nn_min_over_shots: bool,
    pub maml: MamlConfig,
    pub r2d2_lambda: f64,
    pub dn4_k: usize,
    pub dn4_frobenius: bool,
}

impl Default for MethodSettings {
    fn default() -> Self {
        MethodSettings {
            head_steps: 100,
            head_lr: 0.5,
            tau: 0.1,
            logistic_max_steps: 1000,
            logistic_tol: 1e-6,
            nn_min_over_shots: false,
            maml: MamlConfig::default(),
            r2d2_lambda: 50.0,
            dn4_k: 3,
            dn4_frobenius: false,
        }
    }
}

impl MethodSettings {
    pub fn head_hyper(&self) -> HeadHyper {
        HeadHyper {
            steps: self.head_steps,
            lr: self.head_lr,
            tau: self.tau,
            max_steps: self.logistic_max_steps,
            tol: self.logistic_tol,
            min_over_shots: self.nn_min_over_shots,
            epsilon: 1e-12,
        }
    }
}

pub const METHOD_IDS: &[&str] = &[
    "baseline",
    "baseline++",
    "rfs-simple",
    "rfs-nn",
    "rfs-nn-raw",
    "maml",
    "anil",
    "r2d2",
    "protonet",
    "protonet-cosine",
    "dn4",
];

/// Instantiate a method by id.
pub fn make_classifier(id: &str, s: &MethodSettings) -> Result<Box<dyn Classifier>> {
    let hyper = s.head_hyper();
    Ok(match id {
        "baseline" => Box::new(FineTune::new("baseline", HeadKind::Linear, hyper)),
        "baseline++" => Box::new(FineTune::new("baseline++", HeadKind::Cosine, hyper)),
        "rfs-simple" => Box::new(FineTune::new("rfs-simple", HeadKind::LogisticL2, hyper)),
        "rfs-nn" => Box::new(FineTune::new("rfs-nn", HeadKind::NnL2, hyper)),
        "rfs-nn-raw" => Box::new(FineTune::new("rfs-nn-raw", HeadKind::NnRaw, hyper)),
        "maml" => Box::new(Maml::new("maml", MamlConfig { head_only: false, ..s.maml })),
        "anil" => Box::new(Maml::new("anil", MamlConfig { head_only: true, ..s.maml })),
        "r2d2" => Box::new(R2d2::new(s.r2d2_lambda)),
        "protonet" => Box::new(ProtoNet::new("protonet", ProtoDistance::SqEuclidean)),
        "protonet-cosine" => Box::new(ProtoNet::new("protonet-cosine", ProtoDistance::Cosine)),
        "dn4" => Box::new(Dn4::new(s.dn4_k, s.dn4_frobenius)),
        other => {
            return Err(Error::Registry(format!(
                "unknown method '{other}' (known: {})",
                METHOD_IDS.join(", ")
            )))
        }
    })
}

/// Top-1 argmax with ties broken by the lowest class index.
pub fn argmax_row(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(scores: &[f64], labels: &[usize], classes: usize) -> f64 {
    let n = labels.len();
    let mut correct = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        if argmax_row(&scores[i * classes..(i + 1) * classes]) == l {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}
