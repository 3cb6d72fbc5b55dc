//! The meta-learning family: MAML's two-loop optimization, ANIL's
//! head-only inner loop, and R2D2's closed-form ridge base-learner.
//!
//! The inner loop records its updates on the graph when `second_order` is
//! set, so backpropagating the query loss through the adapted parameters
//! yields the exact second-order meta-gradient. First-order mode detaches
//! the inner gradients, leaving only the identity path through the update.

use super::{Classifier, Family};
use crate::backbone::EmbeddingModel;
use crate::data::Episode;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::rng::{substream, tag};
use crate::tensor::functional::{broadcast_row, onehot};
use crate::tensor::{grad, Graph, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct MamlConfig {
    pub inner_lr: f64,
    pub inner_steps: usize,
    /// ANIL: adapt only the classifier head in the inner loop.
    pub head_only: bool,
    pub second_order: bool,
}

impl Default for MamlConfig {
    fn default() -> Self {
        MamlConfig {
            inner_lr: 0.1,
            inner_steps: 3,
            head_only: false,
            second_order: true,
        }
    }
}

/// Run `inner_steps` gradient updates of the support loss, adapting only
/// parameters with a true `adapt` flag. Returns the adapted tensors.
///
/// With `second_order` the updates are recorded, so gradients of any later
/// loss flow through them; otherwise the inner gradients are constants and
/// only the identity path remains (first-order MAML).
pub fn maml_inner(
    loss_fn: &mut dyn FnMut(&[Tensor]) -> Result<Tensor>,
    theta0: &[Tensor],
    adapt: &[bool],
    cfg: &MamlConfig,
) -> Result<Vec<Tensor>> {
    if adapt.len() != theta0.len() {
        return Err(Error::State(format!(
            "maml_inner: {} adapt flags for {} parameters",
            adapt.len(),
            theta0.len()
        )));
    }
    let mut theta: Vec<Tensor> = theta0.to_vec();
    if cfg.inner_steps == 0 || cfg.inner_lr == 0.0 {
        return Ok(theta);
    }
    for _ in 0..cfg.inner_steps {
        let loss = loss_fn(&theta)?;
        if !loss.item()?.is_finite() {
            return Err(Error::NonFinite("inner-loop loss is not finite".into()));
        }
        let wrt: Vec<Tensor> = theta
            .iter()
            .zip(adapt)
            .filter(|(_, &a)| a)
            .map(|(t, _)| t.clone())
            .collect();
        let grads = grad(&loss, &wrt, cfg.second_order)?;
        let mut gi = 0;
        for (t, &a) in theta.iter_mut().zip(adapt) {
            if a {
                *t = t.sub(&grads[gi].scale(cfg.inner_lr)?)?;
                gi += 1;
            }
        }
    }
    Ok(theta)
}

/// MAML / ANIL behind the classifier interface. Owns a linear head
/// `[d, way]` whose width is fixed at training way.
pub struct Maml {
    id: &'static str,
    pub cfg: MamlConfig,
}

impl Maml {
    pub fn new(id: &'static str, cfg: MamlConfig) -> Self {
        Maml { id, cfg }
    }

    fn adapt_mask(&self, bound: &Bound, params_len: usize) -> Vec<bool> {
        let head_w = bound.position("head.weight");
        let head_b = bound.position("head.bias");
        (0..params_len)
            .map(|i| !self.cfg.head_only || Some(i) == head_w || Some(i) == head_b)
            .collect()
    }

    fn logits(
        model: &EmbeddingModel,
        bound: &Bound,
        theta: &[Tensor],
        x: &Tensor,
    ) -> Result<Tensor> {
        let b = bound.replace(theta.to_vec())?;
        let emb = model.embed(&b, x)?;
        let n = emb.shape()[0];
        emb.matmul(b.get("head.weight")?)?
            .add(&broadcast_row(b.get("head.bias")?, n)?)
    }

    /// Adapted query logits for one episode (shared by train and eval).
    fn adapted_query_logits(
        &self,
        model: &EmbeddingModel,
        bound: &Bound,
        episode: &Episode,
        second_order: bool,
    ) -> Result<Tensor> {
        let sup_x = episode.support_tensor()?;
        let qry_x = episode.query_tensor()?;
        let cfg = MamlConfig {
            second_order,
            ..self.cfg
        };
        let adapt = self.adapt_mask(bound, bound.tensors.len());
        let sup_labels = episode.support_labels.clone();
        let model_ref = model;
        let bound_ref = bound;
        let mut loss_fn = move |theta: &[Tensor]| -> Result<Tensor> {
            Maml::logits(model_ref, bound_ref, theta, &sup_x)?.cross_entropy(&sup_labels)
        };
        let theta_m = maml_inner(&mut loss_fn, &bound.tensors, &adapt, &cfg)?;
        Maml::logits(model, bound, &theta_m, &qry_x)
    }
}

impl Classifier for Maml {
    fn id(&self) -> &str {
        self.id
    }

    fn family(&self) -> Family {
        Family::Meta
    }

    fn register_params(
        &self,
        model: &EmbeddingModel,
        train_way: usize,
        params: &mut ParamSet,
        seed: u64,
    ) -> Result<()> {
        let d = model.output_mode.dim();
        let bound = 1.0 / (d as f64).sqrt();
        let mut rng = substream(seed, &[tag::HEAD, 1]);
        let w: Vec<f64> = (0..d * train_way)
            .map(|_| rand::Rng::random_range(&mut rng, -bound..bound))
            .collect();
        params.push("head.weight", &[d, train_way], w)?;
        params.push("head.bias", &[1, train_way], vec![0.0; train_way])?;
        Ok(())
    }

    fn episode_loss(
        &self,
        model: &EmbeddingModel,
        bound: &Bound,
        episode: &Episode,
    ) -> Result<Tensor> {
        let logits =
            self.adapted_query_logits(model, bound, episode, self.cfg.second_order)?;
        logits.cross_entropy(&episode.query_labels)
    }

    fn eval_scores(
        &self,
        model: &EmbeddingModel,
        params: &ParamSet,
        episode: &Episode,
    ) -> Result<Vec<f64>> {
        let head_way = params
            .get("head.weight")
            .map(|p| p.shape[1])
            .ok_or_else(|| Error::State("maml head parameters missing".into()))?;
        if head_way != episode.way {
            return Err(Error::Config(format!(
                "{}: eval way {} differs from trained head width {head_way}",
                self.id, episode.way
            )));
        }
        // adapt a bound copy; canonical parameters stay untouched
        let g = Graph::new();
        let bound = params.bind(&g, true)?;
        let logits = self.adapted_query_logits(model, &bound, episode, false)?;
        Ok(logits.values().to_vec())
    }
}

/// Meta-gradient of the query loss w.r.t. every parameter entry for one
/// episode (Eq-style outer gradient). Returns per-entry gradient buffers.
pub fn maml_outer_grad(
    method: &Maml,
    model: &EmbeddingModel,
    params: &ParamSet,
    episode: &Episode,
) -> Result<Vec<Vec<f64>>> {
    let g = Graph::new();
    let bound = params.bind(&g, true)?;
    let loss = method.episode_loss(model, &bound, episode)?;
    if !loss.item()?.is_finite() {
        return Err(Error::NonFinite("query loss is not finite".into()));
    }
    let grads = grad(&loss, &bound.tensors, false)?;
    Ok(grads.iter().map(|t| t.values().to_vec()).collect())
}

/// Closed-form ridge regression `W = (X^T X + lambda I)^{-1} X^T Y`,
/// differentiable through the solve.
pub fn ridge_solve(x: &Tensor, y: &Tensor, lambda: f64) -> Result<Tensor> {
    if lambda < 0.0 {
        return Err(Error::Parameter(format!(
            "ridge_solve: lambda must be >= 0, got {lambda}"
        )));
    }
    let (_, d) = x.rank2("ridge_solve")?;
    let xt = x.transpose()?;
    let mut a = xt.matmul(x)?;
    if lambda > 0.0 {
        a = a.add(&Tensor::eye(d).scale(lambda)?)?;
    }
    let b = xt.matmul(y)?;
    Tensor::solve_spd(&a, &b)
}

/// R2D2 episode forward: ridge base-learner on one-hot support labels,
/// calibrated predictions `alpha * Xq W + beta`, cross-entropy meta-loss.
/// Returns `(loss, query logits)`.
pub fn r2d2_episode_loss(
    model: &EmbeddingModel,
    bound: &Bound,
    episode: &Episode,
    lambda: f64,
) -> Result<(Tensor, Tensor)> {
    let sup = model.embed(bound, &episode.support_tensor()?)?;
    let y = onehot(&episode.support_labels, episode.way)?;
    let w = ridge_solve(&sup, &y, lambda)?;
    let qry = model.embed(bound, &episode.query_tensor()?)?;
    let raw = qry.matmul(&w)?;
    let alpha = bound.get("r2d2.alpha_cal")?;
    let beta = bound.get("r2d2.beta_cal")?;
    let shift = Tensor::ones(raw.shape()).mul_scalar_t(beta)?;
    let logits = raw.mul_scalar_t(alpha)?.add(&shift)?;
    let loss = logits.cross_entropy(&episode.query_labels)?;
    Ok((loss, logits))
}

pub struct R2d2 {
    pub lambda: f64,
}

impl R2d2 {
    pub fn new(lambda: f64) -> Self {
        R2d2 { lambda }
    }
}

impl Classifier for R2d2 {
    fn id(&self) -> &str {
        "r2d2"
    }

    fn family(&self) -> Family {
        Family::Meta
    }

    fn register_params(
        &self,
        _model: &EmbeddingModel,
        _train_way: usize,
        params: &mut ParamSet,
        _seed: u64,
    ) -> Result<()> {
        // identity calibration at start
        params.push("r2d2.alpha_cal", &[], vec![1.0])?;
        params.push("r2d2.beta_cal", &[], vec![0.0])?;
        Ok(())
    }

    fn episode_loss(
        &self,
        model: &EmbeddingModel,
        bound: &Bound,
        episode: &Episode,
    ) -> Result<Tensor> {
        Ok(r2d2_episode_loss(model, bound, episode, self.lambda)?.0)
    }

    fn eval_scores(
        &self,
        model: &EmbeddingModel,
        params: &ParamSet,
        episode: &Episode,
    ) -> Result<Vec<f64>> {
        let bound = params.bind_const()?;
        let (_, logits) = r2d2_episode_loss(model, &bound, episode, self.lambda)?;
        Ok(logits.values().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, rel_err};

    fn scalar_leaf(g: &Graph, v: f64) -> Tensor {
        g.leaf(vec![v], &[], true).unwrap()
    }

    #[test]
    fn inner_loop_with_zero_steps_is_identity() {
        let g = Graph::new();
        let theta = scalar_leaf(&g, 1.0);
        let cfg = MamlConfig {
            inner_steps: 0,
            ..Default::default()
        };
        let mut f = |t: &[Tensor]| t[0].mul(&t[0]);
        let out = maml_inner(&mut f, &[theta.clone()], &[true], &cfg).unwrap();
        assert_eq!(out[0].values(), theta.values());
    }

    #[test]
    fn inner_loop_with_zero_lr_is_identity() {
        let g = Graph::new();
        let theta = scalar_leaf(&g, 1.0);
        let cfg = MamlConfig {
            inner_lr: 0.0,
            inner_steps: 5,
            ..Default::default()
        };
        let mut f = |t: &[Tensor]| t[0].mul(&t[0]);
        let out = maml_inner(&mut f, &[theta], &[true], &cfg).unwrap();
        assert_eq!(out[0].values(), &[1.0]);
    }

    #[test]
    fn one_parameter_analytic_inner_step() {
        // L_S(theta) = theta^2, theta0 = 1, alpha = 0.1, m = 1 -> 0.8
        let g = Graph::new();
        let theta = scalar_leaf(&g, 1.0);
        let cfg = MamlConfig {
            inner_lr: 0.1,
            inner_steps: 1,
            head_only: false,
            second_order: true,
        };
        let mut f = |t: &[Tensor]| t[0].mul(&t[0]);
        let out = maml_inner(&mut f, &[theta], &[true], &cfg).unwrap();
        assert!((out[0].values()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn one_parameter_meta_gradient_second_order() {
        // L_S = theta^2, L_Q = (theta - 1)^2, theta0 = 0, alpha = 0.1, m = 1:
        // theta1 = 0.8 theta0, meta-grad = 2(0.8 theta0 - 1) * 0.8 = -1.6
        let g = Graph::new();
        let theta = scalar_leaf(&g, 0.0);
        let cfg = MamlConfig {
            inner_lr: 0.1,
            inner_steps: 1,
            head_only: false,
            second_order: true,
        };
        let mut f = |t: &[Tensor]| t[0].mul(&t[0]);
        let adapted = maml_inner(&mut f, &[theta.clone()], &[true], &cfg).unwrap();
        let one = Tensor::scalar(1.0);
        let diff = adapted[0].sub(&one).unwrap();
        let outer = diff.mul(&diff).unwrap();
        let meta = grad(&outer, &[theta], false).unwrap();
        assert!((meta[0].values()[0] + 1.6).abs() < 1e-12);

        // and against finite differences of the outer objective
        let eval = |x: &[f64]| -> crate::error::Result<f64> {
            let g = Graph::new();
            let th = g.leaf(vec![x[0]], &[], true)?;
            let mut f = |t: &[Tensor]| t[0].mul(&t[0]);
            let ad = maml_inner(&mut f, &[th], &[true], &cfg)?;
            let d = ad[0].sub(&Tensor::scalar(1.0))?;
            d.mul(&d)?.item()
        };
        let fd = central_diff(eval, &[0.0], 1e-5).unwrap();
        assert!(rel_err(&[-1.6], &fd) <= 1e-6);
    }

    #[test]
    fn first_order_treats_adapted_params_as_constant() {
        // FO meta-grad at theta0 = 0 is dL_Q/dtheta at theta1: 2(0 - 1) = -2
        let g = Graph::new();
        let theta = scalar_leaf(&g, 0.0);
        let cfg = MamlConfig {
            inner_lr: 0.1,
            inner_steps: 1,
            head_only: false,
            second_order: false,
        };
        let mut f = |t: &[Tensor]| t[0].mul(&t[0]);
        let adapted = maml_inner(&mut f, &[theta.clone()], &[true], &cfg).unwrap();
        let diff = adapted[0].sub(&Tensor::scalar(1.0)).unwrap();
        let outer = diff.mul(&diff).unwrap();
        let meta = grad(&outer, &[theta], false).unwrap();
        assert!((meta[0].values()[0] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn ridge_identity_system() {
        let x = Tensor::eye(2);
        let y = Tensor::eye(2);
        let w = ridge_solve(&x, &y, 0.0).unwrap();
        for (a, b) in w.values().iter().zip(Tensor::eye(2).values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_lambda_shrinks_weights() {
        let x = Tensor::from_vec(vec![1.0, 2.0, -1.5, 0.5, 0.3, 1.1], &[3, 2]).unwrap();
        let y = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0], &[3, 2]).unwrap();
        let w = ridge_solve(&x, &y, 1e9).unwrap();
        assert!(w.values().iter().all(|v| v.abs() <= 1e-6));
    }

    #[test]
    fn singular_at_zero_lambda_is_singularity_error() {
        // rank-deficient X
        let x = Tensor::from_vec(vec![1.0, 2.0, 2.0, 4.0], &[2, 2]).unwrap();
        let y = Tensor::eye(2);
        assert!(matches!(
            ridge_solve(&x, &y, 0.0),
            Err(Error::Singular(_))
        ));
    }
}
