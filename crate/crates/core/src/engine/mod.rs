//! Trainer and Tester: the loops that tie data, methods, and optimizers
//! together, plus the run-directory layout.
//!
//! A run directory contains `config.final` (the fully merged
//! configuration), `train.log` (line-oriented: epoch, loss, validation
//! accuracy), `ckpt_best` / `ckpt_last` checkpoints, and, after testing,
//! `eval_report.json`. Nothing in a run directory carries timestamps, so
//! identical seeds reproduce byte-identical runs.

mod eval;

pub use eval::{cross_domain_evaluate, evaluate, EvalProtocol, EvalReport};

use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::{init_model, EmbeddingModel};
use crate::config::{default_config, RunConfig};
use crate::data::{
    apply_transforms, audit_class_disjoint, sample_episode, DatasetManifest, GaussianJitter,
};
use crate::error::{Error, Result};
use crate::methods::{make_classifier, pretrain_epoch, register_pretrain_head, Classifier, Family};
use crate::optim::Optimizer;
use crate::params::ParamSet;
use crate::rng::{splitmix64, substream, tag};
use crate::tensor::{grad, Graph};

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Validation accuracy of the untrained (initial) parameters.
    pub initial_val_accuracy: f64,
}

/// Build the model and parameter set a configuration describes, including
/// method-owned parameters. `n_base` is the train-split class count
/// (needed by the pre-training head of fine-tuning methods).
pub fn build_model(
    cfg: &RunConfig,
    feature_shape: &[usize],
    n_base: usize,
) -> Result<(EmbeddingModel, ParamSet, Box<dyn Classifier>)> {
    let seed = cfg.get_u64("seed")?;
    let (model, mut params) = init_model(
        cfg.get_str("backbone.arch")?,
        &cfg.widths()?,
        &cfg.filters()?,
        cfg.activation()?,
        feature_shape,
        seed,
    )?;
    let method = make_classifier(cfg.get_str("method")?, &cfg.method_settings()?)?;
    if method.needs_spatial() && !model.output_mode.is_spatial() {
        return Err(Error::Config(format!(
            "method '{}' needs a spatial backbone",
            method.id()
        )));
    }
    method.register_params(&model, cfg.get_usize("train.way")?, &mut params, seed)?;
    if method.family() == Family::FineTune {
        register_pretrain_head(&model, n_base, &mut params, seed)?;
    }
    Ok((model, params, method))
}

fn validation_protocol(cfg: &RunConfig) -> Result<EvalProtocol> {
    Ok(EvalProtocol {
        way: cfg.get_usize("eval.way")?,
        shot: cfg.get_usize("eval.shot")?,
        query: cfg.get_usize("eval.query")?,
        tasks: cfg.get_usize("val.tasks")?,
        repetitions: 1,
        seed: splitmix64(cfg.get_u64("seed")? ^ tag::VAL),
        workers: cfg.get_usize("protocol.workers")?,
        dump_tasks: false,
    })
}

/// One epoch of episodic training: `episodes_per_epoch` meta-batches of
/// `episode_size` episodes; per batch, episode meta-gradients are averaged
/// in episode order before the single optimizer update. Returns the mean
/// episode loss.
fn episodic_epoch(
    method: &dyn Classifier,
    model: &EmbeddingModel,
    params: &mut ParamSet,
    manifest: &DatasetManifest,
    optimizer: &mut Optimizer,
    cfg: &RunConfig,
    epoch: usize,
    seed: u64,
) -> Result<f64> {
    let iterations = cfg.get_usize("train.episodes_per_epoch")?;
    let episode_size = cfg.get_usize("train.episode_size")?.max(1);
    let (way, shot, query) = (
        cfg.get_usize("train.way")?,
        cfg.get_usize("train.shot")?,
        cfg.get_usize("train.query")?,
    );
    let jitter_sigma = cfg.get_f64("train.jitter_sigma")?;

    let mut epoch_losses = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let mut acc: Vec<Vec<f64>> = params
            .iter()
            .map(|p| vec![0.0; p.values.len()])
            .collect();
        let mut batch_loss = 0.0;
        for j in 0..episode_size {
            let mut rng = substream(
                seed,
                &[tag::EPISODE, epoch as u64, it as u64, j as u64],
            );
            let mut ep = sample_episode(manifest, way, shot, query, &mut rng)?;
            if jitter_sigma > 0.0 {
                let jit = GaussianJitter {
                    sigma: jitter_sigma,
                };
                ep = apply_transforms(&ep, &jit, &jit, &mut rng)?;
            }
            let g = Graph::new();
            let bound = params.bind(&g, true)?;
            let loss = method.episode_loss(model, &bound, &ep)?;
            batch_loss += loss.item()?;
            let grads = grad(&loss, &bound.tensors, false)?;
            for (a, gt) in acc.iter_mut().zip(&grads) {
                for (x, y) in a.iter_mut().zip(gt.values()) {
                    *x += y;
                }
            }
        }
        for a in acc.iter_mut() {
            for x in a.iter_mut() {
                *x /= episode_size as f64;
            }
        }
        let grad_refs: Vec<&[f64]> = acc.iter().map(|v| v.as_slice()).collect();
        optimizer.step(params, &grad_refs, epoch)?;
        epoch_losses.push(batch_loss / episode_size as f64);
    }
    Ok(epoch_losses.iter().sum::<f64>() / epoch_losses.len().max(1) as f64)
}

/// Execute the method-appropriate training loop and materialize the run
/// directory. Validation runs before any update (epoch 0) and after each
/// epoch on a fixed seeded task set; the best checkpoint is retained.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out_dir = cfg.get_str("output.dir")?;
    if out_dir.is_empty() {
        return Err(Error::Config("missing run directory: set `output.dir`".into()));
    }
    let run_dir = PathBuf::from(out_dir);
    let root = PathBuf::from(cfg.get_str("data.root")?);
    let train_m = DatasetManifest::load(&root, "train")?;
    let val_m = DatasetManifest::load(&root, "val")?;
    audit_class_disjoint(&train_m, &val_m)?;

    let seed = cfg.get_u64("seed")?;
    let (model, mut params, method) = build_model(cfg, &train_m.feature_shape, train_m.n_classes())?;

    let init_ckpt = cfg.get_str("train.init_checkpoint")?;
    if !init_ckpt.is_empty() {
        let source = ParamSet::load(Path::new(init_ckpt))?;
        params.load_matching(&source)?;
    }

    fs::create_dir_all(&run_dir).map_err(|e| Error::Io(format!("{}: {e}", run_dir.display())))?;
    fs::write(run_dir.join("config.final"), cfg.dump())
        .map_err(|e| Error::Io(format!("config.final: {e}")))?;

    let epochs = cfg.get_usize("train.epochs")?;
    let mut optimizer = Optimizer::new(cfg.optimizer_config()?);
    let val_protocol = validation_protocol(cfg)?;
    let mut log: Vec<String> = Vec::new();

    let score = |params: &ParamSet| -> Result<f64> {
        Ok(evaluate(method.as_ref(), &model, params, &val_m, &val_protocol)?.grand_mean)
    };

    let initial_val = score(&params)?;
    log.push(format!("init val_acc {initial_val:.6}"));
    params.save(&run_dir.join("ckpt_last"))?;
    params.save(&run_dir.join("ckpt_best"))?;
    log.push(format!("checkpoint best epoch 0 val_acc {initial_val:.6}"));
    let mut best = (0usize, initial_val);

    for epoch in 1..=epochs {
        let result = match method.family() {
            Family::FineTune => pretrain_epoch(
                &model,
                &mut params,
                &train_m,
                &mut optimizer,
                cfg.get_usize("train.batch_size")?,
                epoch - 1,
                seed,
            ),
            Family::Meta | Family::Metric => episodic_epoch(
                method.as_ref(),
                &model,
                &mut params,
                &train_m,
                &mut optimizer,
                cfg,
                epoch - 1,
                seed,
            ),
        };
        let mean_loss = match result {
            Ok(l) => l,
            Err(e @ (Error::NonFinite(_) | Error::Training(_))) => {
                // state dump for post-mortem, then abort
                params.save(&run_dir.join("ckpt_abort"))?;
                log.push(format!("abort epoch {epoch} error {e}"));
                fs::write(run_dir.join("train.log"), log.join("\n") + "\n")
                    .map_err(|e| Error::Io(format!("train.log: {e}")))?;
                return Err(Error::Training(format!(
                    "aborted at epoch {epoch}: {e} (state dumped to ckpt_abort)"
                )));
            }
            Err(e) => return Err(e),
        };
        let val = score(&params)?;
        log.push(format!("epoch {epoch} loss {mean_loss:.6} val_acc {val:.6}"));
        params.save(&run_dir.join("ckpt_last"))?;
        if val > best.1 {
            best = (epoch, val);
            params.save(&run_dir.join("ckpt_best"))?;
            log.push(format!("checkpoint best epoch {epoch} val_acc {val:.6}"));
        }
    }

    fs::write(run_dir.join("train.log"), log.join("\n") + "\n")
        .map_err(|e| Error::Io(format!("train.log: {e}")))?;

    Ok(TrainOutcome {
        run_dir,
        best_epoch: best.0,
        best_val_accuracy: best.1,
        initial_val_accuracy: initial_val,
    })
}

/// Reload a finished run, apply overrides, evaluate the best checkpoint on
/// the test split, and write `eval_report.json` (atomically).
pub fn run_tester(run_dir: &Path, overrides: &[String]) -> Result<EvalReport> {
    let dumped = RunConfig::parse_file(&run_dir.join("config.final"))?;
    let mut cfg = RunConfig::merge(&default_config(), &dumped)?;
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;

    let ckpt_path = run_dir.join("ckpt_best");
    let stored = ParamSet::load(&ckpt_path)?;

    let root = PathBuf::from(cfg.get_str("data.root")?);
    let train_m = DatasetManifest::load(&root, "train")?;
    let test_m = DatasetManifest::load(&root, "test")?;
    audit_class_disjoint(&train_m, &test_m)?;

    let (model, mut params, method) = build_model(&cfg, &test_m.feature_shape, train_m.n_classes())?;
    let matched = params.load_matching(&stored)?;
    if matched != params.len() {
        return Err(Error::State(format!(
            "checkpoint {} is missing {} of {} model parameters",
            ckpt_path.display(),
            params.len() - matched,
            params.len()
        )));
    }

    let protocol = EvalProtocol::from_config(&cfg)?;
    let report = evaluate(method.as_ref(), &model, &params, &test_m, &protocol)?;

    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::State(format!("report serialization: {e}")))?;
    let tmp = run_dir.join("eval_report.json.tmp");
    fs::write(&tmp, &json).map_err(|e| Error::Io(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, run_dir.join("eval_report.json"))
        .map_err(|e| Error::Io(format!("eval_report.json: {e}")))?;
    Ok(report)
}

/// Small validation-driven search over learning rate and epoch count.
/// Returns `(lr, epochs, best validation accuracy)`.
pub fn grid_search(
    base: &RunConfig,
    lrs: &[f64],
    epoch_counts: &[usize],
    out_root: &Path,
) -> Result<(f64, usize, f64)> {
    let mut best: Option<(f64, usize, f64)> = None;
    for &lr in lrs {
        for &epochs in epoch_counts {
            let mut cfg = base.clone();
            cfg.set("optimizer.lr", crate::config::Value::Float(lr));
            cfg.set("train.epochs", crate::config::Value::Int(epochs as i64));
            let dir = out_root.join(format!("lr{lr:?}_ep{epochs}"));
            cfg.set(
                "output.dir",
                crate::config::Value::Str(dir.to_string_lossy().into_owned()),
            );
            let outcome = train(&cfg)?;
            if best.map_or(true, |(_, _, b)| outcome.best_val_accuracy > b) {
                best = Some((lr, epochs, outcome.best_val_accuracy));
            }
        }
    }
    best.ok_or_else(|| Error::Parameter("grid_search needs a non-empty grid".into()))
}
