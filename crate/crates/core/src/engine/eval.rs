//! The evaluation protocol: T sampled tasks per repetition, R repetitions,
//! top-1 mean accuracy with a 95% confidence interval.
//!
//! Every task gets its own seeded stream derived from `(seed, task index)`,
//! and results land in an index-ordered buffer, so the report is
//! bit-identical across reruns and across worker counts.

use serde::{Deserialize, Serialize};

use crate::backbone::EmbeddingModel;
use crate::config::RunConfig;
use crate::data::{audit_class_disjoint, sample_episode, DatasetManifest};
use crate::error::{Error, Result};
use crate::methods::{accuracy, Classifier};
use crate::params::ParamSet;
use crate::rng::{substream, tag};

#[derive(Debug, Clone)]
pub struct EvalProtocol {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    /// Tasks per repetition (T).
    pub tasks: usize,
    /// Repetitions (R).
    pub repetitions: usize,
    pub seed: u64,
    /// Worker threads; 0 = library default.
    pub workers: usize,
    /// Include the per-task accuracy stream in the report.
    pub dump_tasks: bool,
}

impl EvalProtocol {
    pub fn from_config(cfg: &RunConfig) -> Result<EvalProtocol> {
        Ok(EvalProtocol {
            way: cfg.get_usize("eval.way")?,
            shot: cfg.get_usize("eval.shot")?,
            query: cfg.get_usize("eval.query")?,
            tasks: cfg.get_usize("protocol.tasks")?,
            repetitions: cfg.get_usize("protocol.repetitions")?,
            seed: cfg.get_u64("seed")?,
            workers: cfg.get_usize("protocol.workers")?,
            dump_tasks: cfg.get_bool("protocol.dump_tasks")?,
        })
    }
}

/// Per-run accuracy statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub split: String,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub tasks_per_repetition: usize,
    pub repetitions: usize,
    pub seed: u64,
    /// Mean accuracy of each repetition.
    pub rep_means: Vec<f64>,
    /// Mean over all T*R per-task accuracies.
    pub grand_mean: f64,
    /// 95% CI half-width: 1.96 * sample std / sqrt(T*R).
    pub ci95: f64,
    /// `source->target` when produced by cross-domain evaluation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<String>,
    /// Optional per-task accuracy stream.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_task: Option<Vec<f64>>,
}

impl EvalReport {
    /// Plain-text table for terminals.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "method {}  split {}  {}-way {}-shot (Q={})\n",
            self.method, self.split, self.way, self.shot, self.query
        ));
        if let Some(p) = &self.provenance {
            out.push_str(&format!("cross-domain {p}\n"));
        }
        out.push_str(&format!(
            "tasks {} x {} repetitions  seed {}\n",
            self.tasks_per_repetition, self.repetitions, self.seed
        ));
        for (i, m) in self.rep_means.iter().enumerate() {
            out.push_str(&format!("  rep {i}: {:.4}\n", m));
        }
        out.push_str(&format!(
            "accuracy {:.4} +/- {:.4} (95% CI)\n",
            self.grand_mean, self.ci95
        ));
        out
    }
}

fn aggregate(
    method: &str,
    split: &str,
    protocol: &EvalProtocol,
    per_task: Vec<f64>,
) -> EvalReport {
    let n = per_task.len();
    let t = protocol.tasks;
    let grand_mean = per_task.iter().sum::<f64>() / n as f64;
    let rep_means: Vec<f64> = (0..protocol.repetitions)
        .map(|r| per_task[r * t..(r + 1) * t].iter().sum::<f64>() / t as f64)
        .collect();
    let ci95 = if n > 1 {
        let var = per_task
            .iter()
            .map(|&x| (x - grand_mean) * (x - grand_mean))
            .sum::<f64>()
            / (n - 1) as f64;
        1.96 * var.sqrt() / (n as f64).sqrt()
    } else {
        0.0
    };
    EvalReport {
        method: method.to_string(),
        split: split.to_string(),
        way: protocol.way,
        shot: protocol.shot,
        query: protocol.query,
        tasks_per_repetition: t,
        repetitions: protocol.repetitions,
        seed: protocol.seed,
        rep_means,
        grand_mean,
        ci95,
        provenance: None,
        per_task: if protocol.dump_tasks {
            Some(per_task)
        } else {
            None
        },
    }
}

/// Run the method's eval path over T*R seeded tasks.
pub fn evaluate(
    method: &dyn Classifier,
    model: &EmbeddingModel,
    params: &ParamSet,
    manifest: &DatasetManifest,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    let total = protocol.tasks * protocol.repetitions;
    if total == 0 {
        return Err(Error::Parameter("evaluation needs at least one task".into()));
    }
    let run_task = |idx: usize| -> Result<f64> {
        let mut rng = substream(protocol.seed, &[tag::EVAL, idx as u64]);
        let ep = sample_episode(manifest, protocol.way, protocol.shot, protocol.query, &mut rng)?;
        let scores = method.eval_scores(model, params, &ep)?;
        Ok(accuracy(&scores, &ep.query_labels, ep.way))
    };

    let results: Vec<Result<f64>> = if protocol.workers == 1 {
        (0..total).map(run_task).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(protocol.workers)
            .build()
            .map_err(|e| Error::State(format!("thread pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            (0..total).into_par_iter().map(run_task).collect()
        })
    };
    let mut per_task = Vec::with_capacity(total);
    for r in results {
        per_task.push(r?);
    }
    Ok(aggregate(method.id(), &manifest.split, protocol, per_task))
}

/// Evaluate on a class-disjoint target domain; the report records the
/// source->target provenance. Overlapping class labels violate the
/// protocol and are rejected.
pub fn cross_domain_evaluate(
    method: &dyn Classifier,
    model: &EmbeddingModel,
    params: &ParamSet,
    source_name: &str,
    source_train: &DatasetManifest,
    target: &DatasetManifest,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    audit_class_disjoint(source_train, target)?;
    let mut report = evaluate(method, model, params, target, protocol)?;
    report.provenance = Some(format!("{source_name}->{}", target.split));
    Ok(report)
}
