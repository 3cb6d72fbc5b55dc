//! A self-contained, config-driven few-shot learning framework.
//!
//! The crate provides:
//!
//! - [`tensor`]: float64 tensors with reverse-mode autodiff, including
//!   second-order gradients (gradient-of-gradient);
//! - [`data`]: dataset manifests, synthetic dataset generation, and the
//!   C-way K-shot episodic sampler with support/query transform hooks;
//! - [`backbone`]: small embedding networks (MLPs and a two-block conv)
//!   producing flat vectors or spatial descriptor grids;
//! - [`methods`]: the three method families behind one classifier trait —
//!   fine-tuning (baseline, baseline++, rfs-simple, rfs-nn), meta-learning
//!   (maml, anil, r2d2), and metric-learning (protonet, dn4);
//! - [`engine`]: training loops, the episodic evaluation protocol with
//!   confidence intervals, and cross-domain evaluation;
//! - [`config`]: default+user configuration merging and the schema behind
//!   the `run_trainer` / `run_tester` entry points.

pub mod backbone;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod methods;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
