//! Shared helpers for the numeric test suites.

#![allow(dead_code)]

use fewshot_core::error::Result;
use fewshot_core::gradcheck::{central_diff, rel_err};
use fewshot_core::rng;
use fewshot_core::tensor::{grad, Graph, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FIRST_ORDER_TOL: f64 = 1e-6;
pub const SECOND_ORDER_TOL: f64 = 1e-4;

/// How to sample values for one input of a gradient check.
#[derive(Clone, Copy)]
pub enum Sample {
    /// Uniform in [-1.5, 1.5].
    Any,
    /// Magnitude in [lo, hi], random sign. Keeps values away from kinks
    /// (relu at 0, divisors at 0).
    AwayFromZero(f64, f64),
    /// Uniform in [lo, hi].
    Range(f64, f64),
}

impl Sample {
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            Sample::Any => rng.random_range(-1.5..1.5),
            Sample::AwayFromZero(lo, hi) => {
                let v = rng.random_range(lo..hi);
                if rng.random_range(0..2) == 0 {
                    v
                } else {
                    -v
                }
            }
            Sample::Range(lo, hi) => rng.random_range(lo..hi),
        }
    }
}

/// Check the analytic gradient of a scalar-valued tensor program against
/// central finite differences over `trials` random instances.
///
/// `build` receives graph leaves matching `inputs` (shape, sampler) and
/// must return a scalar. Inputs are flattened into one parameter vector
/// for the finite-difference oracle.
pub fn check_scalar_program<F>(
    name: &str,
    inputs: &[(Vec<usize>, Sample)],
    trials: usize,
    tol: f64,
    build: F,
) where
    F: Fn(&Graph, &[Tensor]) -> Result<Tensor>,
{
    for trial in 0..trials {
        let mut rng = rng::substream(0xC0FFEE, &[hash_name(name), trial as u64]);
        let mut flat: Vec<f64> = Vec::new();
        let mut offsets = Vec::new();
        for (shape, sampler) in inputs {
            let numel: usize = shape.iter().product();
            offsets.push((flat.len(), numel));
            for _ in 0..numel {
                flat.push(sampler.draw(&mut rng));
            }
        }

        let eval = |x: &[f64]| -> Result<f64> {
            let g = Graph::new();
            let leaves: Vec<Tensor> = inputs
                .iter()
                .zip(&offsets)
                .map(|((shape, _), (off, numel))| {
                    g.leaf(x[*off..*off + *numel].to_vec(), shape, true)
                })
                .collect::<Result<_>>()?;
            build(&g, &leaves)?.item()
        };

        let g = Graph::new();
        let leaves: Vec<Tensor> = inputs
            .iter()
            .zip(&offsets)
            .map(|((shape, _), (off, numel))| {
                g.leaf(flat[*off..*off + *numel].to_vec(), shape, true)
            })
            .collect::<Result<_>>()
            .unwrap_or_else(|e| panic!("{name}: leaf construction failed: {e}"));
        let loss = build(&g, &leaves).unwrap_or_else(|e| panic!("{name}: forward failed: {e}"));
        let grads = grad(&loss, &leaves, false)
            .unwrap_or_else(|e| panic!("{name}: backward failed: {e}"));
        let analytic: Vec<f64> = grads.iter().flat_map(|t| t.values().to_vec()).collect();

        let numeric = central_diff(eval, &flat, FD_STEP)
            .unwrap_or_else(|e| panic!("{name}: finite differences failed: {e}"));

        let err = rel_err(&analytic, &numeric);
        assert!(
            err <= tol,
            "{name} trial {trial}: gradient mismatch, rel err {err:.3e} > {tol:.0e}"
        );
    }
}

fn hash_name(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf29ce484222325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x100000001b3)
        })
}

/// Deterministic random constant tensor (used as probe weights `R` so a
/// scalar check exercises the whole Jacobian of an op).
pub fn probe(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng::substream(0xBEEF, &[seed]);
    let numel: usize = shape.iter().product();
    let vals: Vec<f64> = (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(vals, shape).expect("probe tensor")
}
