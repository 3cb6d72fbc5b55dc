//! Cholesky factorization and triangular solves for SPD systems.

use crate::error::{Error, Result};

/// Solve `A W = B` with `A` symmetric positive-definite (`d x d`) and `B`
/// (`d x o`), both row-major. Fails with a singularity error when a pivot
/// drops to (or below) zero relative to the matrix scale.
pub(crate) fn solve_spd_raw(a: &[f64], d: usize, b: &[f64], o: usize) -> Result<Vec<f64>> {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tiny = 1e-13 * (1.0 + scale);
    let mut l = a.to_vec();
    for j in 0..d {
        let mut diag = l[j * d + j];
        for k in 0..j {
            diag -= l[j * d + k] * l[j * d + k];
        }
        if diag <= tiny {
            return Err(Error::Singular(format!(
                "pivot {diag:.3e} at column {j} (matrix not positive definite)"
            )));
        }
        let lj = diag.sqrt();
        l[j * d + j] = lj;
        for i in (j + 1)..d {
            let mut s = l[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = s / lj;
        }
    }
    let mut w = vec![0.0; d * o];
    let mut y = vec![0.0; d];
    for col in 0..o {
        for i in 0..d {
            let mut s = b[i * o + col];
            for k in 0..i {
                s -= l[i * d + k] * y[k];
            }
            y[i] = s / l[i * d + i];
        }
        for i in (0..d).rev() {
            let mut s = y[i];
            for k in (i + 1)..d {
                s -= l[k * d + i] * w[k * o + col];
            }
            w[i * o + col] = s / l[i * d + i];
        }
    }
    Ok(w)
}
