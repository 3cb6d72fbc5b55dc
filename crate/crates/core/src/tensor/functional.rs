//! Composite tensor functions built from the primitives.
//!
//! Everything here differentiates through the primitive rules, so these
//! inherit first- and second-order correctness from the gradient suite.

use super::Tensor;
use crate::error::{Error, Result};

/// One-hot constant matrix `[labels.len(), classes]`.
pub fn onehot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut v = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Label(format!(
                "onehot: label {l} out of range [0, {classes})"
            )));
        }
        v[i * classes + l] = 1.0;
    }
    Tensor::from_vec(v, &[labels.len(), classes])
}

/// Broadcast a column `[n, 1]` across `cols` columns.
pub fn broadcast_col(v: &Tensor, cols: usize) -> Result<Tensor> {
    v.matmul(&Tensor::ones(&[1, cols]))
}

/// Broadcast a row `[1, c]` across `rows` rows.
pub fn broadcast_row(v: &Tensor, rows: usize) -> Result<Tensor> {
    Tensor::ones(&[rows, 1]).matmul(v)
}

/// Divide each row by `max(||row||_2, epsilon)`.
///
/// Rows at or below the epsilon guard keep their values scaled by
/// `1/epsilon` and receive zero gradient through the guard, so a zero row
/// stays zero and never produces non-finite values.
pub fn l2_normalize_rows(x: &Tensor, epsilon: f64) -> Result<Tensor> {
    if epsilon <= 0.0 {
        return Err(Error::Parameter(format!(
            "l2_normalize_rows: epsilon must be positive, got {epsilon}"
        )));
    }
    let (_, d) = x.rank2("l2_normalize_rows")?;
    let norms = x
        .mul(x)?
        .row_sum()?
        .clamp_min(epsilon * epsilon)?
        .sqrt()?; // [n, 1] = max(||row||, eps)
    x.div(&broadcast_col(&norms, d)?)
}

/// Squared Euclidean distance between every row of `x` `[n, d]` and every
/// row of `c` `[m, d]`, as `[n, m]`.
pub fn sq_pairwise_dist(x: &Tensor, c: &Tensor) -> Result<Tensor> {
    let (n, d) = x.rank2("sq_pairwise_dist")?;
    let (m, d2) = c.rank2("sq_pairwise_dist")?;
    if d != d2 {
        return Err(Error::Dim(format!(
            "sq_pairwise_dist: feature dims {d} vs {d2}"
        )));
    }
    let xs = x.mul(x)?.row_sum()?; // [n, 1]
    let cs = c.mul(c)?.row_sum()?; // [m, 1]
    let cross = x.matmul(&c.transpose()?)?;
    broadcast_col(&xs, m)?
        .add(&broadcast_row(&cs.transpose()?, n)?)?
        .sub(&cross.scale(2.0)?)
}

/// Cosine similarity between every row of `x` and every row of `y`.
pub fn cosine_sim_matrix(x: &Tensor, y: &Tensor, epsilon: f64) -> Result<Tensor> {
    let xn = l2_normalize_rows(x, epsilon)?;
    let yn = l2_normalize_rows(y, epsilon)?;
    xn.matmul(&yn.transpose()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_row_unchanged() {
        let x = Tensor::from_vec(vec![1.0, 0.0, 0.0], &[1, 3]).unwrap();
        let y = l2_normalize_rows(&x, 1e-12).unwrap();
        assert_eq!(y.values(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn three_four_five() {
        let x = Tensor::from_vec(vec![3.0, 4.0], &[1, 2]).unwrap();
        let y = l2_normalize_rows(&x, 1e-12).unwrap();
        assert!((y.values()[0] - 0.6).abs() < 1e-15);
        assert!((y.values()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_row_guarded() {
        let x = Tensor::from_vec(vec![0.0, 0.0], &[1, 2]).unwrap();
        let y = l2_normalize_rows(&x, 1e-12).unwrap();
        assert_eq!(y.values(), &[0.0, 0.0]);
        assert!(y.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sq_dist_analytic() {
        let x = Tensor::from_vec(vec![0.0, 0.0, 1.0, 1.0], &[2, 2]).unwrap();
        let c = Tensor::from_vec(vec![1.0, 0.0], &[1, 2]).unwrap();
        let d = sq_pairwise_dist(&x, &c).unwrap();
        assert!((d.values()[0] - 1.0).abs() < 1e-12);
        assert!((d.values()[1] - 1.0).abs() < 1e-12);
    }
}
