//! Gradient suite for every differentiable primitive and composite.
//!
//! Each analytic gradient is checked against central finite differences
//! (step 1e-5, relative error <= 1e-6) on 20 random instances; kinked
//! operations are sampled away from their kinks. Second-order checks
//! compare gradients-of-gradients against finite differences of the first
//! gradient at 1e-4.

mod common;

use common::{check_scalar_program, probe, Sample, FIRST_ORDER_TOL, SECOND_ORDER_TOL};
use fewshot_core::gradcheck::{central_diff, rel_err};
use fewshot_core::rng;
use fewshot_core::tensor::functional::{
    cosine_sim_matrix, l2_normalize_rows, sq_pairwise_dist,
};
use fewshot_core::tensor::{grad, Graph, Tensor};
use rand::Rng;

const TRIALS: usize = 20;

#[test]
fn grad_add_sub_mul_div() {
    let shapes = vec![(vec![3, 4], Sample::Any), (vec![3, 4], Sample::AwayFromZero(0.4, 1.6))];
    check_scalar_program("add", &shapes, TRIALS, FIRST_ORDER_TOL, |_, t| {
        t[0].add(&t[1])?.mul(&probe(&[3, 4], 1))?.sum_all()
    });
    check_scalar_program("sub", &shapes, TRIALS, FIRST_ORDER_TOL, |_, t| {
        t[0].sub(&t[1])?.mul(&probe(&[3, 4], 2))?.sum_all()
    });
    check_scalar_program("mul", &shapes, TRIALS, FIRST_ORDER_TOL, |_, t| {
        t[0].mul(&t[1])?.mul(&probe(&[3, 4], 3))?.sum_all()
    });
    check_scalar_program("div", &shapes, TRIALS, FIRST_ORDER_TOL, |_, t| {
        t[0].div(&t[1])?.mul(&probe(&[3, 4], 4))?.sum_all()
    });
}

#[test]
fn grad_scale_and_scalar_product() {
    check_scalar_program(
        "scale",
        &[(vec![2, 5], Sample::Any)],
        TRIALS,
        FIRST_ORDER_TOL,
        |_, t| t[0].scale(-0.37)?.mul(&probe(&[2, 5], 5))?.sum_all(),
    );
    check_scalar_program(
        "mul_scalar_t",
        &[(vec![2, 3], Sample::Any), (vec![], Sample::Any)],
        TRIALS,
        FIRST_ORDER_TOL,
        |_, t| t[0].mul_scalar_t(&t[1])?.mul(&probe(&[2, 3], 6))?.sum_all(),
    );
}

#[test]
fn grad_matmul_transpose() {
    check_scalar_program(
        "matmul",
        &[(vec![4, 3], Sample::Any), (vec![3, 5], Sample::Any)],
        TRIALS,
        FIRST_ORDER_TOL,
        |_, t| t[0].matmul(&t[1])?.mul(&probe(&[4, 5], 7))?.sum_all(),
    );
    check_scalar_program(
        "transpose",
        &[(vec![3, 4], Sample::Any)],
        TRIALS,
        FIRST_ORDER_TOL,
        |_, t| t[0].transpose()?.mul(&probe(&[4, 3], 8))?.sum_all(),
    );
}

#[test]
fn grad_pointwise_nonlinearities() {
    check_scalar_program(
        "relu",
        &[(vec![3, 4], Sample::AwayFromZero(0.2, 1.5))],
        TRIALS,
        FIRST_ORDER_TOL,
        |_, t| t[0].relu()?.mul(&probe(&[3, 4], 9))?.sum_all(),
    );
    check_scalar_program(
        "tanh",
        &[(vec![3, 4], Sample::Any)],
        TRIALS,
        FIRST_ORDER_TOL,
        |_, t| t[0].tanh()?.mul(&probe(&[3, 4], 10))?.sum_all(),
    );
    check_scalar_program(
        "exp",
        &[(vec![3, 4], Sample::Any)],
        TRIALS,
        FIRST_ORDER_TOL,
        |_, t| t[0].exp()?.mul(&probe(&[3, 4], 11))?.sum_all(),
    );
    check_scalar_program(
        "ln",
        &[(vec![3, 4], Sample::Range(0.3, 2.5))],
        TRIALS,
        FIRST_ORDER_TOL,
        |_, t| t[0].ln()?.mul(&probe(&[3, 4], 12))?.sum_all(),
    );
    check_scalar_program(
        "sqrt",
        &[(vec![3, 4], Sample::Range(0.3, 2.5))],
        TRIALS,
        FIRST_ORDER_TOL,
        |_, t| t[0].sqrt()?.mul(&probe(&[3, 4], 13))?.sum_all(),
    );
    // keep samples off the clamp boundary at 0.5
    check_scalar_program(
        "clamp_min",
        &[(vec![3, 4], Sample::Range(0.7, 2.0))],
        TRIALS,
        FIRST_ORDER_TOL,
        |_, t| t[0].clamp_min(0.5)?.mul(&probe(&[3, 4], 14))?.sum_all(),
    );
}

#[test]
fn grad_softmax_and_cross_entropy() {
    check_scalar_program(
        "softmax",
        &[(vec![3, 5], Sample::Any)],
        TRIALS,
        FIRST_ORDER_TOL,
        |_, t| t[0].softmax_rows()?.mul(&probe(&[3, 5], 15))?.sum_all(),
    );
    check_scalar_program(
        "cross_entropy",
        &[(vec![3, 4], Sample::Any)],
        TRIALS,
        FIRST_ORDER_TOL,
        |_, t| t[0].cross_entropy(&[0, 2, 3]),
    );
}

#[test]
fn grad_reductions_and_layout() {
    check_scalar_program(
        "sum_all",
        &[(vec![3, 4], Sample::Any)],
        TRIALS,
        FIRST_ORDER_TOL,
        |_, t| t[0].sum_all(),
    );
    check_scalar_program(
        "mean_all",
        &[(vec![3, 4], Sample::Any)],
        TRIALS,
        FIRST_ORDER_TOL,
        |_, t| t[0].mean_all(),
    );
    check_scalar_program(
        "row_sum",
        &[(vec![3, 4], Sample::Any)],
        TRIALS,
        FIRST_ORDER_TOL,
        |_, t| t[0].row_sum()?.mul(&probe(&[3, 1], 16))?.sum_all(),
    );
    check_scalar_program(
        "gather_rows",
        &[(vec![4, 3], Sample::Any)],
        TRIALS,
        FIRST_ORDER_TOL,
        |_, t| {
            t[0].gather_rows(&[2, 0, 2])?
                .mul(&probe(&[3, 3], 17))?
                .sum_all()
        },
    );
    check_scalar_program(
        "scatter_rows",
        &[(vec![3, 2], Sample::Any)],
        TRIALS,
        FIRST_ORDER_TOL,
        |_, t| {
            t[0].scatter_rows(&[1, 4, 1], 5)?
                .mul(&probe(&[5, 2], 18))?
                .sum_all()
        },
    );
    check_scalar_program(
        "gather_flat",
        &[(vec![2, 3], Sample::Any)],
        TRIALS,
        FIRST_ORDER_TOL,
        |_, t| {
            t[0].gather_flat(&[5, -1, 0, 0, 3, 2, 1, -1], &[4, 2])?
                .mul(&probe(&[4, 2], 19))?
                .sum_all()
        },
    );
    check_scalar_program(
        "scatter_flat",
        &[(vec![4], Sample::Any)],
        TRIALS,
        FIRST_ORDER_TOL,
        |_, t| {
            t[0].scatter_flat(&[3, 0, 3, -1], &[5])?
                .mul(&probe(&[5], 20))?
                .sum_all()
        },
    );
    check_scalar_program(
        "concat_rows",
        &[(vec![2, 3], Sample::Any), (vec![1, 3], Sample::Any)],
        TRIALS,
        FIRST_ORDER_TOL,
        |_, t| {
            Tensor::concat_rows(&[&t[0], &t[1]])?
                .mul(&probe(&[3, 3], 21))?
                .sum_all()
        },
    );
    check_scalar_program(
        "reshape",
        &[(vec![2, 6], Sample::Any)],
        TRIALS,
        FIRST_ORDER_TOL,
        |_, t| t[0].reshape(&[3, 4])?.mul(&probe(&[3, 4], 22))?.sum_all(),
    );
}

#[test]
fn grad_solve_spd_wrt_rhs() {
    // A fixed SPD constant; gradient flows through B.
    let mut rng = rng::substream(0xA11CE, &[1]);
    let d = 4;
    let mut m = vec![0.0; d * d];
    for v in m.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    let mt = Tensor::from_vec(m, &[d, d]).unwrap();
    let a = mt
        .transpose()
        .unwrap()
        .matmul(&mt)
        .unwrap()
        .add(&Tensor::eye(d).scale(0.5).unwrap())
        .unwrap();
    check_scalar_program(
        "solve_spd_rhs",
        &[(vec![4, 2], Sample::Any)],
        TRIALS,
        FIRST_ORDER_TOL,
        move |_, t| {
            Tensor::solve_spd(&a, &t[0])?
                .mul(&probe(&[4, 2], 23))?
                .sum_all()
        },
    );
}

#[test]
fn grad_solve_spd_through_normal_equations() {
    // Ridge-style composite: gradients flow into A = X^T X + lambda I and
    // B = X^T Y through the implicit solve rule.
    check_scalar_program(
        "solve_spd_ridge",
        &[(vec![6, 3], Sample::Any), (vec![6, 2], Sample::Any)],
        TRIALS,
        FIRST_ORDER_TOL,
        |_, t| {
            let xt = t[0].transpose()?;
            let a = xt.matmul(&t[0])?.add(&Tensor::eye(3).scale(0.5)?)?;
            let b = xt.matmul(&t[1])?;
            Tensor::solve_spd(&a, &b)?
                .mul(&probe(&[3, 2], 24))?
                .sum_all()
        },
    );
}

#[test]
fn grad_topk_rowsum_away_from_ties() {
    // Spread samples so the k-th / (k+1)-th gap stays well above 1e-3.
    for trial in 0..TRIALS {
        let mut rng = rng::substream(0x70C0, &[trial as u64]);
        let (n, m, k) = (3, 6, 2);
        let mut vals: Vec<f64> = Vec::with_capacity(n * m);
        for _ in 0..n {
            let mut row: Vec<f64> = (0..m).map(|j| j as f64 * 0.5).collect();
            for v in row.iter_mut() {
                *v += rng.random_range(-0.2..0.2);
            }
            // deterministic shuffle by sampled keys
            let mut keyed: Vec<(f64, f64)> =
                row.iter().map(|&v| (rng.random_range(0.0..1.0), v)).collect();
            keyed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            vals.extend(keyed.iter().map(|p| p.1));
        }

        let eval = |x: &[f64]| {
            let g = Graph::new();
            let t = g.leaf(x.to_vec(), &[n, m], true)?;
            t.topk_rowsum(k)?.item()
        };
        let g = Graph::new();
        let t = g.leaf(vals.clone(), &[n, m], true).unwrap();
        let loss = t.topk_rowsum(k).unwrap();
        let grads = grad(&loss, &[t], false).unwrap();
        let numeric = central_diff(eval, &vals, common::FD_STEP).unwrap();
        let err = rel_err(grads[0].values(), &numeric);
        assert!(err <= FIRST_ORDER_TOL, "topk trial {trial}: rel err {err:.3e}");
    }
}

#[test]
fn grad_composites() {
    check_scalar_program(
        "l2_normalize_rows",
        &[(vec![3, 4], Sample::AwayFromZero(0.3, 1.5))],
        TRIALS,
        FIRST_ORDER_TOL,
        |_, t| {
            l2_normalize_rows(&t[0], 1e-12)?
                .mul(&probe(&[3, 4], 25))?
                .sum_all()
        },
    );
    check_scalar_program(
        "sq_pairwise_dist",
        &[(vec![4, 3], Sample::Any), (vec![2, 3], Sample::Any)],
        TRIALS,
        FIRST_ORDER_TOL,
        |_, t| {
            sq_pairwise_dist(&t[0], &t[1])?
                .mul(&probe(&[4, 2], 26))?
                .sum_all()
        },
    );
    check_scalar_program(
        "cosine_sim_matrix",
        &[
            (vec![3, 4], Sample::AwayFromZero(0.3, 1.5)),
            (vec![2, 4], Sample::AwayFromZero(0.3, 1.5)),
        ],
        TRIALS,
        FIRST_ORDER_TOL,
        |_, t| {
            cosine_sim_matrix(&t[0], &t[1], 1e-12)?
                .mul(&probe(&[3, 2], 27))?
                .sum_all()
        },
    );
}

/// Gradient-of-gradient of a smooth two-layer network objective matches
/// finite differences of the first gradient.
#[test]
fn second_order_matches_fd_of_first_gradient() {
    let dims = (3usize, 4usize, 2usize); // in, hidden, out
    let n_params = dims.0 * dims.1 + dims.1 * dims.2;

    let first_grad = |p: &[f64]| -> Vec<f64> {
        let g = Graph::new();
        let w1 = g.leaf(p[..dims.0 * dims.1].to_vec(), &[dims.0, dims.1], true).unwrap();
        let w2 = g
            .leaf(p[dims.0 * dims.1..].to_vec(), &[dims.1, dims.2], true)
            .unwrap();
        let x = probe(&[5, dims.0], 31);
        let h = x.matmul(&w1).unwrap().tanh().unwrap();
        let y = h.matmul(&w2).unwrap().tanh().unwrap();
        let loss = y.mul(&y).unwrap().mean_all().unwrap();
        let grads = grad(&loss, &[w1, w2], false).unwrap();
        grads.iter().flat_map(|t| t.values().to_vec()).collect()
    };

    for trial in 0..5u64 {
        let mut rng = rng::substream(0x2ED, &[trial]);
        let p: Vec<f64> = (0..n_params).map(|_| rng.random_range(-0.8..0.8)).collect();
        let dir: Vec<f64> = (0..n_params).map(|_| rng.random_range(-1.0..1.0)).collect();

        // analytic: gradient of <grad(loss), dir> via create_graph
        let g = Graph::new();
        let w1 = g.leaf(p[..dims.0 * dims.1].to_vec(), &[dims.0, dims.1], true).unwrap();
        let w2 = g
            .leaf(p[dims.0 * dims.1..].to_vec(), &[dims.1, dims.2], true)
            .unwrap();
        let x = probe(&[5, dims.0], 31);
        let h = x.matmul(&w1).unwrap().tanh().unwrap();
        let y = h.matmul(&w2).unwrap().tanh().unwrap();
        let loss = y.mul(&y).unwrap().mean_all().unwrap();
        let grads = grad(&loss, &[w1.clone(), w2.clone()], true).unwrap();
        let d1 = Tensor::from_vec(dir[..dims.0 * dims.1].to_vec(), &[dims.0, dims.1]).unwrap();
        let d2 = Tensor::from_vec(dir[dims.0 * dims.1..].to_vec(), &[dims.1, dims.2]).unwrap();
        let dot = grads[0]
            .mul(&d1)
            .unwrap()
            .sum_all()
            .unwrap()
            .add(&grads[1].mul(&d2).unwrap().sum_all().unwrap())
            .unwrap();
        let hvp = grad(&dot, &[w1, w2], false).unwrap();
        let analytic: Vec<f64> = hvp.iter().flat_map(|t| t.values().to_vec()).collect();

        // numeric: directional finite difference of the first gradient
        let h_step = 1e-5;
        let mut pp = p.clone();
        for (v, d) in pp.iter_mut().zip(&dir) {
            *v += h_step * d;
        }
        let gp = first_grad(&pp);
        let mut pm = p.clone();
        for (v, d) in pm.iter_mut().zip(&dir) {
            *v -= h_step * d;
        }
        let gm = first_grad(&pm);
        let numeric: Vec<f64> = gp
            .iter()
            .zip(&gm)
            .map(|(a, b)| (a - b) / (2.0 * h_step))
            .collect();

        let err = rel_err(&analytic, &numeric);
        assert!(
            err <= SECOND_ORDER_TOL,
            "second-order trial {trial}: rel err {err:.3e}"
        );
    }
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut rng = rng::substream(0x3A3, &[0]);
    let (m, k, n) = (4, 3, 5);
    let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-2.0..2.0)).collect();
    let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut oracle = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for kk in 0..k {
                s += a[i * k + kk] * b[kk * n + j];
            }
            oracle[i * n + j] = s;
        }
    }
    let ta = Tensor::from_vec(a, &[m, k]).unwrap();
    let tb = Tensor::from_vec(b, &[k, n]).unwrap();
    let c = ta.matmul(&tb).unwrap();
    for (got, want) in c.values().iter().zip(&oracle) {
        assert!((got - want).abs() <= 1e-12);
    }
}

#[test]
fn matmul_identity_and_analytic_cases() {
    let i2 = Tensor::eye(2);
    let p = i2.matmul(&i2).unwrap();
    assert_eq!(p.values(), Tensor::eye(2).values());

    let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let b = Tensor::from_vec(vec![0.0, 1.0], &[2, 1]).unwrap();
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.values(), &[2.0, 4.0]);

    let bad = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3, 1]).unwrap();
    assert!(a.matmul(&bad).is_err());
}

#[test]
fn cross_entropy_reference_values() {
    // uniform logits over 5 classes -> ln 5
    let logits = Tensor::from_vec(vec![0.7; 10], &[2, 5]).unwrap();
    let ce = logits.cross_entropy(&[3, 1]).unwrap();
    assert!((ce.item().unwrap() - 5.0f64.ln()).abs() < 1e-12);

    // one-row [10, -10], label 0 -> ln(1 + e^{-20})  (high-precision oracle)
    let logits = Tensor::from_vec(vec![10.0, -10.0], &[1, 2]).unwrap();
    let ce = logits.cross_entropy(&[0]).unwrap();
    let oracle = (-20.0f64).exp().ln_1p();
    assert!((ce.item().unwrap() - oracle).abs() < 1e-15);
    assert!((ce.item().unwrap() - 2.06e-9).abs() < 1e-11);

    // label out of range
    assert!(matches!(
        logits.cross_entropy(&[2]),
        Err(fewshot_core::Error::Label(_))
    ));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = rng::substream(0x50F7, &[0]);
    for _ in 0..50 {
        let vals: Vec<f64> = (0..4 * 7).map(|_| rng.random_range(-30.0..30.0)).collect();
        let t = Tensor::from_vec(vals, &[4, 7]).unwrap();
        let s = t.softmax_rows().unwrap();
        for i in 0..4 {
            let row = &s.values()[i * 7..(i + 1) * 7];
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}

#[test]
fn division_by_zero_is_a_numeric_error() {
    let a = Tensor::from_vec(vec![1.0], &[1]).unwrap();
    let z = Tensor::from_vec(vec![0.0], &[1]).unwrap();
    assert!(matches!(a.div(&z), Err(fewshot_core::Error::NonFinite(_))));
}
