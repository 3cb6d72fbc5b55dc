//! Vector-Jacobian products for every primitive.
//!
//! Rules are written in terms of the public tensor operations, so when the
//! backward pass runs with `create_graph` enabled the produced gradients
//! are themselves graph tensors and support another backward pass.

use super::functional::onehot;
use super::graph::{Graph, Op};
use super::Tensor;
use crate::error::Result;

/// Gradient contributions `(input_id, d loss / d input)` for node `id`
/// given the incoming output gradient `gout`.
pub(super) fn vjp(g: &Graph, id: usize, gout: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let op = g.node_op(id);
    Ok(match op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(a, gout.clone()), (b, gout.clone())],
        Op::Sub(a, b) => vec![(a, gout.clone()), (b, gout.neg()?)],
        Op::Mul(a, b) => {
            let ta = g.tensor_at(a);
            let tb = g.tensor_at(b);
            vec![(a, gout.mul(&tb)?), (b, gout.mul(&ta)?)]
        }
        Op::Div(a, b) => {
            let tb = g.tensor_at(b);
            let y = g.tensor_at(id);
            let ga = gout.div(&tb)?;
            let gb = gout.mul(&y)?.div(&tb)?.neg()?;
            vec![(a, ga), (b, gb)]
        }
        Op::Scale(a, c) => vec![(a, gout.scale(c)?)],
        Op::MulScalarT(a, s) => {
            let ta = g.tensor_at(a);
            let ts = g.tensor_at(s);
            let ga = gout.mul_scalar_t(&ts)?;
            let gs = gout.mul(&ta)?.sum_all()?;
            vec![(a, ga), (s, gs)]
        }
        Op::Matmul(a, b) => {
            let ta = g.tensor_at(a);
            let tb = g.tensor_at(b);
            let ga = gout.matmul(&tb.transpose()?)?;
            let gb = ta.transpose()?.matmul(gout)?;
            vec![(a, ga), (b, gb)]
        }
        Op::Transpose(a) => vec![(a, gout.transpose()?)],
        Op::Relu(a) => {
            let ta = g.tensor_at(a);
            let mask: Vec<f64> = ta
                .values()
                .iter()
                .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
                .collect();
            let mask = Tensor::from_vec(mask, ta.shape())?;
            vec![(a, gout.mul(&mask)?)]
        }
        Op::Tanh(a) => {
            let y = g.tensor_at(id);
            let one = Tensor::ones(y.shape());
            vec![(a, gout.mul(&one.sub(&y.mul(&y)?)?)?)]
        }
        Op::Exp(a) => {
            let y = g.tensor_at(id);
            vec![(a, gout.mul(&y)?)]
        }
        Op::Ln(a) => {
            let ta = g.tensor_at(a);
            vec![(a, gout.div(&ta)?)]
        }
        Op::Sqrt(a) => {
            let y = g.tensor_at(id);
            vec![(a, gout.div(&y.scale(2.0)?)?)]
        }
        Op::ClampMin(a, c) => {
            let ta = g.tensor_at(a);
            let mask: Vec<f64> = ta
                .values()
                .iter()
                .map(|&v| if v > c { 1.0 } else { 0.0 })
                .collect();
            let mask = Tensor::from_vec(mask, ta.shape())?;
            vec![(a, gout.mul(&mask)?)]
        }
        Op::SoftmaxRows(a) => {
            let y = g.tensor_at(id);
            let c = y.shape()[1];
            let s = gout.mul(&y)?.row_sum()?;
            let bcast = s.matmul(&Tensor::ones(&[1, c]))?;
            vec![(a, y.mul(&gout.sub(&bcast)?)?)]
        }
        Op::CrossEntropy { logits, labels } => {
            let lt = g.tensor_at(logits);
            let (n, c) = (lt.shape()[0], lt.shape()[1]);
            let p = lt.softmax_rows()?;
            let y = onehot(&labels, c)?;
            let diff = p.sub(&y)?.scale(1.0 / n as f64)?;
            vec![(logits, diff.mul_scalar_t(gout)?)]
        }
        Op::SumAll(a) => {
            let shape = g.node_shape(a);
            vec![(a, Tensor::ones(&shape).mul_scalar_t(gout)?)]
        }
        Op::MeanAll(a) => {
            let shape = g.node_shape(a);
            let n: usize = shape.iter().product();
            let grad = Tensor::ones(&shape).scale(1.0 / n as f64)?;
            vec![(a, grad.mul_scalar_t(gout)?)]
        }
        Op::RowSum(a) => {
            let c = g.node_shape(a)[1];
            vec![(a, gout.matmul(&Tensor::ones(&[1, c]))?)]
        }
        Op::GatherRows { x, idx } => {
            let rows = g.node_shape(x)[0];
            vec![(x, gout.scatter_rows(&idx, rows)?)]
        }
        Op::ScatterRows { x, idx } => vec![(x, gout.gather_rows(&idx)?)],
        Op::GatherFlat { x, idx } => {
            let shape = g.node_shape(x);
            vec![(x, gout.scatter_flat(&idx, &shape)?)]
        }
        Op::ScatterFlat { x, idx } => {
            let shape = g.node_shape(x);
            vec![(x, gout.gather_flat(&idx, &shape)?)]
        }
        Op::ConcatRows(parts) => {
            let mut out = Vec::with_capacity(parts.len());
            let mut offset = 0;
            for p in parts {
                let rows = g.node_shape(p)[0];
                let idx: Vec<usize> = (offset..offset + rows).collect();
                out.push((p, gout.gather_rows(&idx)?));
                offset += rows;
            }
            out
        }
        Op::Reshape(a) => {
            let shape = g.node_shape(a);
            vec![(a, gout.reshape(&shape)?)]
        }
        Op::SolveSpd { a, b } => {
            // Implicit differentiation of A W = B with symmetric A:
            // gB = A^{-1} gW, gA = -gB W^T.
            let ta = g.tensor_at(a);
            let w = g.tensor_at(id);
            let gb = Tensor::solve_spd(&ta, gout)?;
            let ga = gb.matmul(&w.transpose()?)?.neg()?;
            vec![(a, ga), (b, gb)]
        }
        Op::TopkRowSum { x, mask } => {
            let shape = g.node_shape(x);
            let m = Tensor::from_vec(mask.as_ref().clone(), &shape)?;
            vec![(x, m.mul_scalar_t(gout)?)]
        }
    })
}
