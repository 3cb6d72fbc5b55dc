//! Primitive tensor operations: forward kernels plus graph recording.
//!
//! Every operation validates shapes, computes its result, runs the
//! post-operation finiteness check, and appends a node when an operand is
//! attached to a recording graph. NaN/Inf therefore surface as errors at
//! the operation that produced them instead of propagating.

use std::rc::Rc;

use super::graph::{Graph, Node, Op};
use super::solve::solve_spd_raw;
use super::Tensor;
use crate::error::{Error, Result};

fn check_finite(op: &str, vals: &[f64]) -> Result<()> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{op} produced a non-finite value")))
    }
}

fn check_shape(op: &str, shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&e| e == 0) {
        return Err(Error::Dim(format!("{op}: zero extent in shape {shape:?}")));
    }
    Ok(())
}

/// Record the result when any operand lives in a recording graph;
/// otherwise return a constant.
fn attach(
    op_name: &'static str,
    operands: &[&Tensor],
    shape: Vec<usize>,
    data: Vec<f64>,
    build: impl FnOnce(&[usize]) -> Op,
) -> Result<Tensor> {
    check_finite(op_name, &data)?;
    let mut graph: Option<Graph> = None;
    for t in operands {
        if let Some((g, _)) = &t.node {
            match &graph {
                None => graph = Some(g.clone()),
                Some(g0) if g0.same(g) => {}
                Some(_) => {
                    return Err(Error::Connectivity(format!(
                        "{op_name}: operands belong to different graphs"
                    )))
                }
            }
        }
    }
    let data = Rc::new(data);
    if let Some(g) = graph {
        if g.is_recording() {
            let mut ids = Vec::with_capacity(operands.len());
            let mut rg = false;
            for t in operands {
                let (id, r) = g.promote(t);
                ids.push(id);
                rg |= r;
            }
            let id = g.push(Node {
                op: build(&ids),
                shape: shape.clone(),
                data: data.clone(),
                requires_grad: rg,
            });
            return Ok(Tensor {
                shape,
                data,
                node: Some((g, id)),
            });
        }
    }
    Ok(Tensor {
        shape,
        data,
        node: None,
    })
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Dim(format!(
            "{op}: shape {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a + b)
            .collect();
        attach("add", &[self, other], self.shape.clone(), data, |ids| {
            Op::Add(ids[0], ids[1])
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a - b)
            .collect();
        attach("sub", &[self, other], self.shape.clone(), data, |ids| {
            Op::Sub(ids[0], ids[1])
        })
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .collect();
        attach("mul", &[self, other], self.shape.clone(), data, |ids| {
            Op::Mul(ids[0], ids[1])
        })
    }

    /// Elementwise quotient. A zero divisor surfaces as a non-finite error.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("div", self, other)?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a / b)
            .collect();
        attach("div", &[self, other], self.shape.clone(), data, |ids| {
            Op::Div(ids[0], ids[1])
        })
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data = self.data.iter().map(|a| a * c).collect();
        attach("scale", &[self], self.shape.clone(), data, |ids| {
            Op::Scale(ids[0], c)
        })
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    /// Multiply every entry by a scalar *tensor* (gradients flow to both).
    pub fn mul_scalar_t(&self, s: &Tensor) -> Result<Tensor> {
        if s.numel() != 1 {
            return Err(Error::Dim(format!(
                "mul_scalar_t: scalar operand has shape {:?}",
                s.shape
            )));
        }
        let sv = s.data[0];
        let data = self.data.iter().map(|a| a * sv).collect();
        attach("mul_scalar_t", &[self, s], self.shape.clone(), data, |ids| {
            Op::MulScalarT(ids[0], ids[1])
        })
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.rank2("matmul")?;
        let (k2, n) = other.rank2("matmul")?;
        if k != k2 {
            return Err(Error::Dim(format!(
                "matmul: inner dimensions {k} vs {k2} (shapes {:?} x {:?})",
                self.shape, other.shape
            )));
        }
        let a = &self.data;
        let b = &other.data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &av) in arow.iter().enumerate() {
                if av != 0.0 {
                    let brow = &b[kk * n..(kk + 1) * n];
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        attach("matmul", &[self, other], vec![m, n], out, |ids| {
            Op::Matmul(ids[0], ids[1])
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.rank2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        attach("transpose", &[self], vec![n, m], out, |ids| {
            Op::Transpose(ids[0])
        })
    }

    pub fn relu(&self) -> Result<Tensor> {
        let data = self.data.iter().map(|&a| a.max(0.0)).collect();
        attach("relu", &[self], self.shape.clone(), data, |ids| {
            Op::Relu(ids[0])
        })
    }

    pub fn tanh(&self) -> Result<Tensor> {
        let data = self.data.iter().map(|a| a.tanh()).collect();
        attach("tanh", &[self], self.shape.clone(), data, |ids| {
            Op::Tanh(ids[0])
        })
    }

    pub fn exp(&self) -> Result<Tensor> {
        let data = self.data.iter().map(|a| a.exp()).collect();
        attach("exp", &[self], self.shape.clone(), data, |ids| {
            Op::Exp(ids[0])
        })
    }

    pub fn ln(&self) -> Result<Tensor> {
        let data = self.data.iter().map(|a| a.ln()).collect();
        attach("ln", &[self], self.shape.clone(), data, |ids| Op::Ln(ids[0]))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        let data = self.data.iter().map(|a| a.sqrt()).collect();
        attach("sqrt", &[self], self.shape.clone(), data, |ids| {
            Op::Sqrt(ids[0])
        })
    }

    pub fn clamp_min(&self, c: f64) -> Result<Tensor> {
        let data = self.data.iter().map(|&a| a.max(c)).collect();
        attach("clamp_min", &[self], self.shape.clone(), data, |ids| {
            Op::ClampMin(ids[0], c)
        })
    }

    /// Row-wise softmax, stabilized by max subtraction. Rows sum to one.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        let (n, c) = self.rank2("softmax")?;
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &self.data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * c..(i + 1) * c];
            let mut s = 0.0;
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = (x - m).exp();
                s += *o;
            }
            for o in orow.iter_mut() {
                *o /= s;
            }
        }
        attach("softmax", &[self], vec![n, c], out, |ids| {
            Op::SoftmaxRows(ids[0])
        })
    }

    /// Mean over rows of `-log softmax(logits)[label]`, stabilized by max
    /// subtraction.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let (n, c) = self.rank2("cross_entropy")?;
        if labels.len() != n {
            return Err(Error::Dim(format!(
                "cross_entropy: {n} logit rows but {} labels",
                labels.len()
            )));
        }
        for (i, &l) in labels.iter().enumerate() {
            if l >= c {
                return Err(Error::Label(format!(
                    "cross_entropy: label {l} at row {i} out of range [0, {c})"
                )));
            }
        }
        let mut acc = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = &self.data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            acc += lse - row[l];
        }
        let labels = Rc::new(labels.to_vec());
        attach(
            "cross_entropy",
            &[self],
            vec![],
            vec![acc / n as f64],
            move |ids| Op::CrossEntropy {
                logits: ids[0],
                labels,
            },
        )
    }

    pub fn sum_all(&self) -> Result<Tensor> {
        let s = self.data.iter().sum();
        attach("sum_all", &[self], vec![], vec![s], |ids| Op::SumAll(ids[0]))
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let s: f64 = self.data.iter().sum();
        let m = s / self.numel() as f64;
        attach("mean_all", &[self], vec![], vec![m], |ids| {
            Op::MeanAll(ids[0])
        })
    }

    /// Sum along axis 1 of a rank-2 tensor: `[n, c] -> [n, 1]`.
    pub fn row_sum(&self) -> Result<Tensor> {
        let (n, c) = self.rank2("row_sum")?;
        let mut out = vec![0.0; n];
        for i in 0..n {
            out[i] = self.data[i * c..(i + 1) * c].iter().sum();
        }
        attach("row_sum", &[self], vec![n, 1], out, |ids| Op::RowSum(ids[0]))
    }

    /// Select rows by index (first axis); indices may repeat.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        if self.shape.is_empty() {
            return Err(Error::Dim("gather_rows: scalar input".into()));
        }
        let rows = self.shape[0];
        let rowlen = self.numel() / rows;
        for &i in idx {
            if i >= rows {
                return Err(Error::Dim(format!(
                    "gather_rows: index {i} out of range [0, {rows})"
                )));
            }
        }
        let mut out = Vec::with_capacity(idx.len() * rowlen);
        for &i in idx {
            out.extend_from_slice(&self.data[i * rowlen..(i + 1) * rowlen]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        check_shape("gather_rows", &shape)?;
        let idx = Rc::new(idx.to_vec());
        attach("gather_rows", &[self], shape, out, move |ids| {
            Op::GatherRows { x: ids[0], idx }
        })
    }

    /// Scatter-add rows into a zero tensor with `out_rows` rows; the inverse
    /// (adjoint) of `gather_rows`.
    pub fn scatter_rows(&self, idx: &[usize], out_rows: usize) -> Result<Tensor> {
        if self.shape.is_empty() {
            return Err(Error::Dim("scatter_rows: scalar input".into()));
        }
        let rows = self.shape[0];
        if idx.len() != rows {
            return Err(Error::Dim(format!(
                "scatter_rows: {rows} rows but {} indices",
                idx.len()
            )));
        }
        let rowlen = self.numel() / rows;
        let mut out = vec![0.0; out_rows * rowlen];
        for (r, &i) in idx.iter().enumerate() {
            if i >= out_rows {
                return Err(Error::Dim(format!(
                    "scatter_rows: index {i} out of range [0, {out_rows})"
                )));
            }
            for j in 0..rowlen {
                out[i * rowlen + j] += self.data[r * rowlen + j];
            }
        }
        let mut shape = self.shape.clone();
        shape[0] = out_rows;
        check_shape("scatter_rows", &shape)?;
        let idx = Rc::new(idx.to_vec());
        attach("scatter_rows", &[self], shape, out, move |ids| {
            Op::ScatterRows { x: ids[0], idx }
        })
    }

    /// Arbitrary linear reindexing: `out[i] = x[idx[i]]`, with `-1` meaning
    /// zero fill. Covers im2col, axis permutations, and padding.
    pub fn gather_flat(&self, idx: &[i64], out_shape: &[usize]) -> Result<Tensor> {
        check_shape("gather_flat", out_shape)?;
        let out_numel: usize = out_shape.iter().product();
        if out_numel != idx.len() {
            return Err(Error::Dim(format!(
                "gather_flat: shape {:?} expects {} indices, got {}",
                out_shape,
                out_numel,
                idx.len()
            )));
        }
        let n = self.numel() as i64;
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            if i < -1 || i >= n {
                return Err(Error::Dim(format!(
                    "gather_flat: index {i} out of range [-1, {n})"
                )));
            }
            out.push(if i < 0 { 0.0 } else { self.data[i as usize] });
        }
        let idx = Rc::new(idx.to_vec());
        attach("gather_flat", &[self], out_shape.to_vec(), out, move |ids| {
            Op::GatherFlat { x: ids[0], idx }
        })
    }

    /// Adjoint of `gather_flat`: `out[idx[i]] += x[i]`, skipping `-1`.
    pub fn scatter_flat(&self, idx: &[i64], out_shape: &[usize]) -> Result<Tensor> {
        check_shape("scatter_flat", out_shape)?;
        if self.numel() != idx.len() {
            return Err(Error::Dim(format!(
                "scatter_flat: {} values but {} indices",
                self.numel(),
                idx.len()
            )));
        }
        let out_numel: usize = out_shape.iter().product();
        let mut out = vec![0.0; out_numel];
        for (v, &i) in self.data.iter().zip(idx) {
            if i < -1 || i >= out_numel as i64 {
                return Err(Error::Dim(format!(
                    "scatter_flat: index {i} out of range [-1, {out_numel})"
                )));
            }
            if i >= 0 {
                out[i as usize] += v;
            }
        }
        let idx = Rc::new(idx.to_vec());
        attach(
            "scatter_flat",
            &[self],
            out_shape.to_vec(),
            out,
            move |ids| Op::ScatterFlat { x: ids[0], idx },
        )
    }

    /// Stack tensors along the first axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Dim("concat_rows: no operands".into()));
        }
        let tail = &parts[0].shape[1..];
        let mut rows = 0;
        for p in parts {
            if p.shape.is_empty() || &p.shape[1..] != tail {
                return Err(Error::Dim(format!(
                    "concat_rows: incompatible shapes {:?} vs {:?}",
                    parts[0].shape, p.shape
                )));
            }
            rows += p.shape[0];
        }
        let mut out = Vec::with_capacity(rows * tail.iter().product::<usize>().max(1));
        for p in parts {
            out.extend_from_slice(&p.data);
        }
        let mut shape = parts[0].shape.clone();
        shape[0] = rows;
        attach("concat_rows", parts, shape, out, |ids| {
            Op::ConcatRows(ids.to_vec())
        })
    }

    /// Same buffer, new shape (element count must match).
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        check_shape("reshape", new_shape)?;
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Dim(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shape, new_shape
            )));
        }
        attach(
            "reshape",
            &[self],
            new_shape.to_vec(),
            self.data.as_ref().clone(),
            |ids| Op::Reshape(ids[0]),
        )
    }

    /// Solve `A W = B` for symmetric positive-definite `A` via Cholesky.
    /// Differentiates by the implicit rule, not through the factorization.
    pub fn solve_spd(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (d, d2) = a.rank2("solve_spd")?;
        if d != d2 {
            return Err(Error::Dim(format!(
                "solve_spd: matrix must be square, got {:?}",
                a.shape
            )));
        }
        let (db, o) = b.rank2("solve_spd")?;
        if db != d {
            return Err(Error::Dim(format!(
                "solve_spd: A is {d}x{d} but B has {db} rows"
            )));
        }
        let scale = a.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..d {
            for j in (i + 1)..d {
                if (a.data[i * d + j] - a.data[j * d + i]).abs() > 1e-9 * (1.0 + scale) {
                    return Err(Error::Dim("solve_spd: matrix is not symmetric".into()));
                }
            }
        }
        let w = solve_spd_raw(&a.data, d, &b.data, o)?;
        attach("solve_spd", &[a, b], vec![d, o], w, |ids| Op::SolveSpd {
            a: ids[0],
            b: ids[1],
        })
    }

    /// Sum of the `k` largest entries of every row, totalled over rows.
    /// Ties resolve to the first indices under a stable descending sort.
    pub fn topk_rowsum(&self, k: usize) -> Result<Tensor> {
        let (n, m) = self.rank2("topk_rowsum")?;
        if k < 1 || k > m {
            return Err(Error::Parameter(format!(
                "topk_rowsum: k = {k} out of range [1, {m}]"
            )));
        }
        let mut mask = vec![0.0; n * m];
        let mut total = 0.0;
        let mut order: Vec<usize> = Vec::with_capacity(m);
        for i in 0..n {
            let row = &self.data[i * m..(i + 1) * m];
            order.clear();
            order.extend(0..m);
            order.sort_by(|&x, &y| row[y].partial_cmp(&row[x]).unwrap());
            for &j in order.iter().take(k) {
                total += row[j];
                mask[i * m + j] = 1.0;
            }
        }
        let mask = Rc::new(mask);
        attach("topk_rowsum", &[self], vec![], vec![total], move |ids| {
            Op::TopkRowSum { x: ids[0], mask }
        })
    }
}
