//! The recorded computation graph and the backward pass.
//!
//! Nodes are append-only, so append order is a topological order: a node's
//! operands always precede it. The backward sweep walks ids in reverse and
//! visits every reachable node exactly once. A graph and its tensors stay
//! on one thread (`Rc` interior); independent graphs may run in parallel.

use std::cell::RefCell;
use std::rc::Rc;

use super::vjp;
use super::Tensor;
use crate::error::{Error, Result};

/// One recorded primitive. Payloads hold whatever the backward rule needs
/// beyond the operand values (label vectors, gather indices, top-k masks).
#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    /// Matrix times scalar-tensor.
    MulScalarT(usize, usize),
    Matmul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    ClampMin(usize, f64),
    SoftmaxRows(usize),
    CrossEntropy {
        logits: usize,
        labels: Rc<Vec<usize>>,
    },
    SumAll(usize),
    MeanAll(usize),
    RowSum(usize),
    GatherRows {
        x: usize,
        idx: Rc<Vec<usize>>,
    },
    ScatterRows {
        x: usize,
        idx: Rc<Vec<usize>>,
    },
    GatherFlat {
        x: usize,
        idx: Rc<Vec<i64>>,
    },
    ScatterFlat {
        x: usize,
        idx: Rc<Vec<i64>>,
    },
    ConcatRows(Vec<usize>),
    Reshape(usize),
    SolveSpd {
        a: usize,
        b: usize,
    },
    TopkRowSum {
        x: usize,
        mask: Rc<Vec<f64>>,
    },
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Rc<Vec<f64>>,
    pub(crate) requires_grad: bool,
}

struct GraphInner {
    nodes: Vec<Node>,
    recording: bool,
}

/// Handle to a computation graph; cloning yields the same graph.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner {
                nodes: Vec::new(),
                recording: true,
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn same(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn is_recording(&self) -> bool {
        self.inner.borrow().recording
    }

    pub(crate) fn set_recording(&self, on: bool) -> bool {
        let mut b = self.inner.borrow_mut();
        std::mem::replace(&mut b.recording, on)
    }

    /// Register a leaf holding `values`.
    pub fn leaf(&self, values: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape)?;
        Ok(self.leaf_from(&t, requires_grad))
    }

    /// Register a leaf sharing `t`'s buffer.
    pub fn leaf_from(&self, t: &Tensor, requires_grad: bool) -> Tensor {
        let id = self.push(Node {
            op: Op::Leaf,
            shape: t.shape.clone(),
            data: t.data.clone(),
            requires_grad,
        });
        Tensor {
            shape: t.shape.clone(),
            data: t.data.clone(),
            node: Some((self.clone(), id)),
        }
    }

    pub(crate) fn push(&self, node: Node) -> usize {
        let mut b = self.inner.borrow_mut();
        b.nodes.push(node);
        b.nodes.len() - 1
    }

    /// Promote a tensor to a node id in this graph, adding a non-grad leaf
    /// for constants. Returns `(id, requires_grad)`.
    pub(crate) fn promote(&self, t: &Tensor) -> (usize, bool) {
        if let Some((g, id)) = &t.node {
            if g.same(self) {
                return (*id, self.node_requires_grad(*id));
            }
        }
        let id = self.push(Node {
            op: Op::Leaf,
            shape: t.shape.clone(),
            data: t.data.clone(),
            requires_grad: false,
        });
        (id, false)
    }

    pub(crate) fn node_requires_grad(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    pub(crate) fn node_shape(&self, id: usize) -> Vec<usize> {
        self.inner.borrow().nodes[id].shape.clone()
    }

    pub(crate) fn node_op(&self, id: usize) -> Op {
        self.inner.borrow().nodes[id].op.clone()
    }

    /// A tensor view of an existing node (shares the value buffer).
    pub(crate) fn tensor_at(&self, id: usize) -> Tensor {
        let b = self.inner.borrow();
        let n = &b.nodes[id];
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
            node: Some((self.clone(), id)),
        }
    }
}

/// Reverse-mode gradients of a scalar `loss` with respect to `wrt`.
///
/// With `create_graph = true` the backward operations are recorded, so the
/// returned gradients are graph tensors and can be differentiated again.
/// Unreached (but in-graph) `wrt` tensors get zero gradients.
pub fn grad(loss: &Tensor, wrt: &[Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    let (g, lid) = match &loss.node {
        Some((g, id)) => (g.clone(), *id),
        None => {
            return Err(Error::Connectivity(
                "loss tensor is not attached to a graph".into(),
            ))
        }
    };
    if loss.numel() != 1 {
        return Err(Error::Rank(format!(
            "loss must be a scalar, got shape {:?}",
            loss.shape()
        )));
    }
    let mut wrt_ids = Vec::with_capacity(wrt.len());
    for (i, t) in wrt.iter().enumerate() {
        match &t.node {
            Some((g2, id)) if g2.same(&g) => {
                if !g.node_requires_grad(*id) {
                    return Err(Error::Connectivity(format!(
                        "wrt tensor {i} does not require grad"
                    )));
                }
                wrt_ids.push(*id);
            }
            Some(_) => {
                return Err(Error::Connectivity(format!(
                    "wrt tensor {i} belongs to a different graph"
                )))
            }
            None => {
                return Err(Error::Connectivity(format!(
                    "wrt tensor {i} is not in the active graph"
                )))
            }
        }
    }

    let prev = g.set_recording(create_graph);
    let swept = backward(&g, lid);
    g.set_recording(prev);
    let mut grads = swept?;

    Ok(wrt_ids
        .iter()
        .zip(wrt)
        .map(|(id, t)| {
            grads[*id]
                .take()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect())
}

fn backward(g: &Graph, lid: usize) -> Result<Vec<Option<Tensor>>> {
    let n = lid + 1;
    let mut grads: Vec<Option<Tensor>> = vec![None; n];
    let seed_shape = g.node_shape(lid);
    grads[lid] = Some(Tensor::ones(&seed_shape));
    for id in (0..n).rev() {
        let Some(gout) = grads[id].clone() else {
            continue;
        };
        if !g.node_requires_grad(id) {
            continue;
        }
        for (input_id, contrib) in vjp::vjp(g, id, &gout)? {
            if !g.node_requires_grad(input_id) {
                continue;
            }
            grads[input_id] = Some(match grads[input_id].take() {
                Some(acc) => acc.add(&contrib)?,
                None => contrib,
            });
        }
    }
    Ok(grads)
}
