//! Dense float64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are immutable values. When an operation touches a tensor that is
//! attached to a recording [`Graph`], the operation is appended to that
//! graph and the result stays attached; otherwise the result is a plain
//! constant. Backward rules are themselves written in terms of these same
//! operations, so [`grad`] with `create_graph = true` yields gradients that
//! can be differentiated again (needed for second-order meta-gradients).

mod graph;
mod ops;
mod solve;
mod vjp;

pub mod functional;

pub use graph::{grad, Graph};

use std::rc::Rc;

use crate::error::{Error, Result};

/// A dense row-major float64 tensor, optionally attached to a computation
/// graph node.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Rc<Vec<f64>>,
    pub(crate) node: Option<(Graph, usize)>,
}

impl Tensor {
    /// Constant tensor from raw values. The scalar shape is `[]`.
    pub fn from_vec(values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::Dim(format!(
                "shape {:?} expects {} values, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Rc::new(values),
            node: None,
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: Rc::new(vec![v]),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Rc::new(vec![0.0; numel]),
            node: None,
        }
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Rc::new(vec![1.0; numel]),
            node: None,
        }
    }

    pub fn eye(n: usize) -> Tensor {
        let mut v = vec![0.0; n * n];
        for i in 0..n {
            v[i * n + i] = 1.0;
        }
        Tensor {
            shape: vec![n, n],
            data: Rc::new(v),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Rank(format!(
                "item() needs a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// True when attached to a graph node that participates in gradients.
    pub fn requires_grad(&self) -> bool {
        match &self.node {
            Some((g, id)) => g.node_requires_grad(*id),
            None => false,
        }
    }

    /// Detached constant copy (shares the value buffer).
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    pub(crate) fn rank2(&self, op: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Dim(format!(
                "{op} expects a rank-2 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 8 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}
