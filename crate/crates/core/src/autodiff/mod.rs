//! Reverse-mode differentiation over flat parameter vectors.
//!
//! A [`Graph`] is a straight-line program of matrix-valued nodes whose
//! parameters are windows ([`ParamBlock`]) into one [`ParamVector`]. Gradients
//! come from a single reverse sweep. Hessian-vector products push a tangent
//! through the forward pass and differentiate the reverse sweep along it
//! (forward-over-reverse), so the Hessian itself is never formed.

mod graph;
mod param;
mod quadratic;

pub use graph::{Graph, GraphBuilder, NodeId, ParamBlock};
pub use param::ParamVector;
pub use quadratic::Quadratic;

use crate::error::Result;

/// A twice-differentiable scalar function of the parameters.
pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;

    fn value(&self, params: &ParamVector) -> Result<f64>;

    fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)>;

    fn grad(&self, params: &ParamVector) -> Result<ParamVector> {
        Ok(self.value_and_grad(params)?.1)
    }

    fn hvp(&self, params: &ParamVector, v: &ParamVector) -> Result<ParamVector>;
}

impl Objective for Graph {
    fn dim(&self) -> usize {
        Graph::dim(self)
    }

    fn value(&self, params: &ParamVector) -> Result<f64> {
        self.eval_loss(params)
    }

    fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        Graph::value_and_grad(self, params)
    }

    fn hvp(&self, params: &ParamVector, v: &ParamVector) -> Result<ParamVector> {
        Graph::hvp(self, params, v)
    }
}

pub fn eval_loss(graph: &Graph, params: &ParamVector) -> Result<f64> {
    graph.eval_loss(params)
}

pub fn grad(graph: &Graph, params: &ParamVector) -> Result<ParamVector> {
    graph.grad(params)
}

pub fn hvp(graph: &Graph, params: &ParamVector, v: &ParamVector) -> Result<ParamVector> {
    graph.hvp(params, v)
}

/// Dense Hessian assembled one column at a time from Hessian-vector products.
/// Only meant for small oracle-scale problems.
pub fn dense_hessian(objective: &dyn Objective, params: &ParamVector) -> Result<Vec<Vec<f64>>> {
    let d = objective.dim();
    let mut columns = Vec::with_capacity(d);
    let mut e = ParamVector::zeros(d);
    for i in 0..d {
        e[i] = 1.0;
        columns.push(objective.hvp(params, &e)?.into_inner());
        e[i] = 0.0;
    }
    // columns[i][j] = H[j][i]; H is symmetric up to rounding so symmetrize
    let mut h = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..d {
            h[i][j] = 0.5 * (columns[i][j] + columns[j][i]);
        }
    }
    Ok(h)
}
