use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::ParamVector;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A row-major `rows x cols` window into the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamBlock {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamBlock {
    pub fn new(offset: usize, rows: usize, cols: usize) -> Self {
        ParamBlock { offset, rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn end(&self) -> usize {
        self.offset + self.len()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.end()
    }

    fn view<'a>(&self, flat: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &flat[self.range()])
            .expect("param block within bounds")
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant(Array2<f64>),
    Param(ParamBlock),
    /// `input * W^T + b`, with `W` an `out x in` block and `b` of length `out`.
    Affine {
        input: NodeId,
        weight: ParamBlock,
        bias: Option<usize>,
    },
    Tanh(NodeId),
    Silu(NodeId),
    Concat(Vec<NodeId>),
    /// `(1/n) * sum_i w_i * ||pred_i - target_i||^2` over the `n` rows.
    Mse {
        pred: NodeId,
        target: NodeId,
        row_weights: Vec<f64>,
    },
    ScalarSum {
        terms: Vec<(NodeId, f64)>,
        constant: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant(_) => "constant",
            Op::Param(_) => "param",
            Op::Affine { .. } => "affine",
            Op::Tanh(_) => "tanh",
            Op::Silu(_) => "silu",
            Op::Concat(_) => "concat",
            Op::Mse { .. } => "mse",
            Op::ScalarSum { .. } => "scalar_sum",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    /// Whether the node's value varies with the parameters at all.
    live: bool,
}

/// Appends nodes in topological order; every node may only reference nodes
/// created before it, so the finished graph is acyclic by construction.
#[derive(Debug)]
pub struct GraphBuilder {
    dim: usize,
    nodes: Vec<Node>,
}

impl GraphBuilder {
    pub fn new(dim: usize) -> Self {
        GraphBuilder {
            dim,
            nodes: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, live: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            rows,
            cols,
            live,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<&Node> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| Error::Config(format!("node {} does not exist", id.0)))
    }

    fn check_block(&self, block: &ParamBlock) -> Result<()> {
        if block.end() > self.dim {
            return Err(Error::Config(format!(
                "param block {}..{} exceeds dimension {}",
                block.offset,
                block.end(),
                self.dim
            )));
        }
        Ok(())
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        let (r, c) = value.dim();
        self.push(Op::Constant(value), r, c, false)
    }

    pub fn param(&mut self, block: ParamBlock) -> Result<NodeId> {
        self.check_block(&block)?;
        Ok(self.push(Op::Param(block), block.rows, block.cols, true))
    }

    pub fn affine(
        &mut self,
        input: NodeId,
        weight: ParamBlock,
        bias: Option<usize>,
    ) -> Result<NodeId> {
        let x = self.check(input)?;
        let rows = x.rows;
        if x.cols != weight.cols {
            return Err(Error::Config(format!(
                "affine input has {} columns, weight expects {}",
                x.cols, weight.cols
            )));
        }
        self.check_block(&weight)?;
        if let Some(b) = bias {
            self.check_block(&ParamBlock::new(b, 1, weight.rows))?;
        }
        Ok(self.push(
            Op::Affine {
                input,
                weight,
                bias,
            },
            rows,
            weight.rows,
            true,
        ))
    }

    pub fn tanh(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.check(input)?;
        let (r, c, live) = (x.rows, x.cols, x.live);
        Ok(self.push(Op::Tanh(input), r, c, live))
    }

    pub fn silu(&mut self, input: NodeId) -> Result<NodeId> {
        let x = self.check(input)?;
        let (r, c, live) = (x.rows, x.cols, x.live);
        Ok(self.push(Op::Silu(input), r, c, live))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Config("concat of zero nodes".into()));
        }
        let rows = self.check(parts[0])?.rows;
        let mut cols = 0;
        let mut live = false;
        for &p in parts {
            let n = self.check(p)?;
            if n.rows != rows {
                return Err(Error::Config(format!(
                    "concat row mismatch: {} vs {}",
                    n.rows, rows
                )));
            }
            cols += n.cols;
            live |= n.live;
        }
        Ok(self.push(Op::Concat(parts.to_vec()), rows, cols, live))
    }

    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let rows = self.check(pred)?.rows;
        self.weighted_mse(pred, target, vec![1.0; rows])
    }

    pub fn weighted_mse(
        &mut self,
        pred: NodeId,
        target: NodeId,
        row_weights: Vec<f64>,
    ) -> Result<NodeId> {
        let p = self.check(pred)?;
        let t = self.check(target)?;
        if (p.rows, p.cols) != (t.rows, t.cols) {
            return Err(Error::Config(format!(
                "mse shape mismatch: {}x{} vs {}x{}",
                p.rows, p.cols, t.rows, t.cols
            )));
        }
        if row_weights.len() != p.rows {
            return Err(Error::Config("mse row weight count mismatch".into()));
        }
        if p.rows == 0 {
            return Err(Error::Config("mse over zero rows".into()));
        }
        let live = p.live || t.live;
        Ok(self.push(
            Op::Mse {
                pred,
                target,
                row_weights,
            },
            1,
            1,
            live,
        ))
    }

    /// `constant + sum_k coef_k * term_k` over scalar nodes. An empty term list is
    /// the constant function.
    pub fn scalar_sum(&mut self, terms: &[(NodeId, f64)], constant: f64) -> Result<NodeId> {
        let mut live = false;
        for &(id, _) in terms {
            let n = self.check(id)?;
            if (n.rows, n.cols) != (1, 1) {
                return Err(Error::Config(format!("node {} is not a scalar", id.0)));
            }
            live |= n.live;
        }
        Ok(self.push(
            Op::ScalarSum {
                terms: terms.to_vec(),
                constant,
            },
            1,
            1,
            live,
        ))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> Result<NodeId> {
        self.scalar_sum(&[(input, factor)], 0.0)
    }

    pub fn build(self, output: NodeId) -> Result<Graph> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Config("output node does not exist".into()));
        }
        Ok(Graph {
            dim: self.dim,
            nodes: self.nodes,
            output,
        })
    }
}

/// A finished computation over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Graph {
    dim: usize,
    nodes: Vec<Node>,
    output: NodeId,
}

struct Forward {
    values: Vec<Array2<f64>>,
    tangents: Vec<Option<Array2<f64>>>,
}

fn accumulate(slot: &mut Option<Array2<f64>>, value: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &value,
        None => *slot = Some(value),
    }
}

fn add_to_block(out: &mut [f64], block: &ParamBlock, values: &Array2<f64>) {
    for (o, v) in out[block.range()].iter_mut().zip(values.iter()) {
        *o += v;
    }
}

fn add_to_bias(out: &mut [f64], offset: usize, values: &Array1<f64>) {
    for (o, v) in out[offset..offset + values.len()].iter_mut().zip(values.iter()) {
        *o += v;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// First and second derivative of the elementwise nonlinearity at `x` given
/// its output `y`.
fn tanh_derivs(y: f64) -> (f64, f64) {
    let d1 = 1.0 - y * y;
    (d1, -2.0 * y * d1)
}

fn silu_derivs(x: f64) -> (f64, f64) {
    let s = sigmoid(x);
    let d1 = s * (1.0 + x * (1.0 - s));
    let d2 = s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s));
    (d1, d2)
}

impl Graph {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn output_shape(&self) -> (usize, usize) {
        let n = &self.nodes[self.output.0];
        (n.rows, n.cols)
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.dim() != self.dim {
            return Err(Error::Config(format!(
                "parameter vector has dimension {}, graph expects {}",
                params.dim(),
                self.dim
            )));
        }
        Ok(())
    }

    fn check_scalar(&self) -> Result<()> {
        if self.output_shape() != (1, 1) {
            return Err(Error::Config(format!(
                "graph output is {:?}, expected a scalar",
                self.output_shape()
            )));
        }
        Ok(())
    }

    fn forward(&self, params: &[f64], direction: Option<&[f64]>) -> Result<Forward> {
        let count = self.output.0 + 1;
        let mut values: Vec<Array2<f64>> = Vec::with_capacity(count);
        let mut tangents: Vec<Option<Array2<f64>>> = Vec::with_capacity(count);
        for (idx, node) in self.nodes[..count].iter().enumerate() {
            let (value, tangent) = match &node.op {
                Op::Constant(c) => (c.clone(), None),
                Op::Param(block) => (
                    block.view(params).to_owned(),
                    direction.map(|v| block.view(v).to_owned()),
                ),
                Op::Affine {
                    input,
                    weight,
                    bias,
                } => {
                    let x = &values[input.0];
                    let w = weight.view(params);
                    let mut y = x.dot(&w.t());
                    if let Some(b) = bias {
                        let bv = ParamBlock::new(*b, 1, weight.rows).view(params);
                        y += &bv;
                    }
                    let tangent = direction.map(|v| {
                        let vw = weight.view(v);
                        let mut t = x.dot(&vw.t());
                        if let Some(xt) = &tangents[input.0] {
                            t += &xt.dot(&w.t());
                        }
                        if let Some(b) = bias {
                            t += &ParamBlock::new(*b, 1, weight.rows).view(v);
                        }
                        t
                    });
                    (y, tangent)
                }
                Op::Tanh(input) => {
                    let y = values[input.0].mapv(f64::tanh);
                    let tangent = tangents[input.0].as_ref().map(|xt| {
                        let mut t = xt.clone();
                        t.zip_mut_with(&y, |t, &y| *t *= tanh_derivs(y).0);
                        t
                    });
                    (y, tangent)
                }
                Op::Silu(input) => {
                    let x = &values[input.0];
                    let y = x.mapv(|v| v * sigmoid(v));
                    let tangent = tangents[input.0].as_ref().map(|xt| {
                        let mut t = xt.clone();
                        t.zip_mut_with(x, |t, &x| *t *= silu_derivs(x).0);
                        t
                    });
                    (y, tangent)
                }
                Op::Concat(parts) => {
                    let views: Vec<_> = parts.iter().map(|p| values[p.0].view()).collect();
                    let y = ndarray::concatenate(Axis(1), &views)
                        .map_err(|e| Error::Config(format!("concat: {e}")))?;
                    let tangent = if direction.is_some()
                        && parts.iter().any(|p| tangents[p.0].is_some())
                    {
                        let tv: Vec<Array2<f64>> = parts
                            .iter()
                            .map(|p| {
                                tangents[p.0].clone().unwrap_or_else(|| {
                                    Array2::zeros(values[p.0].raw_dim())
                                })
                            })
                            .collect();
                        let tviews: Vec<_> = tv.iter().map(|t| t.view()).collect();
                        Some(
                            ndarray::concatenate(Axis(1), &tviews)
                                .map_err(|e| Error::Config(format!("concat: {e}")))?,
                        )
                    } else {
                        None
                    };
                    (y, tangent)
                }
                Op::Mse {
                    pred,
                    target,
                    row_weights,
                } => {
                    let n = row_weights.len() as f64;
                    let diff = &values[pred.0] - &values[target.0];
                    let mut total = 0.0;
                    for (row, w) in diff.rows().into_iter().zip(row_weights) {
                        total += w * row.iter().map(|d| d * d).sum::<f64>();
                    }
                    let tangent = match (&tangents[pred.0], &tangents[target.0]) {
                        (None, None) => None,
                        (pt, tt) => {
                            let mut dt = Array2::zeros(diff.raw_dim());
                            if let Some(pt) = pt {
                                dt += pt;
                            }
                            if let Some(tt) = tt {
                                dt -= tt;
                            }
                            let mut acc = 0.0;
                            for ((d, t), w) in
                                diff.rows().into_iter().zip(dt.rows()).zip(row_weights)
                            {
                                acc += 2.0 * w * d.dot(&t);
                            }
                            Some(Array2::from_elem((1, 1), acc / n))
                        }
                    };
                    (Array2::from_elem((1, 1), total / n), tangent)
                }
                Op::ScalarSum { terms, constant } => {
                    let mut total = *constant;
                    let mut tangent: Option<f64> = None;
                    for (id, coef) in terms {
                        total += coef * values[id.0][[0, 0]];
                        if let Some(t) = &tangents[id.0] {
                            *tangent.get_or_insert(0.0) += coef * t[[0, 0]];
                        }
                    }
                    (
                        Array2::from_elem((1, 1), total),
                        tangent.map(|t| Array2::from_elem((1, 1), t)),
                    )
                }
            };
            if !value.iter().all(|v| v.is_finite())
                || tangent
                    .as_ref()
                    .is_some_and(|t| !t.iter().all(|v| v.is_finite()))
            {
                return Err(Error::NonFinite {
                    node: idx,
                    op: node.op.name(),
                });
            }
            values.push(value);
            tangents.push(tangent);
        }
        Ok(Forward { values, tangents })
    }

    /// Reverse sweep. With `direction` present this is the forward-over-reverse
    /// sweep: adjoints carry their own tangents and the returned second vector
    /// is the Hessian-vector product.
    fn backward(
        &self,
        params: &[f64],
        direction: Option<&[f64]>,
        fwd: &Forward,
    ) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let count = self.output.0 + 1;
        let mut grad = vec![0.0; self.dim];
        let mut hess = direction.map(|_| vec![0.0; self.dim]);
        let mut adj: Vec<Option<Array2<f64>>> = vec![None; count];
        let mut adj_t: Vec<Option<Array2<f64>>> = vec![None; count];
        adj[self.output.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..count).rev() {
            let node = &self.nodes[idx];
            if !node.live {
                continue;
            }
            let Some(ybar) = adj[idx].take() else {
                continue;
            };
            let ybar_t = adj_t[idx].take();
            match &node.op {
                Op::Constant(_) => {}
                Op::Param(block) => {
                    add_to_block(&mut grad, block, &ybar);
                    if let (Some(h), Some(yt)) = (hess.as_mut(), &ybar_t) {
                        add_to_block(h, block, yt);
                    }
                }
                Op::Affine {
                    input,
                    weight,
                    bias,
                } => {
                    let x = &fwd.values[input.0];
                    let w = weight.view(params);
                    add_to_block(&mut grad, weight, &ybar.t().dot(x));
                    if let Some(b) = bias {
                        add_to_bias(&mut grad, *b, &ybar.sum_axis(Axis(0)));
                    }
                    if let (Some(h), Some(v)) = (hess.as_mut(), direction) {
                        let xt = &fwd.tangents[input.0];
                        let mut hw: Option<Array2<f64>> = None;
                        if let Some(yt) = &ybar_t {
                            hw = Some(yt.t().dot(x));
                            if let Some(b) = bias {
                                add_to_bias(h, *b, &yt.sum_axis(Axis(0)));
                            }
                        }
                        if let Some(xt) = xt {
                            accumulate(&mut hw, ybar.t().dot(xt));
                        }
                        if let Some(hw) = hw {
                            add_to_block(h, weight, &hw);
                        }
                        if self.nodes[input.0].live {
                            let vw = weight.view(v);
                            let mut xbar_t = ybar.dot(&vw);
                            if let Some(yt) = &ybar_t {
                                xbar_t += &yt.dot(&w);
                            }
                            accumulate(&mut adj_t[input.0], xbar_t);
                        }
                    }
                    if self.nodes[input.0].live {
                        accumulate(&mut adj[input.0], ybar.dot(&w));
                    }
                }
                Op::Tanh(input) | Op::Silu(input) => {
                    let is_tanh = matches!(node.op, Op::Tanh(_));
                    let derivs = |x: f64, y: f64| {
                        if is_tanh {
                            tanh_derivs(y)
                        } else {
                            silu_derivs(x)
                        }
                    };
                    let x = &fwd.values[input.0];
                    let y = &fwd.values[idx];
                    let mut xbar = Array2::zeros(x.raw_dim());
                    ndarray::Zip::from(&mut xbar)
                        .and(x)
                        .and(y)
                        .and(&ybar)
                        .for_each(|o, &x, &y, &yb| *o = derivs(x, y).0 * yb);
                    if hess.is_some() {
                        let mut xbar_t = Array2::zeros(x.raw_dim());
                        if let Some(xt) = &fwd.tangents[input.0] {
                            ndarray::Zip::from(&mut xbar_t)
                                .and(x)
                                .and(y)
                                .and(xt)
                                .and(&ybar)
                                .for_each(|o, &x, &y, &xt, &yb| *o = derivs(x, y).1 * xt * yb);
                        }
                        if let Some(yt) = &ybar_t {
                            ndarray::Zip::from(&mut xbar_t)
                                .and(x)
                                .and(y)
                                .and(yt)
                                .for_each(|o, &x, &y, &yt| *o += derivs(x, y).0 * yt);
                        }
                        accumulate(&mut adj_t[input.0], xbar_t);
                    }
                    accumulate(&mut adj[input.0], xbar);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let width = self.nodes[p.0].cols;
                        let cols = s![.., start..start + width];
                        if self.nodes[p.0].live {
                            accumulate(&mut adj[p.0], ybar.slice(cols).to_owned());
                            if let Some(yt) = &ybar_t {
                                accumulate(&mut adj_t[p.0], yt.slice(cols).to_owned());
                            }
                        }
                        start += width;
                    }
                }
                Op::Mse {
                    pred,
                    target,
                    row_weights,
                } => {
                    let n = row_weights.len() as f64;
                    let lbar = ybar[[0, 0]];
                    let diff = &fwd.values[pred.0] - &fwd.values[target.0];
                    let row_scale = |m: &mut Array2<f64>, factor: f64| {
                        for (mut row, w) in m.rows_mut().into_iter().zip(row_weights) {
                            row *= 2.0 * w * factor / n;
                        }
                    };
                    let mut dbar = diff.clone();
                    row_scale(&mut dbar, lbar);
                    let dbar_t = if hess.is_some() {
                        let mut out = Array2::zeros(diff.raw_dim());
                        if let Some(yt) = &ybar_t {
                            out.scaled_add(yt[[0, 0]], &diff);
                        }
                        let mut dt = Array2::zeros(diff.raw_dim());
                        if let Some(pt) = &fwd.tangents[pred.0] {
                            dt += pt;
                        }
                        if let Some(tt) = &fwd.tangents[target.0] {
                            dt -= tt;
                        }
                        out.scaled_add(lbar, &dt);
                        row_scale(&mut out, 1.0);
                        Some(out)
                    } else {
                        None
                    };
                    if self.nodes[pred.0].live {
                        accumulate(&mut adj[pred.0], dbar.clone());
                        if let Some(dt) = &dbar_t {
                            accumulate(&mut adj_t[pred.0], dt.clone());
                        }
                    }
                    if self.nodes[target.0].live {
                        accumulate(&mut adj[target.0], -dbar);
                        if let Some(dt) = dbar_t {
                            accumulate(&mut adj_t[target.0], -dt);
                        }
                    }
                }
                Op::ScalarSum { terms, .. } => {
                    for (id, coef) in terms {
                        if !self.nodes[id.0].live {
                            continue;
                        }
                        accumulate(&mut adj[id.0], &ybar * *coef);
                        if let Some(yt) = &ybar_t {
                            accumulate(&mut adj_t[id.0], yt * *coef);
                        }
                    }
                }
            }
        }
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        if hess
            .as_ref()
            .is_some_and(|h| !h.iter().all(|v| v.is_finite()))
        {
            return Err(Error::Numeric("non-finite Hessian-vector product".into()));
        }
        Ok((grad, hess))
    }

    /// Value of the output node, which may be any shape.
    pub fn evaluate(&self, params: &ParamVector) -> Result<Array2<f64>> {
        self.check_params(params)?;
        let mut fwd = self.forward(params.as_slice(), None)?;
        Ok(fwd.values.swap_remove(self.output.0))
    }

    pub fn eval_loss(&self, params: &ParamVector) -> Result<f64> {
        self.check_scalar()?;
        Ok(self.evaluate(params)?[[0, 0]])
    }

    pub fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, ParamVector)> {
        self.check_scalar()?;
        self.check_params(params)?;
        let fwd = self.forward(params.as_slice(), None)?;
        let value = fwd.values[self.output.0][[0, 0]];
        let (grad, _) = self.backward(params.as_slice(), None, &fwd)?;
        Ok((value, ParamVector::new(grad)))
    }

    pub fn grad(&self, params: &ParamVector) -> Result<ParamVector> {
        Ok(self.value_and_grad(params)?.1)
    }

    /// Hessian-vector product by differentiating the reverse sweep along `v`.
    pub fn hvp(&self, params: &ParamVector, v: &ParamVector) -> Result<ParamVector> {
        self.check_scalar()?;
        self.check_params(params)?;
        if v.dim() != self.dim {
            return Err(Error::Config(format!(
                "direction has dimension {}, graph expects {}",
                v.dim(),
                self.dim
            )));
        }
        let fwd = self.forward(params.as_slice(), Some(v.as_slice()))?;
        let (_, hess) = self.backward(params.as_slice(), Some(v.as_slice()), &fwd)?;
        Ok(ParamVector::new(hess.expect("direction supplied")))
    }
}
