//! Reverse-mode differentiation over a flat node list.
//!
//! Nodes are appended in evaluation order, so walking the list backwards is a
//! valid reverse topological order. Gradients are accumulated in that fixed
//! order, which keeps repeated runs bit-identical.

use serde::{Deserialize, Serialize};

use super::tensor::{matmul_at_into, matmul_bt_into, Tensor};
use crate::error::{domain, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `[n, d] + [d]` broadcast over rows.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    Transpose(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    Reshape(NodeId),
    MeanRows(NodeId),
    Sum(NodeId),
    GatherRows(NodeId, Vec<usize>),
    StopGrad,
    StraightThrough(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// A computation recorded for one backward pass.
#[derive(Debug)]
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node, so
    /// gradients from every use land on one accumulator.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(node) = self.param_nodes[id.0] {
            return node;
        }
        let node = self.push(Op::Param, self.params.get(id).clone(), true);
        self.param_nodes[id.0] = Some(node);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), value, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let d = self.value(x).cols();
        if self.value(bias).len() != d {
            return Err(domain(format!(
                "bias of length {} cannot broadcast over rows of width {d}",
                self.value(bias).len()
            )));
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).values().to_vec();
        for row in value.values_mut().chunks_mut(d) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Op::AddRow(x, bias), value, rg))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(Op::Scale(x, factor), value, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(Op::Relu(x), value, rg)
    }

    /// Numerically stable softmax along the last axis.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let mut value = self.value(x).clone();
        let d = value.cols();
        for row in value.values_mut().chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.rg(x);
        self.push(Op::SoftmaxRows(x), value, rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let d = self.value(x).cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(domain("layer norm gain/bias must match the last axis"));
        }
        let g = self.value(gain).values().to_vec();
        let b = self.value(bias).values().to_vec();
        let mut value = self.value(x).clone();
        for row in value.values_mut().chunks_mut(d) {
            let (mean, rstd) = moments(row, eps);
            for ((v, gv), bv) in row.iter_mut().zip(&g).zip(&b) {
                *v = (*v - mean) * rstd * gv + bv;
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, value, rg))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).transpose()?;
        let rg = self.rg(x);
        Ok(self.push(Op::Transpose(x), value, rg))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let src = self.value(x);
        let (rows, cols) = (src.rows(), src.cols());
        if src.shape().len() != 2 || len == 0 || start + len > cols {
            return Err(domain(format!(
                "column slice {start}..{} out of range for {:?}",
                start + len,
                src.shape()
            )));
        }
        let values: Vec<f64> = (0..rows)
            .flat_map(|r| src.row(r)[start..start + len].to_vec())
            .collect();
        let value = Tensor::matrix(rows, len, values)?;
        let rg = self.rg(x);
        Ok(self.push(Op::SliceCols { x, start }, value, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| domain("concat of zero tensors"))?;
        let rows = self.value(*first).rows();
        if parts
            .iter()
            .any(|p| self.shape(*p).len() != 2 || self.value(*p).rows() != rows)
        {
            return Err(domain("concat parts must be 2-D with equal row counts"));
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut values = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                values.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Tensor::matrix(rows, total, values)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape(x), value, rg))
    }

    /// `[n, d] -> [1, d]` column means.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let src = self.value(x);
        let (n, d) = (src.rows(), src.cols());
        let mut out = vec![0.0; d];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(src.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let value = Tensor::matrix(1, d, out).expect("d >= 1");
        let rg = self.rg(x);
        self.push(Op::MeanRows(x), value, rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(Op::Sum(x), value, rg)
    }

    /// Sum of squared entries.
    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        let sq = self.mul(x, x).expect("same node has same shape");
        self.sum(sq)
    }

    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let src = self.value(x);
        let n = src.rows();
        if let Some(bad) = indices.iter().find(|&&i| i >= n) {
            return Err(domain(format!("row index {bad} out of range for {n} rows")));
        }
        if indices.is_empty() {
            return Err(domain("gather of zero rows"));
        }
        let values: Vec<f64> = indices.iter().flat_map(|&i| src.row(i).to_vec()).collect();
        let value = Tensor::matrix(indices.len(), src.cols(), values)?;
        let rg = self.rg(x);
        Ok(self.push(Op::GatherRows(x, indices.to_vec()), value, rg))
    }

    /// Same value, no gradient.
    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).clone();
        self.push(Op::StopGrad, value, false)
    }

    /// Forward value of `quantized`, gradient routed to `encoder` unchanged.
    pub fn straight_through(&mut self, encoder: NodeId, quantized: NodeId) -> Result<NodeId> {
        if self.shape(encoder) != self.shape(quantized) {
            return Err(domain(format!(
                "straight-through shapes {:?} vs {:?}",
                self.shape(encoder),
                self.shape(quantized)
            )));
        }
        let value = self.value(quantized).clone();
        let rg = self.rg(encoder);
        Ok(self.push(Op::StraightThrough(encoder), value, rg))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(domain(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &upstream, &mut grads);
            grads[idx] = Some(upstream);
        }

        let mut params = vec![None; self.params.len()];
        for (pid, node) in self.param_nodes.iter().enumerate() {
            if let Some(node) = node {
                params[pid] = grads[node.0].take();
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn propagate(&self, node: &Node, up: &Tensor, grads: &mut [Option<Tensor>]) {
        let send = |target: NodeId, g: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.rg(target) {
                return;
            }
            match &mut grads[target.0] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };

        match &node.op {
            Op::Constant | Op::Param | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(*a) {
                    let mut ga = vec![0.0; n * k];
                    matmul_bt_into(up.values(), bv.values(), &mut ga, n, m, k);
                    send(*a, Tensor::matrix(n, k, ga).unwrap(), grads);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; k * m];
                    matmul_at_into(av.values(), up.values(), &mut gb, n, k, m);
                    send(*b, Tensor::matrix(k, m, gb).unwrap(), grads);
                }
            }
            Op::Add(a, b) => {
                send(*a, up.clone(), grads);
                send(*b, up.clone(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, up.clone(), grads);
                send(*b, up.map(|v| -v), grads);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    send(*a, up.zip_map(self.value(*b), |g, y| g * y).unwrap(), grads);
                }
                if self.rg(*b) {
                    send(*b, up.zip_map(self.value(*a), |g, x| g * x).unwrap(), grads);
                }
            }
            Op::AddRow(x, bias) => {
                send(*x, up.clone(), grads);
                if self.rg(*bias) {
                    let d = up.cols();
                    let mut gb = vec![0.0; d];
                    for row in up.values().chunks(d) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    let shape = self.shape(*bias).to_vec();
                    send(*bias, Tensor::new(shape, gb).unwrap(), grads);
                }
            }
            Op::Scale(x, f) => send(*x, up.map(|v| v * f), grads),
            Op::Relu(x) => {
                let g = up
                    .zip_map(self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 })
                    .unwrap();
                send(*x, g, grads);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let d = y.cols();
                let mut g = up.clone();
                for (grow, yrow) in g.values_mut().chunks_mut(d).zip(y.values().chunks(d)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (gv, yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - dot);
                    }
                }
                send(*x, g, grads);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gain).values();
                let d = xv.cols();
                let mut gx = vec![0.0; xv.len()];
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                for ((xrow, urow), gxrow) in xv
                    .values()
                    .chunks(d)
                    .zip(up.values().chunks(d))
                    .zip(gx.chunks_mut(d))
                {
                    let (mean, rstd) = moments(xrow, *eps);
                    let xhat: Vec<f64> = xrow.iter().map(|v| (v - mean) * rstd).collect();
                    let dxhat: Vec<f64> = urow.iter().zip(gv).map(|(u, g)| u * g).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dx =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gxrow[j] = rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                        ggain[j] += urow[j] * xhat[j];
                        gbias[j] += urow[j];
                    }
                }
                send(*x, Tensor::new(xv.shape().to_vec(), gx).unwrap(), grads);
                let gshape = self.shape(*gain).to_vec();
                send(*gain, Tensor::new(gshape, ggain).unwrap(), grads);
                let bshape = self.shape(*bias).to_vec();
                send(*bias, Tensor::new(bshape, gbias).unwrap(), grads);
            }
            Op::Transpose(x) => send(*x, up.transpose().unwrap(), grads),
            Op::SliceCols { x, start } => {
                let src = self.value(*x);
                let (rows, cols, len) = (src.rows(), src.cols(), up.cols());
                let mut g = vec![0.0; rows * cols];
                for r in 0..rows {
                    g[r * cols + start..r * cols + start + len].copy_from_slice(up.row(r));
                }
                send(*x, Tensor::matrix(rows, cols, g).unwrap(), grads);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.rg(*p) {
                        let g: Vec<f64> = (0..up.rows())
                            .flat_map(|r| up.row(r)[offset..offset + w].to_vec())
                            .collect();
                        send(*p, Tensor::matrix(up.rows(), w, g).unwrap(), grads);
                    }
                    offset += w;
                }
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                send(*x, up.clone().reshaped(shape).unwrap(), grads);
            }
            Op::MeanRows(x) => {
                let src = self.value(*x);
                let n = src.rows();
                let row: Vec<f64> = up.values().iter().map(|v| v / n as f64).collect();
                let g: Vec<f64> = (0..n).flat_map(|_| row.clone()).collect();
                send(*x, Tensor::new(src.shape().to_vec(), g).unwrap(), grads);
            }
            Op::Sum(x) => {
                let g = up.values()[0];
                send(*x, Tensor::full(self.shape(*x), g), grads);
            }
            Op::GatherRows(x, indices) => {
                let src = self.value(*x);
                let d = src.cols();
                let mut g = Tensor::zeros(src.shape());
                for (r, &i) in indices.iter().enumerate() {
                    let dst = &mut g.values_mut()[i * d..(i + 1) * d];
                    for (o, v) in dst.iter_mut().zip(up.row(r)) {
                        *o += v;
                    }
                }
                send(*x, g, grads);
            }
            Op::StraightThrough(encoder) => send(*encoder, up.clone(), grads),
        }
    }
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of an intermediate node, if any flowed into it.
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes.get(id.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.0).and_then(Option::as_ref)
    }

    /// Adds every parameter gradient into `acc` (indexed like the store).
    pub fn accumulate_into(&self, acc: &mut [Tensor]) {
        for (slot, g) in acc.iter_mut().zip(&self.params) {
            if let Some(g) = g {
                slot.add_assign(g);
            }
        }
    }
}
