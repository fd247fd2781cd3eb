use std::collections::HashMap;
use std::sync::Arc;

use super::kernels;
use super::{ParamId, ParamStore, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Transpose(NodeId),
    Softmax(NodeId),
    LayerNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(NodeId),
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
        nll: Vec<f64>,
    },
    Sum(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) | Op::AddRowBias(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Transpose(_) => "transpose",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu(_) => "gelu",
            Op::Embedding { .. } => "embedding-lookup",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::CrossEntropy { .. } => "cross-entropy",
            Op::Sum(_) => "sum",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward pass.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward walks it once from the loss down.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
    grad_enabled: bool,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch<T>(op: &'static str, detail: String) -> Result<T> {
    Err(TensorError::ShapeMismatch { op, detail })
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// A graph that evaluates values but records nothing trainable.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
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

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownNode(id.0))
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite(op.name()));
        }
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite("constant"));
        }
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A leaf whose gradient is tracked but which is not a stored parameter.
    /// Used by gradient checks.
    pub fn variable(&mut self, value: Tensor) -> Result<NodeId> {
        let id = self.constant(value)?;
        self.nodes[id.0].requires_grad = self.grad_enabled;
        Ok(id)
    }

    /// Leaf for a stored parameter; repeated requests share one node so tied
    /// weights accumulate gradient from every use.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let p = store.get(id);
        let mut value = p.tensor.clone();
        *value.grad_mut() = None;
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
            requires_grad: self.grad_enabled && !p.frozen(),
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return mismatch("matmul", format!("[{m},{k}] x [{k2},{n}]"));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b])
    }

    /// Elementwise sum of equal shapes, or `[m,n] + [n]` row broadcast.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let out: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
            let shape = va.shape().to_vec();
            return self.push(Tensor::new(shape, out)?, Op::Add(a, b), &[a, b]);
        }
        let (_, cols) = va.dims2();
        if vb.shape().len() == 1 && vb.numel() == cols {
            let mut out = va.data().to_vec();
            kernels::add_row_bias(&mut out, vb.data());
            let shape = va.shape().to_vec();
            return self.push(Tensor::new(shape, out)?, Op::AddRowBias(a, b), &[a, b]);
        }
        mismatch("add", format!("{:?} + {:?}", va.shape(), vb.shape()))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return mismatch("mul", format!("{:?} * {:?}", va.shape(), vb.shape()));
        }
        let out: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check(a)?;
        let va = self.value(a);
        let out: Vec<f64> = va.data().iter().map(|x| x * c).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Scale(a, c), &[a])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let (r, c) = self.value(a).dims2();
        let out = kernels::transpose(self.value(a).data(), r, c);
        self.push(Tensor::matrix(c, r, out)?, Op::Transpose(a), &[a])
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId, allowed: Option<Arc<Vec<bool>>>) -> Result<NodeId> {
        self.check(a)?;
        let va = self.value(a);
        let (r, c) = va.dims2();
        if let Some(m) = &allowed {
            if m.len() != va.numel() {
                return mismatch("softmax", format!("mask of {} for {} values", m.len(), va.numel()));
            }
            if m.chunks(c).any(|row| !row.iter().any(|&x| x)) {
                return Err(TensorError::NonFinite("softmax"));
            }
        }
        let out = kernels::softmax_rows(va.data(), r, c, allowed.as_deref().map(|v| v.as_slice()));
        let shape = va.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Softmax(a), &[a])
    }

    /// Row-wise layer normalization followed by `gamma * x̂ + beta`.
    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let (r, c) = self.value(x).dims2();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return mismatch(
                "layernorm",
                format!("{c} features, gamma {:?}, beta {:?}", self.value(gamma).shape(), self.value(beta).shape()),
            );
        }
        let (xhat, rstd) = kernels::layernorm_normalize(self.value(x).data(), r, c);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % c] + b[i % c])
            .collect();
        let shape = self.value(x).shape().to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                input: x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let va = self.value(a);
        let out: Vec<f64> = va.data().iter().map(|&x| kernels::gelu(x)).collect();
        let shape = va.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Gelu(a), &[a])
    }

    /// Gathers rows of `table` for each id.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.check(table)?;
        let (rows, d) = self.value(table).dims2();
        if ids.is_empty() {
            return mismatch("embedding-lookup", "empty id list".into());
        }
        let data = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    what: "embedding table",
                    index: id,
                    size: rows,
                });
            }
            out.extend_from_slice(&data[id * d..(id + 1) * d]);
        }
        self.push(
            Tensor::matrix(ids.len(), d, out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Concatenates matrices along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() || axis > 1 {
            return mismatch("concat", format!("{} inputs on axis {axis}", inputs.len()));
        }
        for &i in inputs {
            self.check(i)?;
        }
        let dims: Vec<(usize, usize)> = inputs.iter().map(|&i| self.value(i).dims2()).collect();
        let (rows, cols, out) = if axis == 0 {
            let cols = dims[0].1;
            if dims.iter().any(|d| d.1 != cols) {
                return mismatch("concat", format!("column counts {dims:?}"));
            }
            let mut out = Vec::new();
            for &i in inputs {
                out.extend_from_slice(self.value(i).data());
            }
            (dims.iter().map(|d| d.0).sum(), cols, out)
        } else {
            let rows = dims[0].0;
            if dims.iter().any(|d| d.0 != rows) {
                return mismatch("concat", format!("row counts {dims:?}"));
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for (&i, &(_, c)) in inputs.iter().zip(&dims) {
                    out.extend_from_slice(&self.value(i).data()[r * c..(r + 1) * c]);
                }
            }
            (rows, cols, out)
        };
        self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// `input[start..end]` along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn slice(&mut self, input: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        self.check(input)?;
        let (rows, cols) = self.value(input).dims2();
        let limit = if axis == 0 { rows } else { cols };
        if axis > 1 || start >= end || end > limit {
            return mismatch("slice", format!("[{start},{end}) on axis {axis} of [{rows},{cols}]"));
        }
        let data = self.value(input).data();
        let (r, c, out) = if axis == 0 {
            (end - start, cols, data[start * cols..end * cols].to_vec())
        } else {
            let w = end - start;
            let mut out = Vec::with_capacity(rows * w);
            for row in 0..rows {
                out.extend_from_slice(&data[row * cols + start..row * cols + end]);
            }
            (rows, w, out)
        };
        self.push(Tensor::matrix(r, c, out)?, Op::Slice { input, axis, start }, &[input])
    }

    /// Mean token cross-entropy (natural log) of `logits[n,V]` against targets.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        self.check(logits)?;
        let (n, v) = self.value(logits).dims2();
        if targets.len() != n {
            return mismatch("cross-entropy", format!("{n} rows, {} targets", targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::IndexOutOfRange {
                what: "vocabulary",
                index: bad,
                size: v,
            });
        }
        let probs = kernels::softmax_rows(self.value(logits).data(), n, v, None);
        let data = self.value(logits).data();
        let mut nll = Vec::with_capacity(n);
        for (r, &t) in targets.iter().enumerate() {
            let lp = kernels::log_softmax(&data[r * v..(r + 1) * v]);
            nll.push(-lp[t]);
        }
        let loss = nll.iter().sum::<f64>() / n as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                nll,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Per-token negative log-likelihoods recorded by a cross-entropy node.
    pub fn token_nll(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes.get(id.0)?.op {
            Op::CrossEntropy { nll, .. } => Some(nll),
            _ => None,
        }
    }

    /// Propagates d(loss)/d(node) back through the record and accumulates it
    /// into every non-frozen parameter that contributed to `loss`.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        self.check(loss)?;
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NotScalar(self.value(loss).shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |target: NodeId, delta: Vec<f64>| {
                if !nodes[target.0].requires_grad {
                    return;
                }
                match &mut grads[target.0] {
                    Some(buf) => buf.iter_mut().zip(&delta).for_each(|(b, d)| *b += d),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(pid) => store.get_mut(*pid).accumulate_grad(&g),
                Op::MatMul(a, b) => {
                    let (m, k) = nodes[a.0].value.dims2();
                    let (_, n) = nodes[b.0].value.dims2();
                    if nodes[a.0].requires_grad {
                        acc(*a, kernels::matmul_bt(&g, nodes[b.0].value.data(), m, n, k));
                    }
                    if nodes[b.0].requires_grad {
                        let mut gb = vec![0.0; k * n];
                        kernels::matmul_at_acc(nodes[a.0].value.data(), &g, m, k, n, &mut gb);
                        acc(*b, gb);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRowBias(a, b) => {
                    let n = nodes[b.0].value.numel();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                    }
                    acc(*a, g);
                    acc(*b, gb);
                }
                Op::Mul(a, b) => {
                    let va = nodes[a.0].value.data();
                    let vb = nodes[b.0].value.data();
                    acc(*a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                    acc(*b, g.iter().zip(va).map(|(x, y)| x * y).collect());
                }
                Op::Scale(a, c) => acc(*a, g.iter().map(|v| v * c).collect()),
                Op::Transpose(a) => {
                    let (r, c) = nodes[a.0].value.dims2();
                    acc(*a, kernels::transpose(&g, c, r));
                }
                Op::Softmax(input) => {
                    let y = node.value.data();
                    let (r, c) = node.value.dims2();
                    let mut gx = vec![0.0; y.len()];
                    for row in 0..r {
                        let s = row * c..(row + 1) * c;
                        let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                        for i in s {
                            gx[i] = y[i] * (g[i] - dot);
                        }
                    }
                    acc(*input, gx);
                }
                Op::LayerNorm {
                    input,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (r, c) = node.value.dims2();
                    let gv = nodes[gamma.0].value.data();
                    let mut ggamma = vec![0.0; c];
                    let mut gbeta = vec![0.0; c];
                    let mut gx = vec![0.0; r * c];
                    for row in 0..r {
                        let off = row * c;
                        let mut mean_gh = 0.0;
                        let mut mean_ghx = 0.0;
                        for j in 0..c {
                            let gh = g[off + j] * gv[j];
                            ggamma[j] += g[off + j] * xhat[off + j];
                            gbeta[j] += g[off + j];
                            mean_gh += gh;
                            mean_ghx += gh * xhat[off + j];
                        }
                        mean_gh /= c as f64;
                        mean_ghx /= c as f64;
                        for j in 0..c {
                            let gh = g[off + j] * gv[j];
                            gx[off + j] = rstd[row] * (gh - mean_gh - xhat[off + j] * mean_ghx);
                        }
                    }
                    acc(*input, gx);
                    acc(*gamma, ggamma);
                    acc(*beta, gbeta);
                }
                Op::Gelu(a) => {
                    let x = nodes[a.0].value.data();
                    acc(*a, g.iter().zip(x).map(|(gv, &xv)| gv * kernels::gelu_grad(xv)).collect());
                }
                Op::Embedding { table, ids } => {
                    let (rows, d) = nodes[table.0].value.dims2();
                    let mut gt = vec![0.0; rows * d];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                    acc(*table, gt);
                }
                Op::Concat { inputs, axis } => {
                    let (rows, cols) = node.value.dims2();
                    let mut offset = 0;
                    for &i in inputs {
                        let (ri, ci) = nodes[i.0].value.dims2();
                        let part = if *axis == 0 {
                            g[offset * cols..(offset + ri) * cols].to_vec()
                        } else {
                            let mut p = Vec::with_capacity(rows * ci);
                            for row in 0..rows {
                                p.extend_from_slice(&g[row * cols + offset..row * cols + offset + ci]);
                            }
                            p
                        };
                        offset += if *axis == 0 { ri } else { ci };
                        acc(i, part);
                    }
                }
                Op::Slice { input, axis, start } => {
                    let (rows, cols) = nodes[input.0].value.dims2();
                    let (sr, sc) = node.value.dims2();
                    let mut gi = vec![0.0; rows * cols];
                    if *axis == 0 {
                        gi[start * cols..(start + sr) * cols].copy_from_slice(&g);
                    } else {
                        for row in 0..rows {
                            gi[row * cols + start..row * cols + start + sc]
                                .copy_from_slice(&g[row * sc..(row + 1) * sc]);
                        }
                    }
                    acc(*input, gi);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    ..
                } => {
                    let (n, v) = nodes[logits.0].value.dims2();
                    let scale = g[0] / n as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        gl[r * v + t] -= scale;
                    }
                    acc(*logits, gl);
                }
                Op::Sum(a) => {
                    let n = nodes[a.0].value.numel();
                    acc(*a, vec![g[0]; n]);
                }
            }
        }
        Ok(())
    }

    /// Gradient of `loss` with respect to non-parameter leaves created with
    /// [`Graph::variable`]. Consumes the graph like [`Graph::backward`].
    pub fn backward_leaves(&mut self, loss: NodeId, leaves: &[NodeId]) -> Result<Vec<Vec<f64>>> {
        let mut scratch = ParamStore::new();
        // leaves are Constant ops with requires_grad; capture their gradient by
        // temporarily rerouting through a throwaway store
        let mut ids = Vec::with_capacity(leaves.len());
        for (k, &leaf) in leaves.iter().enumerate() {
            self.check(leaf)?;
            let value = self.nodes[leaf.0].value.clone();
            let pid = scratch.insert(super::Parameter::new(
                format!("leaf{k}"),
                super::BlockLabel::Prefix,
                value,
            ))?;
            self.nodes[leaf.0].op = Op::Param(pid);
            ids.push(pid);
        }
        self.backward(loss, &mut scratch)?;
        Ok(ids
            .into_iter()
            .map(|pid| {
                let p = scratch.get(pid);
                p.tensor.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()])
            })
            .collect())
    }
}
