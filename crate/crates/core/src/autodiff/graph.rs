//! Recorded computation graph with eager evaluation and reverse-mode
//! differentiation.
//!
//! Nodes are appended in dependency order, so the node list is already a
//! topological order. Every builder call evaluates its node immediately;
//! [`Graph::forward`] re-evaluates the whole graph after rebinding inputs.
//! Intermediate values are held in `f64` and exported as `f32` tensors.

use indexmap::IndexMap;

use super::kernels as k;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layer-norm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Input,
    Trainable,
    Frozen,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf(LeafKind),
    MatMul { trans_b: bool },
    Add,
    Scale(f64),
    Gelu,
    Tanh,
    Sigmoid,
    LayerNorm,
    MeanPool,
    Softmax,
    L2Normalize,
    MseLoss,
    SoftmaxCrossEntropy(Vec<usize>),
    BceWithLogits,
    Concat,
    Slice { start: usize, len: usize },
    Reshape,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::Scale(_) => "scale",
            Op::Gelu => "gelu",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::LayerNorm => "layer_norm",
            Op::MeanPool => "mean_pool",
            Op::Softmax => "softmax",
            Op::L2Normalize => "l2_normalize",
            Op::MseLoss => "mse_loss",
            Op::SoftmaxCrossEntropy(_) => "softmax_cross_entropy",
            Op::BceWithLogits => "bce_with_logits",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape => "reshape",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Gradients of trainable leaves, keyed by leaf name in creation order.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: IndexMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Euclidean norm over every gradient element.
    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: IndexMap<String, NodeId>,
    outputs: IndexMap<String, NodeId>,
    zero_norm_rows: usize,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn label(&self, id: usize, op: &Op) -> String {
        format!("node {id} ({})", op.name())
    }

    fn leaf(&mut self, name: &str, t: &Tensor, kind: LeafKind) -> Result<NodeId> {
        if self.leaves.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate leaf name {name:?}")));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf(kind),
            inputs: Vec::new(),
            shape: t.shape().to_vec(),
            value: t.to_f64(),
            requires_grad: kind == LeafKind::Trainable,
        });
        self.leaves.insert(name.to_string(), id);
        Ok(id)
    }

    /// Data input; never receives a gradient.
    pub fn input(&mut self, name: &str, t: &Tensor) -> Result<NodeId> {
        self.leaf(name, t, LeafKind::Input)
    }

    /// Named parameter leaf. Frozen parameters never receive a gradient entry.
    pub fn param(&mut self, name: &str, t: &Tensor, trainable: bool) -> Result<NodeId> {
        let kind = if trainable { LeafKind::Trainable } else { LeafKind::Frozen };
        self.leaf(name, t, kind)
    }

    pub fn leaf_id(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    pub fn leaf_kind(&self, id: NodeId) -> Option<LeafKind> {
        match self.nodes.get(id.0)?.op {
            Op::Leaf(kind) => Some(kind),
            _ => None,
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::from_f64(n.shape.clone(), &n.value).expect("node shape is consistent")
    }

    pub fn raw_value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    /// First element of a node's value; intended for scalar losses.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    /// Number of all-zero rows seen by `l2_normalize` since construction.
    pub fn zero_norm_rows(&self) -> usize {
        self.zero_norm_rows
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        let id = self.nodes.len();
        let (shape, value) = self.evaluate(id, &op, &inputs)?;
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, inputs, shape, value, requires_grad });
        Ok(NodeId(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul { trans_b: false }, vec![a, b])
    }

    /// `a · bᵀ` (batched when `b` is rank 3).
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul { trans_b: true }, vec![a, b])
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.push(Op::Scale(s), vec![a])
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Gelu, vec![a])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Tanh, vec![a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid, vec![a])
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        self.push(Op::LayerNorm, vec![x, gamma, beta])
    }

    /// `[B, T, W] -> [B, W]`, averaging over the token axis.
    pub fn mean_pool(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::MeanPool, vec![a])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax, vec![a])
    }

    /// Unit-normalizes each row over the last axis. All-zero rows map to
    /// zero and are counted in [`Graph::zero_norm_rows`].
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::L2Normalize, vec![a])
    }

    /// Mean of squared differences over all elements.
    pub fn mse_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MseLoss, vec![a, b])
    }

    /// Mean softmax cross-entropy of `logits: [N, C]` against class ids.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        self.push(Op::SoftmaxCrossEntropy(targets.to_vec()), vec![logits])
    }

    /// Mean per-element binary cross-entropy computed from logits.
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        self.push(Op::BceWithLogits, vec![logits, targets])
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Concat, vec![a, b])
    }

    /// Takes `len` entries of the last axis starting at `start`.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push(Op::Slice { start, len }, vec![a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let id = self.nodes.len();
        let from = &self.nodes[a.0].shape;
        if numel(from) != numel(shape) || shape.contains(&0) {
            return Err(Error::shape(
                self.label(id, &Op::Reshape),
                format!("cannot reshape {from:?} to {shape:?}"),
            ));
        }
        let value = self.nodes[a.0].value.clone();
        let requires_grad = self.nodes[a.0].requires_grad;
        self.nodes.push(Node {
            op: Op::Reshape,
            inputs: vec![a],
            shape: shape.to_vec(),
            value,
            requires_grad,
        });
        Ok(NodeId(id))
    }

    fn evaluate(&mut self, id: usize, op: &Op, inputs: &[NodeId]) -> Result<(Vec<usize>, Vec<f64>)> {
        let label = || self.label(id, op);
        let a = &self.nodes[inputs[0].0];
        let mut zeros = 0;
        let (shape, value) = match op {
            Op::Leaf(_) => unreachable!("leaves are not evaluated"),
            Op::Reshape => {
                let shape = self.nodes[id].shape.clone();
                (shape, a.value.clone())
            }
            Op::MatMul { trans_b } => {
                let b = &self.nodes[inputs[1].0];
                matmul_forward(&a.shape, &a.value, &b.shape, &b.value, *trans_b)
                    .map_err(|d| Error::shape(label(), d))?
            }
            Op::Add => {
                let b = &self.nodes[inputs[1].0];
                if !a.shape.ends_with(&b.shape) {
                    return Err(Error::shape(
                        label(),
                        format!("cannot broadcast {:?} onto {:?}", b.shape, a.shape),
                    ));
                }
                let bl = b.value.len();
                let v = a.value.iter().enumerate().map(|(i, &x)| x + b.value[i % bl]).collect();
                (a.shape.clone(), v)
            }
            Op::Scale(s) => (a.shape.clone(), a.value.iter().map(|&x| x * s).collect()),
            Op::Gelu => (a.shape.clone(), a.value.iter().map(|&x| k::gelu(x)).collect()),
            Op::Tanh => (a.shape.clone(), a.value.iter().map(|&x| x.tanh()).collect()),
            Op::Sigmoid => (a.shape.clone(), a.value.iter().map(|&x| k::sigmoid(x)).collect()),
            Op::LayerNorm => {
                let g = &self.nodes[inputs[1].0];
                let b = &self.nodes[inputs[2].0];
                let w = *a.shape.last().unwrap();
                if g.shape != [w] || b.shape != [w] {
                    return Err(Error::shape(
                        label(),
                        format!("gain {:?} / bias {:?} must be [{w}]", g.shape, b.shape),
                    ));
                }
                let mut out = vec![0.0; a.value.len()];
                for (row, orow) in a.value.chunks(w).zip(out.chunks_mut(w)) {
                    let (mean, rstd) = row_moments(row);
                    for j in 0..w {
                        orow[j] = (row[j] - mean) * rstd * g.value[j] + b.value[j];
                    }
                }
                (a.shape.clone(), out)
            }
            Op::MeanPool => {
                if a.shape.len() != 3 {
                    return Err(Error::shape(label(), format!("expected [B,T,W], got {:?}", a.shape)));
                }
                let (bn, t, w) = (a.shape[0], a.shape[1], a.shape[2]);
                let mut out = vec![0.0; bn * w];
                for bi in 0..bn {
                    let orow = &mut out[bi * w..(bi + 1) * w];
                    for ti in 0..t {
                        let base = (bi * t + ti) * w;
                        for j in 0..w {
                            orow[j] += a.value[base + j];
                        }
                    }
                    for o in orow.iter_mut() {
                        *o /= t as f64;
                    }
                }
                (vec![bn, w], out)
            }
            Op::Softmax => {
                let w = *a.shape.last().unwrap();
                let mut out = vec![0.0; a.value.len()];
                for (row, orow) in a.value.chunks(w).zip(out.chunks_mut(w)) {
                    k::softmax_row(row, orow);
                }
                (a.shape.clone(), out)
            }
            Op::L2Normalize => {
                let w = *a.shape.last().unwrap();
                let mut out = vec![0.0; a.value.len()];
                for (row, orow) in a.value.chunks(w).zip(out.chunks_mut(w)) {
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n == 0.0 {
                        zeros += 1;
                        continue;
                    }
                    for (o, &v) in orow.iter_mut().zip(row) {
                        *o = v / n;
                    }
                }
                (a.shape.clone(), out)
            }
            Op::MseLoss => {
                let b = &self.nodes[inputs[1].0];
                if a.shape != b.shape {
                    return Err(Error::shape(label(), format!("{:?} vs {:?}", a.shape, b.shape)));
                }
                let s: f64 = a.value.iter().zip(&b.value).map(|(x, y)| (x - y) * (x - y)).sum();
                (vec![1], vec![s / a.value.len() as f64])
            }
            Op::SoftmaxCrossEntropy(targets) => {
                if a.shape.len() != 2 || a.shape[0] != targets.len() {
                    return Err(Error::shape(
                        label(),
                        format!("logits {:?} vs {} targets", a.shape, targets.len()),
                    ));
                }
                let c = a.shape[1];
                let mut s = 0.0;
                for (row, &t) in a.value.chunks(c).zip(targets) {
                    if t >= c {
                        return Err(Error::shape(label(), format!("target {t} out of {c} classes")));
                    }
                    s += k::log_sum_exp(row) - row[t];
                }
                (vec![1], vec![s / targets.len() as f64])
            }
            Op::BceWithLogits => {
                let y = &self.nodes[inputs[1].0];
                if a.shape != y.shape {
                    return Err(Error::shape(label(), format!("{:?} vs {:?}", a.shape, y.shape)));
                }
                let s: f64 = a
                    .value
                    .iter()
                    .zip(&y.value)
                    .map(|(&x, &t)| k::softplus(x) - x * t)
                    .sum();
                (vec![1], vec![s / a.value.len() as f64])
            }
            Op::Concat => {
                let b = &self.nodes[inputs[1].0];
                let (wa, wb) = (*a.shape.last().unwrap(), *b.shape.last().unwrap());
                if a.shape[..a.shape.len() - 1] != b.shape[..b.shape.len() - 1] {
                    return Err(Error::shape(label(), format!("{:?} vs {:?}", a.shape, b.shape)));
                }
                let mut out = Vec::with_capacity(a.value.len() + b.value.len());
                for (ra, rb) in a.value.chunks(wa).zip(b.value.chunks(wb)) {
                    out.extend_from_slice(ra);
                    out.extend_from_slice(rb);
                }
                let mut shape = a.shape.clone();
                *shape.last_mut().unwrap() = wa + wb;
                (shape, out)
            }
            Op::Slice { start, len } => {
                let w = *a.shape.last().unwrap();
                if *len == 0 || start + len > w {
                    return Err(Error::shape(label(), format!("slice {start}+{len} of width {w}")));
                }
                let out = a.value.chunks(w).flat_map(|r| r[*start..start + len].iter().copied()).collect();
                let mut shape = a.shape.clone();
                *shape.last_mut().unwrap() = *len;
                (shape, out)
            }
        };
        if value.iter().any(|v: &f64| !v.is_finite()) {
            return Err(Error::NonFinite(label()));
        }
        self.zero_norm_rows += zeros;
        Ok((shape, value))
    }

    /// Rebinds the named inputs, re-evaluates every node and returns the
    /// marked outputs.
    pub fn forward(&mut self, inputs: &[(&str, &Tensor)]) -> Result<IndexMap<String, Tensor>> {
        for (name, t) in inputs {
            let id = self
                .leaves
                .get(*name)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("unknown input {name:?}")))?;
            let node = &mut self.nodes[id.0];
            if node.shape != t.shape() {
                return Err(Error::shape(
                    format!("input {name:?}"),
                    format!("bound with {:?}, graph built for {:?}", t.shape(), node.shape),
                ));
            }
            node.value = t.to_f64();
        }
        self.recompute_from(0)?;
        Ok(self.outputs.iter().map(|(n, &id)| (n.clone(), self.value(id))).collect())
    }

    fn recompute_from(&mut self, start: usize) -> Result<()> {
        self.zero_norm_rows = 0;
        for id in start..self.nodes.len() {
            if matches!(self.nodes[id].op, Op::Leaf(_)) {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let inputs = self.nodes[id].inputs.clone();
            let (_, value) = self.evaluate(id, &op, &inputs)?;
            self.nodes[id].value = value;
        }
        Ok(())
    }

    fn backward_raw(&self, loss: NodeId) -> Result<Vec<Option<Vec<f64>>>> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::shape(
                self.label(loss.0, &ln.op),
                format!("loss must be scalar, got {:?}", ln.shape),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf(_) = node.op {
                grads[id] = Some(g);
                continue;
            }
            let contribs = self.node_vjp(node, &g);
            for (input, dg) in node.inputs.iter().zip(contribs) {
                let Some(dg) = dg else { continue };
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&dg).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(dg),
                }
            }
            // Non-leaf gradients are no longer needed.
        }
        Ok(grads)
    }

    fn node_vjp(&self, node: &Node, g: &[f64]) -> Vec<Option<Vec<f64>>> {
        let val = |i: usize| &self.nodes[node.inputs[i].0];
        let wants = |i: usize| self.nodes[node.inputs[i].0].requires_grad;
        match &node.op {
            Op::Leaf(_) => Vec::new(),
            Op::Reshape => vec![Some(g.to_vec())],
            Op::MatMul { trans_b } => {
                let (a, b) = (val(0), val(1));
                let (da, db) = matmul_backward(&a.shape, &a.value, &b.shape, &b.value, *trans_b, g, wants(0), wants(1));
                vec![da, db]
            }
            Op::Add => {
                let bl = val(1).value.len();
                let db = wants(1).then(|| {
                    let mut db = vec![0.0; bl];
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % bl] += gv;
                    }
                    db
                });
                vec![Some(g.to_vec()), db]
            }
            Op::Scale(s) => vec![Some(g.iter().map(|&v| v * s).collect())],
            Op::Gelu => {
                let x = &val(0).value;
                vec![Some(g.iter().zip(x).map(|(&gv, &xv)| gv * k::gelu_grad(xv)).collect())]
            }
            Op::Tanh => vec![Some(g.iter().zip(&node.value).map(|(&gv, &y)| gv * (1.0 - y * y)).collect())],
            Op::Sigmoid => vec![Some(g.iter().zip(&node.value).map(|(&gv, &y)| gv * y * (1.0 - y)).collect())],
            Op::LayerNorm => {
                let x = &val(0).value;
                let gamma = &val(1).value;
                let w = gamma.len();
                let mut dx = vec![0.0; x.len()];
                let mut dgamma = vec![0.0; w];
                let mut dbeta = vec![0.0; w];
                let mut xhat = vec![0.0; w];
                let mut dxhat = vec![0.0; w];
                for ((row, grow), dxrow) in x.chunks(w).zip(g.chunks(w)).zip(dx.chunks_mut(w)) {
                    let (mean, rstd) = row_moments(row);
                    let (mut m1, mut m2) = (0.0, 0.0);
                    for j in 0..w {
                        xhat[j] = (row[j] - mean) * rstd;
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                        dxhat[j] = grow[j] * gamma[j];
                        m1 += dxhat[j];
                        m2 += dxhat[j] * xhat[j];
                    }
                    m1 /= w as f64;
                    m2 /= w as f64;
                    for j in 0..w {
                        dxrow[j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }
            Op::MeanPool => {
                let s = &val(0).shape;
                let (bn, t, w) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; bn * t * w];
                for bi in 0..bn {
                    for ti in 0..t {
                        for j in 0..w {
                            dx[(bi * t + ti) * w + j] = g[bi * w + j] / t as f64;
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::Softmax => {
                let w = *node.shape.last().unwrap();
                let mut dx = vec![0.0; g.len()];
                for ((y, gr), dr) in node.value.chunks(w).zip(g.chunks(w)).zip(dx.chunks_mut(w)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..w {
                        dr[j] = y[j] * (gr[j] - dot);
                    }
                }
                vec![Some(dx)]
            }
            Op::L2Normalize => {
                let x = &val(0).value;
                let w = *node.shape.last().unwrap();
                let mut dx = vec![0.0; g.len()];
                for (((xr, y), gr), dr) in x.chunks(w).zip(node.value.chunks(w)).zip(g.chunks(w)).zip(dx.chunks_mut(w)) {
                    let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n == 0.0 {
                        continue;
                    }
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..w {
                        dr[j] = (gr[j] - y[j] * dot) / n;
                    }
                }
                vec![Some(dx)]
            }
            Op::MseLoss => {
                let (a, b) = (&val(0).value, &val(1).value);
                let s = 2.0 * g[0] / a.len() as f64;
                let da: Vec<f64> = a.iter().zip(b).map(|(x, y)| s * (x - y)).collect();
                let db = wants(1).then(|| da.iter().map(|v| -v).collect());
                vec![Some(da), db]
            }
            Op::SoftmaxCrossEntropy(targets) => {
                let x = &val(0).value;
                let c = val(0).shape[1];
                let scale = g[0] / targets.len() as f64;
                let mut dx = vec![0.0; x.len()];
                for ((row, dr), &t) in x.chunks(c).zip(dx.chunks_mut(c)).zip(targets) {
                    k::softmax_row(row, dr);
                    dr[t] -= 1.0;
                    dr.iter_mut().for_each(|v| *v *= scale);
                }
                vec![Some(dx)]
            }
            Op::BceWithLogits => {
                let (x, y) = (&val(0).value, &val(1).value);
                let scale = g[0] / x.len() as f64;
                vec![Some(x.iter().zip(y).map(|(&xv, &t)| scale * (k::sigmoid(xv) - t)).collect()), None]
            }
            Op::Concat => {
                let (wa, wb) = (*val(0).shape.last().unwrap(), *val(1).shape.last().unwrap());
                let mut da = Vec::with_capacity(val(0).value.len());
                let mut db = Vec::with_capacity(val(1).value.len());
                for row in g.chunks(wa + wb) {
                    da.extend_from_slice(&row[..wa]);
                    db.extend_from_slice(&row[wa..]);
                }
                vec![Some(da), Some(db)]
            }
            Op::Slice { start, len } => {
                let w = *val(0).shape.last().unwrap();
                let mut dx = vec![0.0; val(0).value.len()];
                for (dr, gr) in dx.chunks_mut(w).zip(g.chunks(*len)) {
                    dr[*start..start + len].copy_from_slice(gr);
                }
                vec![Some(dx)]
            }
        }
    }

    /// Gradients of a scalar loss with respect to every trainable leaf that
    /// it depends on. Frozen leaves and inputs get no entry.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let grads = self.backward_raw(loss)?;
        let mut map = IndexMap::new();
        for (name, &id) in &self.leaves {
            if self.leaf_kind(id) != Some(LeafKind::Trainable) {
                continue;
            }
            let node = &self.nodes[id.0];
            let g = grads
                .get(id.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| vec![0.0; node.value.len()]);
            map.insert(name.clone(), Tensor::from_f64(node.shape.clone(), &g)?);
        }
        Ok(Gradients { map })
    }

    /// Maximum relative error between the analytic gradient of `loss` with
    /// respect to the trainable leaf `leaf` and a central finite difference
    /// with step `eps`. The per-element error is
    /// `|a - n| / max(|a|, |n|, 1e-8)`.
    pub fn grad_check(&mut self, loss: NodeId, leaf: &str, eps: f64) -> Result<f64> {
        let (analytic, numeric) = self.gradient_pair(loss, leaf, eps)?;
        Ok(analytic.iter().zip(&numeric).fold(0.0f64, |worst, (&a, &n)| {
            let denom = a.abs().max(n.abs()).max(1e-8);
            worst.max((a - n).abs() / denom)
        }))
    }

    /// Like [`Graph::grad_check`], but the error is taken relative to the
    /// largest gradient magnitude of the whole tensor:
    /// `max |a - n| / max(max |a|, max |n|, 1e-12)`. Deep composites have
    /// entries whose gradient is tiny next to its neighbours; their central
    /// difference error is dominated by `O(eps^2)` truncation.
    pub fn grad_check_scaled(&mut self, loss: NodeId, leaf: &str, eps: f64) -> Result<f64> {
        let (analytic, numeric) = self.gradient_pair(loss, leaf, eps)?;
        let peak = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let scale = peak(&analytic).max(peak(&numeric)).max(1e-12);
        let diff = analytic.iter().zip(&numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        Ok(diff / scale)
    }

    /// Analytic and central-difference gradients of one leaf.
    fn gradient_pair(&mut self, loss: NodeId, leaf: &str, eps: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        if !(eps > 0.0 && eps <= 1e-2) {
            return Err(Error::InvalidArgument(format!("epsilon {eps} outside (0, 1e-2]")));
        }
        let id = self
            .leaf_id(leaf)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown leaf {leaf:?}")))?;
        if self.leaf_kind(id) != Some(LeafKind::Trainable) {
            return Err(Error::InvalidArgument(format!("leaf {leaf:?} is not trainable")));
        }
        let analytic = self
            .backward_raw(loss)?
            .get(id.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| vec![0.0; self.nodes[id.0].value.len()]);
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let orig = self.nodes[id.0].value[i];
            self.nodes[id.0].value[i] = orig + eps;
            self.recompute_from(id.0)?;
            let plus = self.scalar(loss);
            self.nodes[id.0].value[i] = orig - eps;
            self.recompute_from(id.0)?;
            let minus = self.scalar(loss);
            self.nodes[id.0].value[i] = orig;
            numeric.push((plus - minus) / (2.0 * eps));
        }
        self.recompute_from(id.0)?;
        Ok((analytic, numeric))
    }
}

fn row_moments(row: &[f64]) -> (f64, f64) {
    let w = row.len() as f64;
    let mean = row.iter().sum::<f64>() / w;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// Shape bookkeeping shared by the forward and backward matmul paths.
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// `b` has its own batch axis.
    batched: bool,
}

fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> std::result::Result<MatMulDims, String> {
    match b.len() {
        2 => {
            let (k, n) = if trans_b { (b[1], b[0]) } else { (b[0], b[1]) };
            let ka = *a.last().unwrap();
            if ka != k {
                return Err(format!("inner dims {a:?} x {b:?} (trans_b={trans_b})"));
            }
            Ok(MatMulDims { batch: 1, m: numel(a) / k, k, n, batched: false })
        }
        3 => {
            if a.len() != 3 || a[0] != b[0] {
                return Err(format!("batched matmul needs [B,M,K] x [B,..], got {a:?} x {b:?}"));
            }
            let (k, n) = if trans_b { (b[2], b[1]) } else { (b[1], b[2]) };
            if a[2] != k {
                return Err(format!("inner dims {a:?} x {b:?} (trans_b={trans_b})"));
            }
            Ok(MatMulDims { batch: a[0], m: a[1], k, n, batched: true })
        }
        _ => Err(format!("rhs must be rank 2 or 3, got {b:?}")),
    }
}

fn matmul_forward(
    ashape: &[usize],
    a: &[f64],
    bshape: &[usize],
    b: &[f64],
    trans_b: bool,
) -> std::result::Result<(Vec<usize>, Vec<f64>), String> {
    let d = matmul_dims(ashape, bshape, trans_b)?;
    let mut out = Vec::with_capacity(d.batch * d.m * d.n);
    let (asz, bsz) = (d.m * d.k, d.k * d.n);
    for bi in 0..d.batch {
        let ab = &a[bi * asz..(bi + 1) * asz];
        let bb = if d.batched { &b[bi * bsz..(bi + 1) * bsz] } else { b };
        let c = if trans_b {
            k::matmul_nt(ab, bb, d.m, d.k, d.n)
        } else {
            k::matmul_nn(ab, bb, d.m, d.k, d.n)
        };
        out.extend_from_slice(&c);
    }
    let mut shape = ashape.to_vec();
    *shape.last_mut().unwrap() = d.n;
    Ok((shape, out))
}

#[allow(clippy::too_many_arguments)]
fn matmul_backward(
    ashape: &[usize],
    a: &[f64],
    bshape: &[usize],
    b: &[f64],
    trans_b: bool,
    g: &[f64],
    want_a: bool,
    want_b: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let d = matmul_dims(ashape, bshape, trans_b).expect("validated in forward");
    let (asz, bsz, gsz) = (d.m * d.k, d.k * d.n, d.m * d.n);
    let mut da = want_a.then(|| Vec::with_capacity(a.len()));
    let mut db = want_b.then(|| vec![0.0; b.len()]);
    for bi in 0..d.batch {
        let ab = &a[bi * asz..(bi + 1) * asz];
        let bb = if d.batched { &b[bi * bsz..(bi + 1) * bsz] } else { b };
        let gb = &g[bi * gsz..(bi + 1) * gsz];
        if let Some(da) = da.as_mut() {
            // dA = G·Bᵀ for a plain product, G·B when b was used transposed.
            let part = if trans_b {
                k::matmul_nn(gb, bb, d.m, d.n, d.k)
            } else {
                k::matmul_nt(gb, bb, d.m, d.n, d.k)
            };
            da.extend_from_slice(&part);
        }
        if let Some(db) = db.as_mut() {
            let part = if trans_b {
                k::matmul_tn(gb, ab, d.m, d.n, d.k)
            } else {
                k::matmul_tn(ab, gb, d.m, d.k, d.n)
            };
            let dst = if d.batched { &mut db[bi * bsz..(bi + 1) * bsz] } else { &mut db[..] };
            dst.iter_mut().zip(&part).for_each(|(x, p)| *x += p);
        }
    }
    (da, db)
}
