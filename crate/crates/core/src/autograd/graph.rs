use std::collections::BTreeMap;
use std::sync::Arc;

use super::ops::{self, OpKind, ScatterPlan, WarpPlan};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// One recorded op. Inputs always precede their consumer.
#[derive(Clone, Debug)]
pub struct Node {
    pub op: OpKind,
    pub inputs: Vec<NodeId>,
    pub value: Tensor,
    pub requires_grad: bool,
    /// Parameter or input name for leaves.
    pub label: Option<String>,
}

/// Reverse-mode computation graph, recorded while the model runs.
///
/// Each builder call validates attributes and shapes, evaluates the op
/// immediately and appends a node, so the node list is already in
/// topological order. Evaluation is single-threaded and deterministic.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
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

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].value.shape
    }

    fn push_leaf(&mut self, op: OpKind, value: Tensor, requires_grad: bool, label: Option<String>) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs: vec![],
            value,
            requires_grad,
            label,
        });
        self.nodes.len() - 1
    }

    /// A named external input. Set `requires_grad` to differentiate with
    /// respect to it (used by gradient checks).
    pub fn input(&mut self, name: &str, value: Tensor, requires_grad: bool) -> NodeId {
        self.push_leaf(OpKind::Input, value, requires_grad, Some(name.to_string()))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_leaf(OpKind::Constant, value, false, None)
    }

    /// Fetches a parameter, reusing the node if this graph already holds it.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let p = store.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let id = self.push_leaf(OpKind::Param, p.clone(), store.is_trainable(name), Some(name.to_string()));
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn param_nodes(&self) -> &BTreeMap<String, NodeId> {
        &self.params
    }

    /// Records and evaluates one op.
    pub fn apply(&mut self, op: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        let id = self.nodes.len();
        op.validate().map_err(Error::Attribute)?;
        if let Some(&bad) = inputs.iter().find(|&&i| i >= id) {
            return Err(Error::Shape {
                node: id,
                msg: format!("input {bad} does not precede its consumer"),
            });
        }
        let ins: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
        let out_shape = ops::infer_shape(&op, &ins).map_err(|msg| Error::Shape { node: id, msg })?;
        let value = ops::forward(&op, &ins, &out_shape);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                node: id,
                op: op.name().to_string(),
            });
        }
        let requires_grad = inputs
            .iter()
            .enumerate()
            .any(|(pos, &i)| !op.is_constant_input(pos) && self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
            requires_grad,
            label: None,
        });
        Ok(id)
    }

    // -- convenience builders -------------------------------------------------

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let k = self.shape(w).first().copied().unwrap_or(1);
        self.apply(OpKind::Conv2d { k, stride, pad: k / 2 }, &[x, w, b])
    }

    pub fn depthwise(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let k = self.shape(w).first().copied().unwrap_or(1);
        self.apply(OpKind::DepthwiseConv2d { k }, &[x, w, b])
    }

    pub fn sparse_conv(&mut self, x: NodeId, w: NodeId, b: NodeId, mask: NodeId) -> Result<NodeId> {
        let k = self.shape(w).first().copied().unwrap_or(1);
        self.apply(OpKind::MaskedSparseConv { k }, &[x, w, b, mask])
    }

    pub fn matmul(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        match b {
            Some(b) => self.apply(OpKind::MatMul, &[x, w, b]),
            None => self.apply(OpKind::MatMul, &[x, w]),
        }
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        self.apply(OpKind::BatchMatMul { transpose_b }, &[a, b])
    }

    pub fn softmax_last(&mut self, x: NodeId) -> Result<NodeId> {
        let axis = self.shape(x).len().saturating_sub(1);
        self.apply(OpKind::Softmax { axis }, &[x])
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        self.apply(OpKind::LayerNorm { eps: 1e-5 }, &[x, gamma, beta])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Relu, &[x])
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Gelu, &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        self.apply(OpKind::ScalarMul(s), &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sum { axis: None }, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mean { axis: None }, &[x])
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        self.apply(OpKind::Concat { axis }, xs)
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.apply(OpKind::Slice { axis, start, len }, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.apply(OpKind::Reshape(shape.to_vec()), &[x])
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        self.apply(OpKind::Permute(perm.to_vec()), &[x])
    }

    pub fn warp(&mut self, x: NodeId, plan: Arc<WarpPlan>) -> Result<NodeId> {
        self.apply(OpKind::BilinearWarp(plan), &[x])
    }

    pub fn scatter_rows(&mut self, x: NodeId, plan: Arc<ScatterPlan>) -> Result<NodeId> {
        self.apply(OpKind::ScatterRows(plan), &[x])
    }

    // -- differentiation ------------------------------------------------------

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let shape = &self.nodes[loss].value.shape;
        if !shape.is_empty() && shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss {
                node: loss,
                shape: shape.clone(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::ones(shape));
        for id in (0..=loss).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            let need: Vec<bool> = node
                .inputs
                .iter()
                .enumerate()
                .map(|(pos, &i)| !node.op.is_constant_input(pos) && self.nodes[i].requires_grad)
                .collect();
            let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let gin = ops::backward(&node.op, &ins, &node.value, &gout, &need);
            for ((&input, g), want) in node.inputs.iter().zip(gin).zip(&need) {
                let (Some(g), true) = (g, *want) else { continue };
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
            // Keep leaf gradients; interior ones were consumed above.
        }
        Ok(Gradients { grads })
    }
}

/// Per-node gradients from one reverse sweep. Interior gradients are
/// released during the sweep; only leaves keep theirs.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn of(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradients for every trainable parameter in `store`. Parameters the
    /// graph never touched get zeros; frozen parameters are omitted.
    pub fn param_grads(&self, graph: &Graph, store: &ParamStore) -> BTreeMap<String, Tensor> {
        store
            .iter()
            .filter(|(_, _, trainable)| *trainable)
            .map(|(name, t, _)| {
                let g = graph
                    .params
                    .get(name)
                    .and_then(|&id| self.of(id).cloned())
                    .unwrap_or_else(|| Tensor::zeros(&t.shape));
                (name.to_string(), g)
            })
            .collect()
    }
}
