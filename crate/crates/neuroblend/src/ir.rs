//! Typed computational-graph IR.
//!
//! Values are SSA-like: every value has exactly one producer (a graph
//! input or a node). Parameter tensors live inside the node that owns
//! them, not on graph edges. Node ids are dense indices assigned at
//! build time; all tie-breaking uses ids. After [`Graph::compact`] the
//! node list is topologically ordered, so `producer id < consumer id`
//! holds for every edge of a well-formed graph.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::packing::PackedBitTensor;
use crate::tensor::Tensor;

pub type NodeId = usize;
pub type ValueId = usize;

/// Logical dtype of an activation value.
///
/// `Real` values are f64 in the reference interpreter and Q-format
/// fixed-point in the compiled runtime. `Int` values are exact popcount
/// accumulator sums. `Binary` values are {-1,+1} planes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    Real,
    Binary,
    Int,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Producer {
    GraphInput(usize),
    Node(NodeId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueInfo {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub producer: Producer,
}

/// Per-channel batch-normalization constants (inference-time).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mu: Vec<f32>,
    pub sigma2: Vec<f32>,
    pub eps: f32,
    /// When set, gamma is identically 1 and beta identically 0: the op
    /// carries no trainable rescaling or shifting.
    pub affine_free: bool,
}

impl BnParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mu: vec![0.0; channels],
            sigma2: vec![1.0 - DEFAULT_BN_EPS; channels],
            eps: DEFAULT_BN_EPS,
            affine_free: false,
        }
    }

    pub fn affine_free(channels: usize) -> Self {
        Self {
            affine_free: true,
            ..Self::identity(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalize-then-scale-shift, evaluated in f64. This exact operation
    /// order is shared by the reference interpreter, the runtime and the
    /// threshold-boundary search, so all three agree bit for bit.
    #[inline]
    pub fn apply(&self, c: usize, y: f64) -> f64 {
        let s = (self.sigma2[c] as f64 + self.eps as f64).sqrt();
        let normalized = (y - self.mu[c] as f64) / s;
        self.gamma[c] as f64 * normalized + self.beta[c] as f64
    }
}

/// Power of two (2^-20), so identity parameters (sigma2 = 1 - eps)
/// normalize by exactly 1.0 in f64.
pub const DEFAULT_BN_EPS: f32 = 1.0 / 1048576.0;

/// Comparison direction of one threshold channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ThresholdDir {
    /// Output +1 iff input >= tau.
    Ge,
    /// Output +1 iff input <= tau.
    Le,
    /// Output is constant +1 (source scale was zero, shift >= 0).
    ConstPos,
    /// Output is constant -1.
    ConstNeg,
}

impl ThresholdDir {
    pub fn to_u8(self) -> u8 {
        match self {
            ThresholdDir::Ge => 0,
            ThresholdDir::Le => 1,
            ThresholdDir::ConstPos => 2,
            ThresholdDir::ConstNeg => 3,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(ThresholdDir::Ge),
            1 => Some(ThresholdDir::Le),
            2 => Some(ThresholdDir::ConstPos),
            3 => Some(ThresholdDir::ConstNeg),
            _ => None,
        }
    }
}

/// Per-channel threshold activation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdParams {
    pub tau: Vec<f64>,
    pub direction: Vec<ThresholdDir>,
}

impl ThresholdParams {
    pub fn channels(&self) -> usize {
        self.tau.len()
    }

    /// {-1,+1} output for channel `c` and real input `y`.
    #[inline]
    pub fn apply(&self, c: usize, y: f64) -> f64 {
        let set = match self.direction[c] {
            ThresholdDir::Ge => y >= self.tau[c],
            ThresholdDir::Le => y <= self.tau[c],
            ThresholdDir::ConstPos => true,
            ThresholdDir::ConstNeg => false,
        };
        if set {
            1.0
        } else {
            -1.0
        }
    }
}

/// Spatial convolution attributes shared by binary and fixed convs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dAttrs {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dAttrs {
    pub fn out_dim(&self, d: usize) -> usize {
        (d + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OpKind {
    /// sign(x) with sign(0) = +1, mapping Real/Int to Binary.
    SignFn,
    /// XNOR-popcount convolution over packed binary inputs and weights.
    /// Output is the exact integer dot-product sum per pixel/channel.
    BinaryConv2d {
        attrs: Conv2dAttrs,
        /// Weight tensor [c_out, c_in, k, k] packed along c_in.
        weight: PackedBitTensor,
        /// Bit value used for spatial padding (0 encodes -1, 1 encodes +1).
        pad_bit: u8,
    },
    /// Fixed-point (or, pre-compilation, float) convolution.
    FixedConv2d {
        attrs: Conv2dAttrs,
        /// [c_out, c_in, k, k]; F32 before quantization, I16 after.
        weight: Tensor,
        /// [c_out].
        bias: Tensor,
        /// Per-input-channel border value replacing zero padding after
        /// normalization folding; F64 [c_in].
        padding_value: Option<Tensor>,
    },
    BatchNorm(BnParams),
    Prelu {
        /// Per-channel negative-side slope, F32 [c].
        alpha: Tensor,
    },
    Threshold(ThresholdParams),
    AvgPool {
        window: usize,
        stride: usize,
    },
    /// Max-pooling over binary planes (boolean OR under the encoding).
    MaxPoolOr {
        window: usize,
        stride: usize,
    },
    Add,
    BinaryLinear {
        /// [out_features, in_features] packed along in_features.
        weight: PackedBitTensor,
    },
    FixedLinear {
        /// [out_features, in_features]; F32 before quantization, I16 after.
        weight: Tensor,
        bias: Tensor,
    },
    /// Non-overlapping patch embedding: fixed conv with kernel = stride =
    /// patch, flattened to a [patches, hidden] sequence.
    PatchEmbed {
        patch: usize,
        /// [hidden, c_in, patch, patch].
        weight: Tensor,
        bias: Tensor,
    },
    /// Mean over all non-channel dimensions.
    GlobalAvgPool,
    /// Swap the two axes of a rank-2 value.
    Transpose,
}

impl OpKind {
    pub fn kind_name(&self) -> &'static str {
        match self {
            OpKind::SignFn => "SignFn",
            OpKind::BinaryConv2d { .. } => "BinaryConv2d",
            OpKind::FixedConv2d { .. } => "FixedConv2d",
            OpKind::BatchNorm(_) => "BatchNorm",
            OpKind::Prelu { .. } => "Prelu",
            OpKind::Threshold(_) => "Threshold",
            OpKind::AvgPool { .. } => "AvgPool",
            OpKind::MaxPoolOr { .. } => "MaxPoolOr",
            OpKind::Add => "Add",
            OpKind::BinaryLinear { .. } => "BinaryLinear",
            OpKind::FixedLinear { .. } => "FixedLinear",
            OpKind::PatchEmbed { .. } => "PatchEmbed",
            OpKind::GlobalAvgPool => "GlobalAvgPool",
            OpKind::Transpose => "Transpose",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            OpKind::Add => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub op: OpKind,
    pub inputs: Vec<ValueId>,
    pub output: ValueId,
}

/// Channel axis convention: rank-3 [C,H,W] uses axis 0, rank-2
/// [rows, features] uses axis 1, rank-1 uses axis 0.
pub fn channel_axis(rank: usize) -> usize {
    match rank {
        3 => 0,
        2 => 1,
        _ => 0,
    }
}

pub fn channel_count(shape: &[usize]) -> usize {
    shape[channel_axis(shape.len())]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub arch: String,
    pub seed: u64,
    pub word_size: u8,
    pub frac_bits: u8,
    pub compiled: bool,
    nodes: Vec<Option<Node>>,
    values: Vec<ValueInfo>,
    inputs: Vec<(String, ValueId)>,
    outputs: Vec<(String, ValueId)>,
}

impl Graph {
    pub fn new(arch: impl Into<String>, seed: u64) -> Self {
        Self {
            arch: arch.into(),
            seed,
            word_size: crate::packing::DEFAULT_WORD_SIZE,
            frac_bits: 8,
            compiled: false,
            nodes: Vec::new(),
            values: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn add_input(&mut self, name: impl Into<String>, dtype: DType, shape: Vec<usize>) -> ValueId {
        let vid = self.values.len();
        let idx = self.inputs.len();
        self.values.push(ValueInfo {
            dtype,
            shape,
            producer: Producer::GraphInput(idx),
        });
        self.inputs.push((name.into(), vid));
        vid
    }

    /// Append a node, inferring its output dtype and shape. Dtype-rule
    /// violations do not fail here; they are reported by [`validate`].
    pub fn add_node(
        &mut self,
        name: impl Into<String>,
        op: OpKind,
        inputs: Vec<ValueId>,
    ) -> Result<ValueId> {
        let shapes: Vec<&[usize]> = inputs.iter().map(|&v| self.values[v].shape.as_slice()).collect();
        let (dtype, shape) = infer_output(&op, &shapes)?;
        let nid = self.nodes.len();
        let vid = self.values.len();
        self.values.push(ValueInfo {
            dtype,
            shape,
            producer: Producer::Node(nid),
        });
        self.nodes.push(Some(Node {
            name: name.into(),
            op,
            inputs,
            output: vid,
        }));
        Ok(vid)
    }

    /// Low-level constructors for deserialization and for tests that forge
    /// deliberately malformed graphs.
    #[doc(hidden)]
    pub fn add_raw_value(&mut self, info: ValueInfo) -> ValueId {
        self.values.push(info);
        self.values.len() - 1
    }

    #[doc(hidden)]
    pub fn add_raw_node(&mut self, node: Node) -> NodeId {
        self.nodes.push(Some(node));
        self.nodes.len() - 1
    }

    #[doc(hidden)]
    pub fn add_raw_input_port(&mut self, name: impl Into<String>, vid: ValueId) {
        self.inputs.push((name.into(), vid));
    }

    pub fn set_output(&mut self, name: impl Into<String>, vid: ValueId) {
        self.outputs.push((name.into(), vid));
    }

    pub fn node_count(&self) -> usize {
        self.nodes.iter().flatten().count()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        self.nodes[id].as_ref().expect("node is dead")
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut Node {
        self.nodes[id].as_mut().expect("node is dead")
    }

    pub fn try_node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(id).and_then(|n| n.as_ref())
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.as_ref().map(|_| i))
    }

    pub fn iter_nodes(&self) -> impl Iterator<Item = (NodeId, &Node)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.as_ref().map(|node| (i, node)))
    }

    pub fn value(&self, id: ValueId) -> &ValueInfo {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: ValueId) -> &mut ValueInfo {
        &mut self.values[id]
    }

    pub fn value_count(&self) -> usize {
        self.values.len()
    }

    pub fn inputs(&self) -> &[(String, ValueId)] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[(String, ValueId)] {
        &self.outputs
    }

    pub fn is_graph_output(&self, vid: ValueId) -> bool {
        self.outputs.iter().any(|(_, v)| *v == vid)
    }

    /// Live nodes consuming `vid`, ascending by id.
    pub fn consumers(&self, vid: ValueId) -> Vec<NodeId> {
        self.iter_nodes()
            .filter(|(_, n)| n.inputs.contains(&vid))
            .map(|(i, _)| i)
            .collect()
    }

    /// Tombstone a node. Its output value becomes dangling; the caller
    /// must have rewired all consumers first.
    pub fn remove_node(&mut self, id: NodeId) {
        self.nodes[id] = None;
    }

    pub fn replace_input(&mut self, node: NodeId, old: ValueId, new: ValueId) {
        for input in &mut self.node_mut(node).inputs {
            if *input == old {
                *input = new;
            }
        }
    }

    /// Rewire every consumer of `old` (and graph outputs) to read `new`.
    pub fn redirect_value(&mut self, old: ValueId, new: ValueId) {
        let consumers = self.consumers(old);
        for c in consumers {
            self.replace_input(c, old, new);
        }
        for (_, v) in &mut self.outputs {
            if *v == old {
                *v = new;
            }
        }
    }

    /// Drop dead nodes and unreferenced values, renumbering nodes in
    /// topological order (ties broken by old id) and values in ascending
    /// old-id order. Returns Err on a cycle among live nodes.
    pub fn compact(&mut self) -> Result<()> {
        let order = self.topo_order()?;
        let mut node_remap = vec![usize::MAX; self.nodes.len()];
        for (new_id, &old_id) in order.iter().enumerate() {
            node_remap[old_id] = new_id;
        }

        // Referenced values: graph ports plus live node ids.
        let mut live_value = vec![false; self.values.len()];
        for (_, v) in self.inputs.iter().chain(self.outputs.iter()) {
            live_value[*v] = true;
        }
        for (_, node) in self.iter_nodes() {
            for &v in &node.inputs {
                live_value[v] = true;
            }
            live_value[node.output] = true;
        }
        let mut value_remap = vec![usize::MAX; self.values.len()];
        let mut new_values = Vec::new();
        for (old, info) in self.values.iter().enumerate() {
            if live_value[old] {
                value_remap[old] = new_values.len();
                new_values.push(info.clone());
            }
        }

        let mut new_nodes: Vec<Option<Node>> = vec![None; order.len()];
        for &old_id in &order {
            let mut node = self.nodes[old_id].take().expect("live node");
            for input in &mut node.inputs {
                *input = value_remap[*input];
            }
            node.output = value_remap[node.output];
            new_nodes[node_remap[old_id]] = Some(node);
        }

        for info in &mut new_values {
            if let Producer::Node(n) = &mut info.producer {
                *n = node_remap[*n];
            }
        }
        // Re-link node outputs as producers (values whose producer died
        // but which are still referenced keep a stale producer otherwise).
        for (id, node) in new_nodes.iter().enumerate() {
            if let Some(node) = node {
                new_values[node.output].producer = Producer::Node(id);
            }
        }

        for (_, v) in &mut self.inputs {
            *v = value_remap[*v];
        }
        for (_, v) in &mut self.outputs {
            *v = value_remap[*v];
        }
        self.nodes = new_nodes;
        self.values = new_values;
        Ok(())
    }

    /// Kahn topological order over live nodes, ties broken by node id.
    pub fn topo_order(&self) -> Result<Vec<NodeId>> {
        use std::cmp::Reverse;
        use std::collections::BinaryHeap;

        let live: Vec<NodeId> = self.node_ids().collect();
        let mut pending: Vec<usize> = vec![0; self.nodes.len()];
        // consumers[producer] -> nodes waiting on it
        let mut waiting: Vec<Vec<NodeId>> = vec![Vec::new(); self.nodes.len()];
        let mut ready = BinaryHeap::new();
        for &id in &live {
            let node = self.node(id);
            let mut deps = 0;
            for &input in &node.inputs {
                if let Producer::Node(p) = self.values[input].producer {
                    if self.nodes.get(p).map(|n| n.is_some()).unwrap_or(false) {
                        deps += 1;
                        waiting[p].push(id);
                    }
                }
            }
            pending[id] = deps;
            if deps == 0 {
                ready.push(Reverse(id));
            }
        }
        let mut order = Vec::with_capacity(live.len());
        while let Some(Reverse(id)) = ready.pop() {
            order.push(id);
            for &w in &waiting[id] {
                pending[w] -= 1;
                if pending[w] == 0 {
                    ready.push(Reverse(w));
                }
            }
        }
        if order.len() != live.len() {
            return Err(Error::Cycle);
        }
        Ok(order)
    }
}

/// Infer the output (dtype, shape) of an op applied to inputs with the
/// given shapes. Shape arithmetic must be consistent; dtype rules are
/// checked later by [`validate`].
pub fn infer_output(op: &OpKind, inputs: &[&[usize]]) -> Result<(DType, Vec<usize>)> {
    let one = |inputs: &[&[usize]]| -> Result<Vec<usize>> {
        if inputs.len() != 1 {
            return Err(Error::ShapeMismatch {
                context: format!("{} expects 1 input, got {}", op.kind_name(), inputs.len()),
            });
        }
        Ok(inputs[0].to_vec())
    };
    match op {
        OpKind::SignFn => Ok((DType::Binary, one(inputs)?)),
        OpKind::Threshold(_) => Ok((DType::Binary, one(inputs)?)),
        OpKind::BatchNorm(_) => Ok((DType::Real, one(inputs)?)),
        OpKind::Prelu { .. } => Ok((DType::Real, one(inputs)?)),
        OpKind::BinaryConv2d { attrs, weight, .. } => {
            let s = one(inputs)?;
            conv_out(op.kind_name(), &s, attrs, weight.shape()[0], DType::Int)
        }
        OpKind::FixedConv2d { attrs, weight, .. } => {
            let s = one(inputs)?;
            conv_out(op.kind_name(), &s, attrs, weight.shape()[0], DType::Real)
        }
        OpKind::AvgPool { window, stride } => {
            let s = one(inputs)?;
            pool_out(op.kind_name(), &s, *window, *stride, DType::Real)
        }
        OpKind::MaxPoolOr { window, stride } => {
            let s = one(inputs)?;
            pool_out(op.kind_name(), &s, *window, *stride, DType::Binary)
        }
        OpKind::Add => {
            if inputs.len() != 2 {
                return Err(Error::ShapeMismatch {
                    context: format!("Add expects 2 inputs, got {}", inputs.len()),
                });
            }
            Ok((DType::Real, inputs[0].to_vec()))
        }
        OpKind::BinaryLinear { weight } => linear_out(inputs, weight.shape(), DType::Int),
        OpKind::FixedLinear { weight, .. } => linear_out(inputs, weight.shape(), DType::Real),
        OpKind::PatchEmbed { patch, weight, .. } => {
            let s = one(inputs)?;
            if s.len() != 3 {
                return Err(Error::ShapeMismatch {
                    context: format!("PatchEmbed expects [c,h,w], got {s:?}"),
                });
            }
            if s[1] % patch != 0 || s[2] % patch != 0 {
                return Err(Error::ShapeMismatch {
                    context: format!("PatchEmbed patch {patch} does not divide {s:?}"),
                });
            }
            let seq = (s[1] / patch) * (s[2] / patch);
            Ok((DType::Real, vec![seq, weight.shape()[0]]))
        }
        OpKind::GlobalAvgPool => {
            let s = one(inputs)?;
            let c = channel_count(&s);
            Ok((DType::Real, vec![c]))
        }
        OpKind::Transpose => {
            let s = one(inputs)?;
            if s.len() != 2 {
                return Err(Error::ShapeMismatch {
                    context: format!("Transpose expects rank-2, got {s:?}"),
                });
            }
            Ok((DType::Real, vec![s[1], s[0]]))
        }
    }
}

fn conv_out(
    what: &str,
    input: &[usize],
    attrs: &Conv2dAttrs,
    c_out: usize,
    dtype: DType,
) -> Result<(DType, Vec<usize>)> {
    if input.len() != 3 {
        return Err(Error::ShapeMismatch {
            context: format!("{what} expects [c,h,w], got {input:?}"),
        });
    }
    if input[1] + 2 * attrs.padding < attrs.kernel || input[2] + 2 * attrs.padding < attrs.kernel {
        return Err(Error::ShapeMismatch {
            context: format!("{what} kernel {} exceeds padded input {input:?}", attrs.kernel),
        });
    }
    Ok((dtype, vec![c_out, attrs.out_dim(input[1]), attrs.out_dim(input[2])]))
}

fn pool_out(
    what: &str,
    input: &[usize],
    window: usize,
    stride: usize,
    dtype: DType,
) -> Result<(DType, Vec<usize>)> {
    if input.len() != 3 {
        return Err(Error::ShapeMismatch {
            context: format!("{what} expects [c,h,w], got {input:?}"),
        });
    }
    if window == 0 || stride == 0 || input[1] < window || input[2] < window {
        return Err(Error::ShapeMismatch {
            context: format!("{what} window {window}/stride {stride} invalid for {input:?}"),
        });
    }
    let oh = (input[1] - window) / stride + 1;
    let ow = (input[2] - window) / stride + 1;
    Ok((dtype, vec![input[0], oh, ow]))
}

fn linear_out(inputs: &[&[usize]], wshape: &[usize], dtype: DType) -> Result<(DType, Vec<usize>)> {
    if inputs.len() != 1 {
        return Err(Error::ShapeMismatch {
            context: format!("Linear expects 1 input, got {}", inputs.len()),
        });
    }
    let s = inputs[0];
    match s.len() {
        1 => Ok((dtype, vec![wshape[0]])),
        2 => Ok((dtype, vec![s[0], wshape[0]])),
        _ => Err(Error::ShapeMismatch {
            context: format!("Linear expects rank-1 or rank-2 input, got {s:?}"),
        }),
    }
}

/// One validation failure: the rule that broke and where.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub node: Option<NodeId>,
    pub rule: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.node {
            Some(n) => write!(f, "[{}@node {}] {}", self.rule, n, self.message),
            None => write!(f, "[{}] {}", self.rule, self.message),
        }
    }
}

fn expected_input_dtypes(op: &OpKind) -> Vec<&'static [DType]> {
    const REAL: &[DType] = &[DType::Real];
    const BIN: &[DType] = &[DType::Binary];
    const REAL_OR_INT: &[DType] = &[DType::Real, DType::Int];
    match op {
        OpKind::SignFn | OpKind::Threshold(_) => vec![REAL_OR_INT],
        OpKind::BatchNorm(_) => vec![REAL_OR_INT],
        OpKind::BinaryConv2d { .. } | OpKind::BinaryLinear { .. } | OpKind::MaxPoolOr { .. } => {
            vec![BIN]
        }
        OpKind::Add => vec![REAL, REAL],
        OpKind::FixedConv2d { .. }
        | OpKind::FixedLinear { .. }
        | OpKind::PatchEmbed { .. }
        | OpKind::Prelu { .. }
        | OpKind::AvgPool { .. }
        | OpKind::GlobalAvgPool
        | OpKind::Transpose => vec![REAL],
    }
}

/// Check every graph invariant; the returned list is empty iff the graph
/// is well-formed. Violations are data, not failures.
pub fn validate(graph: &Graph) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |node: Option<NodeId>, rule: &str, message: String| {
        out.push(Violation {
            node,
            rule: rule.to_string(),
            message,
        });
    };

    // Value integrity: every producer link points back at its node.
    let mut produced = vec![Vec::new(); graph.value_count()];
    for (id, node) in graph.iter_nodes() {
        if node.output >= graph.value_count() {
            push(Some(id), "value-range", format!("output value {} out of range", node.output));
            continue;
        }
        produced[node.output].push(id);
    }
    for (vid, producers) in produced.iter().enumerate() {
        if producers.len() > 1 {
            push(
                None,
                "single-producer",
                format!("value {vid} produced by nodes {producers:?}"),
            );
        }
        let info = graph.value(vid);
        match info.producer {
            Producer::Node(n) => {
                if !producers.contains(&n) && !producers.is_empty() {
                    push(
                        None,
                        "single-producer",
                        format!("value {vid} producer link {n} disagrees with nodes {producers:?}"),
                    );
                }
                if graph.try_node(n).is_none() && producers.is_empty() {
                    push(None, "dangling-producer", format!("value {vid} produced by dead node {n}"));
                }
            }
            Producer::GraphInput(_) => {
                if !producers.is_empty() {
                    push(
                        None,
                        "single-producer",
                        format!("graph input value {vid} also produced by {producers:?}"),
                    );
                }
            }
        }
    }

    // Cycle detection.
    let cyclic = graph.topo_order().is_err();
    if cyclic {
        push(None, "cycle", "cycle detected".to_string());
    }

    // Every node input is a graph input or a prior node output.
    for (id, node) in graph.iter_nodes() {
        for &input in &node.inputs {
            if input >= graph.value_count() {
                push(Some(id), "value-range", format!("input value {input} out of range"));
                continue;
            }
            match graph.value(input).producer {
                Producer::GraphInput(_) => {}
                Producer::Node(p) => {
                    if graph.try_node(p).is_none() {
                        push(Some(id), "dangling-producer", format!("input {input} from dead node {p}"));
                    } else if p >= id {
                        push(
                            Some(id),
                            "order",
                            format!("input {input} produced by node {p}, not prior to {id}"),
                        );
                    }
                }
            }
        }
    }

    // Dtype compatibility on every edge, shape consistency, param checks.
    for (id, node) in graph.iter_nodes() {
        if node.inputs.len() != node.op.arity() {
            push(
                Some(id),
                "arity",
                format!("{} expects {} inputs, has {}", node.op.kind_name(), node.op.arity(), node.inputs.len()),
            );
            continue;
        }
        if node.inputs.iter().any(|&v| v >= graph.value_count()) {
            continue;
        }
        let expected = expected_input_dtypes(&node.op);
        for (slot, (&input, allowed)) in node.inputs.iter().zip(expected.iter()).enumerate() {
            let got = graph.value(input).dtype;
            if !allowed.contains(&got) {
                push(
                    Some(id),
                    "dtype-mismatch",
                    format!("{} input {slot} has dtype {got:?}, allowed {allowed:?}", node.op.kind_name()),
                );
            }
        }

        let shapes: Vec<&[usize]> = node.inputs.iter().map(|&v| graph.value(v).shape.as_slice()).collect();
        match infer_output(&node.op, &shapes) {
            Err(e) => push(Some(id), "shape", e.to_string()),
            Ok((dtype, shape)) => {
                let rec = graph.value(node.output);
                if rec.shape != shape {
                    push(
                        Some(id),
                        "shape",
                        format!("recorded output shape {:?} != inferred {shape:?}", rec.shape),
                    );
                }
                if rec.dtype != dtype {
                    push(
                        Some(id),
                        "dtype-mismatch",
                        format!("recorded output dtype {:?} != inferred {dtype:?}", rec.dtype),
                    );
                }
            }
        }

        validate_params(graph, id, node, &mut push);
    }

    if graph.outputs().is_empty() {
        push(None, "ports", "graph declares no outputs".to_string());
    }
    for (name, v) in graph.outputs() {
        if *v >= graph.value_count() {
            push(None, "ports", format!("output {name} points at missing value {v}"));
        }
    }

    out
}

fn validate_params(
    graph: &Graph,
    id: NodeId,
    node: &Node,
    push: &mut impl FnMut(Option<NodeId>, &str, String),
) {
    let in_shape = node
        .inputs
        .first()
        .map(|&v| graph.value(v).shape.clone())
        .unwrap_or_default();
    let channels = if in_shape.is_empty() { 0 } else { channel_count(&in_shape) };
    match &node.op {
        OpKind::BatchNorm(bn) => {
            let c = bn.channels();
            if bn.beta.len() != c || bn.mu.len() != c || bn.sigma2.len() != c {
                push(Some(id), "params", "batch-norm parameter lengths disagree".into());
            }
            if c != channels {
                push(Some(id), "params", format!("batch-norm channels {c} != input channels {channels}"));
            }
            if bn.eps <= 0.0 {
                push(Some(id), "params", format!("eps {} must be positive", bn.eps));
            }
            if bn.sigma2.iter().any(|&s| s < 0.0) {
                push(Some(id), "params", "sigma2 must be elementwise non-negative".into());
            }
            if bn.affine_free
                && (bn.gamma.iter().any(|&g| g != 1.0) || bn.beta.iter().any(|&b| b != 0.0))
            {
                push(
                    Some(id),
                    "params",
                    "affine-free batch norm requires gamma == 1 and beta == 0".into(),
                );
            }
        }
        OpKind::Threshold(t) => {
            if t.direction.len() != t.tau.len() {
                push(Some(id), "params", "threshold tau/direction lengths disagree".into());
            }
            if t.channels() != channels {
                push(Some(id), "params", format!("threshold channels {} != input channels {channels}", t.channels()));
            }
        }
        OpKind::Prelu { alpha } => {
            if alpha.element_count() != channels {
                push(Some(id), "params", format!("prelu channels {} != input channels {channels}", alpha.element_count()));
            }
        }
        OpKind::BinaryConv2d { attrs, weight, pad_bit } => {
            let ws = weight.shape();
            if ws.len() != 4 || ws[2] != attrs.kernel || ws[3] != attrs.kernel {
                push(Some(id), "params", format!("weight shape {ws:?} inconsistent with kernel {}", attrs.kernel));
            } else if in_shape.len() == 3 && ws[1] != in_shape[0] {
                push(Some(id), "params", format!("weight c_in {} != input channels {}", ws[1], in_shape[0]));
            }
            if weight.packed_axis() != 1 {
                push(Some(id), "params", "binary conv weight must be packed along c_in".into());
            }
            if *pad_bit > 1 {
                push(Some(id), "params", format!("pad_bit {pad_bit} must be 0 or 1"));
            }
        }
        OpKind::FixedConv2d { attrs, weight, bias, padding_value } => {
            let ws = weight.shape().to_vec();
            if ws.len() != 4 || ws[2] != attrs.kernel || ws[3] != attrs.kernel {
                push(Some(id), "params", format!("weight shape {ws:?} inconsistent with kernel {}", attrs.kernel));
            } else if in_shape.len() == 3 && ws[1] != in_shape[0] {
                push(Some(id), "params", format!("weight c_in {} != input channels {}", ws[1], in_shape[0]));
            }
            if !ws.is_empty() && bias.element_count() != ws[0] {
                push(Some(id), "params", format!("bias length {} != c_out {}", bias.element_count(), ws[0]));
            }
            if let Some(p) = padding_value {
                if ws.len() == 4 && p.element_count() != ws[1] {
                    push(Some(id), "params", format!("padding_value length {} != c_in {}", p.element_count(), ws[1]));
                }
            }
        }
        OpKind::BinaryLinear { weight } => {
            let ws = weight.shape();
            if ws.len() != 2 {
                push(Some(id), "params", format!("linear weight must be rank-2, got {ws:?}"));
            } else if !in_shape.is_empty() && ws[1] != *in_shape.last().unwrap() {
                push(Some(id), "params", format!("weight in_features {} != input features {}", ws[1], in_shape.last().unwrap()));
            }
        }
        OpKind::FixedLinear { weight, bias } => {
            let ws = weight.shape().to_vec();
            if ws.len() != 2 {
                push(Some(id), "params", format!("linear weight must be rank-2, got {ws:?}"));
            } else {
                if !in_shape.is_empty() && ws[1] != *in_shape.last().unwrap() {
                    push(Some(id), "params", format!("weight in_features {} != input features {}", ws[1], in_shape.last().unwrap()));
                }
                if bias.element_count() != ws[0] {
                    push(Some(id), "params", format!("bias length {} != out_features {}", bias.element_count(), ws[0]));
                }
            }
        }
        OpKind::PatchEmbed { patch, weight, bias } => {
            let ws = weight.shape().to_vec();
            if ws.len() != 4 || ws[2] != *patch || ws[3] != *patch {
                push(Some(id), "params", format!("patch-embed weight shape {ws:?} inconsistent with patch {patch}"));
            } else if in_shape.len() == 3 && ws[1] != in_shape[0] {
                push(Some(id), "params", format!("weight c_in {} != input channels {}", ws[1], in_shape[0]));
            }
            if !ws.is_empty() && bias.element_count() != ws[0] {
                push(Some(id), "params", format!("bias length {} != hidden {}", bias.element_count(), ws[0]));
            }
        }
        OpKind::Add if !in_shape.is_empty() && node.inputs.len() == 2 => {
            let b = &graph.value(node.inputs[1]).shape;
            if *b != in_shape {
                push(Some(id), "shape", format!("add operands {in_shape:?} vs {b:?}"));
            }
        }
        _ => {}
    }
}
