//! Network graphs: a DAG of layer specs whose weights are referenced by
//! slot name and bound to a [`WeightStore`](crate::weights::WeightStore) at
//! execution time.

mod exec;
mod format;
mod shape;

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{PoolKind, Padding, TensorError};

pub use exec::{
    backward, execute, forward_train, Capture, ExecOptions, Execution, Gradients, Seed, Tape,
};
pub use format::{emit_graph, parse_graph};
pub use shape::{infer_shapes, ShapeTable};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid graph:\n{}", format_diagnostics(.0))]
    Invalid(Vec<Diagnostic>),
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("shape inference failed at node {node:?}: {detail}")]
    Shape { node: String, detail: String },
    #[error("node {node:?}: missing weight slot {slot:?}")]
    MissingWeight { node: String, slot: String },
    #[error("node {node:?}: weight slot {slot:?} has dims {found:?}, expected {expected:?}")]
    WeightShape {
        node: String,
        slot: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("no tensor supplied for input node {0:?}")]
    MissingInput(String),
    #[error("node {node:?} produced a non-finite activation")]
    NonFinite { node: String },
    #[error("node {node:?}: {source}")]
    Tensor {
        node: String,
        #[source]
        source: TensorError,
    },
    #[error("unknown node {0:?}")]
    UnknownNode(String),
}

fn format_diagnostics(d: &[Diagnostic]) -> String {
    d.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n")
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rank {
    #[serde(rename = "2d")]
    Two,
    #[serde(rename = "3d")]
    Three,
}

impl Rank {
    pub fn spatial_axes(self) -> usize {
        match self {
            Rank::Two => 2,
            Rank::Three => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Rank::Two => "2d",
            Rank::Three => "3d",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[k_h, k_w]` or `[k_d, k_h, k_w]`.
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub padding: Vec<Padding>,
    pub bias: bool,
}

impl ConvSpec {
    pub fn kernel_dims(&self) -> Vec<usize> {
        let mut d = vec![self.out_channels, self.in_channels];
        d.extend(&self.kernel);
        d
    }

    pub fn weight_count(&self) -> usize {
        self.kernel_dims().iter().product::<usize>() + if self.bias { self.out_channels } else { 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub window: Vec<usize>,
    pub stride: Vec<usize>,
    pub padding: Vec<Padding>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormSpec {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseSpec {
    pub in_features: usize,
    pub units: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Input {
        channels: usize,
        modality: Option<String>,
    },
    Conv(ConvSpec),
    Pool(PoolSpec),
    BatchNorm(BatchNormSpec),
    Relu,
    Concat,
    Dense(DenseSpec),
    GlobalAvgPool,
    Softmax,
}

impl LayerSpec {
    pub fn op_name(&self) -> &'static str {
        match self {
            LayerSpec::Input { .. } => "input",
            LayerSpec::Conv(_) => "conv",
            LayerSpec::Pool(_) => "pool",
            LayerSpec::BatchNorm(_) => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::Concat => "concat",
            LayerSpec::Dense(_) => "dense",
            LayerSpec::GlobalAvgPool => "global_avg_pool",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Names of the weight slots this kind binds, in order.
    pub fn slot_suffixes(&self) -> &'static [&'static str] {
        match self {
            LayerSpec::Conv(c) if c.bias => &["kernel", "bias"],
            LayerSpec::Conv(_) => &["kernel"],
            LayerSpec::BatchNorm(_) => &["gamma", "beta", "running_mean", "running_var"],
            LayerSpec::Dense(_) => &["weight", "bias"],
            _ => &[],
        }
    }

    /// Expected dims of each weight slot.
    pub fn slot_dims(&self) -> Vec<Vec<usize>> {
        match self {
            LayerSpec::Conv(c) => {
                let mut v = vec![c.kernel_dims()];
                if c.bias {
                    v.push(vec![c.out_channels]);
                }
                v
            }
            LayerSpec::BatchNorm(b) => vec![vec![b.channels]; 4],
            LayerSpec::Dense(d) => vec![vec![d.in_features, d.units], vec![d.units]],
            _ => vec![],
        }
    }

    /// Scalar count of trainable weights (batch-norm running stats excluded).
    pub fn trainable_params(&self) -> usize {
        match self {
            LayerSpec::Conv(c) => c.weight_count(),
            LayerSpec::BatchNorm(b) => 2 * b.channels,
            LayerSpec::Dense(d) => d.in_features * d.units + d.units,
            _ => 0,
        }
    }

    /// Scalar count of every weight slot.
    pub fn total_params(&self) -> usize {
        self.slot_dims().iter().map(|d| d.iter().product::<usize>()).sum()
    }

    /// Whether gradients flow into slot `index`.
    pub fn slot_trainable(&self, index: usize) -> bool {
        !matches!(self, LayerSpec::BatchNorm(_)) || index < 2
    }

    fn spatial_params(&self) -> Option<(&[usize], &[usize], &[Padding])> {
        match self {
            LayerSpec::Conv(c) => Some((&c.kernel, &c.stride, &c.padding)),
            LayerSpec::Pool(p) => Some((&p.window, &p.stride, &p.padding)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub layer: LayerSpec,
    pub inputs: Vec<String>,
    /// Weight slot names, one per [`LayerSpec::slot_suffixes`] entry.
    pub weights: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    pub name: String,
    pub rank: Rank,
    pub num_classes: usize,
    pub inputs: Vec<String>,
    pub output: String,
    pub nodes: Vec<Node>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub node: Option<String>,
    pub rule: &'static str,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.node {
            Some(n) => write!(f, "[{}] node {n:?}: {}", self.rule, self.message),
            None => write!(f, "[{}] {}", self.rule, self.message),
        }
    }
}

impl NetworkGraph {
    pub fn new(name: impl Into<String>, rank: Rank, num_classes: usize) -> Self {
        NetworkGraph {
            name: name.into(),
            rank,
            num_classes,
            inputs: vec![],
            output: String::new(),
            nodes: vec![],
        }
    }

    /// Appends a node, naming its weight slots `{id}.{suffix}`.
    pub fn add(&mut self, id: impl Into<String>, layer: LayerSpec, inputs: &[&str]) -> String {
        let id = id.into();
        let weights = layer
            .slot_suffixes()
            .iter()
            .map(|s| format!("{id}.{s}"))
            .collect();
        if matches!(layer, LayerSpec::Input { .. }) {
            self.inputs.push(id.clone());
        }
        self.nodes.push(Node {
            id: id.clone(),
            layer,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            weights,
        });
        id
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect()
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut Node> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    /// Indices of the nodes reading `id`'s output.
    pub fn consumers(&self, id: &str) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.inputs.iter().any(|i| i == id))
            .map(|(i, _)| i)
            .collect()
    }

    /// Kahn's algorithm; ties resolve by declaration order.
    pub fn topo_order(&self) -> Result<Vec<usize>> {
        let index = self.index();
        let mut indegree = vec![0usize; self.nodes.len()];
        let mut out_edges = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for inp in &n.inputs {
                let &j = index
                    .get(inp.as_str())
                    .ok_or_else(|| GraphError::UnknownNode(inp.clone()))?;
                indegree[i] += 1;
                out_edges[j].push(i);
            }
        }
        let mut ready: std::collections::BTreeSet<usize> =
            (0..self.nodes.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &j in &out_edges[i] {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    ready.insert(j);
                }
            }
        }
        if order.len() != self.nodes.len() {
            let stuck = (0..self.nodes.len())
                .find(|i| !order.contains(i))
                .map(|i| self.nodes[i].id.clone())
                .unwrap_or_default();
            return Err(GraphError::Invalid(vec![Diagnostic {
                node: Some(stuck),
                rule: "acyclic",
                message: "node is part of a cycle".into(),
            }]));
        }
        Ok(order)
    }

    /// Per-node trainable parameter counts in declaration order.
    pub fn param_counts(&self) -> Vec<(&str, usize)> {
        self.nodes
            .iter()
            .filter(|n| n.layer.trainable_params() > 0)
            .map(|n| (n.id.as_str(), n.layer.trainable_params()))
            .collect()
    }

    pub fn trainable_params(&self) -> usize {
        self.nodes.iter().map(|n| n.layer.trainable_params()).sum()
    }

    pub fn total_params(&self) -> usize {
        self.nodes.iter().map(|n| n.layer.total_params()).sum()
    }

    /// Input node ids paired with their modality tags.
    pub fn input_modalities(&self) -> Vec<(&str, Option<&str>)> {
        self.inputs
            .iter()
            .filter_map(|id| self.node(id))
            .map(|n| match &n.layer {
                LayerSpec::Input { modality, .. } => (n.id.as_str(), modality.as_deref()),
                _ => (n.id.as_str(), None),
            })
            .collect()
    }

    /// Checks every weight slot exists with the dims its layer expects.
    pub fn check_weights(&self, store: &crate::weights::WeightStore) -> Result<()> {
        for n in &self.nodes {
            for (slot, expected) in n.weights.iter().zip(n.layer.slot_dims()) {
                let t = store.get(slot).ok_or_else(|| GraphError::MissingWeight {
                    node: n.id.clone(),
                    slot: slot.clone(),
                })?;
                if t.dims() != expected.as_slice() {
                    return Err(GraphError::WeightShape {
                        node: n.id.clone(),
                        slot: slot.clone(),
                        expected,
                        found: t.dims().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Structural checks; an empty result means the graph is well formed.
pub fn validate(g: &NetworkGraph) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut diag = |node: Option<&str>, rule: &'static str, message: String| {
        out.push(Diagnostic {
            node: node.map(str::to_string),
            rule,
            message,
        })
    };

    let mut seen = HashSet::new();
    for n in &g.nodes {
        if n.id.is_empty() {
            diag(None, "node-id", "empty node id".into());
        }
        if !seen.insert(n.id.as_str()) {
            diag(Some(&n.id), "unique-id", "duplicate node id".into());
        }
    }
    let ids: HashSet<&str> = g.nodes.iter().map(|n| n.id.as_str()).collect();
    let spatial = g.rank.spatial_axes();

    for n in &g.nodes {
        let id = Some(n.id.as_str());
        for inp in &n.inputs {
            if !ids.contains(inp.as_str()) {
                diag(id, "input-exists", format!("references missing input {inp:?}"));
            }
        }
        let arity_ok = match n.layer {
            LayerSpec::Input { .. } => n.inputs.is_empty(),
            LayerSpec::Concat => !n.inputs.is_empty(),
            _ => n.inputs.len() == 1,
        };
        if !arity_ok {
            diag(
                id,
                "arity",
                format!("{} node has {} inputs", n.layer.op_name(), n.inputs.len()),
            );
        }
        if n.weights.len() != n.layer.slot_suffixes().len() {
            diag(
                id,
                "weight-slots",
                format!(
                    "{} node needs {} weight slots, has {}",
                    n.layer.op_name(),
                    n.layer.slot_suffixes().len(),
                    n.weights.len()
                ),
            );
        }
        if n.weights.iter().any(String::is_empty) {
            diag(id, "weight-slots", "empty weight slot name".into());
        }
        if let Some((window, stride, padding)) = n.layer.spatial_params() {
            if window.len() != spatial || stride.len() != spatial || padding.len() != spatial {
                diag(
                    id,
                    "rank",
                    format!(
                        "{} graph needs {spatial} spatial extents, node has {}/{}/{}",
                        g.rank.as_str(),
                        window.len(),
                        stride.len(),
                        padding.len()
                    ),
                );
            }
            if window.contains(&0) || stride.contains(&0) {
                diag(id, "params", "kernel/window and stride extents must be >= 1".into());
            }
        }
        match &n.layer {
            LayerSpec::Input { channels, .. } if *channels == 0 => {
                diag(id, "params", "input channels must be >= 1".into())
            }
            LayerSpec::Conv(c) if c.in_channels == 0 || c.out_channels == 0 => {
                diag(id, "params", "conv channels must be >= 1".into())
            }
            LayerSpec::BatchNorm(b) => {
                if b.channels == 0 || !(b.eps > 0.0) || !(b.momentum > 0.0 && b.momentum < 1.0) {
                    diag(id, "params", "batchnorm needs channels >= 1, eps > 0, momentum in (0,1)".into())
                }
            }
            LayerSpec::Dense(d) if d.in_features == 0 || d.units == 0 => {
                diag(id, "params", "dense extents must be >= 1".into())
            }
            _ => {}
        }
    }

    let declared: HashSet<&str> = g.inputs.iter().map(String::as_str).collect();
    for inp in &g.inputs {
        match g.node(inp) {
            Some(n) if matches!(n.layer, LayerSpec::Input { .. }) => {}
            Some(_) => diag(Some(inp), "inputs", "declared input is not an Input node".into()),
            None => diag(None, "inputs", format!("declared input {inp:?} does not exist")),
        }
    }
    for n in &g.nodes {
        if matches!(n.layer, LayerSpec::Input { .. }) && !declared.contains(n.id.as_str()) {
            diag(Some(&n.id), "inputs", "Input node missing from the graph's inputs list".into());
        }
    }
    if g.inputs.is_empty() {
        diag(None, "inputs", "graph declares no inputs".into());
    }
    if g.inputs.len() > 1 {
        let mut tags = HashSet::new();
        for (id, tag) in g.input_modalities() {
            match tag {
                None => diag(Some(id), "modality", "multi-input graphs need modality tags".into()),
                Some(t) if !tags.insert(t) => {
                    diag(Some(id), "modality", format!("duplicate modality tag {t:?}"))
                }
                _ => {}
            }
        }
    }
    if !ids.contains(g.output.as_str()) {
        diag(None, "output", format!("output node {:?} does not exist", g.output));
    }
    if out.iter().all(|d| d.rule != "input-exists") {
        if let Err(GraphError::Invalid(d)) = g.topo_order() {
            out.extend(d);
        }
    }
    out
}

/// Fails with every diagnostic when the graph is not well formed.
pub fn ensure_valid(g: &NetworkGraph) -> Result<()> {
    let d = validate(g);
    if d.is_empty() {
        Ok(())
    } else {
        Err(GraphError::Invalid(d))
    }
}
