//! The reduced residual-stream computation graph.
//!
//! Nodes are model components; edges are additive residual-stream
//! connections from a sender's output to a receiver's input summation.
//! Attention heads of one layer share a single `attn_in` receiver, which
//! cuts the candidate edge count by roughly a factor of the head count
//! while leaving each head an independent sender.
//!
//! Receivers execute in the order `attn_in(0), mlp(0), ..., logits`.
//! Heads of layer `l` are senders to `mlp(l)` but not to `attn_in(l)`
//! (attention precedes the MLP inside a block). The fan-out from
//! `attn_in(l)` to its own heads is fixed wiring, not a prunable edge.


use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// A node of the reduced graph.
///
/// `AttnHead` and `Input` only send; `AttnInput` and `Logits` only
/// receive; `Mlp` does both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeId {
    Input,
    AttnInput { layer: usize },
    AttnHead { layer: usize, head: usize },
    Mlp { layer: usize },
    Logits,
}

impl NodeId {
    /// Canonical name used in circuit files and reports:
    /// `input`, `attn_in{l}`, `a{l}.h{h}`, `mlp{l}`, `logits`.
    pub fn canonical_name(&self) -> String {
        match self {
            NodeId::Input => "input".into(),
            NodeId::AttnInput { layer } => format!("attn_in{layer}"),
            NodeId::AttnHead { layer, head } => format!("a{layer}.h{head}"),
            NodeId::Mlp { layer } => format!("mlp{layer}"),
            NodeId::Logits => "logits".into(),
        }
    }

    /// Parse a canonical node name.
    pub fn parse(name: &str) -> Result<NodeId> {
        if name == "input" {
            return Ok(NodeId::Input);
        }
        if name == "logits" {
            return Ok(NodeId::Logits);
        }
        if let Some(rest) = name.strip_prefix("attn_in") {
            let layer = rest
                .parse()
                .map_err(|_| Error::Format(format!("bad node name '{name}'")))?;
            return Ok(NodeId::AttnInput { layer });
        }
        if let Some(rest) = name.strip_prefix("mlp") {
            let layer = rest
                .parse()
                .map_err(|_| Error::Format(format!("bad node name '{name}'")))?;
            return Ok(NodeId::Mlp { layer });
        }
        if let Some(rest) = name.strip_prefix('a') {
            if let Some((l, h)) = rest.split_once(".h") {
                let layer = l
                    .parse()
                    .map_err(|_| Error::Format(format!("bad node name '{name}'")))?;
                let head = h
                    .parse()
                    .map_err(|_| Error::Format(format!("bad node name '{name}'")))?;
                return Ok(NodeId::AttnHead { layer, head });
            }
        }
        Err(Error::Format(format!("unrecognized node name '{name}'")))
    }

    pub fn is_sender(&self) -> bool {
        matches!(
            self,
            NodeId::Input | NodeId::AttnHead { .. } | NodeId::Mlp { .. }
        )
    }

    pub fn is_receiver(&self) -> bool {
        matches!(
            self,
            NodeId::AttnInput { .. } | NodeId::Mlp { .. } | NodeId::Logits
        )
    }
}

/// Number of sender slots for an (L, H) model: input plus H heads and
/// one MLP per layer.
pub fn sender_slot_count(layers: usize, heads: usize) -> usize {
    1 + layers * (heads + 1)
}

/// Dense index of a sender node in trace/cache storage.
///
/// Order: `input`, then per layer all heads followed by the MLP. Must
/// stay in sync with the order `forward_with_trace` records contributions.
pub fn sender_slot(node: NodeId, heads: usize) -> usize {
    match node {
        NodeId::Input => 0,
        NodeId::AttnHead { layer, head } => 1 + layer * (heads + 1) + head,
        NodeId::Mlp { layer } => 1 + layer * (heads + 1) + heads,
        _ => panic!("{} is not a sender", node.canonical_name()),
    }
}

/// The nine edge classes of the reduced graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeType {
    InputToAttnIn,
    InputToMlp,
    InputToLogits,
    AttnToAttnIn,
    AttnToMlp,
    AttnToLogits,
    MlpToAttnIn,
    MlpToMlp,
    MlpToLogits,
}

impl EdgeType {
    pub const ALL: [EdgeType; 9] = [
        EdgeType::InputToAttnIn,
        EdgeType::InputToMlp,
        EdgeType::InputToLogits,
        EdgeType::AttnToAttnIn,
        EdgeType::AttnToMlp,
        EdgeType::AttnToLogits,
        EdgeType::MlpToAttnIn,
        EdgeType::MlpToMlp,
        EdgeType::MlpToLogits,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            EdgeType::InputToAttnIn => "input->attn_in",
            EdgeType::InputToMlp => "input->mlp",
            EdgeType::InputToLogits => "input->logits",
            EdgeType::AttnToAttnIn => "attn->attn_in",
            EdgeType::AttnToMlp => "attn->mlp",
            EdgeType::AttnToLogits => "attn->logits",
            EdgeType::MlpToAttnIn => "mlp->attn_in",
            EdgeType::MlpToMlp => "mlp->mlp",
            EdgeType::MlpToLogits => "mlp->logits",
        }
    }

    /// Classify an endpoint pair, if it forms a legal edge class.
    pub fn classify(sender: NodeId, receiver: NodeId) -> Option<EdgeType> {
        match (sender, receiver) {
            (NodeId::Input, NodeId::AttnInput { .. }) => Some(EdgeType::InputToAttnIn),
            (NodeId::Input, NodeId::Mlp { .. }) => Some(EdgeType::InputToMlp),
            (NodeId::Input, NodeId::Logits) => Some(EdgeType::InputToLogits),
            (NodeId::AttnHead { .. }, NodeId::AttnInput { .. }) => Some(EdgeType::AttnToAttnIn),
            (NodeId::AttnHead { .. }, NodeId::Mlp { .. }) => Some(EdgeType::AttnToMlp),
            (NodeId::AttnHead { .. }, NodeId::Logits) => Some(EdgeType::AttnToLogits),
            (NodeId::Mlp { .. }, NodeId::AttnInput { .. }) => Some(EdgeType::MlpToAttnIn),
            (NodeId::Mlp { .. }, NodeId::Mlp { .. }) => Some(EdgeType::MlpToMlp),
            (NodeId::Mlp { .. }, NodeId::Logits) => Some(EdgeType::MlpToLogits),
            _ => None,
        }
    }
}

/// A directed residual-stream connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub sender: NodeId,
    pub receiver: NodeId,
    pub edge_type: EdgeType,
}

/// Execution-order precedence: does `sender` write before `receiver` reads?
///
/// `attn_in(l)` receives from input, heads of layers < l and MLPs of
/// layers < l; `mlp(l)` additionally from heads of layer l; `logits`
/// from every sender.
pub fn precedes(sender: NodeId, receiver: NodeId) -> bool {
    if !sender.is_sender() || !receiver.is_receiver() {
        return false;
    }
    match receiver {
        NodeId::AttnInput { layer: rl } => match sender {
            NodeId::Input => true,
            NodeId::AttnHead { layer, .. } => layer < rl,
            NodeId::Mlp { layer } => layer < rl,
            _ => false,
        },
        NodeId::Mlp { layer: rl } => match sender {
            NodeId::Input => true,
            NodeId::AttnHead { layer, .. } => layer <= rl,
            NodeId::Mlp { layer } => layer < rl,
            _ => false,
        },
        NodeId::Logits => true,
        _ => false,
    }
}

/// The reduced graph for a given model shape, with canonical orderings.
///
/// Edge order is part of the circuit-file format: edges are sorted by
/// receiver topological index, then sender slot index.
#[derive(Debug, Clone)]
pub struct Graph {
    layers: usize,
    heads: usize,
    nodes: Vec<NodeId>,
    receivers: Vec<NodeId>,
    edges: Vec<Edge>,
    /// Edge indices grouped by receiver, in receiver topological order.
    edges_by_receiver: Vec<Vec<usize>>,
    fingerprint: u64,
}

impl Graph {
    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads_per_layer(&self) -> usize {
        self.heads
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    /// Receivers in topological (execution) order, `logits` last.
    pub fn receivers(&self) -> &[NodeId] {
        &self.receivers
    }

    /// Edges in canonical order.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edge indices incoming to the receiver at topological index `r`.
    pub fn incoming(&self, receiver_topo_index: usize) -> &[usize] {
        &self.edges_by_receiver[receiver_topo_index]
    }

    pub fn receiver_topo_index(&self, node: NodeId) -> Option<usize> {
        self.receivers.iter().position(|n| *n == node)
    }

    /// Layer of a receiver for layer-cutoff purposes; `logits` counts as
    /// layer L so a cutoff of L covers the whole graph.
    pub fn receiver_layer(&self, node: NodeId) -> usize {
        match node {
            NodeId::AttnInput { layer } | NodeId::Mlp { layer } => layer,
            NodeId::Logits => self.layers,
            _ => panic!("{} is not a receiver", node.canonical_name()),
        }
    }

    pub fn sender_slot(&self, node: NodeId) -> usize {
        sender_slot(node, self.heads)
    }

    pub fn sender_slot_count(&self) -> usize {
        sender_slot_count(self.layers, self.heads)
    }

    /// Stable hash of the node/edge enumeration. Masks and circuit files
    /// carry it so they can only be applied to the graph they were built on.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn find_edge(&self, sender: NodeId, receiver: NodeId) -> Option<usize> {
        self.edges
            .iter()
            .position(|e| e.sender == sender && e.receiver == receiver)
    }
}

/// Build the complete reduced graph for a model configuration.
///
/// Pure function of the configuration; ordering is deterministic.
pub fn build_graph(config: &ModelConfig) -> Graph {
    build_graph_lh(config.layers, config.heads_per_layer)
}

/// Graph construction from raw (L, H); see [`build_graph`].
pub fn build_graph_lh(layers: usize, heads: usize) -> Graph {
    // Canonical node order: input, then per layer attn_in < heads < mlp,
    // then logits.
    let mut nodes = vec![NodeId::Input];
    let mut receivers = Vec::new();
    let mut senders = vec![NodeId::Input];
    for l in 0..layers {
        nodes.push(NodeId::AttnInput { layer: l });
        receivers.push(NodeId::AttnInput { layer: l });
        for h in 0..heads {
            nodes.push(NodeId::AttnHead { layer: l, head: h });
            senders.push(NodeId::AttnHead { layer: l, head: h });
        }
        nodes.push(NodeId::Mlp { layer: l });
        receivers.push(NodeId::Mlp { layer: l });
        senders.push(NodeId::Mlp { layer: l });
    }
    nodes.push(NodeId::Logits);
    receivers.push(NodeId::Logits);

    let mut edges = Vec::new();
    let mut edges_by_receiver = Vec::with_capacity(receivers.len());
    for &recv in &receivers {
        let mut group = Vec::new();
        for &send in &senders {
            if precedes(send, recv) {
                let edge_type = EdgeType::classify(send, recv)
                    .expect("precedence implies a legal edge class");
                group.push(edges.len());
                edges.push(Edge {
                    sender: send,
                    receiver: recv,
                    edge_type,
                });
            }
        }
        edges_by_receiver.push(group);
    }

    let mut hasher = Fnv64::new();
    hasher.write(format!("graph;L={layers};H={heads};").as_bytes());
    for e in &edges {
        hasher.write(e.sender.canonical_name().as_bytes());
        hasher.write(b">");
        hasher.write(e.receiver.canonical_name().as_bytes());
        hasher.write(b";");
    }

    Graph {
        layers,
        heads,
        nodes,
        receivers,
        edges,
        edges_by_receiver,
        fingerprint: hasher.finish(),
    }
}

/// Closed-form edge count of the reduced graph: H*L*(L+1) + (L+1)^2.
pub fn edge_count(layers: usize, heads: usize) -> usize {
    heads * layers * (layers + 1) + (layers + 1) * (layers + 1)
}

/// Edge count of the unreduced variant where every attention head is its
/// own receiver. Kept as a counting oracle only; the engine never builds
/// this graph.
pub fn unreduced_edge_count(layers: usize, heads: usize) -> usize {
    let mut count = 0usize;
    for l in 0..layers {
        // Each head of layer l receives from input, all heads of earlier
        // layers and all earlier MLPs.
        count += heads * (1 + l * heads + l);
        // mlp(l) receives from input, heads up to and including layer l,
        // earlier MLPs.
        count += 1 + (l + 1) * heads + l;
    }
    // logits receives from everything.
    count += 1 + layers * heads + layers;
    count
}

// ---------------------------------------------------------------------------
// Circuit masks
// ---------------------------------------------------------------------------

/// Boolean edge-indicator set over one specific graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CircuitMask {
    bits: Vec<bool>,
    fingerprint: u64,
}

impl CircuitMask {
    pub fn full(graph: &Graph) -> Self {
        Self {
            bits: vec![true; graph.edge_count()],
            fingerprint: graph.fingerprint(),
        }
    }

    pub fn empty(graph: &Graph) -> Self {
        Self {
            bits: vec![false; graph.edge_count()],
            fingerprint: graph.fingerprint(),
        }
    }

    /// Uniformly random subset of exactly `size` edges, reproducible by seed.
    pub fn random(graph: &Graph, size: usize, seed: u64) -> Result<Self> {
        let n = graph.edge_count();
        if size > n {
            return Err(Error::Argument(format!(
                "requested {size} edges but the graph has only {n}"
            )));
        }
        let mut rng = crate::rng::SeededRng::new(seed);
        let mut bits = vec![false; n];
        for i in rng.sample_indices(n, size) {
            bits[i] = true;
        }
        Ok(Self {
            bits,
            fingerprint: graph.fingerprint(),
        })
    }

    pub fn from_edge_indices(graph: &Graph, indices: &[usize]) -> Result<Self> {
        let mut bits = vec![false; graph.edge_count()];
        for &i in indices {
            if i >= bits.len() {
                return Err(Error::Argument(format!("edge index {i} out of range")));
            }
            bits[i] = true;
        }
        Ok(Self {
            bits,
            fingerprint: graph.fingerprint(),
        })
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn check_graph(&self, graph: &Graph) -> Result<()> {
        if self.fingerprint != graph.fingerprint() || self.bits.len() != graph.edge_count() {
            return Err(Error::Fingerprint(
                "mask was built for a different graph".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    #[inline]
    pub fn contains(&self, edge_index: usize) -> bool {
        self.bits[edge_index]
    }

    pub fn set(&mut self, edge_index: usize, value: bool) {
        self.bits[edge_index] = value;
    }

    /// Number of edges in the circuit.
    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn edge_indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.then_some(i))
            .collect()
    }

    pub fn union(&self, other: &CircuitMask) -> Result<CircuitMask> {
        self.check_same(other)?;
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| *a || *b)
            .collect();
        Ok(CircuitMask {
            bits,
            fingerprint: self.fingerprint,
        })
    }

    pub fn intersection(&self, other: &CircuitMask) -> Result<CircuitMask> {
        self.check_same(other)?;
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| *a && *b)
            .collect();
        Ok(CircuitMask {
            bits,
            fingerprint: self.fingerprint,
        })
    }

    pub fn is_subset_of(&self, other: &CircuitMask) -> Result<bool> {
        self.check_same(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .all(|(a, b)| !*a || *b))
    }

    /// Close the mask upstream: whenever a computing sender (head or MLP)
    /// has an outgoing circuit edge, pull all edges into the receiver that
    /// feeds it into the circuit as well. On such masks every circuit
    /// sender recomputes exactly its clean output, so live patching and
    /// cache interpolation coincide.
    pub fn upstream_closure(&self, graph: &Graph) -> Result<CircuitMask> {
        self.check_graph(graph)?;
        let mut mask = self.clone();
        loop {
            let mut changed = false;
            for (i, edge) in graph.edges().iter().enumerate() {
                if !mask.contains(i) {
                    continue;
                }
                let feeding = match edge.sender {
                    NodeId::AttnHead { layer, .. } => Some(NodeId::AttnInput { layer }),
                    NodeId::Mlp { layer } => Some(NodeId::Mlp { layer }),
                    _ => None,
                };
                if let Some(recv) = feeding {
                    let topo = graph
                        .receiver_topo_index(recv)
                        .expect("computing sender has a feeding receiver");
                    for &up in graph.incoming(topo) {
                        if !mask.contains(up) {
                            mask.set(up, true);
                            changed = true;
                        }
                    }
                }
            }
            if !changed {
                return Ok(mask);
            }
        }
    }

    fn check_same(&self, other: &CircuitMask) -> Result<()> {
        if self.fingerprint != other.fingerprint || self.bits.len() != other.bits.len() {
            return Err(Error::Fingerprint(
                "masks belong to different graphs".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Circuit file
// ---------------------------------------------------------------------------

/// Discovery metadata recorded alongside a circuit's edge list.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct CircuitMetadata {
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub metric: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest_digest: Option<String>,
}

/// On-disk circuit representation: a JSON object holding the model config
/// digest, the graph shape and fingerprint, the edge list in canonical
/// names and discovery metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CircuitFile {
    pub model_digest: String,
    pub layers: usize,
    pub heads_per_layer: usize,
    pub graph_fingerprint: String,
    pub edges: Vec<(String, String)>,
    pub metadata: CircuitMetadata,
}

impl CircuitFile {
    pub fn from_mask(
        graph: &Graph,
        mask: &CircuitMask,
        model_digest: String,
        metadata: CircuitMetadata,
    ) -> Result<Self> {
        mask.check_graph(graph)?;
        let edges = mask
            .edge_indices()
            .into_iter()
            .map(|i| {
                let e = &graph.edges()[i];
                (e.sender.canonical_name(), e.receiver.canonical_name())
            })
            .collect();
        Ok(Self {
            model_digest,
            layers: graph.layers(),
            heads_per_layer: graph.heads_per_layer(),
            graph_fingerprint: format!("{:016x}", graph.fingerprint()),
            edges,
            metadata,
        })
    }

    /// Rebuild the graph this circuit was mined on.
    pub fn rebuild_graph(&self) -> Result<Graph> {
        let graph = build_graph_lh(self.layers, self.heads_per_layer);
        let expect = format!("{:016x}", graph.fingerprint());
        if self.graph_fingerprint != expect {
            return Err(Error::Fingerprint(format!(
                "stored fingerprint {} does not match rebuilt graph {}",
                self.graph_fingerprint, expect
            )));
        }
        Ok(graph)
    }

    /// Reconstruct the mask on `graph`, validating the fingerprint.
    pub fn to_mask(&self, graph: &Graph) -> Result<CircuitMask> {
        let expect = format!("{:016x}", graph.fingerprint());
        if self.graph_fingerprint != expect {
            return Err(Error::Fingerprint(format!(
                "circuit file fingerprint {} does not match graph {}",
                self.graph_fingerprint, expect
            )));
        }
        let mut mask = CircuitMask::empty(graph);
        for (s, r) in &self.edges {
            let sender = NodeId::parse(s)?;
            let receiver = NodeId::parse(r)?;
            let idx = graph.find_edge(sender, receiver).ok_or_else(|| {
                Error::Format(format!("edge {s} -> {r} does not exist in the graph"))
            })?;
            mask.set(idx, true);
        }
        Ok(mask)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

// ---------------------------------------------------------------------------
// FNV-1a, used for stable fingerprints and digests
// ---------------------------------------------------------------------------

/// 64-bit FNV-1a. Stable across runs and platforms, unlike `DefaultHasher`.
pub struct Fnv64(u64);

impl Fnv64 {
    pub fn new() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv64 {
    fn default() -> Self {
        Self::new()
    }
}

/// Hex FNV-1a digest of a byte string.
pub fn digest_bytes(bytes: &[u8]) -> String {
    let mut h = Fnv64::new();
    h.write(bytes);
    format!("{:016x}", h.finish())
}
