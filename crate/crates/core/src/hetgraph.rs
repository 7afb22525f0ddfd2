//! Bipartite heterogeneous graph: four node types, six relation types and
//! the windowed construction procedure.
//!
//! Nodes are addressed by [`NodeId`] (type + 0-based index within the type).
//! A global numbering is also provided for dumps: all `h` nodes, then `k`,
//! then `f`, then `b`.

use serde::Serialize;

use crate::corpus::Conversation;
use crate::linalg::Matrix;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum NodeType {
    /// Utterance.
    H,
    /// Knowledge item.
    K,
    /// Forward knowledge aggregation.
    F,
    /// Backward knowledge aggregation.
    B,
}

impl NodeType {
    pub const ALL: [NodeType; 4] = [NodeType::H, NodeType::K, NodeType::F, NodeType::B];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            NodeType::H => "h",
            NodeType::K => "k",
            NodeType::F => "f",
            NodeType::B => "b",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum RelationType {
    Kf,
    Kb,
    Uf,
    Ub,
    Fwd,
    Bwd,
}

impl RelationType {
    pub const ALL: [RelationType; 6] = [
        RelationType::Kf,
        RelationType::Kb,
        RelationType::Uf,
        RelationType::Ub,
        RelationType::Fwd,
        RelationType::Bwd,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn source(self) -> NodeType {
        match self {
            RelationType::Kf | RelationType::Kb => NodeType::K,
            RelationType::Uf | RelationType::Ub => NodeType::H,
            RelationType::Fwd => NodeType::F,
            RelationType::Bwd => NodeType::B,
        }
    }

    pub fn target(self) -> NodeType {
        match self {
            RelationType::Kf | RelationType::Uf => NodeType::F,
            RelationType::Kb | RelationType::Ub => NodeType::B,
            RelationType::Fwd | RelationType::Bwd => NodeType::H,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RelationType::Kf => "kf",
            RelationType::Kb => "kb",
            RelationType::Uf => "uf",
            RelationType::Ub => "ub",
            RelationType::Fwd => "fwd",
            RelationType::Bwd => "bwd",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct NodeId {
    pub kind: NodeType,
    pub index: usize,
}

impl NodeId {
    pub fn new(kind: NodeType, index: usize) -> Self {
        Self { kind, index }
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}[{}]", self.kind.name(), self.index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Edge {
    pub src: NodeId,
    pub dst: NodeId,
    pub relation: RelationType,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
pub struct NodeDims {
    pub d_h: usize,
    pub d_k: usize,
    pub d_f: usize,
    pub d_b: usize,
}

impl NodeDims {
    pub fn get(&self, t: NodeType) -> usize {
        match t {
            NodeType::H => self.d_h,
            NodeType::K => self.d_k,
            NodeType::F => self.d_f,
            NodeType::B => self.d_b,
        }
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.d_h, self.d_k, self.d_f, self.d_b]
    }
}

/// One feature matrix per node type, indexed by [`NodeType::index`].
pub type NodeFeatures = [Matrix; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct TypedNodeStore {
    pub dims: NodeDims,
    pub features: NodeFeatures,
}

impl TypedNodeStore {
    pub fn count(&self, t: NodeType) -> usize {
        self.features[t.index()].rows
    }
}

/// Which aggregation pathways are materialized. Anything but `Full` is an
/// ablation: the affected nodes stay in the store but lose their edges.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// No `kf`, `uf` or `fwd` edges.
    NoForward,
    /// No `kb`, `ub` or `bwd` edges.
    NoBackward,
    /// No knowledge infusion at all: every node is isolated.
    NoKnowledge,
}

impl Variant {
    fn keeps(self, r: RelationType) -> bool {
        use RelationType::*;
        match self {
            Variant::Full => true,
            Variant::NoForward => !matches!(r, Kf | Uf | Fwd),
            Variant::NoBackward => !matches!(r, Kb | Ub | Bwd),
            Variant::NoKnowledge => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub forward_window: usize,
    pub backward_window: usize,
    pub variant: Variant,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            forward_window: 5,
            backward_window: 5,
            variant: Variant::Full,
        }
    }
}

impl GraphConfig {
    pub fn windows(forward_window: usize, backward_window: usize) -> Self {
        Self {
            forward_window,
            backward_window,
            variant: Variant::Full,
        }
    }

    /// The past-context-only setting (`W_f = 0`, `W_b = 10`).
    pub fn past_only() -> Self {
        Self::windows(0, 10)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KnowledgeMeta {
    /// 1-based source utterance.
    pub utterance: usize,
    pub aspect: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BHGraph {
    pub nodes: TypedNodeStore,
    /// Edges in construction order.
    pub edges: Vec<Edge>,
    pub config: GraphConfig,
    pub knowledge: Vec<KnowledgeMeta>,
    /// Per node type, per node: incoming edge indices ordered by relation,
    /// then insertion.
    incoming: [Vec<Vec<usize>>; 4],
}

/// Build the graph of one conversation.
///
/// `d_k` is needed because a conversation may carry no knowledge at all.
/// `f_init`/`b_init` are copied into every aggregation node.
pub fn build_bhg(
    conversation: &Conversation,
    d_k: usize,
    config: &GraphConfig,
    f_init: &[f64],
    b_init: &[f64],
) -> Result<BHGraph> {
    let n = conversation.len();
    let d_h = conversation.utterances.first().map_or(0, |u| u.feature.len());
    let dims = NodeDims {
        d_h,
        d_k,
        d_f: f_init.len(),
        d_b: b_init.len(),
    };

    let mut h = Matrix::zeros(n, d_h);
    let mut k_rows = Vec::new();
    let mut knowledge = Vec::new();
    for (pos, u) in conversation.utterances.iter().enumerate() {
        if u.feature.len() != d_h {
            return Err(Error::dims(format!("utterance {} feature", u.index), d_h, u.feature.len()));
        }
        h.row_mut(pos).copy_from_slice(&u.feature);
        for item in &u.knowledge {
            if item.vector.len() != d_k {
                return Err(Error::dims(
                    format!("utterance {} knowledge", u.index),
                    d_k,
                    item.vector.len(),
                ));
            }
            k_rows.push(item.vector.clone());
            knowledge.push(KnowledgeMeta {
                utterance: pos + 1,
                aspect: item.aspect.clone(),
            });
        }
    }
    let k = Matrix::from_rows(d_k, &k_rows);
    let f = Matrix::from_rows(dims.d_f, &vec![f_init.to_vec(); n]);
    let b = Matrix::from_rows(dims.d_b, &vec![b_init.to_vec(); n]);

    let mut edges = Vec::new();
    let mut push = |relation: RelationType, src: usize, dst: usize| {
        if config.variant.keeps(relation) {
            edges.push(Edge {
                src: NodeId::new(relation.source(), src),
                dst: NodeId::new(relation.target(), dst),
                relation,
            });
        }
    };
    let mut k_next = 0;
    for (i, u) in conversation.utterances.iter().enumerate() {
        for _ in &u.knowledge {
            push(RelationType::Kf, k_next, i);
            push(RelationType::Kb, k_next, i);
            k_next += 1;
        }
        push(RelationType::Uf, i, i);
        push(RelationType::Ub, i, i);
        let mut c = 0;
        while c <= config.forward_window && i + c < n {
            push(RelationType::Fwd, i, i + c);
            c += 1;
        }
        // Clamped at the first utterance: there is no h_0.
        let mut c = 0;
        while c <= config.backward_window && c <= i {
            push(RelationType::Bwd, i, i - c);
            c += 1;
        }
    }

    let nodes = TypedNodeStore {
        dims,
        features: [h, k, f, b],
    };
    let mut incoming: [Vec<Vec<usize>>; 4] =
        std::array::from_fn(|t| vec![Vec::new(); nodes.features[t].rows]);
    for (e, edge) in edges.iter().enumerate() {
        incoming[edge.dst.kind.index()][edge.dst.index].push(e);
    }
    for per_type in &mut incoming {
        for list in per_type {
            list.sort_by_key(|&e| edges[e].relation);
        }
    }

    Ok(BHGraph {
        nodes,
        edges,
        config: *config,
        knowledge,
        incoming,
    })
}

/// Closed-form edge count of the construction procedure.
pub fn edge_count_oracle(n: usize, m: &[usize], forward_window: usize, backward_window: usize) -> usize {
    assert_eq!(m.len(), n, "one knowledge count per utterance");
    let knowledge: usize = m.iter().sum();
    let forward: usize = (1..=n).map(|i| forward_window.min(n - i) + 1).sum();
    let backward: usize = (1..=n).map(|i| backward_window.min(i - 1) + 1).sum();
    2 * knowledge + 2 * n + forward + backward
}

impl BHGraph {
    pub fn n_utterances(&self) -> usize {
        self.nodes.count(NodeType::H)
    }

    pub fn node_count(&self) -> usize {
        NodeType::ALL.iter().map(|&t| self.nodes.count(t)).sum()
    }

    pub fn contains(&self, node: NodeId) -> bool {
        node.index < self.nodes.count(node.kind)
    }

    /// Incoming edge indices of `node`, ordered by relation then insertion.
    pub fn incoming(&self, node: NodeId) -> &[usize] {
        &self.incoming[node.kind.index()][node.index]
    }

    pub fn neighbors_in(&self, node: NodeId) -> Result<Vec<(NodeId, RelationType)>> {
        if !self.contains(node) {
            return Err(Error::UnknownNode(node.to_string()));
        }
        Ok(self
            .incoming(node)
            .iter()
            .map(|&e| (self.edges[e].src, self.edges[e].relation))
            .collect())
    }

    pub fn edges_of(&self, relation: RelationType) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.relation == relation)
    }

    pub fn relation_counts(&self) -> [usize; 6] {
        let mut counts = [0; 6];
        for e in &self.edges {
            counts[e.relation.index()] += 1;
        }
        counts
    }

    pub fn global_id(&self, node: NodeId) -> usize {
        let offset: usize = NodeType::ALL[..node.kind.index()]
            .iter()
            .map(|&t| self.nodes.count(t))
            .sum();
        offset + node.index
    }

    /// Inverse of [`BHGraph::global_id`].
    pub fn resolve(&self, global: usize) -> Result<NodeId> {
        let mut rest = global;
        for t in NodeType::ALL {
            let count = self.nodes.count(t);
            if rest < count {
                return Ok(NodeId::new(t, rest));
            }
            rest -= count;
        }
        Err(Error::UnknownNode(format!("#{global}")))
    }

    /// 1-based utterance a node belongs to.
    pub fn utterance_of(&self, node: NodeId) -> usize {
        match node.kind {
            NodeType::K => self.knowledge[node.index].utterance,
            _ => node.index + 1,
        }
    }

    pub fn dump(&self) -> GraphDump {
        let mut nodes = Vec::with_capacity(self.node_count());
        for t in NodeType::ALL {
            for index in 0..self.nodes.count(t) {
                let id = NodeId::new(t, index);
                nodes.push(DumpNode {
                    id: self.global_id(id),
                    kind: t.name(),
                    utterance: self.utterance_of(id),
                    aspect: (t == NodeType::K).then(|| self.knowledge[index].aspect.clone()),
                });
            }
        }
        let edges = self
            .edges
            .iter()
            .map(|e| DumpEdge {
                src: self.global_id(e.src),
                dst: self.global_id(e.dst),
                relation: e.relation.name(),
            })
            .collect();
        GraphDump { nodes, edges }
    }
}

#[derive(Debug, Serialize)]
pub struct GraphDump {
    pub nodes: Vec<DumpNode>,
    pub edges: Vec<DumpEdge>,
}

#[derive(Debug, Serialize)]
pub struct DumpNode {
    pub id: usize,
    #[serde(rename = "type")]
    pub kind: &'static str,
    pub utterance: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aspect: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct DumpEdge {
    pub src: usize,
    pub dst: usize,
    pub relation: &'static str,
}
